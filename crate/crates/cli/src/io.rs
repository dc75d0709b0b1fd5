use std::path::Path;

use image::{ImageFormat, RgbImage, RgbaImage};
use regionedit::ImageBuffer;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Rows and columns removed from each side to fit the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Reads a PNG or JPEG and centre-crops it to a multiple of `stride`.
pub fn read_image(path: &Path, stride: usize) -> CliResult<(ImageBuffer, Crop)> {
    let img = image::open(path).map_err(|e| CliError::io(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (ch, cw) = (h / stride * stride, w / stride * stride);
    if ch == 0 || cw == 0 {
        return Err(CliError::input(format!(
            "{}: {h}x{w} is smaller than one {stride}-pixel patch",
            path.display()
        )));
    }
    let crop = Crop { top: (h - ch) / 2, left: (w - cw) / 2, height: ch, width: cw };
    let mut bytes = Vec::with_capacity(ch * cw * 3);
    for y in crop.top..crop.top + ch {
        let row = &img.as_raw()[(y * w + crop.left) * 3..(y * w + crop.left + cw) * 3];
        bytes.extend_from_slice(row);
    }
    Ok((ImageBuffer::from_rgb8(ch, cw, &bytes)?, crop))
}

pub fn write_png(path: &Path, image: &ImageBuffer) -> CliResult<()> {
    let rgb = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer length matches dimensions");
    rgb.save_with_format(path, ImageFormat::Png).map_err(|e| CliError::io(path, e))
}

pub fn write_rgba_png(path: &Path, image: &RgbaImage) -> CliResult<()> {
    image.save_with_format(path, ImageFormat::Png).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("values serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
