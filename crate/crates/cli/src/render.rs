//! Inspection overlays.

use image::{Rgba, RgbaImage};
use regionedit::{AttentionMap, ImageBuffer};

/// Pixel rectangle `(y0, x0, y1, x1)`, inclusive.
pub type PixelRect = (usize, usize, usize, usize);

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn palette(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

pub fn to_rgba(image: &ImageBuffer) -> RgbaImage {
    let rgb = image.to_rgb8();
    RgbaImage::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let i = (y as usize * image.width() + x as usize) * 3;
        Rgba([rgb[i], rgb[i + 1], rgb[i + 2], 255])
    })
}

/// Simple dark-to-bright ramp.
fn heat(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (3.0 * t).min(1.0);
    let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
    [r, g, b].map(|v| (v * 255.0).round() as u8)
}

/// Attention map normalized to `[0, 1]`, blown up to image size and blended
/// over the image.
pub fn heatmap(image: &ImageBuffer, attn: &AttentionMap, stride: usize) -> RgbaImage {
    let lo = attn.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = attn.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = to_rgba(image);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let r = (y as usize / stride).min(attn.height() - 1);
        let c = (x as usize / stride).min(attn.width() - 1);
        let h = heat((attn.get(r, c) - lo) / span);
        for ch in 0..3 {
            px.0[ch] = ((u16::from(px.0[ch]) + 2 * u16::from(h[ch])) / 3) as u8;
        }
    }
    out
}

pub fn draw_rect(img: &mut RgbaImage, rect: PixelRect, color: [u8; 3]) {
    let (y0, x0, y1, x1) = rect;
    let px = Rgba([color[0], color[1], color[2], 255]);
    for x in x0..=x1 {
        img.put_pixel(x as u32, y0 as u32, px);
        img.put_pixel(x as u32, y1 as u32, px);
    }
    for y in y0..=y1 {
        img.put_pixel(x0 as u32, y as u32, px);
        img.put_pixel(x1 as u32, y as u32, px);
    }
}

/// Tints the inside of `rect` toward `color`.
pub fn fill_rect(img: &mut RgbaImage, rect: PixelRect, color: [u8; 3]) {
    let (y0, x0, y1, x1) = rect;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = img.get_pixel_mut(x as u32, y as u32);
            for ch in 0..3 {
                p.0[ch] = ((u16::from(p.0[ch]) + u16::from(color[ch])) / 2) as u8;
            }
        }
    }
    draw_rect(img, rect, color);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_outline_hits_corners_only_on_border() {
        let mut img = RgbaImage::new(8, 8);
        draw_rect(&mut img, (1, 2, 5, 6), [255, 0, 0]);
        assert_eq!(img.get_pixel(2, 1).0, [255, 0, 0, 255]);
        assert_eq!(img.get_pixel(6, 5).0, [255, 0, 0, 255]);
        assert_eq!(img.get_pixel(4, 3).0, [0, 0, 0, 0]);
        assert_eq!(img.get_pixel(7, 7).0, [0, 0, 0, 0]);
    }

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(heat(0.0), [0, 0, 0]);
        assert_eq!(heat(1.0), [255, 255, 255]);
    }
}
