//! Deterministic stand-ins for the pretrained backends.
//!
//! The mocks are built so that every quantity the losses consume can be
//! computed by hand:
//!
//! * features are a fixed random projection of per-patch colour statistics and
//!   attention is the mean patch intensity;
//! * image embeddings are the normalized mean RGB placed in the first three
//!   coordinates of the joint space, and the colour lexicon maps `red`,
//!   `green` and `blue` onto those same (mutually orthogonal) axes;
//! * patch tokens are `[mean r, mean g, mean b, bias]` per patch;
//! * the editor paints masked pixels with the prompt's lexicon colour plus a
//!   small seeded texture and leaves everything else untouched.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BackendId, CapabilityDescriptor, EditorBackend, EditorKind, FeatureBackend, ScorerBackend,
    TokenGrid,
};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::grid::{AttentionMap, FeatureMap};
use crate::image::{ImageBuffer, RegionMask};
use crate::seed::{derive_seed, hash_str, tag};

pub const PATCH_STRIDE: usize = 16;
pub const FEATURE_DIM: usize = 64;
pub const EMBED_DIM: usize = 16;
/// Constant fourth component of every patch token.
pub const TOKEN_BIAS: f64 = 8.0;
pub const FILL_INTENSITY: f32 = 0.9;
pub const TEXTURE_AMPLITUDE: f32 = 0.03;

const PATCH_STATS: usize = 6;

/// Shared configuration behind all mock backends.
#[derive(Debug, Clone)]
pub struct MockWorld {
    seed: u64,
    lexicon: BTreeMap<String, [f32; 3]>,
    projection: Vec<f32>,
}

impl MockWorld {
    pub fn new(seed: u64) -> Self {
        let lexicon = [
            ("red", [1.0, 0.0, 0.0]),
            ("green", [0.0, 1.0, 0.0]),
            ("blue", [0.0, 0.0, 1.0]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag::INIT]));
        let projection = (0..FEATURE_DIM * PATCH_STATS)
            .map(|_| rng.gen_range(-2.0f32..2.0))
            .collect();
        Self {
            seed,
            lexicon,
            projection,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lexicon(&self) -> &BTreeMap<String, [f32; 3]> {
        &self.lexicon
    }

    pub fn lexicon_color(&self, word: &str) -> Option<[f32; 3]> {
        self.lexicon.get(word).copied()
    }

    /// Lexicon colours named in `text`, summed and normalized.
    fn text_color(&self, text: &str) -> Option<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut hit = false;
        for word in words(text) {
            if let Some(c) = self.lexicon.get(&word) {
                hit = true;
                for i in 0..3 {
                    acc[i] += f64::from(c[i]);
                }
            }
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        (hit && n > 0.0).then(|| acc.map(|v| v / n))
    }

    /// Fill direction the editor uses for a prompt: lexicon colour, or a
    /// hashed positive RGB direction for prompts without colour words.
    pub fn prompt_color(&self, prompt: &str) -> [f32; 3] {
        if let Some(c) = self.text_color(prompt) {
            return c.map(|v| v as f32);
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[hash_str(&normalize(prompt))]));
        let raw: [f64; 3] = [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)];
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.map(|v| (v / n) as f32)
    }

    pub fn features(self: &Arc<Self>) -> MockFeatures {
        MockFeatures {
            world: Arc::clone(self),
        }
    }

    pub fn scorer(self: &Arc<Self>) -> MockScorer {
        MockScorer {
            world: Arc::clone(self),
        }
    }

    pub fn editor(self: &Arc<Self>) -> MockEditor {
        MockEditor {
            world: Arc::clone(self),
            calls: AtomicUsize::new(0),
            failures: FailurePlan::Never,
        }
    }

    fn descriptor(&self) -> CapabilityDescriptor {
        CapabilityDescriptor {
            patch_stride: PATCH_STRIDE,
            feature_dim: FEATURE_DIM,
            embed_dim: EMBED_DIM,
            serial_only: false,
        }
    }

    fn id(&self, role: &str) -> BackendId {
        BackendId {
            role: role.to_string(),
            model: format!("mock-{role}"),
            checksum: format!("mock-world-seed:{}", self.seed),
        }
    }
}

impl Default for MockWorld {
    fn default() -> Self {
        Self::new(0)
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn normalize(text: &str) -> String {
    words(text).collect::<Vec<_>>().join(" ")
}

/// Per-patch `[r, g, b, intensity, intensity std]` means over a patch grid
/// with partial edge patches.
fn patch_stats(image: &ImageBuffer, stride: usize) -> (usize, usize, Vec<[f64; 5]>) {
    let gh = image.height().div_ceil(stride);
    let gw = image.width().div_ceil(stride);
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let (y0, y1) = (gy * stride, ((gy + 1) * stride).min(image.height()));
            let (x0, x1) = (gx * stride, ((gx + 1) * stride).min(image.width()));
            let mut acc = [0.0f64; 3];
            let mut sq = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = image.pixel(y, x);
                    let mut i = 0.0;
                    for c in 0..3 {
                        acc[c] += f64::from(px[c]);
                        i += f64::from(px[c]);
                    }
                    i /= 3.0;
                    sq += i * i;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mean = acc.map(|v| v / n);
            let intensity = (mean[0] + mean[1] + mean[2]) / 3.0;
            let var = (sq / n - intensity * intensity).max(0.0);
            out.push([mean[0], mean[1], mean[2], intensity, var.sqrt()]);
        }
    }
    (gh, gw, out)
}

pub struct MockFeatures {
    world: Arc<MockWorld>,
}

impl FeatureBackend for MockFeatures {
    fn descriptor(&self) -> CapabilityDescriptor {
        self.world.descriptor()
    }

    fn id(&self) -> BackendId {
        self.world.id("features")
    }

    fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height < PATCH_STRIDE
            || width < PATCH_STRIDE
            || height % PATCH_STRIDE != 0
            || width % PATCH_STRIDE != 0
        {
            return Err(Error::UnsupportedSize {
                height,
                width,
                required: format!("height and width must be positive multiples of {PATCH_STRIDE}"),
            });
        }
        Ok((height / PATCH_STRIDE, width / PATCH_STRIDE))
    }

    fn extract(&self, image: &ImageBuffer) -> Result<(FeatureMap, AttentionMap)> {
        let (h, w) = self.grid_for(image.height(), image.width())?;
        let (_, _, stats) = patch_stats(image, PATCH_STRIDE);
        let cells = h * w;
        let mut features = vec![0.0f32; FEATURE_DIM * cells];
        for (cell, s) in stats.iter().enumerate() {
            let input = [s[0], s[1], s[2], s[3], s[4], 1.0];
            for k in 0..FEATURE_DIM {
                let row = &self.world.projection[k * PATCH_STATS..(k + 1) * PATCH_STATS];
                let z: f64 = row.iter().zip(&input).map(|(p, x)| f64::from(*p) * x).sum();
                features[k * cells + cell] = z.tanh() as f32;
            }
        }
        let attention = stats.iter().map(|s| s[3] as f32).collect();
        Ok((
            FeatureMap::new(FEATURE_DIM, h, w, features)?,
            AttentionMap::new(h, w, attention)?,
        ))
    }
}

pub struct MockScorer {
    world: Arc<MockWorld>,
}

impl MockScorer {
    fn lift(rgb: [f64; 3]) -> Vec<f64> {
        let mut v = vec![0.0; EMBED_DIM];
        v[..3].copy_from_slice(&rgb);
        v
    }
}

impl ScorerBackend for MockScorer {
    fn descriptor(&self) -> CapabilityDescriptor {
        self.world.descriptor()
    }

    fn id(&self) -> BackendId {
        self.world.id("scorer")
    }

    fn embed_image(&self, image: &ImageBuffer) -> Result<EmbeddingVector> {
        let mean = image.mean_rgb();
        let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir = if n > 0.0 { mean.map(|v| v / n) } else { [0.0; 3] };
        EmbeddingVector::new(Self::lift(dir))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        if let Some(c) = self.world.text_color(text) {
            return EmbeddingVector::new(Self::lift(c));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.world.seed,
            &[tag::SAMPLE, hash_str(&normalize(text))],
        ));
        let raw: Vec<f64> = (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        EmbeddingVector::new(raw.into_iter().map(|v| v / n).collect())
    }

    fn patch_tokens(&self, image: &ImageBuffer) -> Result<TokenGrid> {
        let (gh, gw, stats) = patch_stats(image, PATCH_STRIDE);
        let data = stats
            .iter()
            .flat_map(|s| [s[0], s[1], s[2], TOKEN_BIAS])
            .collect();
        TokenGrid::new(gh * gw, 4, data)
    }
}

/// Scripted editor failures for exercising retry paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePlan {
    Never,
    /// The first `n` calls fail with a retryable error.
    FirstN(usize),
    /// Every call whose 0-based index is a multiple of `n` fails, retryable.
    EveryNth(usize),
    Always { retryable: bool },
}

pub struct MockEditor {
    world: Arc<MockWorld>,
    calls: AtomicUsize,
    failures: FailurePlan,
}

impl MockEditor {
    pub fn with_failures(mut self, plan: FailurePlan) -> Self {
        self.failures = plan;
        self
    }

    /// Number of `edit` calls so far, failed ones included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl EditorBackend for MockEditor {
    fn kind(&self) -> EditorKind {
        EditorKind::Mock
    }

    fn id(&self) -> BackendId {
        self.world.id("editor")
    }

    fn edit(
        &self,
        image: &ImageBuffer,
        mask: &RegionMask,
        prompt: &str,
        seed: u64,
    ) -> Result<ImageBuffer> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let fail = match self.failures {
            FailurePlan::Never => None,
            FailurePlan::FirstN(n) => (call < n).then_some(true),
            FailurePlan::EveryNth(n) => (n > 0 && call % n == 0).then_some(true),
            FailurePlan::Always { retryable } => Some(retryable),
        };
        if let Some(retryable) = fail {
            return Err(Error::backend(
                format!("scripted mock editor failure on call {call}"),
                retryable,
            ));
        }
        if mask.count() == 0 {
            return Err(Error::EmptyMask);
        }
        let color = self.world.prompt_color(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.world.seed, &[tag::EDIT, seed]));
        image.with_masked(mask, |_, _| {
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let noise = TEXTURE_AMPLITUDE * rng.gen_range(-1.0f32..1.0);
                px[c] = color[c] * FILL_INTENSITY + noise;
            }
            px
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{edit_image, extract_features, patch_tokens};
    use crate::embedding::cosine_distance;
    use crate::grid::{Anchor, BoxProposal, GridRect};
    use crate::image::rasterize_mask;
    use proptest::prelude::*;

    fn world() -> Arc<MockWorld> {
        Arc::new(MockWorld::new(11))
    }

    fn full_mask(h: usize, w: usize) -> RegionMask {
        RegionMask::from_pixel_rect(h, w, (0, 0, h - 1, w - 1)).unwrap()
    }

    #[test]
    fn descriptor_shapes() {
        let w = world();
        let img = ImageBuffer::filled(224, 224, [0.3, 0.4, 0.5]).unwrap();
        let (f, a) = extract_features(&w.features(), &img).unwrap();
        assert_eq!((f.channels(), f.height(), f.width()), (64, 14, 14));
        assert_eq!(a.grid(), (14, 14));
        let again = extract_features(&w.features(), &img).unwrap();
        assert_eq!(again.0.data(), f.data());
        assert_eq!(again.1.data(), a.data());
    }

    #[test]
    fn unsupported_size_rejected() {
        let img = ImageBuffer::filled(100, 224, [0.3; 3]).unwrap();
        match extract_features(&world().features(), &img) {
            Err(Error::UnsupportedSize { required, .. }) => assert!(required.contains("16")),
            other => panic!("expected size error, got {other:?}"),
        }
    }

    #[test]
    fn attention_peaks_on_bright_square() {
        let img = ImageBuffer::from_fn(224, 224, |y, x| {
            if (48..80).contains(&y) && (160..192).contains(&x) {
                [1.0; 3]
            } else {
                [0.1; 3]
            }
        })
        .unwrap();
        let (_, attn) = extract_features(&world().features(), &img).unwrap();
        // Brute-force pooling oracle.
        let mut best = (0, 0, f64::MIN);
        for gy in 0..14 {
            for gx in 0..14 {
                let mut s = 0.0;
                for y in gy * 16..gy * 16 + 16 {
                    for x in gx * 16..gx * 16 + 16 {
                        s += img.pixel(y, x).iter().map(|v| f64::from(*v)).sum::<f64>();
                    }
                }
                let mean = s / (16.0 * 16.0 * 3.0);
                assert!((mean - f64::from(attn.get(gy, gx))).abs() < 1e-6);
                if mean > best.2 {
                    best = (gy, gx, mean);
                }
            }
        }
        assert!((3..5).contains(&best.0) && (10..12).contains(&best.1));
    }

    #[test]
    fn image_embedding_follows_lexicon() {
        let w = world();
        let s = w.scorer();
        let red = ImageBuffer::filled(32, 32, [1.0, 0.0, 0.0]).unwrap();
        let e = s.embed_image(&red).unwrap();
        assert!(cosine_distance(&e, &s.embed_text("red").unwrap()).unwrap().abs() < 1e-12);
        assert_eq!(e, s.embed_image(&red).unwrap());
        let black = ImageBuffer::filled(32, 32, [0.0; 3]).unwrap();
        assert!(s.embed_image(&black).unwrap().is_degenerate());
    }

    #[test]
    fn text_embeddings() {
        let s = world().scorer();
        let red = s.embed_text("red").unwrap();
        assert_eq!(&red.data()[..3], &[1.0, 0.0, 0.0]);
        let green = s.embed_text("green").unwrap();
        assert!((cosine_distance(&red, &green).unwrap() - 1.0).abs() < 1e-12);
        let u1 = s.embed_text("a photo").unwrap();
        let u2 = s.embed_text("a photo").unwrap();
        assert_eq!(u1, u2);
        assert!((u1.norm() - 1.0).abs() < 1e-12);
        assert_ne!(u1, s.embed_text("a tree").unwrap());
        assert!(matches!(crate::backends::embed_text(&s, "  "), Err(Error::EmptyText)));
    }

    #[test]
    fn tokens_per_patch() {
        let s = world().scorer();
        let img = ImageBuffer::filled(224, 224, [0.2, 0.5, 0.7]).unwrap();
        let t = patch_tokens(&s, &img).unwrap();
        assert_eq!(t.n_tokens, 196);
        let first = t.token(0).to_vec();
        assert!((0..196).all(|i| t.token(i) == first.as_slice()));
        assert_eq!(t, patch_tokens(&s, &img).unwrap());
    }

    #[test]
    fn red_fill_direction() {
        let w = world();
        let s = w.scorer();
        let img = ImageBuffer::filled(64, 64, [0.5; 3]).unwrap();
        let b = BoxProposal::with_rect(Anchor::new(1, 1, 0.0), 1, GridRect::new(1, 1, 2, 2), (4, 4))
            .unwrap();
        let mask = rasterize_mask(&b, 16, 64, 64).unwrap();
        let out = edit_image(&w.editor(), &img, &mask, "red", 3).unwrap();
        let mut acc = [0.0f64; 3];
        for y in 16..48 {
            for x in 16..48 {
                for c in 0..3 {
                    acc[c] += f64::from(out.pixel(y, x)[c]);
                }
            }
        }
        let region = EmbeddingVector::new(acc.to_vec()).unwrap();
        let red = EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(cosine_distance(&region, &red).unwrap() < 0.05);
        assert_eq!(out, edit_image(&w.editor(), &img, &mask, "red", 3).unwrap());
        assert_ne!(out, edit_image(&w.editor(), &img, &mask, "red", 4).unwrap());
        let _ = s;
    }

    #[test]
    fn scripted_failures() {
        let w = world();
        let img = ImageBuffer::filled(16, 16, [0.5; 3]).unwrap();
        let ed = w.editor().with_failures(FailurePlan::FirstN(1));
        let m = full_mask(16, 16);
        assert!(ed.edit(&img, &m, "red", 0).unwrap_err().is_retryable());
        assert!(ed.edit(&img, &m, "red", 0).is_ok());
        assert_eq!(ed.calls(), 2);
        let ed = w.editor().with_failures(FailurePlan::Always { retryable: false });
        assert!(!ed.edit(&img, &m, "red", 0).unwrap_err().is_retryable());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn locality(
            seed in any::<u64>(), y0 in 0usize..48, x0 in 0usize..48, hh in 1usize..16, ww in 1usize..16,
            base in prop::array::uniform3(0.0f32..1.0), prompt in "(red|green|blue|a tree|sky)",
        ) {
            let w = world();
            let img = ImageBuffer::from_fn(48, 48, |y, x| [base[0], (y as f32) / 48.0, (x as f32) / 48.0 * base[2]]).unwrap();
            let (y1, x1) = ((y0 + hh).min(47), (x0 + ww).min(47));
            let (y0, x0) = (y0.min(y1), x0.min(x1));
            let mask = RegionMask::from_pixel_rect(48, 48, (y0, x0, y1, x1)).unwrap();
            let out = edit_image(&w.editor(), &img, &mask, &prompt, seed).unwrap();
            for y in 0..48 {
                for x in 0..48 {
                    if !mask.get(y, x) {
                        let (a, b) = (img.pixel(y, x), out.pixel(y, x));
                        for c in 0..3 {
                            prop_assert_eq!(a[c].to_bits(), b[c].to_bits());
                        }
                    }
                }
            }
            prop_assert_eq!(out, edit_image(&w.editor(), &img, &mask, &prompt, seed).unwrap());
        }
    }
}
