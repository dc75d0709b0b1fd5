//! Content-addressed cache for feature extraction and edits.
//!
//! Layout: `<root>/<first two hex digits>/<sha256 key>/` holding
//! `payload.bin` and `index.json`. The index records the payload digest; an
//! entry whose payload no longer matches it is evicted on read.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use regionedit::backends::{BackendId, CapabilityDescriptor, EditorBackend, EditorKind, FeatureBackend};
use regionedit::{AttentionMap, FeatureMap, ImageBuffer, RegionMask};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub key: String,
    pub kind: String,
    pub sha256: String,
    pub size: u64,
    pub created: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: u64,
    pub evicted: usize,
}

#[derive(Debug)]
pub struct Cache {
    root: PathBuf,
}

/// SHA-256 over length-prefixed parts, as lowercase hex.
pub fn cache_key(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Cache {
    pub fn open(root: impl Into<PathBuf>) -> CliResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_dir(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(key)
    }

    /// Payload for `key`, or `None` on a miss. Corrupt entries are removed.
    pub fn get(&self, key: &str) -> Option<Vec<u8>> {
        let dir = self.entry_dir(key);
        let index = fs::read(dir.join("index.json")).ok();
        let payload = fs::read(dir.join("payload.bin")).ok();
        match (index, payload) {
            (None, None) => None,
            (Some(index), Some(payload)) if Self::valid(key, &index, &payload) => Some(payload),
            _ => {
                let _ = fs::remove_dir_all(&dir);
                None
            }
        }
    }

    fn valid(key: &str, index: &[u8], payload: &[u8]) -> bool {
        serde_json::from_slice::<IndexEntry>(index).is_ok_and(|e| {
            e.key == key && e.size == payload.len() as u64 && e.sha256 == digest(payload)
        })
    }

    pub fn put(&self, key: &str, kind: &str, payload: &[u8]) -> CliResult<()> {
        let dir = self.entry_dir(key);
        let tmp = self.root.join(format!(".tmp-{key}-{}", std::process::id()));
        let write = || -> std::io::Result<()> {
            fs::create_dir_all(&tmp)?;
            fs::write(tmp.join("payload.bin"), payload)?;
            let entry = IndexEntry {
                key: key.to_string(),
                kind: kind.to_string(),
                sha256: digest(payload),
                size: payload.len() as u64,
                created: chrono::Utc::now().to_rfc3339(),
            };
            fs::write(tmp.join("index.json"), serde_json::to_vec_pretty(&entry)?)?;
            fs::create_dir_all(dir.parent().expect("entry has a prefix dir"))?;
            let _ = fs::remove_dir_all(&dir);
            fs::rename(&tmp, &dir)
        };
        write().map_err(|e| {
            let _ = fs::remove_dir_all(&tmp);
            CliError::io(&dir, e)
        })
    }

    fn entries(&self) -> Vec<(String, PathBuf)> {
        let mut out = Vec::new();
        let Ok(prefixes) = fs::read_dir(&self.root) else { return out };
        for prefix in prefixes.flatten().filter(|e| e.path().is_dir()) {
            let name = prefix.file_name().to_string_lossy().into_owned();
            if name.len() != 2 {
                continue;
            }
            for entry in fs::read_dir(prefix.path()).into_iter().flatten().flatten() {
                out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
            }
        }
        out.sort();
        out
    }

    /// Reads every entry, evicting the corrupt ones.
    pub fn verify(&self) -> CacheStats {
        let mut stats = CacheStats::default();
        for (key, _) in self.entries() {
            match self.get(&key) {
                Some(p) => {
                    stats.entries += 1;
                    stats.bytes += p.len() as u64;
                }
                None => stats.evicted += 1,
            }
        }
        stats
    }

    pub fn clear(&self) -> CliResult<usize> {
        let n = self.entries().len();
        for entry in fs::read_dir(&self.root).map_err(|e| CliError::io(&self.root, e))?.flatten() {
            let path = entry.path();
            let res = if path.is_dir() { fs::remove_dir_all(&path) } else { fs::remove_file(&path) };
            res.map_err(|e| CliError::io(&path, e))?;
        }
        Ok(n)
    }
}

fn id_bytes(id: &BackendId) -> Vec<u8> {
    serde_json::to_vec(id).expect("ids serialize")
}

/// Editor wrapper that serves repeated edits from the cache.
pub struct CachedEditor<'a> {
    inner: &'a dyn EditorBackend,
    cache: &'a Cache,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<'a> CachedEditor<'a> {
    pub fn new(inner: &'a dyn EditorBackend, cache: &'a Cache) -> Self {
        Self { inner, cache, hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn key(&self, image: &ImageBuffer, mask: &RegionMask, prompt: &str, seed: u64) -> String {
        let dims = [mask.height() as u64, mask.width() as u64].map(u64::to_le_bytes).concat();
        cache_key(&[
            b"edit/1",
            &id_bytes(&self.inner.id()),
            &image.to_le_bytes(),
            &dims,
            mask.data(),
            prompt.as_bytes(),
            &seed.to_le_bytes(),
        ])
    }
}

impl EditorBackend for CachedEditor<'_> {
    fn kind(&self) -> EditorKind {
        self.inner.kind()
    }

    fn id(&self) -> BackendId {
        self.inner.id()
    }

    fn serial_only(&self) -> bool {
        self.inner.serial_only()
    }

    fn edit(&self, image: &ImageBuffer, mask: &RegionMask, prompt: &str, seed: u64) -> regionedit::Result<ImageBuffer> {
        let key = self.key(image, mask, prompt, seed);
        if let Some(hit) = self.cache.get(&key).and_then(|b| ImageBuffer::from_le_bytes(&b).ok()) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let edited = self.inner.edit(image, mask, prompt, seed)?;
        // A failed write only costs a recomputation later.
        let _ = self.cache.put(&key, "edit", &edited.to_le_bytes());
        Ok(edited)
    }
}

/// Feature-extractor wrapper keyed by image content.
pub struct CachedFeatures<'a> {
    inner: &'a dyn FeatureBackend,
    cache: &'a Cache,
}

impl<'a> CachedFeatures<'a> {
    pub fn new(inner: &'a dyn FeatureBackend, cache: &'a Cache) -> Self {
        Self { inner, cache }
    }
}

fn encode_features(f: &FeatureMap, a: &AttentionMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + (f.data().len() + a.data().len()) * 4);
    for d in [f.channels(), f.height(), f.width()] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in f.data().iter().chain(a.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_features(bytes: &[u8]) -> Option<(FeatureMap, AttentionMap)> {
    let dim = |i: usize| -> Option<usize> {
        Some(u64::from_le_bytes(bytes.get(i * 8..i * 8 + 8)?.try_into().ok()?) as usize)
    };
    let (c, h, w) = (dim(0)?, dim(1)?, dim(2)?);
    let values: Vec<f32> = bytes
        .get(24..)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect();
    if values.len() != (c + 1) * h * w {
        return None;
    }
    let (feat, attn) = values.split_at(c * h * w);
    Some((FeatureMap::new(c, h, w, feat.to_vec()).ok()?, AttentionMap::new(h, w, attn.to_vec()).ok()?))
}

impl FeatureBackend for CachedFeatures<'_> {
    fn descriptor(&self) -> CapabilityDescriptor {
        self.inner.descriptor()
    }

    fn id(&self) -> BackendId {
        self.inner.id()
    }

    fn grid_for(&self, height: usize, width: usize) -> regionedit::Result<(usize, usize)> {
        self.inner.grid_for(height, width)
    }

    fn extract(&self, image: &ImageBuffer) -> regionedit::Result<(FeatureMap, AttentionMap)> {
        let key = cache_key(&[b"features/1", &id_bytes(&self.inner.id()), &image.to_le_bytes()]);
        if let Some(hit) = self.cache.get(&key).as_deref().and_then(decode_features) {
            return Ok(hit);
        }
        let (f, a) = self.inner.extract(image)?;
        let _ = self.cache.put(&key, "features", &encode_features(&f, &a));
        Ok((f, a))
    }
}
