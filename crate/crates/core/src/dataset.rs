//! Paired corpora: generation from source images and a filter bank, the
//! on-disk manifest, split loading and training-time preprocessing.
//!
//! Layout: `<root>/<split>/<source_id>/original.png` and
//! `<root>/<split>/<source_id>/<filter_name>.png`, manifest at `<root>/manifest`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter_bank::{apply_filter, FilterSpec};
use crate::image::Image;
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MIN_TRAIN_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::validation("split", format!("expected train|test, got '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the corpus root, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub source_id: usize,
    pub split: Split,
    pub original: FileEntry,
    /// Indexed by filter id.
    pub filtered: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    /// Directory holding the manifest; filled in on load, never serialized so
    /// that manifests are independent of where the corpus lives.
    #[serde(skip)]
    pub root: PathBuf,
    pub seed: u64,
    pub bank_seed: u64,
    pub image_size: usize,
    pub train_fraction: f64,
    pub filters: Vec<FilterSpec>,
    pub sources: Vec<SourceEntry>,
}

/// One original/filtered pairing as listed in a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub source_id: usize,
    pub filter_id: usize,
    pub filter_name: String,
    pub original: PathBuf,
    pub filtered: PathBuf,
}

/// An [`ImagePair`] with both images decoded.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedPair {
    pub source_id: usize,
    pub filter_id: usize,
    pub original: Image,
    pub filtered: Image,
}

#[derive(Clone, Copy, Debug)]
pub struct CorpusOptions {
    pub train_fraction: f64,
    pub seed: u64,
    /// Sources are resized (bilinear) to `image_size × image_size` before filtering.
    pub image_size: usize,
    /// Recorded in the manifest; the seed the bank was built with.
    pub bank_seed: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(root: &Path, rel: &str, bytes: &[u8]) -> Result<FileEntry> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileEntry { path: rel.to_string(), sha256: sha256_hex(bytes) })
}

fn check_filter_names(bank: &[FilterSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for spec in bank {
        spec.validate()?;
        let safe = spec.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c));
        if !safe || spec.name == "original" {
            return Err(Error::validation("filter bank", format!("'{}' is not usable as a file name", spec.name)));
        }
        if !seen.insert(spec.name.as_str()) {
            return Err(Error::validation("filter bank", format!("duplicate filter name '{}'", spec.name)));
        }
    }
    Ok(())
}

/// Number of sources assigned to the training split.
pub fn train_count(n_sources: usize, train_fraction: f64) -> usize {
    let n = (n_sources as f64 * train_fraction).round() as usize;
    if n_sources >= 2 {
        n.clamp(1, n_sources - 1)
    } else {
        n.min(n_sources)
    }
}

/// Writes every source plus one filtered variant per bank entry, and the manifest.
pub fn generate_corpus(
    sources: &[Image],
    bank: &[FilterSpec],
    out_root: impl AsRef<Path>,
    opts: &CorpusOptions,
) -> Result<CorpusManifest> {
    let root = out_root.as_ref();
    if !(opts.train_fraction > 0.0 && opts.train_fraction < 1.0) {
        return Err(Error::validation("train_fraction", format!("must lie in (0, 1), got {}", opts.train_fraction)));
    }
    if opts.image_size == 0 {
        return Err(Error::validation("image_size", "must be positive"));
    }
    if sources.is_empty() || bank.is_empty() {
        return Err(Error::validation("corpus", "need at least one source image and one filter"));
    }
    check_filter_names(bank)?;

    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.shuffle(&mut rng::stream(opts.seed, rng::CORPUS, 0));
    let n_train = train_count(sources.len(), opts.train_fraction);
    let train_ids: HashSet<usize> = order[..n_train].iter().copied().collect();

    let mut entries = Vec::with_capacity(sources.len());
    for (source_id, src) in sources.iter().enumerate() {
        let split = if train_ids.contains(&source_id) { Split::Train } else { Split::Test };
        let original = src.resize_bilinear(opts.image_size, opts.image_size).quantized();
        let dir = format!("{split}/{source_id}");
        let original_entry = write_file(root, &format!("{dir}/original.png"), &original.encode_png()?)?;
        let mut filtered = Vec::with_capacity(bank.len());
        for spec in bank {
            let out = apply_filter(&original, spec)?;
            filtered.push(write_file(root, &format!("{dir}/{}.png", spec.name), &out.encode_png()?)?);
        }
        entries.push(SourceEntry { source_id, split, original: original_entry, filtered });
    }

    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        root: root.to_path_buf(),
        seed: opts.seed,
        bank_seed: opts.bank_seed,
        image_size: opts.image_size,
        train_fraction: opts.train_fraction,
        filters: bank.to_vec(),
        sources: entries,
    };
    manifest.save()?;
    Ok(manifest)
}

impl CorpusManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifests always serialize")
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    /// Reads `<root>/manifest`.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: CorpusManifest = toml::from_str(&text).map_err(|e| Error::format("manifest", e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format("manifest", format!("unsupported version {}", m.version)));
        }
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in &self.sources {
            if !ids.insert(s.source_id) {
                return Err(Error::format("manifest", format!("source {} listed twice", s.source_id)));
            }
            if s.filtered.len() != self.filters.len() {
                return Err(Error::format("manifest", format!("source {} lacks filtered variants", s.source_id)));
            }
        }
        Ok(())
    }

    pub fn sources_in(&self, split: Split) -> impl Iterator<Item = &SourceEntry> {
        self.sources.iter().filter(move |s| s.split == split)
    }

    /// All pairs of a split in manifest order (source-major, filter-minor).
    pub fn pairs(&self, split: Split) -> Vec<ImagePair> {
        self.sources_in(split)
            .flat_map(|s| {
                s.filtered.iter().enumerate().map(move |(fid, f)| ImagePair {
                    source_id: s.source_id,
                    filter_id: fid,
                    filter_name: self.filters[fid].name.clone(),
                    original: self.root.join(&s.original.path),
                    filtered: self.root.join(&f.path),
                })
            })
            .collect()
    }

    fn entry_for(&self, path: &Path) -> Option<&FileEntry> {
        self.sources
            .iter()
            .flat_map(|s| std::iter::once(&s.original).chain(&s.filtered))
            .find(|e| self.root.join(&e.path) == path)
    }

    /// Reads a listed file, checking it against the recorded checksum.
    pub fn read_verified(&self, entry: &FileEntry) -> Result<Image> {
        let path = self.root.join(&entry.path);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(Error::CorruptCorpus { path, expected: entry.sha256.clone(), actual });
        }
        let img = image::load_from_memory(&bytes).map_err(|source| Error::Image { path: path.clone(), source })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Image::new(w as usize, h as usize, rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
    }

    pub fn load_pair(&self, pair: &ImagePair) -> Result<LoadedPair> {
        let missing = |p: &Path| Error::format("manifest", format!("{} is not listed", p.display()));
        let o = self.entry_for(&pair.original).ok_or_else(|| missing(&pair.original))?;
        let f = self.entry_for(&pair.filtered).ok_or_else(|| missing(&pair.filtered))?;
        let original = self.read_verified(o)?;
        let filtered = self.read_verified(f)?;
        if !original.same_dims(&filtered) {
            return Err(Error::Shape(format!("pair ({}, {}) has mismatched dimensions", pair.source_id, pair.filter_id)));
        }
        Ok(LoadedPair { source_id: pair.source_id, filter_id: pair.filter_id, original, filtered })
    }

    /// Verifies every listed file's checksum.
    pub fn verify(&self) -> Result<()> {
        for s in &self.sources {
            for e in std::iter::once(&s.original).chain(&s.filtered) {
                self.read_verified(e)?;
            }
        }
        Ok(())
    }
}

/// Deterministic permutation of a split's pairs for a given epoch.
pub fn shuffled_pairs(manifest: &CorpusManifest, split: Split, seed: u64, epoch: u64) -> Vec<ImagePair> {
    let mut pairs = manifest.pairs(split);
    pairs.shuffle(&mut rng::stream(seed, rng::DATA_ORDER, epoch));
    pairs
}

/// Iterator over one epoch of a split, in batches. The last batch may be short.
pub struct SplitBatches<'m> {
    manifest: &'m CorpusManifest,
    pairs: std::vec::IntoIter<ImagePair>,
    batch_size: usize,
}

impl Iterator for SplitBatches<'_> {
    type Item = Result<Vec<LoadedPair>>;

    fn next(&mut self) -> Option<Self::Item> {
        let chunk: Vec<ImagePair> = self.pairs.by_ref().take(self.batch_size).collect();
        if chunk.is_empty() {
            return None;
        }
        Some(chunk.iter().map(|p| self.manifest.load_pair(p)).collect())
    }
}

pub fn load_split(manifest: &CorpusManifest, split: Split, batch_size: usize, seed: u64) -> Result<SplitBatches<'_>> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size", "must be positive"));
    }
    Ok(SplitBatches { manifest, pairs: shuffled_pairs(manifest, split, seed, 0).into_iter(), batch_size })
}

/// Resizes both images to `size × size`; in training mode mirrors both with
/// one shared coin flip drawn from `flip_seed`.
pub fn preprocess(pair: &LoadedPair, training: bool, size: usize, flip_seed: u64) -> Result<LoadedPair> {
    if size < MIN_TRAIN_SIZE {
        return Err(Error::validation("image size", format!("must be at least {MIN_TRAIN_SIZE}, got {size}")));
    }
    let mut original = pair.original.resize_bilinear(size, size);
    let mut filtered = pair.filtered.resize_bilinear(size, size);
    if training && ChaCha8Rng::seed_from_u64(flip_seed).random_bool(0.5) {
        original = original.flip_horizontal();
        filtered = filtered.flip_horizontal();
    }
    original.clamp01();
    filtered.clamp01();
    Ok(LoadedPair { source_id: pair.source_id, filter_id: pair.filter_id, original, filtered })
}

/// Smooth procedural textures (random low-frequency sinusoid mixtures with a
/// colour gradient) used when no photographs are supplied.
pub fn procedural_sources(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, rng::CORPUS, 1 + i as u64);
            let waves: Vec<[f32; 5]> = (0..4)
                .map(|_| {
                    [
                        r.random_range(0.5..3.0f32),
                        r.random_range(0.0..std::f32::consts::TAU),
                        r.random_range(0.0..std::f32::consts::TAU),
                        r.random_range(0.0..std::f32::consts::TAU),
                        r.random_range(0.05..0.15f32),
                    ]
                })
                .collect();
            let base: [f32; 3] = [r.random_range(0.3..0.7), r.random_range(0.3..0.7), r.random_range(0.3..0.7)];
            let grad: [f32; 3] = [r.random_range(-0.2..0.2), r.random_range(-0.2..0.2), r.random_range(-0.2..0.2)];
            let s = size as f32;
            Image::from_fn(size, size, |y, x| {
                let (u, v) = (x as f32 / s, y as f32 / s);
                let mut px = [0.0; 3];
                for (c, p) in px.iter_mut().enumerate() {
                    let mut val = base[c] + grad[c] * (u - v);
                    for (k, w) in waves.iter().enumerate() {
                        let phase = w[1] + (c as f32) * w[2] * 0.3;
                        let angle = w[3] + k as f32;
                        let t = u * angle.cos() + v * angle.sin();
                        val += w[4] * (std::f32::consts::TAU * w[0] * t + phase).sin();
                    }
                    *p = val.clamp(0.0, 1.0);
                }
                px
            })
        })
        .collect()
}

/// Loads every PNG/JPEG in `dir`, sorted by file name.
pub fn load_source_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths.iter().map(Image::load).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter_bank::builtin_filter_bank;

    fn opts() -> CorpusOptions {
        CorpusOptions { train_fraction: 0.8, seed: 7, image_size: 32, bank_seed: 0 }
    }

    fn corpus(dir: &Path) -> CorpusManifest {
        let sources = procedural_sources(10, 40, 1);
        generate_corpus(&sources, &builtin_filter_bank(0), dir, &opts()).unwrap()
    }

    #[test]
    fn corpus_layout_counts_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let count = |split: Split| m.sources_in(split).count();
        assert_eq!((count(Split::Train), count(Split::Test)), (8, 2));
        let mut files = 0;
        for s in &m.sources {
            files += 1 + s.filtered.len();
            assert!(dir.path().join(format!("{}/{}/original.png", s.split, s.source_id)).exists());
            assert!(dir.path().join(format!("{}/{}/Sutro.png", s.split, s.source_id)).exists());
        }
        assert_eq!(files, 170);
        let reloaded = CorpusManifest::load(dir.path()).unwrap();
        assert_eq!(reloaded, m);
        m.verify().unwrap();
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        corpus(a.path());
        corpus(b.path());
        let read = |d: &Path| std::fs::read(d.join(MANIFEST_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn filtered_files_match_the_bank_at_generation() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let pair = &m.pairs(Split::Test)[5];
        let loaded = m.load_pair(pair).unwrap();
        let expect = apply_filter(&loaded.original, &m.filters[pair.filter_id]).unwrap().quantized();
        assert_eq!(loaded.filtered, expect);
    }

    #[test]
    fn split_iteration_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let test: Vec<_> = load_split(&m, Split::Test, 5, 3).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(test.iter().map(Vec::len).sum::<usize>(), 16 * 2);
        let order = |seed| shuffled_pairs(&m, Split::Train, seed, 0);
        assert_eq!(order(1), order(1));
        assert_ne!(order(1), order(2));
        assert_eq!(load_split(&m, Split::Train, 8, 0).unwrap().count(), 16);
        let mut ids: Vec<_> = order(4).iter().map(|p| (p.source_id, p.filter_id)).collect();
        ids.sort();
        let mut expect: Vec<_> = m.pairs(Split::Train).iter().map(|p| (p.source_id, p.filter_id)).collect();
        expect.sort();
        assert_eq!(ids, expect);
    }

    #[test]
    fn tampered_file_is_reported_as_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let victim = dir.path().join(&m.sources[0].filtered[3].path);
        let img = Image::filled(32, 32, [0.1; 3]);
        img.save_png(&victim).unwrap();
        assert!(matches!(m.verify(), Err(Error::CorruptCorpus { .. })));
    }

    #[test]
    fn preprocess_flips_both_images_identically() {
        let img = procedural_sources(1, 48, 9).remove(0);
        let pair = LoadedPair { source_id: 0, filter_id: 0, original: img.clone(), filtered: img };
        let mut flipped = 0;
        for seed in 0..16 {
            let p = preprocess(&pair, true, 32, seed).unwrap();
            assert_eq!(p.original, p.filtered);
            assert_eq!((p.original.width(), p.original.height()), (32, 32));
            let plain = preprocess(&pair, false, 32, seed).unwrap();
            if p.original != plain.original {
                assert_eq!(p.original, plain.original.flip_horizontal());
                flipped += 1;
            }
        }
        assert!(flipped > 0 && flipped < 16);
    }

    #[test]
    fn bad_fraction_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let o = CorpusOptions { train_fraction: 1.0, ..opts() };
        assert!(generate_corpus(&procedural_sources(2, 32, 0), &builtin_filter_bank(0), dir.path(), &o).is_err());
    }
}
