//! Shared fixtures for the criterion benchmarks.

use defilter_core::dataset::{generate_corpus, procedural_sources, CorpusManifest, CorpusOptions};
use defilter_core::filter_bank::builtin_filter_bank;
use defilter_core::image::Image;

/// Smooth procedural test image.
pub fn texture(size: usize, seed: u64) -> Image {
    procedural_sources(1, size, seed).remove(0)
}

/// One-filter corpus of `sources` images under `dir`.
pub fn tiny_corpus(dir: &std::path::Path, sources: usize, size: usize) -> CorpusManifest {
    let bank = vec![builtin_filter_bank(0)[0].clone()];
    let opts = CorpusOptions { train_fraction: 0.8, seed: 0, image_size: size, bank_seed: 0 };
    generate_corpus(&procedural_sources(sources, size, 0), &bank, dir, &opts).expect("corpus generation")
}
