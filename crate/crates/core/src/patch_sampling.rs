//! Random patch locations and the two isolated projection branches: content
//! heads `H_c` (per-location embeddings) and style heads `H_s` (windowed Gram
//! descriptors).

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::filter_bank::reflect_index;
use crate::model::{FeaturePyramid, Linear, ModelConfig};
use crate::params::{Binding, ParamGroup, ParamStore};
use crate::tensor::Scalar;

/// Flat spatial indices (`y·W + x`) per pyramid level, shared by every image
/// of a batch and every pyramid of a step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Locations {
    pub per_level: Vec<Vec<usize>>,
}

impl Locations {
    pub fn check(&self, sizes: &[(usize, usize)]) -> Result<()> {
        if sizes.len() != self.per_level.len() {
            return Err(Error::Shape(format!("{} location lists for {} levels", self.per_level.len(), sizes.len())));
        }
        for (l, (locs, &(h, w))) in self.per_level.iter().zip(sizes).enumerate() {
            if let Some(bad) = locs.iter().find(|&&p| p >= h * w) {
                return Err(Error::Shape(format!("location {bad} outside level {l} ({h}x{w})")));
            }
        }
        Ok(())
    }
}

/// `min(num_patches, H·W)` distinct locations per level, uniformly without
/// replacement.
pub fn sample_locations_with(sizes: &[(usize, usize)], num_patches: usize, rng: &mut impl Rng) -> Locations {
    let per_level = sizes
        .iter()
        .map(|&(h, w)| {
            let hw = h * w;
            index::sample(rng, hw, num_patches.min(hw)).into_vec()
        })
        .collect();
    Locations { per_level }
}

pub fn level_sizes<T: Scalar>(pyr: &FeaturePyramid<'_, T>) -> Vec<(usize, usize)> {
    pyr.levels
        .iter()
        .map(|l| {
            let (_, _, h, w) = l.value().dims4();
            (h, w)
        })
        .collect()
}

pub fn sample_locations<T: Scalar>(pyr: &FeaturePyramid<'_, T>, num_patches: usize, seed: u64) -> Locations {
    sample_locations_with(&level_sizes(pyr), num_patches, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Hidden width floor: with only a handful of ReLU units a row can be
/// switched off entirely, leaving nothing to normalize.
const MIN_HIDDEN: usize = 32;

/// Two-layer perceptron `C → max(K, 32) → K`.
#[derive(Clone, Copy, Debug)]
struct Mlp {
    a: Linear,
    b: Linear,
}

impl Mlp {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, in_dim: usize, k: usize) -> Self {
        let g = ParamGroup::Samplers;
        let hidden = k.max(MIN_HIDDEN);
        Self {
            a: Linear::new(store, rng, &format!("{name}.fc0"), g, in_dim, hidden, (2.0 / in_dim as f64).sqrt(), 0.0),
            b: Linear::new(store, rng, &format!("{name}.fc1"), g, hidden, k, (1.0 / hidden as f64).sqrt(), 0.0),
        }
    }

    fn forward<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.b.forward(p, self.a.forward(p, x).relu())
    }
}

/// Per-level content and style heads. The two branches have disjoint
/// parameters.
#[derive(Clone, Debug)]
pub struct SamplerHeads {
    content: Vec<Mlp>,
    style: Vec<Mlp>,
    pub embed_dim: usize,
}

impl SamplerHeads {
    pub(crate) fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let k = cfg.embed_dim;
        let mut content = Vec::new();
        let mut style = Vec::new();
        for (l, &c) in cfg.channels.iter().enumerate() {
            content.push(Mlp::new(store, rng, &format!("heads.content{l}"), c, k));
            style.push(Mlp::new(store, rng, &format!("heads.style{l}"), c, k));
        }
        Self { content, style, embed_dim: k }
    }

    /// Length of a flattened style descriptor.
    pub fn style_dim(&self) -> usize {
        self.embed_dim * (self.embed_dim + 1) / 2
    }
}

/// Unit-norm embeddings per level, `[N·T_l, D]`, rows ordered image-major
/// then by position in the level's location list.
pub struct PatchSet<'t, T: Scalar> {
    pub embeddings: Vec<Var<'t, T>>,
    /// `T_l` per level.
    pub per_image: Vec<usize>,
    pub batch: usize,
}

fn gather_plan<T: Scalar>(pyr: &FeaturePyramid<'_, T>, locations: &Locations) -> Result<Vec<(usize, usize, usize)>> {
    let sizes = level_sizes(pyr);
    locations.check(&sizes)?;
    Ok(sizes.iter().map(|&(h, w)| (pyr.levels[0].value().shape()[0], h, w)).collect())
}

pub fn project_content<'t, T: Scalar>(
    p: &Binding<'t, T>,
    heads: &SamplerHeads,
    pyr: &FeaturePyramid<'t, T>,
    locations: &Locations,
) -> Result<PatchSet<'t, T>> {
    let plan = gather_plan(pyr, locations)?;
    let mut embeddings = Vec::with_capacity(plan.len());
    for (l, &(n, _, _)) in plan.iter().enumerate() {
        let locs = &locations.per_level[l];
        let idx = (0..n).flat_map(|b| locs.iter().map(move |&q| (b, q))).collect();
        let feats = pyr.levels[l].gather_pixels(idx);
        embeddings.push(heads.content[l].forward(p, feats).l2_normalize_rows());
    }
    Ok(PatchSet { embeddings, per_image: locations.per_level.iter().map(Vec::len).collect(), batch: plan[0].0 })
}

/// Indices of the reflect-padded `window×window` neighbourhood of `q`.
fn window_indices(q: usize, h: usize, w: usize, window: usize) -> impl Iterator<Item = usize> {
    let r = (window / 2) as isize;
    let (y, x) = ((q / w) as isize, (q % w) as isize);
    (-r..=r).flat_map(move |dy| {
        (-r..=r).map(move |dx| reflect_index(y + dy, h) * w + reflect_index(x + dx, w))
    })
}

/// Windowed Gram descriptors: every feature vector in the neighbourhood is
/// mapped by `H_s`, `G = (1/w²) Σ f fᵀ`, upper triangle flattened, then
/// L2-normalized.
pub fn project_style<'t, T: Scalar>(
    p: &Binding<'t, T>,
    heads: &SamplerHeads,
    pyr: &FeaturePyramid<'t, T>,
    locations: &Locations,
    window: usize,
) -> Result<PatchSet<'t, T>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::validation("style window", format!("must be odd and positive, got {window}")));
    }
    let plan = gather_plan(pyr, locations)?;
    let mut embeddings = Vec::with_capacity(plan.len());
    for (l, &(n, h, w)) in plan.iter().enumerate() {
        let locs = &locations.per_level[l];
        let idx = (0..n)
            .flat_map(|b| locs.iter().flat_map(move |&q| window_indices(q, h, w, window).map(move |i| (b, i))))
            .collect();
        let mapped = heads.style[l].forward(p, pyr.levels[l].gather_pixels(idx));
        embeddings.push(mapped.window_gram(window * window).l2_normalize_rows());
    }
    Ok(PatchSet { embeddings, per_image: locations.per_level.iter().map(Vec::len).collect(), batch: plan[0].0 })
}
