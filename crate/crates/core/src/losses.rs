//! Training objectives: InfoNCE and its content/style patch forms, the
//! WGAN-GP critic and generator losses, consistency, identity regularization
//! and the weighted generator total.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::{Discriminator, FeaturePyramid};
use crate::params::Binding;
use crate::patch_sampling::{project_content, project_style, Locations, PatchSet, SamplerHeads};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NceConfig {
    pub tau: f64,
    pub gamma_c: f64,
    pub gamma_s: f64,
    /// Draw the style negative at the query's own location instead of a
    /// different one.
    pub style_negative_same_location: bool,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self { tau: 0.07, gamma_c: 0.5, gamma_s: 0.5, style_negative_same_location: false }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_gp: f64,
    /// Weight of the identity regularizer when enabled.
    pub lambda_id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_p: 0.5, lambda_c: 1e-3, lambda_a: 1e-3, lambda_gp: 10.0, lambda_id: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_p, self.lambda_c, self.lambda_a, self.lambda_gp, self.lambda_id];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation("loss weights", format!("must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::validation("tau", format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// `−log softmax(q·[p; negatives]/τ)[0]` for one query.
pub fn info_nce<'t, T: Scalar>(q: Var<'t, T>, p: Var<'t, T>, negatives: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    check_tau(tau)?;
    let k = q.value().numel();
    if p.value().numel() != k || negatives.value().shape().last() != Some(&k) {
        return Err(Error::Shape("query, positive and negatives must share the embedding width".into()));
    }
    let q = q.reshape(vec![1, k]);
    let pos = q.mul(&p.reshape(vec![1, k])).sum_last();
    let neg = q.matmul_t(&negatives.reshape(vec![negatives.value().numel() / k, k]));
    Ok(Var::concat_last(&[pos, neg]).scale(1.0 / tau).cross_entropy_rows(vec![0]).sum())
}

fn check_sets<T: Scalar>(sets: &[&PatchSet<'_, T>]) -> Result<()> {
    let first = sets[0];
    for s in sets {
        if s.per_image != first.per_image || s.batch != first.batch {
            return Err(Error::Shape("patch sets were not drawn from one location list".into()));
        }
    }
    if let Some(t) = first.per_image.iter().find(|&&t| t < 2) {
        return Err(Error::validation("patch locations", format!("need >= 2 locations per level for negatives, got {t}")));
    }
    Ok(())
}

/// Content NCE over projected patch sets: for each image, level and location
/// the output embedding must pick the input embedding at the same location
/// among all sampled locations of that image. Mean over locations, then over
/// levels.
pub fn content_nce_sets<'t, T: Scalar>(out: &PatchSet<'t, T>, input: &PatchSet<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    check_tau(tau)?;
    check_sets(&[out, input])?;
    let n = out.batch;
    let mut total: Option<Var<'t, T>> = None;
    for (l, &t) in out.per_image.iter().enumerate() {
        let d = out.embeddings[l].value().dims2().1;
        let q = out.embeddings[l].reshape(vec![n, t, d]);
        let f = input.embeddings[l].reshape(vec![n, t, d]);
        let logits = q.matmul_t(&f).scale(1.0 / tau).reshape(vec![n * t, t]);
        let targets = (0..n).flat_map(|_| 0..t).collect();
        let term = logits.cross_entropy_rows(targets).mean();
        total = Some(total.map_or(term, |acc| acc.add(&term)));
    }
    Ok(total.unwrap().scale(1.0 / out.per_image.len() as f64))
}

/// Style NCE over projected Gram descriptors: each output descriptor must
/// prefer the original image's descriptor at the same location over a single
/// filtered-image descriptor, taken at a random other location of the same
/// image (or the same location when `same_location`).
pub fn style_nce_sets<'t, T: Scalar>(
    out: &PatchSet<'t, T>,
    original: &PatchSet<'t, T>,
    filtered: &PatchSet<'t, T>,
    cfg: &NceConfig,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    check_tau(cfg.tau)?;
    check_sets(&[out, original, filtered])?;
    let n = out.batch;
    let mut total: Option<Var<'t, T>> = None;
    for (l, &t) in out.per_image.iter().enumerate() {
        let q = out.embeddings[l];
        let (m, d) = q.value().dims2();
        let pos = q.mul(&original.embeddings[l]).sum_last();
        let idx: Vec<(usize, usize)> = (0..n)
            .flat_map(|b| (0..t).map(move |ti| (b, ti)))
            .map(|(b, ti)| {
                let other = if cfg.style_negative_same_location {
                    ti
                } else {
                    let r = rng.random_range(0..t - 1);
                    if r >= ti { r + 1 } else { r }
                };
                (b * t + other, 0)
            })
            .collect();
        let neg_rows = filtered.embeddings[l].reshape(vec![m, d, 1, 1]).gather_pixels(idx);
        let neg = q.mul(&neg_rows).sum_last();
        let term = Var::concat_last(&[pos, neg]).scale(1.0 / cfg.tau).cross_entropy_rows(vec![0; m]).mean();
        total = Some(total.map_or(term, |acc| acc.add(&term)));
    }
    Ok(total.unwrap().scale(1.0 / out.per_image.len() as f64))
}

pub fn content_nce<'t, T: Scalar>(
    p: &Binding<'t, T>,
    heads: &SamplerHeads,
    output: &FeaturePyramid<'t, T>,
    input: &FeaturePyramid<'t, T>,
    locations: &Locations,
    cfg: &NceConfig,
) -> Result<Var<'t, T>> {
    let q = project_content(p, heads, output, locations)?;
    let k = project_content(p, heads, input, locations)?;
    content_nce_sets(&q, &k, cfg.tau)
}

#[allow(clippy::too_many_arguments)]
pub fn style_nce<'t, T: Scalar>(
    p: &Binding<'t, T>,
    heads: &SamplerHeads,
    output: &FeaturePyramid<'t, T>,
    original: &FeaturePyramid<'t, T>,
    filtered: &FeaturePyramid<'t, T>,
    locations: &Locations,
    window: usize,
    cfg: &NceConfig,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    let q = project_style(p, heads, output, locations, window)?;
    let pos = project_style(p, heads, original, locations, window)?;
    let neg = project_style(p, heads, filtered, locations, window)?;
    style_nce_sets(&q, &pos, &neg, cfg, rng)
}

pub fn patchnce_total(content: f64, style: f64, cfg: &NceConfig) -> f64 {
    cfg.gamma_c * content + cfg.gamma_s * style
}

/// Content NCE between `F(x)` and `x` for an already clean `x`.
pub fn identity_regularization<'t, T: Scalar>(
    p: &Binding<'t, T>,
    heads: &SamplerHeads,
    restored_clean: &FeaturePyramid<'t, T>,
    clean: &FeaturePyramid<'t, T>,
    locations: &Locations,
    cfg: &NceConfig,
) -> Result<Var<'t, T>> {
    content_nce(p, heads, restored_clean, clean, locations, cfg)
}

/// Mean absolute pixel error plus the level-averaged mean absolute error
/// between feature pyramids from `frozen_encoder`, which must not carry
/// gradients into any parameter.
pub fn consistency_loss<'t, T: Scalar>(
    output: Var<'t, T>,
    original: Var<'t, T>,
    frozen_encoder: impl Fn(Var<'t, T>) -> Vec<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    if output.shape() != original.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", output.shape(), original.shape())));
    }
    let pixel = output.sub(&original).abs().mean();
    let a = frozen_encoder(output);
    let b = frozen_encoder(original);
    let mut feat: Option<Var<'t, T>> = None;
    for (fa, fb) in a.iter().zip(&b) {
        let term = fa.sub(fb).abs().mean();
        feat = Some(feat.map_or(term, |acc| acc.add(&term)));
    }
    Ok(match feat {
        Some(f) => pixel.add(&f.scale(1.0 / a.len() as f64)),
        None => pixel,
    })
}

/// A critic with an explicit, differentiable input gradient.
pub trait Critic<T: Scalar> {
    /// Per-sample scores, `[N]`.
    fn score<'t>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T>;
    /// `∂ score_n / ∂ x_n`, shaped like `x`.
    fn input_grad<'t>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T>;
}

impl<T: Scalar> Critic<T> for Discriminator {
    fn score<'t>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        Discriminator::score(self, p, x)
    }

    fn input_grad<'t>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        Discriminator::input_grad(self, p, x)
    }
}

/// `D(x) = w·x + c` per sample; the constant critic is `w = 0`.
#[derive(Clone, Debug)]
pub struct LinearCritic<T: Scalar> {
    /// Shaped like one sample (`3×H×W`).
    pub w: Tensor<T>,
    pub c: f64,
}

impl<T: Scalar> LinearCritic<T> {
    fn tiled(&self, n: usize) -> Tensor<T> {
        let mut shape = vec![n];
        shape.extend_from_slice(self.w.shape());
        let data = (0..n).flat_map(|_| self.w.data().iter().copied()).collect();
        Tensor::new(shape, data)
    }
}

impl<T: Scalar> Critic<T> for LinearCritic<T> {
    fn score<'t>(&self, _p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let n = x.shape()[0];
        x.mul_const(self.tiled(n)).reshape(vec![n, self.w.numel()]).sum_last().add_scalar(self.c)
    }

    fn input_grad<'t>(&self, _p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.tape().constant(self.tiled(x.shape()[0]))
    }
}

pub struct DiscriminatorLoss<'t, T: Scalar> {
    /// `adv + λ_gp · gp`.
    pub total: Var<'t, T>,
    /// `−E[D(x)] + E[D(x̂)]`.
    pub adv: Var<'t, T>,
    pub gp: Var<'t, T>,
}

/// Critic loss with gradient penalty on `u·real + (1−u)·fake`, one `u` per
/// sample. Both batches are treated as constants.
pub fn discriminator_loss<'t, T: Scalar>(
    critic: &impl Critic<T>,
    p: &Binding<'t, T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    u: &[f64],
    lambda_gp: f64,
) -> Result<DiscriminatorLoss<'t, T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    let n = real.shape()[0];
    if u.len() != n {
        return Err(Error::Shape(format!("{} interpolation weights for {n} samples", u.len())));
    }
    let tape = p.tape();
    let real_score = critic.score(p, tape.constant(real.clone())).mean();
    let fake_score = critic.score(p, tape.constant(fake.clone())).mean();
    let adv = fake_score.sub(&real_score);
    let inner = real.numel() / n;
    let mixed: Vec<T> = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let ui = T::from_f64(u[i / inner]);
            ui * r + (T::one() - ui) * f
        })
        .collect();
    let x_int = tape.constant(Tensor::new(real.shape().to_vec(), mixed));
    let grad = critic.input_grad(p, x_int).reshape(vec![n, inner]);
    let gp = grad.row_norm().add_scalar(-1.0).sqr().mean();
    Ok(DiscriminatorLoss { total: adv.add(&gp.scale(lambda_gp)), adv, gp })
}

/// `−E[D(x̂)]`, differentiable through `fake`.
pub fn generator_adv_loss<'t, T: Scalar>(critic: &impl Critic<T>, p: &Binding<'t, T>, fake: Var<'t, T>) -> Var<'t, T> {
    critic.score(p, fake).mean().scale(-1.0)
}

/// Scalar generator-side components. `None` marks a disabled term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorComponents {
    pub content_nce: f64,
    pub style_nce: Option<f64>,
    pub consistency: Option<f64>,
    pub adv_g: f64,
    pub identity: Option<f64>,
}

/// Per-step scalar losses. Disabled terms are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub content_nce: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_nce: Option<f64>,
    pub patchnce: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    pub adv_g: f64,
    pub adv_d: f64,
    pub gp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<f64>,
    pub total_g: f64,
}

impl LossReport {
    /// `λ_p·patchnce + λ_c·consistency + λ_a·adv_g (+ λ_id·identity)` from
    /// the recorded components.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let mut total = w.lambda_p * self.patchnce;
        if let Some(c) = self.consistency {
            total += w.lambda_c * c;
        }
        total += w.lambda_a * self.adv_g;
        if let Some(i) = self.identity {
            total += w.lambda_id * i;
        }
        total
    }

    /// Names of the generator terms present.
    pub fn enabled_components(&self) -> Vec<&'static str> {
        let mut names = vec!["content_nce"];
        if self.style_nce.is_some() {
            names.push("style_nce");
        }
        if self.consistency.is_some() {
            names.push("consistency");
        }
        names.push("adv_g");
        if self.identity.is_some() {
            names.push("identity");
        }
        names
    }
}

/// Weighted generator objective. Non-finite components abort with a
/// divergence error naming the component.
pub fn generator_objective(c: &GeneratorComponents, nce: &NceConfig, w: &LossWeights, step: u64) -> Result<LossReport> {
    let named = [
        ("content_nce", Some(c.content_nce)),
        ("style_nce", c.style_nce),
        ("consistency", c.consistency),
        ("adv_g", Some(c.adv_g)),
        ("identity", c.identity),
    ];
    for (component, v) in named {
        if let Some(v) = v.filter(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, component, value: v });
        }
    }
    let mut report = LossReport {
        step,
        content_nce: c.content_nce,
        style_nce: c.style_nce,
        patchnce: patchnce_total(c.content_nce, c.style_nce.unwrap_or(0.0), nce),
        consistency: c.consistency,
        adv_g: c.adv_g,
        identity: c.identity,
        ..LossReport::default()
    };
    report.total_g = report.recompose(w);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    /// Straight softmax cross-entropy without any shifting.
    fn oracle(q: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let pos = (dot(q, p) / tau).exp();
        let all = pos + negs.iter().map(|n| (dot(q, n) / tau).exp()).sum::<f64>();
        -(pos / all).ln()
    }

    fn nce(q: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
        let tape = Tape::new();
        let k = q.len();
        let flat: Vec<f64> = negs.iter().flatten().copied().collect();
        let out = info_nce(
            tape.leaf(Tensor::new(vec![k], q.to_vec())),
            tape.leaf(Tensor::new(vec![k], p.to_vec())),
            tape.leaf(Tensor::new(vec![negs.len(), k], flat)),
            tau,
        )
        .unwrap();
        out.item()
    }

    #[test]
    fn info_nce_reference_values() {
        let q = unit(vec![1.0, 2.0, 3.0]);
        let negs = vec![q.clone(); 255];
        assert!((nce(&q, &q, &negs, 0.07) - 256f64.ln()).abs() < 1e-9);
        let v = nce(&[1.0, 0.0], &[1.0, 0.0], &[vec![-1.0, 0.0]], 0.07);
        assert!(v >= 0.0 && (v - (-2.0f64 / 0.07).exp().ln_1p()).abs() < 1e-14);
        assert!(v < 1e-12);
        // τ = 0.01 with ±1 similarities overflows a naive exp.
        assert!(nce(&[1.0, 0.0], &[-1.0, 0.0], &[vec![1.0, 0.0]], 0.01).is_finite());
    }

    #[test]
    fn non_positive_tau_is_rejected() {
        let tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::new(vec![2], vec![1.0, 0.0]));
        let n = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]));
        assert!(matches!(info_nce(v, v, n, 0.0), Err(Error::Validation { .. })));
    }

    proptest! {
        #[test]
        fn info_nce_matches_oracle(seed in 0u64..10_000, n in 1usize..12, k in 2usize..8, tau in 0.05f64..1.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || unit((0..k).map(|_| r.random_range(-1.0..1.0)).collect());
            let q = draw();
            let p = draw();
            let negs: Vec<_> = (0..n).map(|_| draw()).collect();
            prop_assert!((nce(&q, &p, &negs, tau) - oracle(&q, &p, &negs, tau)).abs() < 1e-6);
        }

        #[test]
        fn info_nce_decreases_with_positive_similarity(a in -0.9f64..0.9, d in 0.01f64..0.09) {
            let q = [1.0, 0.0];
            let at = |c: f64| [c, (1.0 - c * c).sqrt()];
            let negs = vec![vec![0.0, 1.0], vec![-0.6, 0.8]];
            prop_assert!(nce(&q, &at(a + d), &negs, 0.1) < nce(&q, &at(a), &negs, 0.1));
        }
    }

    fn set<'t>(tape: &'t Tape<f64>, rows: &[[f64; 2]]) -> PatchSet<'t, f64> {
        let flat = rows.iter().flatten().copied().collect();
        PatchSet { embeddings: vec![tape.leaf(Tensor::new(vec![rows.len(), 2], flat))], per_image: vec![rows.len()], batch: 1 }
    }

    #[test]
    fn content_nce_small_case_matches_hand_evaluation() {
        let tape = Tape::new();
        let q_rows = [[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]];
        let k_rows = [[0.8, 0.6], [0.0, -1.0], [-0.6, 0.8]];
        let got = content_nce_sets(&set(&tape, &q_rows), &set(&tape, &k_rows), 0.5).unwrap().item();
        let mut expect = 0.0;
        for t in 0..3 {
            let negs: Vec<Vec<f64>> = (0..3).filter(|&j| j != t).map(|j| k_rows[j].to_vec()).collect();
            expect += oracle(&q_rows[t], &k_rows[t], &negs, 0.5) / 3.0;
        }
        assert!((got - expect).abs() < 1e-6);
    }

    #[test]
    fn content_nce_needs_two_locations() {
        let tape = Tape::new();
        let one = set(&tape, &[[1.0, 0.0]]);
        assert!(matches!(content_nce_sets(&one, &one, 0.07), Err(Error::Validation { .. })));
    }

    #[test]
    fn style_nce_small_case_matches_two_way_oracle() {
        let tape = Tape::new();
        let q = [[1.0, 0.0], [0.0, 1.0]];
        let p = [[0.8, 0.6], [0.6, 0.8]];
        let f = [[-0.6, 0.8], [0.0, -1.0]];
        let cfg = NceConfig { tau: 0.2, ..NceConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = style_nce_sets(&set(&tape, &q), &set(&tape, &p), &set(&tape, &f), &cfg, &mut rng).unwrap().item();
        // With two locations the "other" location is forced.
        let expect = (oracle(&q[0], &p[0], &[f[1].to_vec()], 0.2) + oracle(&q[1], &p[1], &[f[0].to_vec()], 0.2)) / 2.0;
        assert!((got - expect).abs() < 1e-6);
        let equal = style_nce_sets(&set(&tape, &q), &set(&tape, &q), &set(&tape, &q), &NceConfig {
            style_negative_same_location: true,
            ..cfg
        }, &mut rng)
        .unwrap()
        .item();
        assert!((equal - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn patchnce_arithmetic() {
        let cfg = NceConfig::default();
        assert_eq!(patchnce_total(2.0, 4.0, &cfg), 3.0);
        assert_eq!(patchnce_total(2.0, 4.0, &NceConfig { gamma_s: 0.0, ..cfg.clone() }), 1.0);
        assert_eq!(patchnce_total(2.0, 4.0, &NceConfig { gamma_c: 0.0, gamma_s: 0.0, ..cfg }), 0.0);
    }

    fn linear_critic(w: Vec<f64>, c: f64) -> LinearCritic<f64> {
        LinearCritic { w: Tensor::new(vec![3, 2, 2], w), c }
    }

    fn batches(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || Tensor::new(vec![2, 3, 2, 2], (0..24).map(|_| r.random()).collect());
        (t(), t())
    }

    #[test]
    fn gradient_penalty_on_linear_critics() {
        let store = ParamStore::<f64>::new();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let (real, fake) = batches(1);
        let w: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.3).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let w: Vec<f64> = w.iter().map(|x| x * 3.0 / norm).collect();
        let loss = discriminator_loss(&linear_critic(w, 0.0), &p, &real, &fake, &[0.3, 0.9], 10.0).unwrap();
        assert!((loss.gp.item() - 4.0).abs() < 1e-6);

        let constant = linear_critic(vec![0.0; 12], 2.5);
        let loss = discriminator_loss(&constant, &p, &real, &fake, &[0.3, 0.9], 10.0).unwrap();
        assert_eq!(loss.adv.item(), 0.0);
        assert_eq!(loss.gp.item(), 1.0);
        assert_eq!(generator_adv_loss(&constant, &p, tape.constant(fake.clone())).item(), -2.5);

        let some = linear_critic((0..12).map(|i| i as f64 * 0.1).collect(), 0.0);
        let loss = discriminator_loss(&some, &p, &real, &real, &[0.5, 0.5], 10.0).unwrap();
        assert!((loss.total.item() - 10.0 * loss.gp.item()).abs() < 1e-12);
    }

    fn enc<'t>(v: Var<'t, f64>) -> Vec<Var<'t, f64>> {
        vec![v.scale(2.0)]
    }

    fn no_feats<'t>(_: Var<'t, f64>) -> Vec<Var<'t, f64>> {
        Vec::new()
    }

    #[test]
    fn consistency_examples() {
        let tape = Tape::new();
        let (a, _) = batches(2);
        let x = tape.leaf(a.clone());
        assert_eq!(consistency_loss(x, x, enc).unwrap().item(), 0.0);
        let shifted = tape.leaf(a.map(|v| v + 0.1));
        assert!((consistency_loss(shifted, x, no_feats).unwrap().item() - 0.1).abs() < 1e-12);
        assert!(consistency_loss(shifted, x, enc).unwrap().item() > 0.0);
    }

    #[test]
    fn objective_arithmetic_and_report() {
        let w = LossWeights::default();
        let nce = NceConfig::default();
        // PatchNCE of 2.0 from content 4.0 alone with γ_c = 0.5.
        let c = GeneratorComponents { content_nce: 4.0, style_nce: Some(0.0), consistency: Some(10.0), adv_g: -5.0, identity: None };
        let r = generator_objective(&c, &nce, &w, 3).unwrap();
        assert!((r.total_g - 1.005).abs() < 1e-12);
        assert_eq!(r.enabled_components(), vec!["content_nce", "style_nce", "consistency", "adv_g"]);
        let zero = LossWeights { lambda_p: 0.0, lambda_c: 0.0, lambda_a: 0.0, lambda_gp: 0.0, lambda_id: 0.0 };
        assert_eq!(generator_objective(&c, &nce, &zero, 3).unwrap().total_g, 0.0);
        let bad = GeneratorComponents { consistency: Some(f64::NAN), ..c };
        assert!(matches!(
            generator_objective(&bad, &nce, &w, 9),
            Err(Error::Divergence { step: 9, component: "consistency", .. })
        ));
        let with_id = GeneratorComponents { identity: Some(0.0), ..c };
        assert_eq!(generator_objective(&with_id, &nce, &w, 0).unwrap().total_g, r.total_g);
    }
}
