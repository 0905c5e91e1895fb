use rand::Rng;

use super::{Conv, ModelConfig};
use crate::autograd::Var;
use crate::params::{Binding, ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

const LEAKY_SLOPE: f64 = 0.2;

/// Strided LeakyReLU trunk with 3×3 patch-score heads on its deepest
/// `disc_scales` outputs and a global head (1×1 conv, spatially averaged).
#[derive(Clone, Debug)]
pub struct Discriminator {
    trunk: Vec<Conv>,
    /// `(trunk index, head)`.
    patch_heads: Vec<(usize, Conv)>,
    global: Conv,
}

pub struct DiscOutput<'t, T: Scalar> {
    /// `[N]`.
    pub global: Var<'t, T>,
    /// One `[N, 1, h, w]` score map per scale, shallowest first.
    pub patches: Vec<Var<'t, T>>,
    /// Per-sample critic value: global score plus the spatial mean of every
    /// patch map, `[N]`.
    pub score: Var<'t, T>,
}

struct Trace<'t, T: Scalar> {
    pre: Vec<Var<'t, T>>,
    post: Vec<Var<'t, T>>,
}

impl Discriminator {
    pub(crate) fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Discriminator;
        let mut in_ch = 3;
        let trunk: Vec<Conv> = cfg
            .disc_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(store, rng, &format!("disc.conv{i}"), g, in_ch, c, 3, 2, true);
                in_ch = c;
                conv
            })
            .collect();
        let first = trunk.len() - cfg.disc_scales;
        let patch_heads = (first..trunk.len())
            .map(|i| (i, Conv::new(store, rng, &format!("disc.patch{i}"), g, cfg.disc_channels[i], 1, 3, 1, true)))
            .collect();
        let global = Conv::new(store, rng, "disc.global", g, in_ch, 1, 1, 1, true);
        Self { trunk, patch_heads, global }
    }

    fn trace<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Trace<'t, T> {
        let mut pre = Vec::with_capacity(self.trunk.len());
        let mut post = Vec::with_capacity(self.trunk.len());
        let mut h = x;
        for conv in &self.trunk {
            let a = conv.forward(p, h);
            h = a.leaky_relu(LEAKY_SLOPE);
            pre.push(a);
            post.push(h);
        }
        Trace { pre, post }
    }

    /// `x` is an `N×3×H×W` batch in `[0, 1]`. Scores are unbounded.
    pub fn forward<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> DiscOutput<'t, T> {
        let t = self.trace(p, x);
        let global = self.global.forward(p, *t.post.last().unwrap()).mean_per_sample();
        let patches: Vec<_> = self.patch_heads.iter().map(|(i, head)| head.forward(p, t.post[*i])).collect();
        let mut score = global;
        for m in &patches {
            score = score.add(&m.mean_per_sample());
        }
        DiscOutput { global, patches, score }
    }

    /// Per-sample critic scores, `[N]`.
    pub fn score<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.forward(p, x).score
    }

    /// `∂ score_n / ∂ x_n` for every sample, built from differentiable tape
    /// operations so the result can itself be differentiated with respect to
    /// the critic parameters (the leaky-ReLU slopes are piecewise constant).
    pub fn input_grad<'t, T: Scalar>(&self, p: &Binding<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let tape = x.tape();
        let t = self.trace(p, x);
        let dims = |v: &Var<'t, T>| v.value().dims4();
        // Heads are stride-1, so their score maps share the trunk map's size.
        let mean_seed = |v: &Var<'t, T>| {
            let (n, _, h, w) = dims(v);
            tape.constant(Tensor::full(vec![n, 1, h, w], T::from_f64(1.0 / (h * w) as f64)))
        };
        let last = self.trunk.len() - 1;
        let mut g: Option<Var<'t, T>> = None;
        for i in (0..self.trunk.len()).rev() {
            let h = t.post[i];
            let mut seeds = Vec::new();
            if i == last {
                seeds.push(&self.global);
            }
            seeds.extend(self.patch_heads.iter().filter(|(j, _)| *j == i).map(|(_, head)| head));
            for head in seeds {
                let dh = head.backward_input(p, mean_seed(&h), dims(&h));
                g = Some(match g {
                    Some(acc) => acc.add(&dh),
                    None => dh,
                });
            }
            let slope = T::from_f64(LEAKY_SLOPE);
            let mask = t.pre[i].value().map(|a| if a > T::zero() { T::one() } else { slope });
            let da = g.expect("the deepest layer always has a head").mul_const(mask);
            let below = if i == 0 { x } else { t.post[i - 1] };
            g = Some(self.trunk[i].backward_input(p, da, dims(&below)));
        }
        g.unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::model::Model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn explicit_input_gradient_matches_backward() {
        for cfg in [ModelConfig::micro(), ModelConfig::default()] {
            let size = if cfg == ModelConfig::micro() { 16 } else { 32 };
            let model = Model::<f64>::new(cfg, 11).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(2);
            let n = 2 * 3 * size * size;
            let x = Tensor::new(vec![2, 3, size, size], (0..n).map(|_| r.random()).collect());
            let tape = Tape::new();
            let p = model.store.bind_frozen(&tape);
            let xv = tape.leaf(x.clone());
            let grads = tape.backward(model.discriminator.score(&p, xv).sum());
            let reference = grads.get(xv).unwrap().clone();
            let tape = Tape::new();
            let p = model.store.bind_frozen(&tape);
            let explicit = model.discriminator.input_grad(&p, tape.constant(x));
            assert!(explicit.value().max_abs_diff(&reference) < 1e-12);
        }
    }
}
