//! Deterministic parametric photo filters and the built-in 16-filter bank.
//!
//! A [`FilterSpec`] is an ordered list of primitive global transforms. Every
//! primitive clamps its output to `[0, 1]`; the only stochastic primitive,
//! additive noise, carries its own seed, so applying a spec is a pure function.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const IDENTITY: &str = "identity";

/// Per-channel tone curves given as piecewise-linear control points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToneCurve {
    pub red: Vec<[f32; 2]>,
    pub green: Vec<[f32; 2]>,
    pub blue: Vec<[f32; 2]>,
}

impl ToneCurve {
    pub fn uniform(points: Vec<[f32; 2]>) -> Self {
        Self { red: points.clone(), green: points.clone(), blue: points }
    }

    fn channels(&self) -> [&[[f32; 2]]; 3] {
        [&self.red, &self.green, &self.blue]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveTransform {
    /// Additive shift.
    Brightness { delta: f32 },
    /// Affine stretch about 0.5.
    Contrast { factor: f32 },
    /// Blend towards (factor < 1) or away from (factor > 1) the Rec.601 luma.
    Saturation { factor: f32 },
    /// Rotation of the HSV hue, in degrees.
    HueShift { degrees: f32 },
    /// Separable Gaussian blur, sigma in pixels.
    GaussianBlur { sigma: f32 },
    /// Radial darkening `1 − strength·(r/r_max)²`.
    Vignette { strength: f32 },
    ToneCurve(ToneCurve),
    AdditiveNoise { sigma: f32, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub name: String,
    #[serde(default)]
    pub transforms: Vec<PrimitiveTransform>,
}

#[derive(Serialize, Deserialize)]
struct BankDocument {
    filter: Vec<FilterSpec>,
}

impl FilterSpec {
    pub fn identity() -> Self {
        Self { name: IDENTITY.to_string(), transforms: Vec::new() }
    }

    pub fn new(name: impl Into<String>, transforms: Vec<PrimitiveTransform>) -> Result<Self> {
        let spec = Self { name: name.into(), transforms };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::validation("filter spec", "empty name"));
        }
        if self.transforms.is_empty() && self.name != IDENTITY {
            return Err(Error::validation("filter spec", format!("'{}' has no transforms", self.name)));
        }
        for t in &self.transforms {
            t.validate().map_err(|reason| Error::validation("filter spec", format!("{}: {reason}", self.name)))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("filter specs always serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: FilterSpec = toml::from_str(text).map_err(|e| Error::format("filter spec", e))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Serializes a whole bank as one TOML document (`[[filter]]` tables).
pub fn bank_to_toml(bank: &[FilterSpec]) -> String {
    toml::to_string(&BankDocument { filter: bank.to_vec() }).expect("filter banks always serialize")
}

pub fn bank_from_toml(text: &str) -> Result<Vec<FilterSpec>> {
    let doc: BankDocument = toml::from_str(text).map_err(|e| Error::format("filter bank", e))?;
    for spec in &doc.filter {
        spec.validate()?;
    }
    Ok(doc.filter)
}

fn finite(v: f32, what: &str) -> std::result::Result<(), String> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(format!("{what} must be finite"))
    }
}

fn non_negative(v: f32, what: &str) -> std::result::Result<(), String> {
    finite(v, what)?;
    if v < 0.0 {
        return Err(format!("{what} must be >= 0, got {v}"));
    }
    Ok(())
}

impl PrimitiveTransform {
    fn validate(&self) -> std::result::Result<(), String> {
        match self {
            Self::Brightness { delta } => finite(*delta, "brightness delta"),
            Self::Contrast { factor } => non_negative(*factor, "contrast factor"),
            Self::Saturation { factor } => non_negative(*factor, "saturation factor"),
            Self::HueShift { degrees } => finite(*degrees, "hue shift"),
            Self::GaussianBlur { sigma } => non_negative(*sigma, "blur sigma"),
            Self::Vignette { strength } => {
                finite(*strength, "vignette strength")?;
                if !(0.0..=1.0).contains(strength) {
                    return Err(format!("vignette strength must lie in [0, 1], got {strength}"));
                }
                Ok(())
            }
            Self::AdditiveNoise { sigma, .. } => non_negative(*sigma, "noise sigma"),
            Self::ToneCurve(curve) => {
                for points in curve.channels() {
                    if points.len() < 2 {
                        return Err("tone curve needs at least two control points".into());
                    }
                    for p in points {
                        if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                            return Err(format!("tone curve point {p:?} outside [0,1]²"));
                        }
                    }
                    for w in points.windows(2) {
                        if w[1][0] <= w[0][0] {
                            return Err("tone curve x must be strictly increasing".into());
                        }
                        if w[1][1] < w[0][1] {
                            return Err("tone curve must be monotone non-decreasing".into());
                        }
                    }
                }
                Ok(())
            }
        }
    }

    fn apply(&self, img: &mut Image) {
        match self {
            Self::Brightness { delta } => img.data_mut().iter_mut().for_each(|v| *v += delta),
            Self::Contrast { factor } => img.data_mut().iter_mut().for_each(|v| *v = 0.5 + factor * (*v - 0.5)),
            Self::Saturation { factor } => {
                for px in img.data_mut().chunks_mut(3) {
                    let l = luma(px[0], px[1], px[2]);
                    px.iter_mut().for_each(|v| *v = l + factor * (*v - l));
                }
            }
            Self::HueShift { degrees } => {
                for px in img.data_mut().chunks_mut(3) {
                    let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                    let (r, g, b) = hsv_to_rgb((h + degrees).rem_euclid(360.0), s, v);
                    px.copy_from_slice(&[r, g, b]);
                }
            }
            Self::GaussianBlur { sigma } => gaussian_blur(img, *sigma),
            Self::Vignette { strength } => vignette(img, *strength),
            Self::ToneCurve(curve) => {
                let chans = curve.channels();
                for px in img.data_mut().chunks_mut(3) {
                    for (v, points) in px.iter_mut().zip(chans) {
                        *v = eval_curve(points, *v);
                    }
                }
            }
            Self::AdditiveNoise { sigma, seed } => {
                if *sigma > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    let dist = Normal::new(0.0f32, *sigma).expect("validated sigma");
                    img.data_mut().iter_mut().for_each(|v| *v += dist.sample(&mut rng));
                }
            }
        }
        img.clamp01();
    }
}

/// Applies `spec`'s transforms in order. Output is clamped to `[0, 1]`.
pub fn apply_filter(image: &Image, spec: &FilterSpec) -> Result<Image> {
    spec.validate()?;
    let mut out = image.clone();
    for t in &spec.transforms {
        t.apply(&mut out);
    }
    Ok(out)
}

pub(crate) fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn eval_curve(points: &[[f32; 2]], v: f32) -> f32 {
    let first = points[0];
    let last = points[points.len() - 1];
    if v <= first[0] {
        return first[1];
    }
    if v >= last[0] {
        return last[1];
    }
    let i = points.partition_point(|p| p[0] <= v);
    let (a, b) = (points[i - 1], points[i]);
    let t = (v - a[0]) / (b[0] - a[0]);
    a[1] + t * (b[1] - a[1])
}

/// Mirror index into `0..n` without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn gaussian_blur(img: &mut Image, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (img.width(), img.height());
    let src = img.clone();
    let mut tmp = src.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = reflect_index(x as isize + k as isize - radius, w);
                let p = src.pixel(y, sx);
                (0..3).for_each(|c| acc[c] += kv * p[c]);
            }
            tmp.set_pixel(y, x, acc);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = reflect_index(y as isize + k as isize - radius, h);
                let p = tmp.pixel(sy, x);
                (0..3).for_each(|c| acc[c] += kv * p[c]);
            }
            img.set_pixel(y, x, acc);
        }
    }
}

fn vignette(img: &mut Image, strength: f32) {
    let (w, h) = (img.width(), img.height());
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let r_max2 = cx * cx + cy * cy;
    if r_max2 == 0.0 {
        return;
    }
    for y in 0..h {
        for x in 0..w {
            let r2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            let m = 1.0 - strength * r2 / r_max2;
            let p = img.pixel(y, x);
            img.set_pixel(y, x, [p[0] * m, p[1] * m, p[2] * m]);
        }
    }
}

/// The 16 built-in filters. Names follow the classic Instagram set and are
/// labels only; the parameters are hand-chosen compositions of 2–4 primitives.
/// `seed` only feeds the grain of the noisy filters.
pub fn builtin_filter_bank(seed: u64) -> Vec<FilterSpec> {
    use PrimitiveTransform::*;
    let noise_seed = |i: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
    let curve = |r: &[[f32; 2]], g: &[[f32; 2]], b: &[[f32; 2]]| {
        PrimitiveTransform::ToneCurve(crate::filter_bank::ToneCurve { red: r.to_vec(), green: g.to_vec(), blue: b.to_vec() })
    };
    let lin = [[0.0, 0.0], [1.0, 1.0]];
    let specs = vec![
        ("1977", vec![Contrast { factor: 1.1 }, Brightness { delta: 0.06 }, HueShift { degrees: -10.0 }, Saturation { factor: 1.3 }]),
        ("Amaro", vec![Brightness { delta: 0.08 }, Contrast { factor: 0.9 }, Saturation { factor: 1.25 }, HueShift { degrees: -4.0 }]),
        (
            "Brannan",
            vec![
                Contrast { factor: 1.4 },
                Saturation { factor: 0.7 },
                curve(&[[0.0, 0.05], [0.5, 0.58], [1.0, 1.0]], &lin, &[[0.0, 0.0], [0.5, 0.45], [1.0, 0.9]]),
            ],
        ),
        ("Clarendon", vec![Contrast { factor: 1.2 }, Saturation { factor: 1.35 }]),
        (
            "Gingham",
            vec![
                Brightness { delta: 0.05 },
                Contrast { factor: 0.85 },
                curve(&[[0.0, 0.1], [1.0, 0.95]], &[[0.0, 0.1], [1.0, 0.95]], &[[0.0, 0.12], [1.0, 0.92]]),
            ],
        ),
        ("He-Fe", vec![Contrast { factor: 1.3 }, Saturation { factor: 1.2 }, Vignette { strength: 0.4 }]),
        (
            "Hudson",
            vec![
                Brightness { delta: 0.08 },
                Contrast { factor: 1.2 },
                curve(&[[0.0, 0.0], [1.0, 0.9]], &lin, &[[0.0, 0.08], [0.5, 0.6], [1.0, 1.0]]),
            ],
        ),
        (
            "Lo-Fi",
            vec![
                Contrast { factor: 1.5 },
                Saturation { factor: 1.1 },
                Vignette { strength: 0.3 },
                AdditiveNoise { sigma: 0.02, seed: noise_seed(7) },
            ],
        ),
        ("Mayfair", vec![Brightness { delta: 0.04 }, Contrast { factor: 1.1 }, Saturation { factor: 1.1 }, Vignette { strength: 0.2 }]),
        (
            "Nashville",
            vec![
                curve(&[[0.0, 0.08], [0.5, 0.6], [1.0, 1.0]], &[[0.0, 0.02], [1.0, 0.95]], &[[0.0, 0.2], [1.0, 0.85]]),
                Contrast { factor: 0.9 },
                Brightness { delta: 0.05 },
            ],
        ),
        (
            "Perpetua",
            vec![
                curve(&[[0.0, 0.0], [1.0, 0.95]], &[[0.0, 0.04], [0.5, 0.55], [1.0, 1.0]], &[[0.0, 0.06], [1.0, 1.0]]),
                Saturation { factor: 1.1 },
            ],
        ),
        ("Sutro", vec![Contrast { factor: 1.2 }, Saturation { factor: 0.7 }, Brightness { delta: -0.06 }, Vignette { strength: 0.5 }]),
        ("Toaster", vec![Contrast { factor: 1.5 }, HueShift { degrees: 12.0 }, Brightness { delta: -0.04 }, Vignette { strength: 0.35 }]),
        ("Valencia", vec![Contrast { factor: 1.08 }, Brightness { delta: 0.08 }, HueShift { degrees: 6.0 }, Saturation { factor: 0.9 }]),
        ("Willow", vec![Saturation { factor: 0.0 }, Contrast { factor: 0.95 }, Brightness { delta: 0.04 }]),
        (
            "X-ProII",
            vec![
                Contrast { factor: 1.3 },
                curve(&[[0.0, 0.0], [0.25, 0.18], [0.75, 0.85], [1.0, 1.0]], &lin, &[[0.0, 0.15], [1.0, 0.85]]),
                Vignette { strength: 0.4 },
                GaussianBlur { sigma: 0.6 },
            ],
        ),
    ];
    specs
        .into_iter()
        .map(|(name, transforms)| FilterSpec { name: name.to_string(), transforms })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn single(t: PrimitiveTransform) -> FilterSpec {
        FilterSpec::new("test", vec![t]).unwrap()
    }

    #[test]
    fn brightness_shifts_constant_image() {
        let img = Image::filled(4, 4, [0.5; 3]);
        let out = apply_filter(&img, &single(PrimitiveTransform::Brightness { delta: 0.1 })).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn contrast_is_affine_about_half() {
        let img = Image::filled(1, 1, [0.3; 3]);
        let out = apply_filter(&img, &single(PrimitiveTransform::Contrast { factor: 2.0 })).unwrap();
        assert!((out.data()[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn identity_spec_is_bit_exact() {
        let img = noise_image(7, 5, 1);
        assert_eq!(apply_filter(&img, &FilterSpec::identity()).unwrap(), img);
    }

    #[test]
    fn brightness_clamps_at_one() {
        let img = Image::filled(2, 2, [0.9; 3]);
        let out = apply_filter(&img, &single(PrimitiveTransform::Brightness { delta: 0.2 })).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_saturation_is_grayscale() {
        let out = apply_filter(&noise_image(6, 6, 2), &single(PrimitiveTransform::Saturation { factor: 0.0 })).unwrap();
        for px in out.data().chunks(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
    }

    #[test]
    fn zero_sigma_blur_is_identity() {
        let img = noise_image(9, 4, 3);
        assert_eq!(apply_filter(&img, &single(PrimitiveTransform::GaussianBlur { sigma: 0.0 })).unwrap(), img);
    }

    #[test]
    fn blur_preserves_constant_image_with_reflect_padding() {
        let img = Image::filled(5, 5, [0.3, 0.6, 0.9]);
        let out = apply_filter(&img, &single(PrimitiveTransform::GaussianBlur { sigma: 2.5 })).unwrap();
        assert!(out.max_abs_diff_for_tests(&img) < 1e-6);
    }

    #[test]
    fn linear_tone_curve_is_identity() {
        let img = noise_image(8, 8, 4);
        let spec = single(PrimitiveTransform::ToneCurve(ToneCurve::uniform(vec![[0.0, 0.0], [1.0, 1.0]])));
        assert!(apply_filter(&img, &spec).unwrap().max_abs_diff_for_tests(&img) <= 1e-6);
    }

    #[test]
    fn hue_shift_full_turn_is_identity() {
        let img = noise_image(8, 8, 5);
        let out = apply_filter(&img, &single(PrimitiveTransform::HueShift { degrees: 360.0 })).unwrap();
        assert!(out.max_abs_diff_for_tests(&img) < 1e-5);
    }

    #[test]
    fn vignette_leaves_centre_and_darkens_corners() {
        let img = Image::filled(5, 5, [1.0; 3]);
        let out = apply_filter(&img, &single(PrimitiveTransform::Vignette { strength: 0.5 })).unwrap();
        assert_eq!(out.pixel(2, 2), [1.0; 3]);
        assert!((out.pixel(0, 0)[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let bad = [
            PrimitiveTransform::Contrast { factor: -1.0 },
            PrimitiveTransform::Vignette { strength: 1.5 },
            PrimitiveTransform::GaussianBlur { sigma: f32::NAN },
            PrimitiveTransform::ToneCurve(ToneCurve::uniform(vec![[0.5, 0.0], [0.5, 1.0]])),
            PrimitiveTransform::ToneCurve(ToneCurve::uniform(vec![[0.0, 0.8], [1.0, 0.2]])),
        ];
        for t in bad {
            assert!(matches!(FilterSpec::new("bad", vec![t]), Err(Error::Validation { .. })));
        }
        assert!(FilterSpec::new("empty", vec![]).is_err());
    }

    #[test]
    fn builtin_bank_has_sixteen_distinct_valid_filters() {
        let bank = builtin_filter_bank(0);
        assert_eq!(bank.len(), 16);
        assert_eq!(bank, builtin_filter_bank(0));
        let mut names: Vec<_> = bank.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 16);
        for (i, a) in bank.iter().enumerate() {
            a.validate().unwrap();
            assert!((2..=4).contains(&a.transforms.len()));
            for b in &bank[i + 1..] {
                assert_ne!(a.transforms, b.transforms);
            }
        }
    }

    #[test]
    fn bank_survives_text_round_trip() {
        let bank = builtin_filter_bank(3);
        assert_eq!(bank_from_toml(&bank_to_toml(&bank)).unwrap(), bank);
        let one = &bank[9];
        assert_eq!(&FilterSpec::from_toml(&one.to_toml()).unwrap(), one);
    }

    proptest! {
        #[test]
        fn bank_filters_are_deterministic_and_in_range(seed in 0u64..1000, which in 0usize..16) {
            let img = noise_image(12, 10, seed);
            let spec = &builtin_filter_bank(seed)[which];
            let a = apply_filter(&img, spec).unwrap();
            let b = apply_filter(&img, spec).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    impl Image {
        fn max_abs_diff_for_tests(&self, other: &Image) -> f32 {
            self.data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
        }
    }
}
