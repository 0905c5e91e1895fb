//! Image-similarity metrics (PSNR, luma SSIM, CIEDE2000), residual maps and
//! evaluation reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_bank::luma;
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

fn widen(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

/// PSNR in dB for unit dynamic range over raw values; `+∞` when identical.
pub fn psnr_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// PSNR over all RGB values.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    psnr_values(&widen(a), &widen(b))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h×w` planes, Gaussian-weighted windows, valid region.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::Shape("plane sizes disagree with dimensions".into()));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&prod(a, a), w, h, &k);
    let bb = filter_valid(&prod(b, b), w, h, &k);
    let ab = filter_valid(&prod(a, b), w, h, &k);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

fn luma_plane(img: &Image) -> Vec<f64> {
    img.data().chunks(3).map(|p| luma(p[0], p[1], p[2]) as f64).collect()
}

/// SSIM on Rec.601 luma.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    ssim_plane(&luma_plane(a), &luma_plane(b), a.width(), a.height())
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

/// sRGB in `[0, 1]` to CIELAB (D65).
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let xyz = [
        0.4124564 * r + 0.3575761 * g + 0.1804375 * b,
        0.2126729 * r + 0.7151522 * g + 0.0721750 * b,
        0.0193339 * r + 0.1191920 * g + 0.9503041 * b,
    ];
    let delta: f64 = 6.0 / 29.0;
    let f = |t: f64| if t > delta.powi(3) { t.cbrt() } else { t / (3.0 * delta * delta) + 4.0 / 29.0 };
    let [fx, fy, fz] = [f(xyz[0] / D65_WHITE[0]), f(xyz[1] / D65_WHITE[1]), f(xyz[2] / D65_WHITE[2])];
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn hue_deg(b: f64, a: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        0.0
    } else {
        b.atan2(a).to_degrees().rem_euclid(360.0)
    }
}

/// CIEDE2000 colour difference with `kL = kC = kH = 1`.
pub fn ciede2000(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    let [l1, a1, b1] = lab1;
    let [l2, a2, b2] = lab2;
    let pow25_7 = 25f64.powi(7);
    let c_bar = ((a1 * a1 + b1 * b1).sqrt() + (a2 * a2 + b2 * b2).sqrt()) / 2.0;
    let g = 0.5 * (1.0 - (c_bar.powi(7) / (c_bar.powi(7) + pow25_7)).sqrt());
    let (a1p, a2p) = ((1.0 + g) * a1, (1.0 + g) * a2);
    let (c1p, c2p) = ((a1p * a1p + b1 * b1).sqrt(), (a2p * a2p + b2 * b2).sqrt());
    let (h1p, h2p) = (hue_deg(b1, a1p), hue_deg(b2, a2p));

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let chroma_zero = c1p * c2p == 0.0;
    let dh = if chroma_zero {
        0.0
    } else {
        let d = h2p - h1p;
        if d.abs() <= 180.0 {
            d
        } else if d > 180.0 {
            d - 360.0
        } else {
            d + 360.0
        }
    };
    let dh_big = 2.0 * (c1p * c2p).sqrt() * (dh.to_radians() / 2.0).sin();

    let l_bar = (l1 + l2) / 2.0;
    let cp_bar = (c1p + c2p) / 2.0;
    let h_bar = if chroma_zero {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        (h1p + h2p) / 2.0
    } else if h1p + h2p < 360.0 {
        (h1p + h2p + 360.0) / 2.0
    } else {
        (h1p + h2p - 360.0) / 2.0
    };
    let cosd = |deg: f64| deg.to_radians().cos();
    let t = 1.0 - 0.17 * cosd(h_bar - 30.0) + 0.24 * cosd(2.0 * h_bar) + 0.32 * cosd(3.0 * h_bar + 6.0)
        - 0.20 * cosd(4.0 * h_bar - 63.0);
    let d_theta = 30.0 * (-((h_bar - 275.0) / 25.0).powi(2)).exp();
    let r_c = 2.0 * (cp_bar.powi(7) / (cp_bar.powi(7) + pow25_7)).sqrt();
    let s_l = 1.0 + 0.015 * (l_bar - 50.0).powi(2) / (20.0 + (l_bar - 50.0).powi(2)).sqrt();
    let s_c = 1.0 + 0.045 * cp_bar;
    let s_h = 1.0 + 0.015 * cp_bar * t;
    let r_t = -(2.0 * d_theta).to_radians().sin() * r_c;
    let (tl, tc, th) = (dl / s_l, dc / s_c, dh_big / s_h);
    (tl * tl + tc * tc + th * th + r_t * tc * th).sqrt()
}

/// Mean per-pixel CIEDE2000 between two sRGB images.
pub fn delta_e_2000(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let lab = |p: &[f32]| srgb_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]);
    let total: f64 = a.data().chunks(3).zip(b.data().chunks(3)).map(|(p, q)| ciede2000(lab(p), lab(q))).sum();
    Ok(total / (a.width() * a.height()) as f64)
}

/// `|output − original|` per channel, rescaled so the largest entry is 1.
pub fn residual_image(output: &Image, original: &Image) -> Result<Image> {
    same_shape(output, original)?;
    let diff: Vec<f32> = output.data().iter().zip(original.data()).map(|(a, b)| (a - b).abs()).collect();
    let max = diff.iter().copied().fold(0.0f32, f32::max);
    let data = if max > 0.0 { diff.iter().map(|d| d / max).collect() } else { diff };
    Image::new(output.width(), output.height(), data)
}

/// Hook for learned perceptual distances (such as LPIPS) that need weights
/// this crate does not ship.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub source_id: usize,
    pub filter_id: usize,
    pub filter_name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

impl MetricMeans {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a EvalRow>) -> Self {
        let mut m = MetricMeans { count: 0, psnr: 0.0, ssim: 0.0, delta_e: 0.0 };
        for r in rows {
            m.count += 1;
            m.psnr += r.psnr;
            m.ssim += r.ssim;
            m.delta_e += r.delta_e;
        }
        if m.count > 0 {
            let n = m.count as f64;
            m.psnr /= n;
            m.ssim /= n;
            m.delta_e /= n;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub filter_id: usize,
    pub filter_name: String,
    pub means: MetricMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub per_filter: Vec<FilterSummary>,
    pub overall: MetricMeans,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut ids: Vec<(usize, String)> = rows.iter().map(|r| (r.filter_id, r.filter_name.clone())).collect();
        ids.sort();
        ids.dedup();
        let per_filter = ids
            .into_iter()
            .map(|(filter_id, filter_name)| FilterSummary {
                filter_id,
                filter_name,
                means: MetricMeans::of(rows.iter().filter(|r| r.filter_id == filter_id)),
            })
            .collect();
        let overall = MetricMeans::of(&rows);
        Self { rows, per_filter, overall }
    }

    /// One line per pair; `inf` marks identical images.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source_id,filter_id,filter_name,psnr,ssim,delta_e\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.source_id, r.filter_id, r.filter_name, r.psnr, r.ssim, r.delta_e
            ));
        }
        out
    }

    /// Infinite PSNR values serialize as `null`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CIEDE2000_PAIRS: &str = include_str!("../tests/data/ciede2000_pairs.txt");

    fn pattern(w: usize, h: usize, phase: f32) -> Image {
        Image::from_fn(w, h, |y, x| {
            let v = ((x as f32 * 0.7 + phase).sin() * (y as f32 * 0.3).cos()) * 0.4 + 0.5;
            [v, 1.0 - v, 0.5 * v]
        })
    }

    #[test]
    fn psnr_examples() {
        let a = pattern(16, 16, 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let base: Vec<f64> = (0..300).map(|i| (i % 7) as f64 / 10.0).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + 0.1).collect();
        assert!((psnr_values(&base, &shifted).unwrap() - 20.0).abs() < 1e-12);
        let b = pattern(16, 16, 0.3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &pattern(8, 16, 0.0)).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_constant_oracle() {
        let a = pattern(24, 20, 0.0);
        let b = pattern(24, 20, 1.1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &b).unwrap() < 1.0);
        let (lo, hi) = (0.2f64, 0.8f64);
        let got = ssim_plane(&[lo; 256], &[hi; 256], 16, 16).unwrap();
        let expect = (2.0 * lo * hi + SSIM_C1) / (lo * lo + hi * hi + SSIM_C1);
        assert!((got - expect).abs() < 1e-9);
        assert!(ssim(&Image::filled(8, 8, [0.1; 3]), &Image::filled(8, 8, [0.1; 3])).is_err());
    }

    #[test]
    fn ciede2000_reference_pairs() {
        let mut n = 0;
        for line in CIEDE2000_PAIRS.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
            let d = ciede2000([v[0], v[1], v[2]], [v[3], v[4], v[5]]);
            assert!((d - v[6]).abs() < 1e-4, "{line}: {d}");
            assert!((ciede2000([v[3], v[4], v[5]], [v[0], v[1], v[2]]) - v[6]).abs() < 1e-4);
            n += 1;
        }
        assert_eq!(n, 34);
    }

    #[test]
    fn lab_of_white_and_black() {
        let w = srgb_to_lab([1.0; 3]);
        assert!((w[0] - 100.0).abs() < 1e-3 && w[1].abs() < 1e-2 && w[2].abs() < 1e-2);
        assert!(srgb_to_lab([0.0; 3]).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn delta_e_identity_and_hue_rotation() {
        let a = Image::filled(4, 4, [0.9, 0.1, 0.1]);
        assert_eq!(delta_e_2000(&a, &a).unwrap(), 0.0);
        let rotated = Image::filled(4, 4, [0.1, 0.9, 0.1]);
        assert!(delta_e_2000(&a, &rotated).unwrap() > 0.0);
    }

    #[test]
    fn residual_examples() {
        let a = pattern(5, 5, 0.0);
        assert!(residual_image(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let mut b = a.clone();
        let p = b.pixel(2, 3);
        b.set_pixel(2, 3, [p[0] + 0.25, p[1], p[2]]);
        let r = residual_image(&b, &a).unwrap();
        assert_eq!(r.pixel(2, 3)[0], 1.0);
        assert_eq!(r.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn report_aggregates() {
        let rows: Vec<EvalRow> = (0..6)
            .map(|i| EvalRow {
                source_id: i / 2,
                filter_id: i % 2,
                filter_name: format!("f{}", i % 2),
                psnr: 20.0 + i as f64,
                ssim: 0.5,
                delta_e: i as f64,
            })
            .collect();
        let rep = EvalReport::from_rows(rows);
        assert_eq!(rep.per_filter.len(), 2);
        assert!((rep.overall.psnr - 22.5).abs() < 1e-9);
        assert_eq!(rep.to_csv().lines().count(), 7);
        let back: EvalReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }

    proptest! {
        #[test]
        fn metric_ranges(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rand_img = || Image::from_fn(12, 12, |_, _| [r.random(), r.random(), r.random()]);
            let (a, b) = (rand_img(), rand_img());
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!(delta_e_2000(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(residual_image(&a, &b).unwrap(), residual_image(&b, &a).unwrap());
        }
    }
}
