//! Channel distortions and the training-time KOA tamper.
//!
//! Every distortion has a tensor form (evaluation) and, where it makes sense,
//! a graph form (training). Inputs are `[H,W,C]` or `[N,H,W,C]` in `[0, 1]`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{image_dims, separable_filter, ClampGrad, Graph, Var};
use crate::error::{shape_mismatch, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distortion {
    Identity,
    Jpeg {
        quality: u32,
    },
    GaussianNoise {
        mean: f32,
        std: f32,
    },
    SaltPepper {
        p: f32,
        /// Allow use in training with an identity gradient (experimental).
        #[serde(default)]
        train_differentiable: bool,
    },
    GaussianBlur {
        radius: usize,
    },
    MedianBlur {
        k: usize,
        #[serde(default)]
        train_differentiable: bool,
    },
}

impl Distortion {
    pub fn gaussian_noise(mean: f32, std: f32) -> Self {
        Self::GaussianNoise { mean, std }
    }

    pub fn salt_pepper(p: f32) -> Self {
        Self::SaltPepper {
            p,
            train_differentiable: false,
        }
    }

    pub fn median_blur(k: usize) -> Self {
        Self::MedianBlur {
            k,
            train_differentiable: false,
        }
    }

    /// The standard evaluation suite.
    pub fn eval_suite() -> Vec<Self> {
        vec![
            Self::Jpeg { quality: 25 },
            Self::gaussian_noise(0.0, 0.05),
            Self::salt_pepper(0.05),
            Self::GaussianBlur { radius: 4 },
            Self::median_blur(7),
        ]
    }

    /// Short label used in reports, e.g. `jpeg_q25`.
    pub fn label(&self) -> String {
        match self {
            Self::Identity => "identity".into(),
            Self::Jpeg { quality } => format!("jpeg_q{quality}"),
            Self::GaussianNoise { mean, std } if *mean == 0.0 => format!("gaussian_noise_s{std}"),
            Self::GaussianNoise { mean, std } => format!("gaussian_noise_m{mean}_s{std}"),
            Self::SaltPepper { p, .. } => format!("salt_pepper_p{p}"),
            Self::GaussianBlur { radius } => format!("gaussian_blur_r{radius}"),
            Self::MedianBlur { k, .. } => format!("median_blur_k{k}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match *self {
            Self::Jpeg { quality } if !(1..=100).contains(&quality) => bad(format!("jpeg quality {quality} outside 1..=100")),
            Self::GaussianNoise { std, .. } if std < 0.0 || !std.is_finite() => bad(format!("noise std {std} must be >= 0")),
            Self::SaltPepper { p, .. } if !(0.0..=1.0).contains(&p) => bad(format!("salt-and-pepper p {p} outside [0, 1]")),
            Self::GaussianBlur { radius: 0 } => bad("blur radius must be >= 1".into()),
            Self::MedianBlur { k, .. } if k % 2 == 0 => bad(format!("median kernel size {k} must be odd")),
            _ => Ok(()),
        }
    }

    /// Whether the graph form carries a gradient.
    pub fn trainable(&self) -> bool {
        match self {
            Self::SaltPepper { train_differentiable, .. } | Self::MedianBlur { train_differentiable, .. } => {
                *train_differentiable
            }
            _ => true,
        }
    }

    /// Apply to an image tensor.
    pub fn apply(&self, img: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        self.validate()?;
        match *self {
            Self::Identity => Ok(img.clone()),
            Self::Jpeg { quality } => jpeg_approx(img, quality),
            Self::GaussianNoise { mean, std } => Ok(img.add(&gaussian_sample(img.shape(), mean, std, rng))?.clamp01()),
            Self::SaltPepper { p, .. } => salt_pepper(img, p, rng),
            Self::GaussianBlur { radius } => gaussian_blur(img, radius),
            Self::MedianBlur { k, .. } => median_blur(img, k),
        }
    }

    /// Apply on a graph. Noise is drawn from `rng` and held constant.
    pub fn apply_graph(&self, g: &mut Graph, x: Var, rng: &mut Rng) -> Result<Var> {
        self.validate()?;
        if !self.trainable() {
            return Err(Error::InvalidArgument(format!(
                "{} is evaluation-only; set train_differentiable to train through it",
                self.label()
            )));
        }
        match *self {
            Self::Identity => Ok(x),
            Self::GaussianNoise { mean, std } => {
                let n = g.constant(gaussian_sample(g.shape(x), mean, std, rng));
                let y = g.add(x, n)?;
                Ok(g.clamp01(y, ClampGrad::StraightThrough))
            }
            Self::GaussianBlur { radius } => g.blur(x, &gaussian_taps(radius)),
            // Rounding is the only non-linear step; with an identity gradient
            // through it the whole orthonormal pipeline has identity Jacobian.
            Self::Jpeg { .. } | Self::SaltPepper { .. } | Self::MedianBlur { .. } => {
                let y = self.apply(g.value(x), rng)?;
                g.straight_through(x, |_| y)
            }
        }
    }
}

/// Uniform choice of one distortion for a training step.
pub fn sample_combined<'a>(specs: &'a [Distortion], rng: &mut Rng) -> Result<&'a Distortion> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("combined noise layer needs at least one distortion".into()));
    }
    Ok(&specs[rng.random_range(0..specs.len())])
}

/// Default training channel.
pub fn default_channel() -> Vec<Distortion> {
    vec![Distortion::gaussian_noise(0.0, 0.05)]
}

fn gaussian_sample(shape: &[usize], mean: f32, std: f32, rng: &mut Rng) -> Tensor {
    if std == 0.0 {
        return Tensor::full(shape, mean);
    }
    let normal = Normal::new(mean, std).expect("validated std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Each pixel (all channels together) is replaced with probability `p` by
/// black or white with equal odds.
pub fn salt_pepper(img: &Tensor, p: f32, rng: &mut Rng) -> Result<Tensor> {
    let (_, _, _, c) = image_dims(img.shape())?;
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(c) {
        if rng.random::<f32>() < p {
            let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            px.fill(v);
        }
    }
    Ok(out)
}

/// Normalized Gaussian taps of length `2r+1` with standard deviation `r/2`.
pub fn gaussian_taps(radius: usize) -> Vec<f32> {
    let sigma = radius as f64 / 2.0;
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

pub fn gaussian_blur(img: &Tensor, radius: usize) -> Result<Tensor> {
    if radius == 0 {
        return Err(Error::InvalidArgument("blur radius must be >= 1".into()));
    }
    let (n, h, w, c) = image_dims(img.shape())?;
    let out = separable_filter(img.data(), n, h, w, c, &gaussian_taps(radius));
    Tensor::new(img.shape().to_vec(), out)
}

/// Per-channel `k×k` median with edge replication.
pub fn median_blur(img: &Tensor, k: usize) -> Result<Tensor> {
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("median kernel size {k} must be odd")));
    }
    let (n, h, w, c) = image_dims(img.shape())?;
    let r = (k / 2) as isize;
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    let mut window = Vec::with_capacity(k * k);
    let at = |i: isize, len: usize| i.clamp(0, len as isize - 1) as usize;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    window.clear();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let sy = at(y as isize + dy, h);
                            let sx = at(x as isize + dx, w);
                            window.push(src[((b * h + sy) * w + sx) * c + ch]);
                        }
                    }
                    let mid = window.len() / 2;
                    let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
                    out[((b * h + y) * w + x) * c + ch] = *m;
                }
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

const LUMA_TABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance quantization table scaled with the usual quality convention.
pub fn quant_table(quality: u32) -> [f32; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0f32; 64];
    for (dst, &base) in t.iter_mut().zip(&LUMA_TABLE) {
        *dst = ((base * scale + 50) / 100).clamp(1, 255) as f32;
    }
    t
}

fn dct_matrix() -> [[f32; 8]; 8] {
    let mut m = [[0.0f32; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = (a * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos()) as f32;
        }
    }
    m
}

/// Block DCT, quantization, rounding, dequantization and inverse DCT on every
/// channel, then clamp. Non-multiple-of-8 images are replicate-padded and
/// cropped back.
pub fn jpeg_approx(img: &Tensor, quality: u32) -> Result<Tensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("jpeg quality {quality} outside 1..=100")));
    }
    let (n, h, w, c) = image_dims(img.shape())?;
    let (hp, wp) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let q = quant_table(quality);
    let d = dct_matrix();
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    let mut block = [[0.0f32; 8]; 8];
    let mut tmp = [[0.0f32; 8]; 8];
    for b in 0..n {
        for ch in 0..c {
            for by in (0..hp).step_by(8) {
                for bx in (0..wp).step_by(8) {
                    for (i, row) in block.iter_mut().enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            let y = (by + i).min(h - 1);
                            let x = (bx + j).min(w - 1);
                            *v = src[((b * h + y) * w + x) * c + ch] * 255.0 - 128.0;
                        }
                    }
                    transform(&d, &block, &mut tmp, false);
                    for (u, row) in tmp.iter_mut().enumerate() {
                        for (v, coef) in row.iter_mut().enumerate() {
                            let step = q[u * 8 + v];
                            *coef = (*coef / step).round() * step;
                        }
                    }
                    transform(&d, &tmp, &mut block, true);
                    for (i, row) in block.iter().enumerate() {
                        for (j, v) in row.iter().enumerate() {
                            let (y, x) = (by + i, bx + j);
                            if y < h && x < w {
                                out[((b * h + y) * w + x) * c + ch] = ((v + 128.0) / 255.0).clamp(0.0, 1.0);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// `D·X·Dᵀ` (forward) or `Dᵀ·X·D` (inverse).
fn transform(d: &[[f32; 8]; 8], x: &[[f32; 8]; 8], out: &mut [[f32; 8]; 8], inverse: bool) {
    let m = |i: usize, k: usize| if inverse { d[k][i] } else { d[i][k] };
    let mut t = [[0.0f32; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            t[i][j] = (0..8).map(|k| m(i, k) * x[k][j]).sum();
        }
    }
    for i in 0..8 {
        for j in 0..8 {
            out[i][j] = (0..8).map(|k| t[i][k] * m(j, k)).sum();
        }
    }
}

/// Subtract a donor residual from a watermarked target, clamped to `[0, 1]`
/// unless `clamped` is false.
pub fn koa_tamper(target: &Tensor, donor_residual: &Tensor, clamped: bool) -> Result<Tensor> {
    if target.shape() != donor_residual.shape() {
        return Err(shape_mismatch("koa_tamper", target.shape(), donor_residual.shape()));
    }
    let raw = target.sub(donor_residual)?;
    Ok(if clamped { raw.clamp01() } else { raw })
}

/// Graph form of [`koa_tamper`], differentiable in both operands.
pub fn koa_tamper_graph(g: &mut Graph, target: Var, donor_residual: Var, clamp: Option<ClampGrad>) -> Result<Var> {
    let raw = g.sub(target, donor_residual)?;
    Ok(match clamp {
        Some(mode) => g.clamp01(raw, mode),
        None => raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn rng(i: u64) -> crate::rng::Rng {
        stream(7, Stream::Test, i)
    }

    fn random_img(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(1000 + seed);
        Tensor::from_fn(shape, |_| r.random())
    }

    #[test]
    fn gaussian_noise_cases() {
        let img = random_img(&[8, 8, 3], 0);
        let same = Distortion::gaussian_noise(0.0, 0.0).apply(&img, &mut rng(0)).unwrap();
        assert_eq!(same, img);

        let gray = Tensor::full(&[64, 64, 3], 0.5);
        let noisy = Distortion::gaussian_noise(0.0, 0.05).apply(&gray, &mut rng(1)).unwrap();
        let d: Vec<f64> = noisy.sub(&gray).unwrap().data().iter().map(|&v| v as f64).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((std - 0.05).abs() < 0.005, "std {std}");

        let shifted = Distortion::gaussian_noise(0.1, 0.0).apply(&gray, &mut rng(2)).unwrap();
        assert!(shifted.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn salt_pepper_cases() {
        let img = random_img(&[64, 64, 3], 1);
        assert_eq!(salt_pepper(&img, 0.0, &mut rng(0)).unwrap(), img);
        let all = salt_pepper(&img, 1.0, &mut rng(1)).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // 4096 pixels × 3 channels = 12288 values.
        let some = salt_pepper(&img, 0.05, &mut rng(2)).unwrap();
        let changed = some.data().iter().zip(img.data()).filter(|(a, b)| a != b).count();
        let frac = changed as f64 / img.len() as f64;
        assert!((frac - 0.05).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn blur_constant_and_impulse() {
        let flat = Tensor::full(&[16, 16, 3], 0.3);
        let b = gaussian_blur(&flat, 4).unwrap();
        assert!(b.max_abs_diff(&flat) < 1e-6);

        let mut imp = Tensor::zeros(&[15, 15, 1]);
        imp.data_mut()[7 * 15 + 7] = 1.0;
        let out = gaussian_blur(&imp, 2).unwrap();
        let taps = gaussian_taps(2);
        for y in 0..15 {
            for x in 0..15 {
                let (dy, dx) = (y as isize - 7, x as isize - 7);
                let want = if dy.abs() <= 2 && dx.abs() <= 2 {
                    taps[(dy + 2) as usize] * taps[(dx + 2) as usize]
                } else {
                    0.0
                };
                assert!((out.data()[y * 15 + x] - want).abs() < 1e-7);
            }
        }
    }

    /// Direct 2-D convolution with the outer-product kernel and clamped indices.
    fn blur_oracle(img: &Tensor, radius: usize) -> Vec<f32> {
        let [h, w, c] = img.shape()[..] else { panic!() };
        let taps: Vec<f64> = gaussian_taps(radius).iter().map(|&v| v as f64).collect();
        let r = radius as isize;
        let mut out = vec![0.0f32; img.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            let wt = taps[(dy + r) as usize] * taps[(dx + r) as usize];
                            acc += wt * img.data()[(sy * w + sx) * c + ch] as f64;
                        }
                    }
                    out[(y * w + x) * c + ch] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let img = random_img(&[12, 10, 3], 2);
        let out = gaussian_blur(&img, 4).unwrap();
        let want = blur_oracle(&img, 4);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn median_cases() {
        let flat = Tensor::full(&[9, 9, 3], 0.42);
        assert_eq!(median_blur(&flat, 7).unwrap(), flat);
        assert!(median_blur(&flat, 4).is_err());
        assert!(Distortion::median_blur(6).apply(&flat, &mut rng(0)).is_err());

        let vals = [0.2, 0.3, 0.1, 0.25, 9.0, 0.15, 0.35, 0.05, 0.4];
        let patch = Tensor::new(vec![3, 3, 1], vals.to_vec()).unwrap();
        let out = median_blur(&patch, 3).unwrap();
        let mut sorted = vals.to_vec();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(out.data()[4], sorted[4]);
        assert!(out.data().iter().all(|&v| v < 9.0));
    }

    #[test]
    fn jpeg_constant_and_lossy() {
        let flat = Tensor::full(&[16, 16, 3], 0.37);
        let out = jpeg_approx(&flat, 100).unwrap();
        assert!(out.max_abs_diff(&flat) < 1e-3);

        let tex = random_img(&[16, 16, 3], 3);
        let lossy = jpeg_approx(&tex, 25).unwrap();
        let mae = lossy.sub(&tex).unwrap().data().iter().map(|v| v.abs() as f64).sum::<f64>() / tex.len() as f64;
        assert!(mae > 0.0);

        let odd = random_img(&[13, 11, 3], 4);
        assert_eq!(jpeg_approx(&odd, 50).unwrap().shape(), &[13, 11, 3]);
    }

    /// Textbook 2-D DCT-II with explicit quadruple sums, in f64.
    fn jpeg_block_oracle(block: &[f64; 64], quality: u32) -> [f64; 64] {
        let q = quant_table(quality);
        let alpha = |u: usize| if u == 0 { (0.125f64).sqrt() } else { 0.5 };
        let pi = std::f64::consts::PI;
        let cosf = |x: usize, u: usize| ((2 * x + 1) as f64 * u as f64 * pi / 16.0).cos();
        let shifted: Vec<f64> = block.iter().map(|v| v * 255.0 - 128.0).collect();
        let mut coef = [0.0f64; 64];
        for u in 0..8 {
            for v in 0..8 {
                let mut s = 0.0;
                for x in 0..8 {
                    for y in 0..8 {
                        s += shifted[x * 8 + y] * cosf(x, u) * cosf(y, v);
                    }
                }
                let c = alpha(u) * alpha(v) * s;
                let step = q[u * 8 + v] as f64;
                coef[u * 8 + v] = (c / step).round() * step;
            }
        }
        let mut out = [0.0f64; 64];
        for x in 0..8 {
            for y in 0..8 {
                let mut s = 0.0;
                for u in 0..8 {
                    for v in 0..8 {
                        s += alpha(u) * alpha(v) * coef[u * 8 + v] * cosf(x, u) * cosf(y, v);
                    }
                }
                out[x * 8 + y] = ((s + 128.0) / 255.0).clamp(0.0, 1.0);
            }
        }
        out
    }

    #[test]
    fn jpeg_block_matches_scalar_dct() {
        // Smooth content keeps quantized coefficients away from rounding ties.
        let img = Tensor::from_fn(&[8, 8, 1], |i| {
            let (y, x) = ((i / 8) as f32, (i % 8) as f32);
            0.5 + 0.3 * (0.4 * x + 0.2 * y).sin() + 0.013 * (i % 5) as f32
        });
        let block: [f64; 64] = std::array::from_fn(|i| img.data()[i] as f64);
        for q in [25, 50, 90] {
            let out = jpeg_approx(&img, q).unwrap();
            let want = jpeg_block_oracle(&block, q);
            for (a, b) in out.data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-4, "q={q}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sample_combined_cases() {
        let one = [Distortion::GaussianBlur { radius: 1 }];
        for i in 0..20 {
            assert_eq!(sample_combined(&one, &mut rng(i)).unwrap(), &one[0]);
        }
        assert!(sample_combined(&[], &mut rng(0)).is_err());

        let two = [Distortion::Identity, Distortion::Jpeg { quality: 50 }];
        let mut r = rng(5);
        let hits = (0..10_000)
            .filter(|_| *sample_combined(&two, &mut r).unwrap() == Distortion::Identity)
            .count();
        assert!((hits as f64 / 10_000.0 - 0.5).abs() < 0.02);

        assert_eq!(default_channel(), vec![Distortion::gaussian_noise(0.0, 0.05)]);
    }

    #[test]
    fn koa_tamper_cases() {
        let target = random_img(&[8, 8, 3], 5);
        let zero = Tensor::zeros(&[8, 8, 3]);
        assert_eq!(koa_tamper(&target, &zero, true).unwrap(), target);

        let host = Tensor::from_fn(&[8, 8, 3], |i| 0.2 + 0.6 * ((i * 37 % 101) as f32 / 101.0));
        let r = Tensor::from_fn(&[8, 8, 3], |i| 0.05 * ((i % 7) as f32 / 7.0 - 0.5));
        let wm = host.add(&r).unwrap();
        let own = wm.sub(&host).unwrap();
        let back = koa_tamper(&wm, &own, false).unwrap();
        assert!(back.max_abs_diff(&host) <= 1e-6);

        let donor = random_img(&[8, 8, 3], 6).scale(0.5);
        let out = koa_tamper(&target, &donor, true).unwrap();
        for ((o, t), d) in out.data().iter().zip(target.data()).zip(donor.data()) {
            assert_eq!(*o, (t - d).clamp(0.0, 1.0));
        }
        assert!(koa_tamper(&target, &Tensor::zeros(&[4, 4, 3]), true).is_err());
    }

    #[test]
    fn eval_only_kinds_refuse_graph_use() {
        let mut g = Graph::new();
        let x = g.variable(random_img(&[8, 8, 3], 7));
        assert!(Distortion::salt_pepper(0.05).apply_graph(&mut g, x, &mut rng(0)).is_err());
        let ste = Distortion::MedianBlur {
            k: 3,
            train_differentiable: true,
        };
        let y = ste.apply_graph(&mut g, x, &mut rng(0)).unwrap();
        assert_eq!(g.value(y), &median_blur(g.value(x), 3).unwrap());
    }

    #[test]
    fn differentiable_distortions_pass_gradcheck() {
        for seed in 0..10 {
            // Keep pixels away from the clamp boundaries.
            let x = random_img(&[6, 6, 2], 100 + seed).map(|v| 0.2 + 0.6 * v);
            let wts = random_img(&[6, 6, 2], 200 + seed);
            for d in [
                Distortion::gaussian_noise(0.0, 0.02),
                Distortion::GaussianBlur { radius: 2 },
            ] {
                let res = gradcheck::check(&[x.clone()], 1e-3, 72, seed, |g, v| {
                    let y = d.apply_graph(g, v[0], &mut rng(seed))?;
                    let w = g.constant(wts.clone());
                    let p = g.mul(y, w)?;
                    let sq = g.mul(p, p)?;
                    Ok(g.sum(sq))
                })
                .unwrap();
                assert!(res.rel_err < 1e-2, "{} seed {seed}: {res:?}", d.label());
            }
            let t = random_img(&[6, 6, 2], 300 + seed).map(|v| 0.3 + 0.4 * v);
            let r = random_img(&[6, 6, 2], 400 + seed).map(|v| 0.1 * (v - 0.5));
            let res = gradcheck::check(&[t, r], 1e-3, 72, seed, |g, v| {
                let y = koa_tamper_graph(g, v[0], v[1], Some(ClampGrad::Exact))?;
                let sq = g.mul(y, y)?;
                Ok(g.mean(sq))
            })
            .unwrap();
            assert!(res.rel_err < 1e-2, "tamper seed {seed}: {res:?}");
        }
    }

    proptest! {
        #[test]
        fn outputs_stay_in_unit_range(seed in 0u64..1000, which in 0usize..5) {
            let img = random_img(&[9, 10, 3], seed);
            let d = &Distortion::eval_suite()[which];
            let out = d.apply(&img, &mut rng(seed)).unwrap();
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn same_stream_same_output(seed in 0u64..1000, which in 0usize..5) {
            let img = random_img(&[8, 8, 3], seed);
            let d = &Distortion::eval_suite()[which];
            let a = d.apply(&img, &mut rng(seed)).unwrap();
            let b = d.apply(&img, &mut rng(seed)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn clamped_tamper_in_range(seed in 0u64..1000) {
            let t = random_img(&[4, 4, 3], seed);
            let d = random_img(&[4, 4, 3], seed + 1).map(|v| 2.0 * v - 1.0);
            let out = koa_tamper(&t, &d, true).unwrap();
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
