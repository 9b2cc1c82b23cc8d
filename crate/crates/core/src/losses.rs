//! Training objectives: image fidelity, message recovery (with the KOA term),
//! residual-specificity contrast, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the KOA decode term inside the message loss.
    pub koa: f32,
    pub image: f32,
    /// Weight of the residual-specificity term.
    pub rse: f32,
    pub temperature: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            koa: 1.0,
            image: 0.7,
            rse: 0.5,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f32| v.is_finite() && v >= 0.0;
        if !(ok(self.koa) && ok(self.image) && ok(self.rse)) || !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Mean squared error between host and watermarked images.
pub fn image_loss(g: &mut Graph, host: Var, watermarked: Var) -> Result<Var> {
    g.mse(host, watermarked)
}

/// Contrastive residual loss with one positive and one negative.
///
/// Operands are `[N, ...]` batches; each row is flattened for cosine
/// similarity and the per-row losses are averaged. The two-term softmax
/// cross-entropy is evaluated as `softplus((s_neg − s_pos)/τ)`.
pub fn rse_loss(g: &mut Graph, anchor: Var, positive: Var, negative: Var, temperature: f32) -> Result<Var> {
    let sp = g.cosine_rows(anchor, positive)?;
    let sn = g.cosine_rows(anchor, negative)?;
    let gap = g.sub(sn, sp)?;
    let z = g.scale(gap, 1.0 / temperature);
    let per_row = g.softplus(z);
    Ok(g.mean(per_row))
}

/// Scalar form of [`rse_loss`] from the two similarities.
pub fn rse_from_similarities(s_pos: f64, s_neg: f64, temperature: f64) -> f64 {
    softplus((s_neg - s_pos) / temperature)
}

/// MSE between true bits and soft decoder output on the tampered image.
pub fn koa_loss(g: &mut Graph, bits: Var, soft: Var) -> Result<Var> {
    if g.shape(bits) != g.shape(soft) {
        let (a, b) = (g.shape(bits), g.shape(soft));
        return Err(Error::MessageLength {
            expected: a.last().copied().unwrap_or(0),
            got: b.last().copied().unwrap_or(0),
        });
    }
    g.mse(bits, soft)
}

/// `MSE(bits, soft) + koa_weight · koa`; the KOA term is absent when `None`.
pub fn message_loss(g: &mut Graph, bits: Var, soft: Var, koa: Option<Var>, koa_weight: f32) -> Result<Var> {
    let base = koa_loss(g, bits, soft)?;
    match koa {
        Some(k) => {
            let wk = g.scale(k, koa_weight);
            g.add(base, wk)
        }
        None => Ok(base),
    }
}

/// `message + image_weight · image + rse_weight · rse`.
pub fn total_loss(g: &mut Graph, message: Var, image: Var, rse: Option<Var>, image_weight: f32, rse_weight: f32) -> Result<Var> {
    let wi = g.scale(image, image_weight);
    let mut total = g.add(message, wi)?;
    if let Some(r) = rse {
        let wr = g.scale(r, rse_weight);
        total = g.add(total, wr)?;
    }
    Ok(total)
}

/// Scalar form of the total with the given weights.
pub fn total_value(message: f64, image: f64, rse: f64, w: &LossWeights) -> f64 {
    message + w.image as f64 * image + w.rse as f64 * rse
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::{stream, Stream};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = stream(seed, Stream::Test, 3);
        Tensor::from_fn(shape, |_| r.random())
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item() as f64
    }

    #[test]
    fn image_loss_cases() {
        let mut g = Graph::new();
        let a = g.constant(random(&[4, 4, 3], 1));
        let l = image_loss(&mut g, a, a).unwrap();
        assert_eq!(scalar(&g, l), 0.0);

        let b = g.constant(Tensor::full(&[4, 4, 3], 0.2));
        let c = g.constant(Tensor::full(&[4, 4, 3], 0.3));
        let l = image_loss(&mut g, b, c).unwrap();
        assert!((scalar(&g, l) - 0.01).abs() < 1e-7);

        let (x, y) = (random(&[5, 3], 2), random(&[5, 3], 3));
        let want = x.data().iter().zip(y.data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>() / 15.0;
        let (vx, vy) = (g.constant(x), g.constant(y));
        let l = image_loss(&mut g, vx, vy).unwrap();
        assert!((scalar(&g, l) - want).abs() < 1e-7);
    }

    #[test]
    fn rse_symmetric_case_is_ln2() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let p = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let n = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let l = rse_loss(&mut g, a, p, n, 0.1).unwrap();
        assert!((scalar(&g, l) - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn rse_extreme_case() {
        let want = (-20.0f64).exp().ln_1p();
        assert!((rse_from_similarities(1.0, -1.0, 0.1) - want).abs() < 1e-8);
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 3], &[0.5, -1.0, 2.0]));
        let p = g.constant(t(&[1, 3], &[1.0, -2.0, 4.0]));
        let n = g.constant(t(&[1, 3], &[-0.5, 1.0, -2.0]));
        let l = rse_loss(&mut g, a, p, n, 0.1).unwrap();
        assert!((scalar(&g, l) - want).abs() < 1e-8);
    }

    #[test]
    fn rse_direct_formula() {
        let mut g = Graph::new();
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let p = g.constant(t(&[1, 2], &[s, s]));
        let n = g.constant(t(&[1, 2], &[0.0, 1.0]));
        let l = rse_loss(&mut g, a, p, n, 0.1).unwrap();
        let sp = std::f64::consts::FRAC_1_SQRT_2;
        let want = -((sp / 0.1).exp() / ((sp / 0.1).exp() + 1.0)).ln();
        assert!((scalar(&g, l) - want).abs() < 1e-7);
        assert!((want - 8.49e-4).abs() < 1e-6);
    }

    #[test]
    fn rse_monotone_in_similarities() {
        let grid: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
        for &sn in &grid {
            for w in grid.windows(2) {
                assert!(rse_from_similarities(w[1], sn, 0.1) < rse_from_similarities(w[0], sn, 0.1));
            }
        }
        for &sp in &grid {
            for w in grid.windows(2) {
                assert!(rse_from_similarities(sp, w[1], 0.1) > rse_from_similarities(sp, w[0], 0.1));
            }
        }
        for &a in &grid {
            for &b in &grid {
                assert!(rse_from_similarities(a, b, 0.1) > 0.0);
            }
        }
    }

    #[test]
    fn koa_loss_cases() {
        let mut g = Graph::new();
        let bits = g.constant(t(&[1, 4], &[1.0, 0.0, 1.0, 1.0]));
        let l = koa_loss(&mut g, bits, bits).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let ones = g.constant(Tensor::full(&[1, 4], 1.0));
        let half = g.constant(Tensor::full(&[1, 4], 0.5));
        let l = koa_loss(&mut g, ones, half).unwrap();
        assert!((scalar(&g, l) - 0.25).abs() < 1e-7);
        let short = g.constant(Tensor::full(&[1, 3], 0.5));
        assert!(matches!(koa_loss(&mut g, ones, short), Err(Error::MessageLength { .. })));

        let (x, y) = (random(&[3, 16], 4), random(&[3, 16], 5).map(|v| v.round()));
        let want = x.data().iter().zip(y.data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>() / 48.0;
        let (vy, vx) = (g.constant(y), g.constant(x));
        let l = koa_loss(&mut g, vy, vx).unwrap();
        assert!((scalar(&g, l) - want).abs() < 1e-7);
    }

    #[test]
    fn message_loss_cases() {
        let mut g = Graph::new();
        let bits = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = message_loss(&mut g, bits, bits, None, 1.0).unwrap();
        assert_eq!(scalar(&g, l), 0.0);

        // MSE 0.1 from a soft vector offset by sqrt(0.1).
        let off = 0.1f32.sqrt();
        let soft = g.constant(t(&[1, 2], &[1.0 - off, off]));
        let koa = g.constant(Tensor::scalar(0.2));
        let plain = message_loss(&mut g, bits, soft, None, 1.0).unwrap();
        let zero_w = message_loss(&mut g, bits, soft, Some(koa), 0.0).unwrap();
        assert_eq!(scalar(&g, plain), scalar(&g, zero_w));
        let l = message_loss(&mut g, bits, soft, Some(koa), 1.0).unwrap();
        assert!((scalar(&g, l) - 0.3).abs() < 1e-7);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert!((total_value(0.3, 0.01, 0.693, &w) - 0.6535).abs() < 1e-7);

        let mut g = Graph::new();
        let (m, i, r) = (
            g.constant(Tensor::scalar(0.3)),
            g.constant(Tensor::scalar(0.01)),
            g.constant(Tensor::scalar(0.693)),
        );
        let l = total_loss(&mut g, m, i, Some(r), w.image, w.rse).unwrap();
        assert!((scalar(&g, l) - 0.6535).abs() < 1e-7);

        let base = total_loss(&mut g, m, i, None, w.image, w.rse).unwrap();
        assert!((scalar(&g, base) - (0.3 + 0.7 * 0.01)).abs() < 1e-7);

        let mut r = stream(9, Stream::Test, 0);
        for _ in 0..20 {
            let (a, b, c): (f32, f32, f32) = (r.random(), r.random(), r.random());
            let (va, vb, vc) = (g.constant(Tensor::scalar(a)), g.constant(Tensor::scalar(b)), g.constant(Tensor::scalar(c)));
            let l = total_loss(&mut g, va, vb, Some(vc), w.image, w.rse).unwrap();
            let want = total_value(a as f64, b as f64, c as f64, &w);
            assert!((scalar(&g, l) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn ablation_identity_with_flags_off() {
        let host = random(&[2, 4, 4, 3], 10);
        let wm = random(&[2, 4, 4, 3], 11);
        let bits = random(&[2, 16], 12).map(|v| v.round());
        let soft = random(&[2, 16], 13);
        let mut g = Graph::new();
        let (h, w, b, s) = (g.constant(host.clone()), g.constant(wm.clone()), g.constant(bits.clone()), g.constant(soft.clone()));
        let img = image_loss(&mut g, h, w).unwrap();
        let mes = message_loss(&mut g, b, s, None, 1.0).unwrap();
        let total = total_loss(&mut g, mes, img, None, 0.7, 0.5).unwrap();
        let want = crate::autodiff::mse_f64(bits.data(), soft.data()) + 0.7 * crate::autodiff::mse_f64(host.data(), wm.data());
        assert!((scalar(&g, total) - want).abs() < 1e-7);
    }

    #[test]
    fn losses_pass_gradcheck() {
        for seed in 0..10 {
            let shapes = [&[2, 3, 3, 2][..], &[2, 3, 3, 2], &[2, 3, 3, 2]];
            let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| random(s, seed * 10 + i as u64).map(|v| v - 0.5)).collect();
            let res = gradcheck::check(&inputs, 1e-3, 64, seed, |g, v| rse_loss(g, v[0], v[1], v[2], 0.1)).unwrap();
            assert!(res.rel_err < 1e-2, "rse seed {seed}: {res:?}");

            let bits = random(&[2, 5], seed + 50).map(|v| v.round());
            let soft = random(&[2, 5], seed + 60);
            let koa = Tensor::scalar(0.3);
            let img = [random(&[2, 3, 3, 2], seed + 70), random(&[2, 3, 3, 2], seed + 80)];
            let res = gradcheck::check(&[soft, koa, img[0].clone(), img[1].clone()], 1e-3, 64, seed, |g, v| {
                let b = g.constant(bits.clone());
                let mes = message_loss(g, b, v[0], Some(v[1]), 1.0)?;
                let il = image_loss(g, v[2], v[3])?;
                let r = g.sum(v[1]);
                total_loss(g, mes, il, Some(r), 0.7, 0.5)
            })
            .unwrap();
            assert!(res.rel_err < 1e-2, "total seed {seed}: {res:?}");
        }
    }

    proptest! {
        #[test]
        fn rse_positive_and_finite(sp in -1.0f64..1.0, sn in -1.0f64..1.0, tau in 0.01f64..2.0) {
            let v = rse_from_similarities(sp, sn, tau);
            prop_assert!(v > 0.0 && v.is_finite());
        }
    }
}
