//! Bit accuracy, PSNR, SSIM, residual similarity and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack_sweep, MessageMode, SweepRow};
use crate::codec::{threshold, Codec, Message};
use crate::distortion::Distortion;
use crate::error::{shape_mismatch, Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Fraction of positions where two bit strings agree.
pub fn bit_accuracy(a: &Message, b: &Message) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::MessageLength {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("bit accuracy of empty messages".into()));
    }
    let hits = a.bits().iter().zip(b.bits()).filter(|(x, y)| x == y).count();
    Ok(hits as f64 / a.len() as f64)
}

/// PSNR cap returned for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch("psnr", a.shape(), b.shape()));
    }
    let mse = crate::autodiff::mse_f64(a.data(), b.data());
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn luma(img: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let s = img.shape();
    let [h, w, c] = s[..] else {
        return Err(Error::InvalidArgument(format!("ssim expects an [H,W,C] image, got {s:?}")));
    };
    let d = img.data();
    let y = match c {
        1 => d.iter().map(|&v| v as f64).collect(),
        3 => d
            .chunks(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect(),
        _ => return Err(Error::InvalidArgument(format!("ssim expects 1 or 3 channels, got {c}"))),
    };
    Ok((h, w, y))
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Mean SSIM on luma over all fully contained `11×11` Gaussian windows.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch("ssim", a.shape(), b.shape()));
    }
    let (h, w, ya) = luma(a)?;
    let (_, _, yb) = luma(b)?;
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window"
        )));
    }
    let g = ssim_window();
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut total = 0.0f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    let wt = gi * gj;
                    let idx = (oy + i) * w + ox + j;
                    let (x, y) = (ya[idx], yb[idx]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Cosine similarity of two flattened vectors; 0 when either has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero-norm residual");
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Mean cosine similarity over all unordered pairs.
pub fn mean_pairwise_cosine(residuals: &[Tensor]) -> Result<f64> {
    if residuals.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "residual similarity needs at least 2 images, got {}",
            residuals.len()
        )));
    }
    let mut total = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..residuals.len() {
        for j in i + 1..residuals.len() {
            if residuals[i].shape() != residuals[j].shape() {
                return Err(shape_mismatch("residual_similarity", residuals[i].shape(), residuals[j].shape()));
            }
            total += cosine(residuals[i].data(), residuals[j].data());
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean pairwise cosine similarity of the residuals left by embedding one
/// message into each of `images`.
pub fn residual_similarity(codec: &Codec, images: &[Tensor], msg: &Message) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "residual similarity needs at least 2 images, got {}",
            images.len()
        )));
    }
    let residuals = embed_all(codec, images, &vec![msg.clone(); images.len()])?
        .iter()
        .zip(images)
        .map(|(wm, host)| wm.sub(host))
        .collect::<Result<Vec<_>>>()?;
    mean_pairwise_cosine(&residuals)
}

/// Worker count for evaluation: `RESGUARD_THREADS` if set, else the number of CPUs.
pub fn eval_threads() -> usize {
    std::env::var("RESGUARD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Order-preserving parallel map over contiguous chunks.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = eval_threads().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("eval worker panicked")).collect()
    })
}

const EVAL_CHUNK: usize = 50;

/// Watermark many images, batching the forward passes.
pub fn embed_all(codec: &Codec, hosts: &[Tensor], msgs: &[Message]) -> Result<Vec<Tensor>> {
    if hosts.len() != msgs.len() {
        return Err(Error::InvalidArgument(format!("{} messages for {} images", msgs.len(), hosts.len())));
    }
    let idx: Vec<usize> = (0..hosts.len()).step_by(EVAL_CHUNK).collect();
    let parts = par_map(&idx, |&start| {
        let end = (start + EVAL_CHUNK).min(hosts.len());
        let batch = Tensor::stack(&hosts[start..end])?;
        let out = codec.embed_batch(&batch, &msgs[start..end])?;
        Ok((0..end - start).map(|i| out.index(i)).collect::<Vec<_>>())
    });
    Ok(parts.into_iter().collect::<Result<Vec<Vec<Tensor>>>>()?.concat())
}

/// Decode many images to hard messages.
pub fn extract_all(codec: &Codec, images: &[Tensor]) -> Result<Vec<Message>> {
    let idx: Vec<usize> = (0..images.len()).step_by(EVAL_CHUNK).collect();
    let l = codec.arch().message_len;
    let parts = par_map(&idx, |&start| {
        let end = (start + EVAL_CHUNK).min(images.len());
        let batch = Tensor::stack(&images[start..end])?;
        let soft = codec.extract_batch(&batch)?;
        Ok(soft.data().chunks(l).map(threshold).collect::<Vec<_>>())
    });
    Ok(parts.into_iter().collect::<Result<Vec<Vec<Message>>>>()?.concat())
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub distortions: Vec<Distortion>,
    pub n_grid: Vec<usize>,
    pub modes: Vec<MessageMode>,
    /// Held-out watermarked images attacked per sweep point.
    pub num_targets: usize,
    /// Images used for the residual-similarity metric.
    pub residual_images: usize,
    /// Clamp attacked images to `[0, 1]`.
    pub attack_clamped: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            distortions: Distortion::eval_suite(),
            n_grid: vec![1, 5, 10, 25, 50],
            modes: vec![MessageMode::Same, MessageMode::Different],
            num_targets: 200,
            residual_images: 100,
            attack_clamped: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionAcc {
    pub distortion: String,
    pub bit_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_bit_acc: f64,
    pub distortion_bit_acc: Vec<DistortionAcc>,
    pub koa: Vec<SweepRow>,
    pub psnr_watermarked: f64,
    pub ssim_watermarked: f64,
    pub psnr_attacked: f64,
    pub ssim_attacked: f64,
    pub residual_similarity: f64,
}

impl EvalReport {
    /// Sweep row for `(n, mode)`.
    pub fn koa_row(&self, n: usize, mode: MessageMode) -> Option<&SweepRow> {
        self.koa.iter().find(|r| r.n == n && r.message_mode == mode)
    }

    pub fn distortion_acc(&self, label: &str) -> Option<f64> {
        self.distortion_bit_acc.iter().find(|d| d.distortion == label).map(|d| d.bit_acc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two-column `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: f64| out.push_str(&format!("{k},{v}\n"));
        row("clean_bit_acc", self.clean_bit_acc);
        for d in &self.distortion_bit_acc {
            row(&format!("bit_acc_{}", d.distortion), d.bit_acc);
        }
        for r in &self.koa {
            row(&format!("koa_bit_acc_{}_n{}", r.message_mode, r.n), r.bit_acc_mean);
        }
        row("psnr_watermarked", self.psnr_watermarked);
        row("ssim_watermarked", self.ssim_watermarked);
        row("psnr_attacked", self.psnr_attacked);
        row("ssim_attacked", self.ssim_attacked);
        row("residual_similarity", self.residual_similarity);
        out
    }
}

/// Full evaluation on a held-out set.
///
/// The first `num_targets` images are watermarked with random messages and
/// scored clean, under every distortion and for quality; the remaining images
/// form the attacker pool for the KOA sweep. Residual similarity uses the
/// first `residual_images` images with one shared message.
pub fn evaluate(codec: &Codec, dataset: &[Tensor], settings: &EvalSettings, seed: u64) -> Result<EvalReport> {
    let t = settings.num_targets;
    if dataset.len() < t.max(settings.residual_images).max(2) {
        return Err(Error::DatasetTooSmall {
            required: t.max(settings.residual_images).max(2),
            available: dataset.len(),
        });
    }
    let l = codec.arch().message_len;
    let hosts = &dataset[..t];
    let mut rng = stream(seed, Stream::Eval, 0);
    let msgs: Vec<Message> = (0..t).map(|_| Message::random(l, &mut rng)).collect();
    let wms = embed_all(codec, hosts, &msgs)?;

    let acc_of = |images: &[Tensor]| -> Result<f64> {
        let dec = extract_all(codec, images)?;
        let accs = dec.iter().zip(&msgs).map(|(d, m)| bit_accuracy(d, m)).collect::<Result<Vec<_>>>()?;
        Ok(mean_std(&accs).0)
    };
    let clean_bit_acc = acc_of(&wms)?;

    let mut distortion_bit_acc = Vec::new();
    for (k, d) in settings.distortions.iter().enumerate() {
        let ids: Vec<usize> = (0..t).collect();
        let distorted = par_map(&ids, |&i| {
            let mut r = stream(seed, Stream::Distortion, (k as u64) << 20 | i as u64);
            d.apply(&wms[i], &mut r)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        distortion_bit_acc.push(DistortionAcc {
            distortion: d.label(),
            bit_acc: acc_of(&distorted)?,
        });
    }

    let pairs: Vec<(&Tensor, &Tensor)> = hosts.iter().zip(&wms).collect();
    let quality = par_map(&pairs, |(h, w)| Ok::<_, Error>((psnr(h, w)?, ssim(h, w)?)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let psnr_watermarked = mean_std(&quality.iter().map(|q| q.0).collect::<Vec<_>>()).0;
    let ssim_watermarked = mean_std(&quality.iter().map(|q| q.1).collect::<Vec<_>>()).0;

    let mut koa = Vec::new();
    for &mode in &settings.modes {
        koa.extend(run_attack_sweep(
            codec,
            dataset,
            &settings.n_grid,
            t,
            mode,
            settings.attack_clamped,
            seed,
        )?);
    }
    let psnr_attacked = mean_std(&koa.iter().map(|r| r.psnr_attacked_mean).collect::<Vec<_>>()).0;
    let ssim_attacked = mean_std(&koa.iter().map(|r| r.ssim_attacked_mean).collect::<Vec<_>>()).0;

    let shared = Message::random(l, &mut stream(seed, Stream::Messages, u64::MAX));
    let residual_similarity = residual_similarity(codec, &dataset[..settings.residual_images], &shared)?;

    Ok(EvalReport {
        clean_bit_acc,
        distortion_bit_acc,
        koa,
        psnr_watermarked,
        ssim_watermarked,
        psnr_attacked,
        ssim_attacked,
        residual_similarity,
    })
}
