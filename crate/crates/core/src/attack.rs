//! Known-original attack: average the residuals of N known host/watermarked
//! pairs and subtract the estimate from unseen watermarked images.

use std::fmt;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, Message};
use crate::error::{shape_mismatch, Error, Result};
use crate::metrics::{bit_accuracy, embed_all, extract_all, mean_std, par_map, psnr, ssim};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageMode {
    /// One message for every attacker pair and target.
    #[default]
    Same,
    /// Independent random message per image.
    Different,
}

impl fmt::Display for MessageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Same => "same",
            Self::Different => "different",
        })
    }
}

impl std::str::FromStr for MessageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Self::Same),
            "different" => Ok(Self::Different),
            _ => Err(Error::InvalidArgument(format!("unknown message mode `{s}`"))),
        }
    }
}

/// Elementwise mean of `watermarked − host`, accumulated in f64 in the given
/// pair order.
pub fn average_residual(pairs: &[(Tensor, Tensor)]) -> Result<Tensor> {
    let (h0, _) = pairs
        .first()
        .ok_or_else(|| Error::InvalidArgument("average_residual needs at least one pair".into()))?;
    let shape = h0.shape().to_vec();
    let mut acc = vec![0.0f64; h0.len()];
    for (host, wm) in pairs {
        if host.shape() != shape.as_slice() {
            return Err(shape_mismatch("average_residual", &shape, host.shape()));
        }
        if wm.shape() != shape.as_slice() {
            return Err(shape_mismatch("average_residual", &shape, wm.shape()));
        }
        for ((a, &h), &w) in acc.iter_mut().zip(host.data()).zip(wm.data()) {
            *a += w as f64 - h as f64;
        }
    }
    let n = pairs.len() as f64;
    Tensor::new(shape, acc.iter().map(|a| (a / n) as f32).collect())
}

/// `target − r_avg`, clamped to `[0, 1]` unless `clamped` is false.
pub fn koa_attack(target: &Tensor, r_avg: &Tensor, clamped: bool) -> Result<Tensor> {
    crate::distortion::koa_tamper(target, r_avg, clamped)
}

/// One sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub message_mode: MessageMode,
    pub bit_acc_mean: f64,
    pub bit_acc_std: f64,
    /// PSNR of the attacked image against its host.
    pub psnr_attacked_mean: f64,
    pub ssim_attacked_mean: f64,
}

pub const SWEEP_CSV_HEADER: &str = "N,message_mode,bit_acc_mean,bit_acc_std,psnr_attacked_mean,ssim_attacked_mean";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n, r.message_mode, r.bit_acc_mean, r.bit_acc_std, r.psnr_attacked_mean, r.ssim_attacked_mean
        ));
    }
    out
}

/// Attack sweep over `n_grid`.
///
/// `dataset[..num_targets]` are the evaluation targets; the rest is the
/// attacker pool, from which each sweep point draws `N` pairs without
/// replacement. Pairs are averaged in ascending pool index.
pub fn run_attack_sweep(
    codec: &Codec,
    dataset: &[Tensor],
    n_grid: &[usize],
    num_targets: usize,
    mode: MessageMode,
    clamped: bool,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let max_n = n_grid.iter().copied().max().unwrap_or(0);
    if n_grid.contains(&0) {
        return Err(Error::InvalidArgument("attack sweep N must be >= 1".into()));
    }
    if num_targets == 0 {
        return Err(Error::InvalidArgument("attack sweep needs at least one target".into()));
    }
    let required = num_targets + max_n;
    if dataset.len() < required {
        return Err(Error::DatasetTooSmall {
            required,
            available: dataset.len(),
        });
    }
    let l = codec.arch().message_len;
    let (targets, pool) = dataset.split_at(num_targets);

    let mut msg_rng = stream(seed, Stream::Messages, mode as u64);
    let shared = Message::random(l, &mut msg_rng);
    let mut draw_msgs = |count: usize| -> Vec<Message> {
        match mode {
            MessageMode::Same => vec![shared.clone(); count],
            MessageMode::Different => (0..count).map(|_| Message::random(l, &mut msg_rng)).collect(),
        }
    };
    let target_msgs = draw_msgs(num_targets);
    let target_wms = embed_all(codec, targets, &target_msgs)?;

    let mut rows = Vec::with_capacity(n_grid.len());
    for (k, &n) in n_grid.iter().enumerate() {
        let mut pair_rng = stream(seed, Stream::AttackPairs, (mode as u64) << 32 | k as u64);
        let mut idx = sample(&mut pair_rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        let hosts: Vec<Tensor> = idx.iter().map(|&i| pool[i].clone()).collect();
        let wms = embed_all(codec, &hosts, &draw_msgs(n))?;
        let pairs: Vec<(Tensor, Tensor)> = hosts.into_iter().zip(wms).collect();
        let r_avg = average_residual(&pairs)?;

        let ids: Vec<usize> = (0..num_targets).collect();
        let attacked = par_map(&ids, |&i| koa_attack(&target_wms[i], &r_avg, clamped))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let decoded = extract_all(codec, &attacked)?;
        let accs = decoded
            .iter()
            .zip(&target_msgs)
            .map(|(d, m)| bit_accuracy(d, m))
            .collect::<Result<Vec<_>>>()?;
        let quality = par_map(&ids, |&i| Ok::<_, Error>((psnr(&targets[i], &attacked[i])?, ssim(&targets[i], &attacked[i])?)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let (bit_acc_mean, bit_acc_std) = mean_std(&accs);
        rows.push(SweepRow {
            n,
            message_mode: mode,
            bit_acc_mean,
            bit_acc_std,
            psnr_attacked_mean: mean_std(&quality.iter().map(|q| q.0).collect::<Vec<_>>()).0,
            ssim_attacked_mean: mean_std(&quality.iter().map(|q| q.1).collect::<Vec<_>>()).0,
        });
    }
    Ok(rows)
}
