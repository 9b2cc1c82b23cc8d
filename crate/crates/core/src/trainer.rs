//! Dual-pair batches and the training loop.
//!
//! Each step draws two disjoint host batches `I1`, `I2` and two message
//! batches `w1 ≠ w2`. Only the watermarked images an enabled branch needs
//! are embedded, all in one encoder pass:
//!
//! * channel branch: `I1^{w1}` through a sampled distortion, decoded against `w1`;
//! * KNL branch: another image is tampered with the residual `r1^{w1}` and
//!   decoded against its own message;
//! * RSE branch: contrast of `r1^{w1}` against `r1^{w2}` (positive) and `r2^{w1}` (negative).

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::{message_batch, Codec, Message};
use crate::distortion::{default_channel, koa_tamper_graph, sample_combined, Distortion};
use crate::error::{Error, Result};
use crate::losses::{image_loss, koa_loss, message_loss, rse_loss, total_loss, LossWeights};
use crate::metrics::{bit_accuracy, embed_all, extract_all};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

/// Which watermarked image the KNL branch tampers with `r1^{w1}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnlPairing {
    /// `I2^{w2} − r1^{w1}`, decoded against `w2`.
    Different,
    /// `I2^{w1} − r1^{w1}`, decoded against `w1`.
    Same,
    /// Mean of both terms.
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Dual pairs per step.
    pub batch_pairs: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub channel: Vec<Distortion>,
    pub enable_rse: bool,
    pub enable_knl: bool,
    pub knl_pairing: KnlPairing,
    /// First step with the RSE term.
    pub rse_start: usize,
    /// Steps over which the RSE weight rises linearly to its full value.
    pub rse_ramp: usize,
    /// Swap the roles of the two pairs on odd steps.
    pub symmetric: bool,
    /// Clean accuracy probe interval, in steps.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_pairs: 8,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            channel: default_channel(),
            enable_rse: true,
            enable_knl: true,
            knl_pairing: KnlPairing::Both,
            rse_start: 700,
            rse_ramp: 1500,
            symmetric: true,
            log_every: 200,
            seed: 0,
        }
    }
}

/// The four ablation cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Rse,
    Knl,
    ResGuard,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Rse, Variant::Knl, Variant::ResGuard];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Self::Base => (false, false),
            Self::Rse => (true, false),
            Self::Knl => (false, true),
            Self::ResGuard => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Rse => "rse",
            Self::Knl => "knl",
            Self::ResGuard => "resguard",
        }
    }
}

impl TrainConfig {
    pub fn for_variant(mut self, v: Variant) -> Self {
        (self.enable_rse, self.enable_knl) = v.flags();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_pairs == 0 {
            return Err(Error::InvalidArgument("batch_pairs must be >= 1".into()));
        }
        if self.channel.is_empty() {
            return Err(Error::InvalidArgument("channel distortion list is empty".into()));
        }
        for d in &self.channel {
            d.validate()?;
            if !d.trainable() {
                return Err(Error::InvalidArgument(format!("{} cannot be used for training", d.label())));
            }
        }
        Ok(())
    }

    /// RSE weight at `step`, or `None` before the term starts.
    pub fn rse_weight(&self, step: usize) -> Option<f32> {
        if !self.enable_rse || step < self.rse_start {
            return None;
        }
        let frac = ((step - self.rse_start + 1) as f32 / self.rse_ramp.max(1) as f32).min(1.0);
        Some(self.weights.rse * frac)
    }
}

/// Two disjoint host batches with their messages.
#[derive(Clone, Debug)]
pub struct DualPairBatch {
    pub idx1: Vec<usize>,
    pub idx2: Vec<usize>,
    pub hosts1: Tensor,
    pub hosts2: Tensor,
    pub w1: Vec<Message>,
    pub w2: Vec<Message>,
}

impl DualPairBatch {
    fn swapped(self) -> Self {
        Self {
            idx1: self.idx2,
            idx2: self.idx1,
            hosts1: self.hosts2,
            hosts2: self.hosts1,
            w1: self.w2,
            w2: self.w1,
        }
    }
}

/// Draw `pairs` dual pairs: `2·pairs` distinct hosts and messages with `w1 ≠ w2` per pair.
pub fn build_dual_pair_batch(dataset: &[Tensor], pairs: usize, message_len: usize, rng: &mut Rng) -> Result<DualPairBatch> {
    let need = (2 * pairs).max(2);
    if dataset.len() < need {
        return Err(Error::DatasetTooSmall {
            required: need,
            available: dataset.len(),
        });
    }
    if message_len == 0 {
        return Err(Error::InvalidArgument("message length must be >= 1".into()));
    }
    let idx = sample(rng, dataset.len(), 2 * pairs).into_vec();
    let (idx1, idx2) = (idx[..pairs].to_vec(), idx[pairs..].to_vec());
    let gather = |ids: &[usize]| Tensor::stack(&ids.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>());
    let mut w1 = Vec::with_capacity(pairs);
    let mut w2 = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let a = Message::random(message_len, rng);
        let mut b = Message::random(message_len, rng);
        while b == a {
            b = Message::random(message_len, rng);
        }
        w1.push(a);
        w2.push(b);
    }
    Ok(DualPairBatch {
        hosts1: gather(&idx1)?,
        hosts2: gather(&idx2)?,
        idx1,
        idx2,
        w1,
        w2,
    })
}

/// Per-step loss values; absent branches are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    /// Channel-branch message MSE.
    pub message: f64,
    pub image: f64,
    pub rse: f64,
    pub koa: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finite(&self) -> bool {
        [self.message, self.image, self.rse, self.koa, self.total].iter().all(|v| v.is_finite())
    }
}

/// Which watermarked images a step embeds.
#[derive(Clone, Copy)]
struct Needs {
    w12: bool,
    w21: bool,
    w22: bool,
}

/// Build the step's loss graph. Returns the graph and root plus the values
/// of the individual terms.
pub fn build_step_graph(
    codec: &Codec,
    batch: &DualPairBatch,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut Rng,
) -> Result<(Graph, Var, LossBreakdown)> {
    let rse_w = cfg.rse_weight(step);
    let knl = cfg.enable_knl;
    let (knl_diff, knl_same) = match cfg.knl_pairing {
        KnlPairing::Different => (knl, false),
        KnlPairing::Same => (false, knl),
        KnlPairing::Both => (knl, knl),
    };
    let needs = Needs {
        w12: rse_w.is_some(),
        w21: rse_w.is_some() || knl_same,
        w22: knl_diff,
    };
    let b = batch.w1.len();

    let mut g = Graph::new();
    let p = codec.bind(&mut g);
    let h1 = g.constant(batch.hosts1.clone());
    let h2 = g.constant(batch.hosts2.clone());
    let m1 = g.constant(message_batch(&batch.w1)?);
    let m2 = g.constant(message_batch(&batch.w2)?);

    // Encoder inputs in the order 11, 12, 21, 22 (skipping unneeded ones).
    let mut hs = vec![h1];
    let mut ms = vec![m1];
    for (need, h, m) in [(needs.w12, h1, m2), (needs.w21, h2, m1), (needs.w22, h2, m2)] {
        if need {
            hs.push(h);
            ms.push(m);
        }
    }
    let (hcat, mcat) = if hs.len() == 1 {
        (h1, m1)
    } else {
        (g.concat_batch(&hs)?, g.concat_batch(&ms)?)
    };
    let emb = codec.encode(&mut g, &p, hcat, mcat)?;
    let mut next = 0;
    let mut take = |g: &mut Graph, need: bool| -> Result<Option<(Var, Var)>> {
        if !need {
            return Ok(None);
        }
        let start = next * b;
        next += 1;
        if hs.len() == 1 {
            return Ok(Some((emb.watermarked, emb.residual)));
        }
        Ok(Some((g.slice_batch(emb.watermarked, start, b)?, g.slice_batch(emb.residual, start, b)?)))
    };
    let (wm11, r11) = take(&mut g, true)?.expect("always embedded");
    let e12 = take(&mut g, needs.w12)?;
    let e21 = take(&mut g, needs.w21)?;
    let e22 = take(&mut g, needs.w22)?;

    g.mark("channel");
    let channel = sample_combined(&cfg.channel, rng)?;
    let noisy = channel.apply_graph(&mut g, wm11, rng)?;

    // Decoder inputs: channel output, then tampered images.
    let mut dec_in = vec![noisy];
    let mut dec_bits = vec![m1];
    if knl_diff {
        g.mark("knl");
        let (wm22, _) = e22.expect("embedded for knl");
        dec_in.push(koa_tamper_graph(&mut g, wm22, r11, Some(codec.clamp_grad))?);
        dec_bits.push(m2);
    }
    if knl_same {
        g.mark("knl");
        let (wm21, _) = e21.expect("embedded for knl");
        dec_in.push(koa_tamper_graph(&mut g, wm21, r11, Some(codec.clamp_grad))?);
        dec_bits.push(m1);
    }
    let soft_all = if dec_in.len() == 1 {
        codec.decode(&mut g, &p, noisy)?
    } else {
        let x = g.concat_batch(&dec_in)?;
        codec.decode(&mut g, &p, x)?
    };
    let soft_at = |g: &mut Graph, i: usize| -> Result<Var> {
        if dec_in.len() == 1 {
            Ok(soft_all)
        } else {
            g.slice_batch(soft_all, i * b, b)
        }
    };

    let soft = soft_at(&mut g, 0)?;
    let koa = if dec_in.len() > 1 {
        let mut terms = Vec::new();
        for i in 1..dec_in.len() {
            let s = soft_at(&mut g, i)?;
            terms.push(koa_loss(&mut g, dec_bits[i], s)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Some(g.scale(acc, 1.0 / terms.len() as f32))
    } else {
        None
    };

    let rse = match rse_w {
        Some(_) => {
            g.mark("rse");
            let (_, r12) = e12.expect("embedded for rse");
            let (_, r21) = e21.expect("embedded for rse");
            Some(rse_loss(&mut g, r11, r12, r21, cfg.weights.temperature)?)
        }
        None => None,
    };

    let img = image_loss(&mut g, h1, wm11)?;
    let chan_mse = koa_loss(&mut g, m1, soft)?;
    let mes = match koa {
        Some(k) => {
            let wk = g.scale(k, cfg.weights.koa);
            g.add(chan_mse, wk)?
        }
        None => message_loss(&mut g, m1, soft, None, cfg.weights.koa)?,
    };
    let total = total_loss(&mut g, mes, img, rse, cfg.weights.image, rse_w.unwrap_or(0.0))?;

    let val = |g: &Graph, v: Option<Var>| v.map(|v| g.value(v).item() as f64).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        step,
        message: val(&g, Some(chan_mse)),
        image: val(&g, Some(img)),
        rse: val(&g, rse),
        koa: val(&g, koa),
        total: val(&g, Some(total)),
    };
    Ok((g, total, breakdown))
}

/// One optimization step on `batch`.
pub fn train_step(
    codec: &mut Codec,
    adam: &mut Adam,
    batch: &DualPairBatch,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let (g, root, breakdown) = build_step_graph(codec, batch, cfg, step, rng)?;
    if !breakdown.finite() {
        return Err(Error::NonFiniteLoss {
            step,
            breakdown: format!("{breakdown:?}"),
        });
    }
    let grads = g.backward(root)?;
    let params = codec.params_mut();
    params.zero_grads();
    params.collect_grads(&g, &grads)?;
    adam.step(params)?;
    Ok(breakdown)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<LossBreakdown>,
    /// `(step, clean bit accuracy)` on a fixed probe set.
    pub clean_acc: Vec<(usize, f64)>,
}

pub const TRAIN_LOG_CSV_HEADER: &str = "step,message,image,rse,koa,total,clean_bit_acc";

impl TrainLog {
    /// One row per probed step.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_CSV_HEADER}\n");
        for &(step, acc) in &self.clean_acc {
            let l = self.losses.iter().find(|l| l.step == step).copied().unwrap_or(LossBreakdown { step, ..Default::default() });
            out.push_str(&format!("{step},{},{},{},{},{},{acc}\n", l.message, l.image, l.rse, l.koa, l.total));
        }
        out
    }
}

const PROBE_IMAGES: usize = 32;

fn probe_accuracy(codec: &Codec, probe: &[Tensor], msgs: &[Message]) -> Result<f64> {
    let wms = embed_all(codec, probe, msgs)?;
    let dec = extract_all(codec, &wms)?;
    let accs = dec.iter().zip(msgs).map(|(d, m)| bit_accuracy(d, m)).collect::<Result<Vec<_>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Run `cfg.steps` steps on `codec` in place.
pub fn train(codec: &mut Codec, dataset: &[Tensor], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let l = codec.arch().message_len;
    let mut adam = Adam::new(codec.params(), cfg.adam);
    let mut batch_rng = stream(cfg.seed, Stream::Batch, 0);
    let mut chan_rng = stream(cfg.seed, Stream::Channel, 0);
    let mut probe_rng = stream(cfg.seed, Stream::Eval, 1);
    let probe: Vec<Tensor> = dataset.iter().take(PROBE_IMAGES).cloned().collect();
    let probe_msgs: Vec<Message> = probe.iter().map(|_| Message::random(l, &mut probe_rng)).collect();
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut batch = build_dual_pair_batch(dataset, cfg.batch_pairs, l, &mut batch_rng)?;
        if cfg.symmetric && step % 2 == 1 {
            batch = batch.swapped();
        }
        let b = train_step(codec, &mut adam, &batch, cfg, step, &mut chan_rng)?;
        log.losses.push(b);
        let last = step + 1 == cfg.steps;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || last) {
            let acc = probe_accuracy(codec, &probe, &probe_msgs)?;
            log::info!(
                "step {step}: mes {:.4} img {:.5} rse {:.4} koa {:.4} clean {acc:.3}",
                b.message,
                b.image,
                b.rse,
                b.koa
            );
            log.clean_acc.push((step, acc));
        }
    }
    Ok(log)
}
