//! Toy encoder–noise–decoder watermark codec.
//!
//! Encoder: the message is mapped by a dense layer to an `H×W×m` plane,
//! concatenated with the host, passed through `3×3` conv+relu blocks and a
//! final `3×3` conv (the residual head). The head output is scaled to unit
//! RMS per image, multiplied by the embedding strength, added to the host and
//! clamped to `[0, 1]`.
//!
//! Decoder: `3×3` conv+relu blocks with `2×` average pooling after every
//! second block, then a dense layer to `L` logits and a sigmoid.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ClampGrad, Graph, Var};
use crate::error::{shape_mismatch, Error, Result};
use crate::optim::ParamStore;
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

/// A length-`L` bit string.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("message bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    /// Uniform i.i.d. bits.
    pub fn random(len: usize, rng: &mut Rng) -> Self {
        Self {
            bits: (0..len).map(|_| rng.random_range(0..2u8)).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// Hex encoding, most significant bit first; the bit string is
    /// left-padded with zeros to a multiple of four.
    pub fn to_hex(&self) -> String {
        let pad = (4 - self.bits.len() % 4) % 4;
        let padded: Vec<u8> = std::iter::repeat_n(0, pad).chain(self.bits.iter().copied()).collect();
        padded
            .chunks(4)
            .map(|nib| {
                let v = nib.iter().fold(0u32, |acc, &b| acc << 1 | b as u32);
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    /// Inverse of [`Message::to_hex`] for a message of `len` bits.
    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        let hex = hex.trim().trim_start_matches("0x");
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for ch in hex.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::InvalidArgument(format!("invalid hex digit `{ch}`")))?;
            bits.extend((0..4).rev().map(|i| ((v >> i) & 1) as u8));
        }
        // Left-pad short input; strip leading zero padding from long input.
        if bits.len() < len {
            let mut padded = vec![0; len - bits.len()];
            padded.extend(bits);
            bits = padded;
        } else if bits.len() > len {
            let extra = bits.len() - len;
            if bits[..extra].iter().any(|&b| b != 0) {
                return Err(Error::InvalidArgument(format!(
                    "hex message `{hex}` does not fit in {len} bits"
                )));
            }
            bits.drain(..extra);
        }
        Ok(Self { bits })
    }
}

/// Hard decision: bit is 1 iff the soft value exceeds 0.5.
pub fn threshold(soft: &[f32]) -> Message {
    Message {
        bits: soft.iter().map(|&s| (s > 0.5) as u8).collect(),
    }
}

/// `[N, L]` tensor of message bits.
pub fn message_batch(msgs: &[Message]) -> Result<Tensor> {
    let l = msgs.first().map(Message::len).unwrap_or(0);
    let mut data = Vec::with_capacity(msgs.len() * l);
    for m in msgs {
        if m.len() != l {
            return Err(Error::MessageLength { expected: l, got: m.len() });
        }
        data.extend(m.to_f32());
    }
    Tensor::new(vec![msgs.len(), l], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub image_size: usize,
    pub channels: usize,
    pub message_len: usize,
    /// Channels of the expanded message plane.
    pub plane_channels: usize,
    /// Conv width of both encoder and decoder.
    pub width: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Embedding strength: RMS of the pre-clamp residual.
    pub strength: f32,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            message_len: 16,
            plane_channels: 4,
            width: 16,
            encoder_blocks: 3,
            decoder_blocks: 4,
            strength: 0.025,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let pools = self.decoder_blocks / 2;
        if self.image_size == 0 || self.image_size % (1 << pools) != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be divisible by {}",
                self.image_size,
                1 << pools
            )));
        }
        if self.message_len == 0 || self.width == 0 || self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(Error::InvalidArgument("architecture sizes must be positive".into()));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid strength {}", self.strength)));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }

    fn pooled_size(&self) -> usize {
        self.image_size >> (self.decoder_blocks / 2)
    }
}

#[derive(Clone, Debug)]
struct Slots {
    enc_fc: (usize, usize),
    enc_convs: Vec<(usize, usize)>,
    enc_out: (usize, usize),
    dec_convs: Vec<(usize, usize)>,
    dec_fc: (usize, usize),
}

/// Architecture plus trainable parameters.
#[derive(Clone, Debug)]
pub struct Codec {
    arch: Architecture,
    params: ParamStore,
    slots: Slots,
    /// Gradient rule for the embedding clamp.
    pub clamp_grad: ClampGrad,
}

/// A codec's parameters placed on one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, slot: usize) -> Var {
        self.vars[slot]
    }
}

/// Output of the encoder on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub watermarked: Var,
    /// Post-clamp residual `watermarked − host`.
    pub residual: Var,
}

impl Codec {
    /// He-normal initialization from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, Stream::Init, 0);
        let mut params = ParamStore::new();
        let hw = arch.image_size * arch.image_size;
        let w = arch.width;

        let dense = |params: &mut ParamStore, rng: &mut Rng, name: &str, din: usize, dout: usize| {
            let wt = he_normal(&[din, dout], din, rng);
            let ws = params.insert(format!("{name}.w"), wt);
            let bs = params.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
            (ws, bs)
        };
        let conv = |params: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize| {
            let k = he_normal(&[3, 3, cin, cout], 9 * cin, rng);
            let ks = params.insert(format!("{name}.k"), k);
            let bs = params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
            (ks, bs)
        };

        let enc_fc = dense(&mut params, &mut rng, "enc.fc", arch.message_len, hw * arch.plane_channels);
        let mut enc_convs = Vec::new();
        let mut cin = arch.channels + arch.plane_channels;
        for i in 0..arch.encoder_blocks {
            enc_convs.push(conv(&mut params, &mut rng, &format!("enc.conv{i}"), cin, w));
            cin = w;
        }
        let enc_out = conv(&mut params, &mut rng, "enc.out", w, arch.channels);
        let mut dec_convs = Vec::new();
        let mut cin = arch.channels;
        for i in 0..arch.decoder_blocks {
            dec_convs.push(conv(&mut params, &mut rng, &format!("dec.conv{i}"), cin, w));
            cin = w;
        }
        let p = arch.pooled_size();
        let dec_fc = dense(&mut params, &mut rng, "dec.fc", p * p * w, arch.message_len);

        Ok(Self {
            arch,
            params,
            slots: Slots {
                enc_fc,
                enc_convs,
                enc_out,
                dec_convs,
                dec_fc,
            },
            clamp_grad: ClampGrad::StraightThrough,
        })
    }

    /// Rebuild a codec from stored parameters; names and shapes must match `arch`.
    pub fn from_params(arch: Architecture, params: ParamStore) -> Result<Self> {
        let mut fresh = Self::new(arch, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Checkpoint {
                field: "params".into(),
                reason: format!("expected {} tensors, found {}", fresh.params.len(), params.len()),
            });
        }
        for (want, got) in fresh.params.iter().zip(params.iter()) {
            if want.name != got.name {
                return Err(Error::Checkpoint {
                    field: got.name.clone(),
                    reason: format!("expected parameter `{}`", want.name),
                });
            }
            if want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint {
                    field: got.name.clone(),
                    reason: format!("shape {:?}, expected {:?}", got.value.shape(), want.value.shape()),
                });
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Same parameters with a different embedding strength.
    pub fn with_strength(&self, strength: f32) -> Self {
        let mut c = self.clone();
        c.arch.strength = strength;
        c
    }

    /// Bind parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: (0..self.params.len()).map(|s| self.params.bind(g, s)).collect(),
        }
    }

    /// Bind parameters as constants (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect(),
        }
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        let want = self.arch.image_shape();
        match shape {
            [n, rest @ ..] if rest == want => Ok(*n),
            _ => Err(shape_mismatch("codec image", shape, &want)),
        }
    }

    /// Encoder forward pass for `host: [N,H,W,C]`, `msg: [N,L]`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, host: Var, msg: Var) -> Result<Embedded> {
        let n = self.check_images(g.shape(host))?;
        let ms = g.shape(msg).to_vec();
        if ms.len() != 2 || ms[0] != n || ms[1] != self.arch.message_len {
            return Err(Error::MessageLength {
                expected: self.arch.message_len,
                got: ms.get(1).copied().unwrap_or(0),
            });
        }
        let a = &self.arch;
        let (w, b) = self.slots.enc_fc;
        let plane = g.linear(msg, p.get(w), p.get(b))?;
        let plane = g.reshape(plane, &[n, a.image_size, a.image_size, a.plane_channels])?;
        let mut x = g.concat_channels(host, plane)?;
        for &(k, b) in &self.slots.enc_convs {
            let c = g.conv2d(x, p.get(k), p.get(b))?;
            x = g.relu(c);
        }
        let (k, b) = self.slots.enc_out;
        let head = g.conv2d(x, p.get(k), p.get(b))?;
        let unit = g.rms_norm_rows(head);
        let delta = g.scale(unit, a.strength);
        let raw = g.add(host, delta)?;
        let watermarked = g.clamp01(raw, self.clamp_grad);
        let residual = g.sub(watermarked, host)?;
        Ok(Embedded { watermarked, residual })
    }

    /// Decoder forward pass to soft bits `[N, L]` in `(0, 1)`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, img: Var) -> Result<Var> {
        let n = self.check_images(g.shape(img))?;
        let mut x = img;
        for (i, &(k, b)) in self.slots.dec_convs.iter().enumerate() {
            let c = g.conv2d(x, p.get(k), p.get(b))?;
            x = g.relu(c);
            if i % 2 == 1 {
                x = g.avg_pool2(x)?;
            }
        }
        let flat_len = g.value(x).len() / n;
        let flat = g.reshape(x, &[n, flat_len])?;
        let (w, b) = self.slots.dec_fc;
        let logits = g.linear(flat, p.get(w), p.get(b))?;
        Ok(g.sigmoid(logits))
    }

    /// Batched inference: watermark `hosts: [N,H,W,C]` with one message each.
    pub fn embed_batch(&self, hosts: &Tensor, msgs: &[Message]) -> Result<Tensor> {
        let n = self.check_images(hosts.shape())?;
        if msgs.len() != n {
            return Err(Error::InvalidArgument(format!("{} messages for {n} images", msgs.len())));
        }
        for m in msgs {
            if m.len() != self.arch.message_len {
                return Err(Error::MessageLength {
                    expected: self.arch.message_len,
                    got: m.len(),
                });
            }
        }
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let h = g.constant(hosts.clone());
        let m = g.constant(message_batch(msgs)?);
        let e = self.encode(&mut g, &p, h, m)?;
        Ok(g.value(e.watermarked).clone())
    }

    /// Watermark a single `[H,W,C]` host.
    pub fn embed(&self, host: &Tensor, msg: &Message) -> Result<Tensor> {
        let batch = Tensor::stack(std::slice::from_ref(host))?;
        Ok(self.embed_batch(&batch, std::slice::from_ref(msg))?.index(0))
    }

    /// Post-clamp residual `embed(host, msg) − host`.
    pub fn residual(&self, host: &Tensor, msg: &Message) -> Result<Tensor> {
        self.embed(host, msg)?.sub(host)
    }

    /// Soft decoder outputs `[N, L]` for `images: [N,H,W,C]`.
    pub fn extract_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images.shape())?;
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let soft = self.decode(&mut g, &p, x)?;
        Ok(g.value(soft).clone())
    }

    /// Soft decoder output for one `[H,W,C]` image.
    pub fn extract(&self, image: &Tensor) -> Result<Vec<f32>> {
        let batch = Tensor::stack(std::slice::from_ref(image))?;
        Ok(self.extract_batch(&batch)?.into_data())
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    let normal = Normal::new(0.0f32, std).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}
