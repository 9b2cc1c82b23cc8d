//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and `backward` walks it in reverse. Nodes
//! built from constants only carry no gradient and are skipped.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule for `clamp01`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampGrad {
    /// Gradient 1 everywhere.
    #[default]
    StraightThrough,
    /// Gradient 1 inside `(0, 1)` and 0 where the input saturates.
    Exact,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Leaf { param: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Clamp01(Var, ClampGrad),
    StraightThrough(Var),
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
    Cosine { a: Var, b: Var, dots: Vec<f64>, na: Vec<f64>, nb: Vec<f64> },
    RmsNorm { x: Var, rms: Vec<f32> },
    Conv2d { x: Var, kernel: Var, bias: Var, dims: ConvDims, cols: Vec<f32> },
    Linear { x: Var, w: Var, b: Var },
    Reshape(Var),
    ConcatChannels(Var, Var),
    ConcatBatch(Vec<Var>),
    SliceBatch { x: Var, start: usize },
    AvgPool2(Var),
    Blur { x: Var, taps: Vec<f32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Clamp01(..) => "clamp01",
            Op::StraightThrough(..) => "straight_through",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Mse(..) => "mse",
            Op::Cosine { .. } => "cosine",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Reshape(..) => "reshape",
            Op::ConcatChannels(..) => "concat_channels",
            Op::ConcatBatch(..) => "concat_batch",
            Op::SliceBatch { .. } => "slice_batch",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Blur { .. } => "blur",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// f64 value of a scalar built from reductions and scalar arithmetic.
    wide: Option<f64>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

thread_local! {
    static FROZEN: RefCell<Option<Rc<Vec<u8>>>> = const { RefCell::new(None) };
}

/// Run `f` with every graph it creates evaluating relu and clamp on the
/// pieces recorded in `pattern` (a [`Graph::kink_signature`]) instead of the
/// pieces their inputs fall on. Off the recorded point this evaluates the
/// smooth branch that backward differentiates.
pub fn with_frozen_pieces<T>(pattern: Vec<u8>, f: impl FnOnce() -> T) -> T {
    struct Reset(Option<Rc<Vec<u8>>>);
    impl Drop for Reset {
        fn drop(&mut self) {
            FROZEN.with(|p| *p.borrow_mut() = self.0.take());
        }
    }
    let _reset = Reset(FROZEN.with(|p| p.borrow_mut().replace(Rc::new(pattern))));
    f()
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    labels: BTreeMap<&'static str, usize>,
    degenerate_cosines: usize,
    frozen: Option<(Rc<Vec<u8>>, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            frozen: FROZEN.with(|p| p.borrow().clone()).map(|p| (p, 0)),
            ..Self::default()
        }
    }

    /// Next `len` recorded pieces when evaluating under [`with_frozen_pieces`].
    fn frozen_pieces(&mut self, len: usize) -> Option<Vec<u8>> {
        let (pattern, at) = self.frozen.as_mut()?;
        let pieces = pattern.get(*at..*at + len).map(<[u8]>::to_vec);
        *at += len;
        pieces
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Count of cosine similarities evaluated with a zero-norm operand.
    pub fn degenerate_cosines(&self) -> usize {
        self.degenerate_cosines
    }

    /// Record that a named sub-computation was built into this graph.
    pub fn mark(&mut self, label: &'static str) {
        *self.labels.entry(label).or_default() += 1;
    }

    pub fn labels(&self) -> &BTreeMap<&'static str, usize> {
        &self.labels
    }

    /// Histogram of op kinds on the tape.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            *m.entry(n.op.name()).or_default() += 1;
        }
        m
    }

    /// Which linear piece every relu and clamp input falls on, in tape order.
    pub fn kink_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match n.op {
                Op::Relu(a) => sig.extend(self.nodes[a.0].value.data().iter().map(|&x| (x > 0.0) as u8)),
                Op::Clamp01(a, _) => sig.extend(
                    self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .map(|&x| if x < 0.0 { 0 } else if x > 1.0 { 2 } else { 1 }),
                ),
                _ => {}
            }
        }
        sig
    }

    /// Leaf `Var`s that map to parameter slots, in creation order.
    pub fn param_vars(&self) -> Vec<(usize, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(p) } => Some((p, Var(i))),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {}", op.name());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            wide: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_wide(&mut self, v: f64, op: Op, needs_grad: bool) -> Var {
        let var = self.push(Tensor::scalar(v as f32), op, needs_grad);
        self.nodes[var.0].wide = Some(v);
        var
    }

    fn widen(&mut self, out: Var, inputs: &[Var], f: impl Fn(&[f64]) -> f64) -> Var {
        let wide: Option<Vec<f64>> = inputs.iter().map(|v| self.nodes[v.0].wide).collect();
        if let Some(w) = wide {
            self.nodes[out.0].wide = Some(f(&w));
        }
        out
    }

    /// A scalar's value with 64-bit accumulation carried through reductions
    /// and the scalar arithmetic that follows them; otherwise the f32 value.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        self.nodes[v.0].wide.unwrap_or_else(|| self.nodes[v.0].value.item() as f64)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A differentiable leaf not tied to a parameter slot.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    pub fn param(&mut self, slot: usize, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: Some(slot) }, true)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))?;
        Ok(self.widen(out, &[a, b], |w| w[0] + w[1]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))?;
        Ok(self.widen(out, &[a, b], |w| w[0] - w[1]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))?;
        Ok(self.widen(out, &[a, b], |w| w[0] * w[1]))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.ng(a);
        let out = self.push(value, Op::Scale(a, k), ng);
        self.widen(out, &[a], |w| w[0] * k as f64)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        match self.frozen_pieces(self.value(a).len()) {
            Some(on) => self.piecewise(a, &on, |x, p| if p == 1 { x } else { 0.0 }, Op::Relu(a)),
            None => self.unary(a, |x| x.max(0.0), Op::Relu(a)),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.unary(a, sigmoid, Op::Sigmoid(a));
        self.widen(out, &[a], |w| 1.0 / (1.0 + (-w[0]).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.unary(a, f32::tanh, Op::Tanh(a));
        self.widen(out, &[a], |w| w[0].tanh())
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| softplus(x as f64) as f32, Op::Softplus(a));
        self.widen(out, &[a], |w| softplus(w[0]))
    }

    pub fn clamp01(&mut self, a: Var, mode: ClampGrad) -> Var {
        match self.frozen_pieces(self.value(a).len()) {
            Some(region) => self.piecewise(a, &region, |x, p| [0.0, x, 1.0][p as usize], Op::Clamp01(a, mode)),
            None => self.unary(a, |x| x.clamp(0.0, 1.0), Op::Clamp01(a, mode)),
        }
    }

    fn piecewise(&mut self, a: Var, pieces: &[u8], f: impl Fn(f32, u8) -> f32, op: Op) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().zip(pieces).for_each(|(x, &p)| *x = f(*x, p));
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    /// Forward value `f(x)`, backward identity.
    pub fn straight_through(&mut self, a: Var, f: impl FnOnce(&Tensor) -> Tensor) -> Result<Var> {
        let value = f(self.value(a));
        if value.shape() != self.shape(a) {
            return Err(shape_mismatch("straight_through", self.shape(a), value.shape()));
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::StraightThrough(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0];
        let v = t.wide.unwrap_or_else(|| t.value.mean_f64());
        let ng = self.ng(a);
        self.push_wide(v, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0];
        let v = t.wide.unwrap_or_else(|| t.value.sum_f64());
        let ng = self.ng(a);
        self.push_wide(v, Op::Sum(a), ng)
    }

    /// Mean of squared differences with `f64` accumulation.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_mismatch("mse", ta.shape(), tb.shape()));
        }
        let v = mse_f64(ta.data(), tb.data());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_wide(v, Op::Mse(a, b), ng))
    }

    /// Cosine similarity of the flattened operands, shape `[1]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.cosine_impl(a, b, 1)
    }

    /// Row-wise cosine similarity along the leading axis, shape `[N]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).batch();
        self.cosine_impl(a, b, n)
    }

    fn cosine_impl(&mut self, a: Var, b: Var, rows: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_mismatch("cosine_similarity", ta.shape(), tb.shape()));
        }
        let d = ta.len() / rows;
        let mut dots = Vec::with_capacity(rows);
        let mut na = Vec::with_capacity(rows);
        let mut nb = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        let mut degenerate = 0;
        for r in 0..rows {
            let xa = &ta.data()[r * d..(r + 1) * d];
            let xb = &tb.data()[r * d..(r + 1) * d];
            let (dot, sa, sb) = dot_norms(xa, xb);
            let (sa, sb) = (sa.sqrt(), sb.sqrt());
            if sa == 0.0 || sb == 0.0 {
                degenerate += 1;
                out.push(0.0);
            } else {
                out.push((dot / (sa * sb)).clamp(-1.0, 1.0) as f32);
            }
            dots.push(dot);
            na.push(sa);
            nb.push(sb);
        }
        if degenerate > 0 {
            log::warn!("cosine similarity with zero-norm operand ({degenerate} rows); defined as 0");
            self.degenerate_cosines += degenerate;
        }
        let shape = if rows == 1 { vec![1] } else { vec![rows] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Cosine { a, b, dots, na, nb },
            ng,
        ))
    }

    /// Scale each leading-axis entry to unit root-mean-square.
    pub fn rms_norm_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let rows = t.batch();
        let d = t.len() / rows;
        let mut out = t.clone();
        let mut rms = Vec::with_capacity(rows);
        for chunk in out.data_mut().chunks_mut(d) {
            let ms = chunk.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
            let rho = (ms + RMS_EPS).sqrt() as f32;
            chunk.iter_mut().for_each(|v| *v /= rho);
            rms.push(rho);
        }
        let ng = self.ng(x);
        self.push(out, Op::RmsNorm { x, rms }, ng)
    }

    /// Same-size 2-D cross-correlation, stride 1, zero padding `(k-1)/2`.
    ///
    /// `x` is `[N, H, W, Cin]` or `[H, W, Cin]`, `kernel` is `[k, k, Cin, Cout]`,
    /// `bias` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        let (n, h, w, cin, batched) = match xs[..] {
            [n, h, w, c] => (n, h, w, c, true),
            [h, w, c] => (1, h, w, c, false),
            _ => return Err(shape_mismatch("conv2d input", &xs, &ks)),
        };
        if ks.len() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0 || ks[2] != cin {
            return Err(shape_mismatch("conv2d", &xs, &ks));
        }
        let (k, cout) = (ks[0], ks[3]);
        if bs != [cout] {
            return Err(shape_mismatch("conv2d bias", &ks, &bs));
        }
        let dims = ConvDims { n, h, w, cin, cout, k };
        let cols = im2col(self.value(x).data(), dims);
        let m = n * h * w;
        let kk = k * k * cin;
        let mut out = vec![0.0f32; m * cout];
        let bias_v = self.value(bias).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias_v);
        }
        gemm(m, kk, cout, &cols, kk, 1, self.value(kernel).data(), cout, 1, &mut out, 1.0);
        let shape = if batched { vec![n, h, w, cout] } else { vec![h, w, cout] };
        let ng = self.ng(x) || self.ng(kernel) || self.ng(bias);
        let cols = if self.ng(x) || self.ng(kernel) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d { x, kernel, bias, dims, cols },
            ng,
        ))
    }

    /// `x·w + b` for `x` of shape `[N, Din]`, `w` of `[Din, Dout]`, `b` of `[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_mismatch("linear", &xs, &ws));
        }
        if bs != [ws[1]] {
            return Err(shape_mismatch("linear bias", &ws, &bs));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0f32; n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(n, din, dout, self.value(x).data(), din, 1, self.value(w).data(), dout, 1, &mut out, 1.0);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Concatenate along the last (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_mismatch("concat_channels", &sa, &sb));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let pixels = self.value(a).len() / ca;
        let mut out = Vec::with_capacity(pixels * (ca + cb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for p in 0..pixels {
            out.extend_from_slice(&da[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&db[p * cb..(p + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatChannels(a, b), ng))
    }

    /// Concatenate along the leading (batch) axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_batch of zero operands".into()))?;
        let inner = self.shape(*first)[1..].to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != inner[..] {
                return Err(shape_mismatch("concat_batch", &inner, &s[1..]));
            }
            n += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&inner);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatBatch(parts.to_vec()), ng))
    }

    /// Entries `start..start+len` of the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start + len > s[0] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of range for batch {}",
                start + len,
                s[0]
            )));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceBatch { x, start }, ng))
    }

    /// 2×2 average pooling over `[N, H, W, C]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, h, w, c] = s[..] else {
            return Err(shape_mismatch("avg_pool2", &s, &[0, 0, 0, 0]));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!("avg_pool2 needs even spatial dims, got {s:?}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * ho * wo * c];
        for b in 0..n {
            for y in 0..ho {
                for xx in 0..wo {
                    let o = ((b * ho + y) * wo + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += 0.25 * src[i + ch];
                        }
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, ho, wo, c], out)?, Op::AvgPool2(x), ng))
    }

    /// Separable per-channel filter with edge replication; `taps` has odd length.
    pub fn blur(&mut self, x: Var, taps: &[f32]) -> Result<Var> {
        let (n, h, w, c) = image_dims(self.shape(x))?;
        let value = separable_filter(self.value(x).data(), n, h, w, c, taps);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(shape, value)?,
            Op::Blur { x, taps: taps.to_vec() },
            ng,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, || g.zip_map(vb, "mul", |x, y| x * y).unwrap());
                self.accum(grads, *b, || g.zip_map(va, "mul", |x, y| x * y).unwrap());
            }
            Op::Scale(a, k) => self.accum(grads, *a, || g.scale(*k)),
            Op::Relu(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, || g.zip_map(va, "relu", |g, x| if x > 0.0 { g } else { 0.0 }).unwrap());
            }
            Op::Sigmoid(a) => {
                self.accum(grads, *a, || g.zip_map(out, "sigmoid", |g, y| g * y * (1.0 - y)).unwrap());
            }
            Op::Tanh(a) => {
                self.accum(grads, *a, || g.zip_map(out, "tanh", |g, y| g * (1.0 - y * y)).unwrap());
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, || g.zip_map(va, "softplus", |g, x| g * sigmoid(x)).unwrap());
            }
            Op::Clamp01(a, mode) => match mode {
                ClampGrad::StraightThrough => self.accum(grads, *a, || g.clone()),
                ClampGrad::Exact => {
                    let va = self.value(*a);
                    self.accum(grads, *a, || {
                        g.zip_map(va, "clamp01", |g, x| if x > 0.0 && x < 1.0 { g } else { 0.0 })
                            .unwrap()
                    })
                }
            },
            Op::StraightThrough(a) => self.accum(grads, *a, || g.clone()),
            Op::Mean(a) => {
                let va = self.value(*a);
                let k = gd[0] / va.len() as f32;
                self.accum(grads, *a, || Tensor::full(va.shape(), k));
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, || Tensor::full(va.shape(), gd[0]));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = 2.0 * gd[0] / va.len() as f32;
                let diff = va.sub(vb)?;
                self.accum(grads, *a, || diff.scale(k));
                self.accum(grads, *b, || diff.scale(-k));
            }
            Op::Cosine { a, b, dots, na, nb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let rows = dots.len();
                let d = va.len() / rows;
                // d cos / d a = b/(|a||b|) - cos * a/|a|^2
                let grad_for = |x: &Tensor, y: &Tensor, nx: &[f64], ny: &[f64]| {
                    let mut out = Tensor::zeros(x.shape());
                    for r in 0..rows {
                        if nx[r] == 0.0 || ny[r] == 0.0 {
                            continue;
                        }
                        let cos = dots[r] / (nx[r] * ny[r]);
                        let inv = 1.0 / (nx[r] * ny[r]);
                        let self_coef = cos / (nx[r] * nx[r]);
                        let gr = gd[r] as f64;
                        let xs = &x.data()[r * d..(r + 1) * d];
                        let ys = &y.data()[r * d..(r + 1) * d];
                        for ((o, &xv), &yv) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(xs).zip(ys) {
                            *o = (gr * (yv as f64 * inv - xv as f64 * self_coef)) as f32;
                        }
                    }
                    out
                };
                self.accum(grads, *a, || grad_for(va, vb, na, nb));
                self.accum(grads, *b, || grad_for(vb, va, nb, na));
            }
            Op::RmsNorm { x, rms } => {
                let rows = rms.len();
                let d = out.len() / rows;
                self.accum(grads, *x, || {
                    let mut dx = Tensor::zeros(out.shape());
                    for r in 0..rows {
                        let y = &out.data()[r * d..(r + 1) * d];
                        let gr = &gd[r * d..(r + 1) * d];
                        let gy: f64 = y.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / d as f64;
                        let inv = 1.0 / rms[r];
                        for ((o, &yv), &gv) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(y).zip(gr) {
                            *o = (gv - yv * gy as f32) * inv;
                        }
                    }
                    dx
                });
            }
            Op::Conv2d { x, kernel, bias, dims, cols } => {
                let d = *dims;
                let m = d.n * d.h * d.w;
                let kk = d.k * d.k * d.cin;
                if self.ng(*bias) {
                    let mut db = vec![0.0f64; d.cout];
                    for row in gd.chunks(d.cout) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v as f64;
                        }
                    }
                    let db = Tensor::new(vec![d.cout], db.into_iter().map(|v| v as f32).collect())?;
                    self.accum(grads, *bias, || db);
                }
                let need_k = self.ng(*kernel);
                let need_x = self.ng(*x);
                if need_k || need_x {
                    if need_k {
                        let mut dk = vec![0.0f32; kk * d.cout];
                        // colsᵀ [kk, m] × g [m, cout]
                        gemm(kk, m, d.cout, cols, 1, kk, gd, d.cout, 1, &mut dk, 0.0);
                        let dk = Tensor::new(self.shape(*kernel).to_vec(), dk)?;
                        self.accum(grads, *kernel, || dk);
                    }
                    if need_x {
                        let mut dcols = vec![0.0f32; m * kk];
                        // g [m, cout] × kernelᵀ [cout, kk]
                        gemm(m, d.cout, kk, gd, d.cout, 1, self.value(*kernel).data(), 1, d.cout, &mut dcols, 0.0);
                        let dx = Tensor::new(self.shape(*x).to_vec(), col2im(&dcols, d))?;
                        self.accum(grads, *x, || dx);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[1];
                if self.ng(*b) {
                    let mut db = vec![0.0f64; dout];
                    for row in gd.chunks(dout) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v as f64;
                        }
                    }
                    let db = Tensor::new(vec![dout], db.into_iter().map(|v| v as f32).collect())?;
                    self.accum(grads, *b, || db);
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0f32; din * dout];
                    gemm(din, n, dout, self.value(*x).data(), 1, din, gd, dout, 1, &mut dw, 0.0);
                    let dw = Tensor::new(vec![din, dout], dw)?;
                    self.accum(grads, *w, || dw);
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0f32; n * din];
                    gemm(n, dout, din, gd, dout, 1, self.value(*w).data(), 1, dout, &mut dx, 0.0);
                    let dx = Tensor::new(vec![n, din], dx)?;
                    self.accum(grads, *x, || dx);
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accum(grads, *x, || g.clone().reshape(&shape).unwrap());
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
                let pixels = out.len() / (ca + cb);
                if self.ng(*a) {
                    let mut da = Vec::with_capacity(pixels * ca);
                    for p in 0..pixels {
                        da.extend_from_slice(&gd[p * (ca + cb)..p * (ca + cb) + ca]);
                    }
                    let da = Tensor::new(sa, da)?;
                    self.accum(grads, *a, || da);
                }
                if self.ng(*b) {
                    let mut db = Vec::with_capacity(pixels * cb);
                    for p in 0..pixels {
                        db.extend_from_slice(&gd[p * (ca + cb) + ca..(p + 1) * (ca + cb)]);
                    }
                    let db = Tensor::new(sb, db)?;
                    self.accum(grads, *b, || db);
                }
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let part = Tensor::new(self.shape(p).to_vec(), gd[offset..offset + len].to_vec())?;
                        self.accum(grads, p, || part);
                    }
                    offset += len;
                }
            }
            Op::SliceBatch { x, start } => {
                let xt = self.value(*x);
                let inner = xt.len() / xt.batch();
                let mut dx = Tensor::zeros(xt.shape());
                dx.data_mut()[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                self.accum(grads, *x, || dx);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = Tensor::zeros(&s);
                {
                    let dd = dx.data_mut();
                    for b in 0..n {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let o = ((b * ho + y) * wo + xx) * c;
                                for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let i = ((b * h + 2 * y + dy) * w + 2 * xx + dxo) * c;
                                    for ch in 0..c {
                                        dd[i + ch] += 0.25 * gd[o + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, || dx);
            }
            Op::Blur { x, taps } => {
                let (n, h, w, c) = image_dims(self.shape(*x))?;
                let dx = separable_filter_adjoint(gd, n, h, w, c, taps);
                let dx = Tensor::new(self.shape(*x).to_vec(), dx)?;
                self.accum(grads, *x, || dx);
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.ng(v) {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g).expect("gradient shape"),
            slot @ None => *slot = Some(g),
        }
    }
}

const RMS_EPS: f64 = 1e-12;

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn mse_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

fn dot_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut sa = 0.0f64;
    let mut sb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        sa += x * x;
        sb += y * y;
    }
    (dot, sa, sb)
}

pub(crate) fn image_dims(s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, h, w, c] => Ok((n, h, w, c)),
        [h, w, c] => Ok((1, h, w, c)),
        _ => Err(Error::InvalidArgument(format!("expected an image tensor, got shape {s:?}"))),
    }
}

/// `c = a·b + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover the strided extents requested above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], d: ConvDims) -> Vec<f32> {
    let ConvDims { n, h, w, cin, k, .. } = d;
    let pad = (k / 2) as isize;
    let kk = k * k * cin;
    let mut cols = vec![0.0f32; n * h * w * kk];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * kk;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * cin;
                        let dst = row + (ky * k + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], d: ConvDims) -> Vec<f32> {
    let ConvDims { n, h, w, cin, k, .. } = d;
    let pad = (k / 2) as isize;
    let kk = k * k * cin;
    let mut x = vec![0.0f32; n * h * w * cin];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * kk;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * cin;
                        let src = row + (ky * k + kx) * cin;
                        for (o, &v) in x[dst..dst + cin].iter_mut().zip(&cols[src..src + cin]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    x
}

fn clamp_idx(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Horizontal then vertical pass with replicated borders.
pub(crate) fn separable_filter(x: &[f32], n: usize, h: usize, w: usize, c: usize, taps: &[f32]) -> Vec<f32> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0f32; x.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for (t, &wt) in taps.iter().enumerate() {
                        let sx = clamp_idx(xx as isize + t as isize - r, w);
                        acc += wt * x[((b * h + y) * w + sx) * c + ch];
                    }
                    tmp[((b * h + y) * w + xx) * c + ch] = acc;
                }
            }
        }
    }
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for (t, &wt) in taps.iter().enumerate() {
                        let sy = clamp_idx(y as isize + t as isize - r, h);
                        acc += wt * tmp[((b * h + sy) * w + xx) * c + ch];
                    }
                    out[((b * h + y) * w + xx) * c + ch] = acc;
                }
            }
        }
    }
    out
}

fn separable_filter_adjoint(g: &[f32], n: usize, h: usize, w: usize, c: usize, taps: &[f32]) -> Vec<f32> {
    let r = (taps.len() / 2) as isize;
    // Adjoint of the vertical pass.
    let mut tmp = vec![0.0f32; g.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let gv = g[((b * h + y) * w + xx) * c + ch];
                    for (t, &wt) in taps.iter().enumerate() {
                        let sy = clamp_idx(y as isize + t as isize - r, h);
                        tmp[((b * h + sy) * w + xx) * c + ch] += wt * gv;
                    }
                }
            }
        }
    }
    // Adjoint of the horizontal pass.
    let mut out = vec![0.0f32; g.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let gv = tmp[((b * h + y) * w + xx) * c + ch];
                    for (t, &wt) in taps.iter().enumerate() {
                        let sx = clamp_idx(xx as isize + t as isize - r, w);
                        out[((b * h + y) * w + sx) * c + ch] += wt * gv;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sign_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn clamp01_saturation_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-0.3, 0.4, 1.7]).unwrap());
        let y = g.clamp01(x, ClampGrad::StraightThrough);
        assert_eq!(g.value(y).data(), &[0.0, 0.4, 1.0]);
    }

    #[test]
    fn clamp01_gradient_modes() {
        for (mode, expected) in [
            (ClampGrad::StraightThrough, [1.0, 1.0, 1.0]),
            (ClampGrad::Exact, [0.0, 1.0, 0.0]),
        ] {
            let mut g = Graph::new();
            let x = g.variable(Tensor::new(vec![3], vec![-0.3, 0.4, 1.7]).unwrap());
            let y = g.clamp01(x, mode);
            let s = g.sum(y);
            let grads = g.backward(s).unwrap();
            assert_eq!(grads.get(x).unwrap().data(), &expected);
        }
    }

    #[test]
    fn mse_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[4]));
        let b = g.constant(Tensor::full(&[4], 0.1));
        let m = g.mse(a, b).unwrap();
        assert!((g.value(m).item() - 0.01).abs() < 1e-7);
        let m0 = g.mse(a, a).unwrap();
        assert_eq!(g.value(m0).item(), 0.0);
    }

    #[test]
    fn cosine_of_positive_scaling_is_one() {
        let mut g = Graph::new();
        let v = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let a = g.constant(v.clone());
        let b = g.constant(v.scale(2.0));
        let c = g.cosine_similarity(a, b).unwrap();
        assert!((g.value(c).item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_with_zero_operand_is_zero_and_flagged() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::zeros(&[3]));
        let b = g.variable(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = g.cosine_similarity(a, b).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
        assert_eq!(g.degenerate_cosines(), 1);
        let grads = g.backward(c).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_mse_against_zero() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::scalar(3.0));
        let z = g.constant(Tensor::scalar(0.0));
        let l = g.mse(p, z).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_relu_gate() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(p);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(p), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[4, 5, 1], |i| i as f32 * 0.1));
        let k = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[5, 5, 2], |i| (i as f32).sin()));
        let k = g.constant(Tensor::zeros(&[3, 3, 2, 2]));
        let b = g.constant(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap());
        let y = g.conv2d(x, k, b).unwrap();
        for px in g.value(y).data().chunks(2) {
            assert_eq!(px, &[0.25, -1.5]);
        }
    }

    #[test]
    fn conv_shape_errors_report_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[5, 5, 2]));
        let k = g.constant(Tensor::zeros(&[3, 3, 3, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let msg = g.conv2d(x, k, b).unwrap_err().to_string();
        assert!(msg.contains("[5, 5, 2]") && msg.contains("[3, 3, 3, 1]"), "{msg}");
    }

    #[test]
    fn binary_shape_mismatch_is_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = crate::rng::stream(seed, crate::rng::Stream::Test, 0);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn frozen_pieces_replay_the_recorded_branch() {
        let x = Tensor::new(vec![3], vec![-0.5, 0.5, 1.5]).unwrap();
        let mut g = Graph::new();
        let a = g.constant(x);
        let r = g.relu(a);
        g.clamp01(r, ClampGrad::Exact);
        let pattern = g.kink_signature();
        assert_eq!(pattern, vec![0, 1, 1, 1, 1, 2]);

        let moved = Tensor::new(vec![3], vec![0.25, -0.25, 0.75]).unwrap();
        let out = with_frozen_pieces(pattern, || {
            let mut g = Graph::new();
            let a = g.constant(moved.clone());
            let r = g.relu(a);
            let c = g.clamp01(r, ClampGrad::Exact);
            g.value(c).data().to_vec()
        });
        assert_eq!(out, vec![0.0, -0.25, 1.0]);
        let mut g = Graph::new();
        let a = g.constant(moved);
        assert_eq!(g.relu(a).0, 1);
        assert_eq!(g.value(Var(1)).data(), &[0.25, 0.0, 0.75]);
    }

    #[test]
    fn scalar_f64_carries_reductions_through_scalar_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.7]).unwrap());
        let m = g.mean(a);
        let s = g.scale(m, 3.0);
        let t = g.add(s, m).unwrap();
        let want = (0.1f32 as f64 + 0.2f32 as f64 + 0.7f32 as f64) / 3.0 * 4.0;
        assert_eq!(g.scalar_f64(t), want);
        assert_eq!(g.value(t).item(), g.value(s).item() + g.value(m).item());
        let plain = g.constant(Tensor::scalar(0.5));
        assert_eq!(g.scalar_f64(plain), 0.5);
    }

    #[test]
    fn conv_matches_scalar_loop() {
        let x = rand_tensor(&[5, 5, 2], 1);
        let k = rand_tensor(&[3, 3, 2, 1], 2);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(Tensor::zeros(&[1])));
        let y = g.conv2d(xv, kv, bv).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 5, 1]);
        for i in 0..5i32 {
            for j in 0..5i32 {
                let mut acc = 0.0f64;
                for di in -1..=1i32 {
                    for dj in -1..=1i32 {
                        let (si, sj) = (i + di, j + dj);
                        if !(0..5).contains(&si) || !(0..5).contains(&sj) {
                            continue;
                        }
                        for c in 0..2 {
                            let xi = x.data()[((si * 5 + sj) * 2 + c) as usize] as f64;
                            let ki = k.data()[(((di + 1) * 3 + dj + 1) * 2 + c) as usize] as f64;
                            acc += xi * ki;
                        }
                    }
                }
                let got = g.value(y).data()[(i * 5 + j) as usize] as f64;
                assert!((got - acc).abs() < 1e-5, "({i},{j}): {got} vs {acc}");
            }
        }
    }

    fn composite(g: &mut Graph, x: Var, k: Var, b: Var) -> Var {
        let c = g.conv2d(x, k, b).unwrap();
        let a = g.tanh(c);
        let s = g.sigmoid(a);
        let r = g.relu(c);
        let m = g.mul(s, r).unwrap();
        let zeros = Tensor::zeros(g.shape(m));
        let z = g.constant(zeros);
        g.mse(m, z).unwrap()
    }

    proptest::proptest! {
        #[test]
        fn forward_and_grads_are_deterministic(seed in 0u64..500) {
            let run = || {
                let mut g = Graph::new();
                let x = g.variable(rand_tensor(&[1, 4, 4, 2], seed));
                let k = g.variable(rand_tensor(&[3, 3, 2, 2], seed + 1));
                let b = g.variable(rand_tensor(&[2], seed + 2));
                let root = composite(&mut g, x, k, b);
                let first = g.backward(root).unwrap();
                let again = g.backward(root).unwrap();
                for v in [x, k, b] {
                    proptest::prop_assert_eq!(first.get(v), again.get(v));
                    proptest::prop_assert_eq!(first.get(v).unwrap().shape(), g.shape(v));
                    proptest::prop_assert!(first.get(v).unwrap().all_finite());
                }
                Ok((g.value(root).item().to_bits(), first.get(k).unwrap().fingerprint()))
            };
            proptest::prop_assert_eq!(run()?, run()?);
        }

        #[test]
        fn cosine_stays_in_range(seed in 0u64..2000, scale in -3.0f32..3.0) {
            let a = rand_tensor(&[7], seed);
            let b = a.scale(scale).add(&rand_tensor(&[7], seed + 9).scale(1e-3)).unwrap();
            let mut g = Graph::new();
            let (av, bv) = (g.constant(a), g.constant(b));
            let cv = g.cosine_similarity(av, bv).unwrap();
            let c = g.value(cv).item();
            proptest::prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
        }
    }

    #[test]
    fn constant_only_graphs_have_no_grads() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
    }
}
