//! Central finite-difference gradient checking.

use rand::Rng as _;

use crate::autodiff::{with_frozen_pieces, ClampGrad, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the probed coordinates.
    pub rel_err: f64,
    pub probed: usize,
}

/// Compare backward gradients against central differences.
///
/// `build` receives a fresh graph and one differentiable leaf per input and
/// must return a scalar. At most `max_coords` coordinates per input are probed
/// (chosen with a seeded stream); `h` is the perturbation size.
///
/// The perturbed evaluations keep every relu and clamp on the piece it takes
/// at the unperturbed point, so the differences measure the same branch that
/// backward differentiates even when `±h` would cross a breakpoint. Scalars
/// are read through [`Graph::scalar_f64`].
pub fn check(
    inputs: &[Tensor],
    h: f32,
    max_coords: usize,
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    run(inputs, h, max_coords, seed, leaf_builder(build), None)
}

/// Like [`check`] for a `build` returning a tensor of any shape: the checked
/// scalar is `⟨w, y⟩` for a fixed random cotangent `w ~ U(-1, 1)`, formed in
/// f64 on the finite-difference side.
pub fn check_output(
    inputs: &[Tensor],
    h: f32,
    max_coords: usize,
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let build = leaf_builder(build);
    let (g, y, _) = build(inputs)?;
    let mut rng = stream(seed, Stream::Test, 1);
    let w = Tensor::from_fn(g.shape(y), |_| rng.random_range(-1.0..1.0));
    run(inputs, h, max_coords, seed, build, Some(w))
}

/// Like [`check`] for code that builds its own graph: `build` maps input
/// values to a graph, its scalar root and the leaves holding each input.
pub fn check_graph(
    inputs: &[Tensor],
    h: f32,
    max_coords: usize,
    seed: u64,
    build: impl Fn(&[Tensor]) -> Result<(Graph, Var, Vec<Var>)>,
) -> Result<GradCheck> {
    run(inputs, h, max_coords, seed, build, None)
}

fn leaf_builder(
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> impl Fn(&[Tensor]) -> Result<(Graph, Var, Vec<Var>)> {
    move |vals| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        Ok((g, y, vars))
    }
}

fn run(
    inputs: &[Tensor],
    h: f32,
    max_coords: usize,
    seed: u64,
    build: impl Fn(&[Tensor]) -> Result<(Graph, Var, Vec<Var>)>,
    cotangent: Option<Tensor>,
) -> Result<GradCheck> {
    let value = |g: &Graph, y: Var| -> f64 {
        match &cotangent {
            Some(w) => w.data().iter().zip(g.value(y).data()).map(|(&a, &b)| a as f64 * b as f64).sum(),
            None => g.scalar_f64(y),
        }
    };

    let (mut g, y, vars) = build(inputs)?;
    if vars.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!("{} leaves for {} inputs", vars.len(), inputs.len())));
    }
    let pieces = g.kink_signature();
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let (g, y, _) = with_frozen_pieces(pieces.clone(), || build(vals))?;
        Ok(value(&g, y))
    };
    let root = match &cotangent {
        Some(w) => {
            let wc = g.constant(w.clone());
            let p = g.mul(y, wc)?;
            g.sum(p)
        }
        None => y,
    };
    let grads = g.backward(root)?;

    let mut rng = stream(seed, Stream::Test, 0);
    let mut diff2 = 0.0f64;
    let mut an2 = 0.0f64;
    let mut nu2 = 0.0f64;
    let mut probed = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = if input.len() <= max_coords {
            (0..input.len()).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..input.len())).collect()
        };
        for c in coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            let a = analytic.data()[c] as f64;
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            nu2 += numeric * numeric;
            probed += 1;
        }
    }
    let denom = an2.sqrt().max(nu2.sqrt());
    if !denom.is_finite() {
        return Err(Error::InvalidArgument("non-finite gradient during check".into()));
    }
    let rel_err = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradCheck { rel_err, probed })
}

/// Worst relative error of one op over several random instances.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub worst_rel_err: f64,
}

type Sampler = fn(&mut Rng) -> f32;
type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

fn uniform(r: &mut Rng) -> f32 {
    r.random_range(-1.0..1.0)
}

fn positive(r: &mut Rng) -> f32 {
    r.random_range(0.2..1.0)
}

/// Magnitude at least 0.05 so a perturbation cannot cross zero.
fn off_zero(r: &mut Rng) -> f32 {
    let m: f32 = r.random_range(0.05..1.0);
    if r.random::<bool>() { m } else { -m }
}

/// Inside `(0, 1)` or outside it, never within 0.05 of either edge.
fn off_edges(r: &mut Rng) -> f32 {
    let choices = [(-0.5, -0.05), (0.05, 0.95), (1.05, 1.5)];
    let (lo, hi) = choices[r.random_range(0..3)];
    r.random_range(lo..hi)
}

fn suite() -> Vec<(&'static str, Vec<(Vec<usize>, Sampler)>, Build)> {
    let v = |shape: &[usize], s: Sampler| (shape.to_vec(), s);
    vec![
        ("add", vec![v(&[2, 3], uniform), v(&[2, 3], uniform)], |g, x| g.add(x[0], x[1])),
        ("sub", vec![v(&[2, 3], uniform), v(&[2, 3], uniform)], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![v(&[2, 3], uniform), v(&[2, 3], uniform)], |g, x| g.mul(x[0], x[1])),
        ("scale", vec![v(&[5], uniform)], |g, x| Ok(g.scale(x[0], -1.7))),
        ("relu", vec![v(&[6], off_zero)], |g, x| Ok(g.relu(x[0]))),
        ("sigmoid", vec![v(&[6], uniform)], |g, x| Ok(g.sigmoid(x[0]))),
        ("tanh", vec![v(&[6], uniform)], |g, x| Ok(g.tanh(x[0]))),
        ("softplus", vec![v(&[6], uniform)], |g, x| Ok(g.softplus(x[0]))),
        ("clamp01", vec![v(&[8], off_edges)], |g, x| Ok(g.clamp01(x[0], ClampGrad::Exact))),
        ("mean", vec![v(&[3, 2], uniform)], |g, x| Ok(g.mean(x[0]))),
        ("sum", vec![v(&[3, 2], uniform)], |g, x| Ok(g.sum(x[0]))),
        ("mse", vec![v(&[7], uniform), v(&[7], uniform)], |g, x| g.mse(x[0], x[1])),
        ("cosine_similarity", vec![v(&[2, 4], uniform), v(&[2, 4], uniform)], |g, x| {
            g.cosine_similarity(x[0], x[1])
        }),
        ("cosine_rows", vec![v(&[3, 4], uniform), v(&[3, 4], uniform)], |g, x| g.cosine_rows(x[0], x[1])),
        ("rms_norm_rows", vec![v(&[2, 5], uniform)], |g, x| Ok(g.rms_norm_rows(x[0]))),
        (
            "conv2d",
            vec![v(&[2, 5, 5, 2], uniform), v(&[3, 3, 2, 3], uniform), v(&[3], uniform)],
            |g, x| g.conv2d(x[0], x[1], x[2]),
        ),
        ("linear", vec![v(&[3, 4], uniform), v(&[4, 2], uniform), v(&[2], uniform)], |g, x| {
            g.linear(x[0], x[1], x[2])
        }),
        ("reshape", vec![v(&[2, 6], uniform)], |g, x| g.reshape(x[0], &[3, 4])),
        ("concat_channels", vec![v(&[2, 2, 1], uniform), v(&[2, 2, 3], uniform)], |g, x| {
            g.concat_channels(x[0], x[1])
        }),
        ("concat_batch", vec![v(&[1, 3], uniform), v(&[2, 3], uniform)], |g, x| g.concat_batch(&[x[0], x[1]])),
        ("slice_batch", vec![v(&[4, 3], uniform)], |g, x| g.slice_batch(x[0], 1, 2)),
        ("avg_pool2", vec![v(&[2, 4, 4, 2], uniform)], |g, x| g.avg_pool2(x[0])),
        ("blur", vec![v(&[1, 5, 6, 2], positive)], |g, x| g.blur(x[0], &[0.25, 0.5, 0.25])),
    ]
}

/// Finite-difference check of every differentiable graph op on `instances`
/// random inputs each. The root is `sum(op(..) ⊙ w)` with random `w`.
pub fn op_suite(instances: usize) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (k, (op, specs, build)) in suite().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let mut r = stream(k as u64, Stream::Test, inst as u64);
            let mut inputs: Vec<Tensor> = specs
                .iter()
                .map(|(shape, s)| Tensor::from_fn(shape, |_| s(&mut r)))
                .collect();
            let mut probe = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
            let y = build(&mut probe, &vars)?;
            let out_shape = probe.value(y).shape().to_vec();
            inputs.push(Tensor::from_fn(&out_shape, |_| uniform(&mut r)));
            let n = inputs.len();
            let res = check(&inputs, 1e-3, 64, inst as u64, |g, x| {
                let y = build(g, &x[..n - 1])?;
                let p = g.mul(y, x[n - 1])?;
                Ok(g.sum(p))
            })?;
            worst = worst.max(res.rel_err);
        }
        out.push(OpCheck {
            op,
            instances,
            worst_rel_err: worst,
        });
    }
    Ok(out)
}
