//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{Eager, Graph, Tape};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every coordinate.
pub fn central_differences<F>(f: F, theta0: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut theta = theta0.to_vec();
    (0..theta0.len())
        .map(|i| {
            theta[i] = theta0[i] + h;
            let plus = f(&theta);
            theta[i] = theta0[i] - h;
            let minus = f(&theta);
            theta[i] = theta0[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Compares `analytic` against central differences of `f` at `theta0`.
pub fn finite_diff_check<F>(f: F, theta0: &[f64], analytic: &[f64], h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(theta0.len(), analytic.len(), "gradient length");
    let numeric = central_differences(f, theta0, h);
    let max_rel_err = numeric
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| rel_err(a, n))
        .fold(0.0, f64::max);
    GradCheckReport {
        op: String::new(),
        max_rel_err,
        pass: max_rel_err < tol,
    }
}

/// A scalar-valued computation that can run on any [`Graph`].
pub trait ScalarProgram {
    fn eval<G: Graph>(&self, g: &mut G, inputs: &[G::Value]) -> Result<G::Value>;
}

fn unflatten(theta: &[f64], like: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let part = theta[off..off + t.len()].to_vec();
            off += t.len();
            Ok(Tensor::from_vec(t.dims(), part)?)
        })
        .collect()
}

/// Checks tape gradients of `program` with respect to every input tensor.
pub fn check_program<P: ScalarProgram>(
    name: &str,
    program: &P,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = program.eval(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.get(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    let theta0: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let f = |theta: &[f64]| -> f64 {
        let ts = unflatten(theta, inputs).expect("same layout");
        let mut eager = Eager;
        let vals: Vec<Tensor> = ts.iter().map(|t| eager.param(t)).collect();
        program.eval(&mut eager, &vals).expect("program evaluates").data()[0]
    };
    let mut report = finite_diff_check(f, &theta0, &analytic, h, tol);
    report.op = name.to_string();
    Ok(report)
}

/// Which single operation an [`OpProgram`] exercises.
#[derive(Debug, Clone, Copy)]
enum OpKind {
    Contract,
    Add,
    Mul,
    Scale,
    Reshape,
    Tanh,
    Sigmoid,
    Mean,
    Normalize,
    Cosine,
    SoftmaxCe,
}

// op(inputs) reduced to a scalar through a fixed random weighting.
struct OpProgram {
    kind: OpKind,
    weights: Tensor,
    labels: Vec<usize>,
}

impl ScalarProgram for OpProgram {
    fn eval<G: Graph>(&self, g: &mut G, x: &[G::Value]) -> Result<G::Value> {
        let out = match self.kind {
            OpKind::Contract => g.contract(&x[0], &x[1], &[(2, 0), (1, 1)])?,
            OpKind::Add => g.add(&x[0], &x[1])?,
            OpKind::Mul => g.mul(&x[0], &x[1])?,
            OpKind::Scale => g.scale(&x[0], -1.7)?,
            OpKind::Reshape => g.reshape(&x[0], &[4, 3])?,
            OpKind::Tanh => g.tanh(&x[0])?,
            OpKind::Sigmoid => g.sigmoid(&x[0])?,
            OpKind::Mean => {
                let sq = g.mul(&x[0], &x[0])?;
                return g.mean(&sq);
            }
            OpKind::Normalize => g.l2_normalize(&x[0])?,
            OpKind::Cosine => g.cosine_similarity(&x[0], &x[1])?,
            OpKind::SoftmaxCe => return g.softmax_cross_entropy(&x[0], &self.labels),
        };
        let w = g.constant(&self.weights);
        let weighted = g.mul(&out, &w)?;
        g.mean(&weighted)
    }
}

// (name, op, input shapes, weight shape)
type OpCase = (&'static str, OpKind, Vec<Vec<usize>>, Vec<usize>);

fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| normal.sample(rng)).collect()).expect("finite")
}

/// Finite-difference check of every recorded operation in isolation.
pub fn op_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<OpCase> = vec![
        (
            "contract",
            OpKind::Contract,
            vec![vec![2, 3, 4], vec![4, 3, 2]],
            vec![2, 2],
        ),
        ("add", OpKind::Add, vec![vec![3, 4], vec![3, 4]], vec![3, 4]),
        ("mul", OpKind::Mul, vec![vec![3, 4], vec![3, 4]], vec![3, 4]),
        ("scale", OpKind::Scale, vec![vec![3, 4]], vec![3, 4]),
        ("reshape", OpKind::Reshape, vec![vec![2, 6]], vec![4, 3]),
        ("tanh", OpKind::Tanh, vec![vec![3, 4]], vec![3, 4]),
        ("sigmoid", OpKind::Sigmoid, vec![vec![3, 4]], vec![3, 4]),
        ("mean", OpKind::Mean, vec![vec![3, 4]], vec![1]),
        ("l2_normalize", OpKind::Normalize, vec![vec![3, 5]], vec![3, 5]),
        (
            "cosine_similarity",
            OpKind::Cosine,
            vec![vec![4, 6], vec![4, 6]],
            vec![4],
        ),
        ("softmax_cross_entropy", OpKind::SoftmaxCe, vec![vec![5, 3]], vec![1]),
    ];
    cases
        .into_iter()
        .map(|(name, kind, shapes, wdims)| {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
            let mut weights = randn(&mut rng, &wdims);
            if matches!(kind, OpKind::Mean | OpKind::SoftmaxCe) {
                weights = Tensor::ones(&[1])?;
            }
            let program = OpProgram {
                kind,
                weights,
                labels: vec![0, 2, 1, 1, 0],
            };
            check_program(name, &program, &inputs, h, tol)
        })
        .collect()
}
