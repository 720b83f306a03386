//! Cross-layer tensor-ring adapters.
//!
//! The `L` adapter matrices of one encoder, each `I x O`, are treated as a
//! single tensor of shape `(I_1..I_p, L, O_1..O_q)` held as a closed ring of
//! `p + q + 1` three-way cores:
//!
//! ```text
//! A[i_1..i_p, l, o_1..o_q] = trace( G1[:, i_1, :] ... Gp[:, i_p, :]
//!                                   Gl[:, l, :]
//!                                   Gp+2[:, o_1, :] ... Gp+q+1[:, o_q, :] )
//! ```
//!
//! Every core except the layer core is shared by all layers; slice `l` of the
//! layer core, shape `(R_p, R_{p+1})`, is what makes layer `l` distinct. The
//! forward pass never builds the dense `I x O` matrix: the input is folded
//! into the ring one core at a time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Mode factorization and ring ranks for one adapter stack.
///
/// `ranks` has `p + q + 2` entries; the last equals the first and closes the
/// ring. Core `j` has shape `(ranks[j], mode_j, ranks[j + 1])` with the modes
/// ordered `[in_factors.., layers, out_factors..]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizationPlan {
    pub in_factors: Vec<usize>,
    pub out_factors: Vec<usize>,
    pub layers: usize,
    pub ranks: Vec<usize>,
}

impl FactorizationPlan {
    pub fn new(in_factors: Vec<usize>, out_factors: Vec<usize>, layers: usize, ranks: Vec<usize>) -> Result<Self> {
        let plan = FactorizationPlan {
            in_factors,
            out_factors,
            layers,
            ranks,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Every bond gets `shared_rank` except `R_p`, the layer rank.
    pub fn with_layer_rank(
        in_factors: Vec<usize>,
        out_factors: Vec<usize>,
        layers: usize,
        shared_rank: usize,
        layer_rank: usize,
    ) -> Result<Self> {
        let p = in_factors.len();
        let mut ranks = vec![shared_rank; p + out_factors.len() + 2];
        if p < ranks.len() {
            ranks[p] = layer_rank;
        }
        Self::new(in_factors, out_factors, layers, ranks)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        if self.in_factors.is_empty() || self.out_factors.is_empty() {
            return bad("need at least one input and one output factor".into());
        }
        if self.in_factors.iter().chain(&self.out_factors).any(|&f| f == 0) {
            return bad("factors must be >= 1".into());
        }
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        let want = self.in_factors.len() + self.out_factors.len() + 2;
        if self.ranks.len() != want {
            return bad(format!("expected {want} ranks, got {}", self.ranks.len()));
        }
        if self.ranks.contains(&0) {
            return bad("ranks must be >= 1".into());
        }
        if self.ranks[0] != self.ranks[want - 1] {
            return bad(format!(
                "ring not closed: first rank {} != last rank {}",
                self.ranks[0],
                self.ranks[want - 1]
            ));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.in_factors.len()
    }

    pub fn q(&self) -> usize {
        self.out_factors.len()
    }

    pub fn input_width(&self) -> usize {
        self.in_factors.iter().product()
    }

    pub fn output_width(&self) -> usize {
        self.out_factors.iter().product()
    }

    pub fn num_cores(&self) -> usize {
        self.p() + self.q() + 1
    }

    /// Index of the layer core within the ring.
    pub fn layer_index(&self) -> usize {
        self.p()
    }

    pub fn layer_rank(&self) -> usize {
        self.ranks[self.p()]
    }

    /// `[I_1..I_p, L, O_1..O_q]`.
    pub fn mode_sizes(&self) -> Vec<usize> {
        self.in_factors
            .iter()
            .copied()
            .chain(std::iter::once(self.layers))
            .chain(self.out_factors.iter().copied())
            .collect()
    }

    pub fn core_shape(&self, j: usize) -> [usize; 3] {
        [self.ranks[j], self.mode_sizes()[j], self.ranks[j + 1]]
    }
}

/// Number of trainable scalars in a stack built from `plan`:
/// `Σ R_{j-1} I_j R_j + R_p L R_{p+1} + Σ R_{p+j} O_j R_{p+j+1}`.
pub fn trainable_param_count(plan: &FactorizationPlan) -> usize {
    let p = plan.p();
    let r = &plan.ranks;
    let input: usize = plan
        .in_factors
        .iter()
        .enumerate()
        .map(|(j, &n)| r[j] * n * r[j + 1])
        .sum();
    let layer = r[p] * plan.layers * r[p + 1];
    let output: usize = plan
        .out_factors
        .iter()
        .enumerate()
        .map(|(j, &n)| r[p + 1 + j] * n * r[p + 2 + j])
        .sum();
    input + layer + output
}

/// Parameter count of `L` independent rank-`r` matrix adapters, `(I + O) r L`.
pub fn per_layer_matrix_count(input: usize, output: usize, rank: usize, layers: usize) -> usize {
    (input + output) * rank * layers
}

/// All adapters of one encoder at one granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct TrAdapterStack {
    plan: FactorizationPlan,
    cores: Vec<Tensor>,
}

impl TrAdapterStack {
    /// Shared cores drawn i.i.d. `N(0, std²)` from a seeded ChaCha stream,
    /// layer core set to zero so every adapter starts as the zero map.
    pub fn init(plan: &FactorizationPlan, seed: u64, std: f64) -> Result<Self> {
        plan.validate()?;
        if !(std.is_finite() && std > 0.0) {
            return Err(Error::InvalidArgument(format!("init std must be > 0, got {std}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let cores = (0..plan.num_cores())
            .map(|j| {
                let dims = plan.core_shape(j);
                if j == plan.layer_index() {
                    return Tensor::zeros(&dims);
                }
                let n = dims.iter().product();
                Tensor::from_vec(&dims, (0..n).map(|_| normal.sample(&mut rng)).collect())
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(TrAdapterStack {
            plan: plan.clone(),
            cores,
        })
    }

    pub fn from_cores(plan: FactorizationPlan, cores: Vec<Tensor>) -> Result<Self> {
        plan.validate()?;
        if cores.len() != plan.num_cores() {
            return Err(Error::InvalidPlan(format!(
                "expected {} cores, got {}",
                plan.num_cores(),
                cores.len()
            )));
        }
        for (j, core) in cores.iter().enumerate() {
            if core.dims() != plan.core_shape(j) {
                return Err(Error::InvalidPlan(format!(
                    "core {j} has shape {:?}, plan wants {:?}",
                    core.dims(),
                    plan.core_shape(j)
                )));
            }
        }
        Ok(TrAdapterStack { plan, cores })
    }

    pub fn plan(&self) -> &FactorizationPlan {
        &self.plan
    }

    /// All cores in ring order.
    pub fn cores(&self) -> &[Tensor] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [Tensor] {
        &mut self.cores
    }

    pub fn input_cores(&self) -> &[Tensor] {
        &self.cores[..self.plan.p()]
    }

    pub fn layer_core(&self) -> &Tensor {
        &self.cores[self.plan.layer_index()]
    }

    pub fn layer_core_mut(&mut self) -> &mut Tensor {
        let i = self.plan.layer_index();
        &mut self.cores[i]
    }

    pub fn output_cores(&self) -> &[Tensor] {
        &self.cores[self.plan.p() + 1..]
    }

    pub fn stored_scalars(&self) -> usize {
        self.cores.iter().map(Tensor::len).sum()
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l >= self.plan.layers {
            return Err(Error::LayerOutOfRange {
                index: l,
                layers: self.plan.layers,
            });
        }
        Ok(())
    }

    /// `G_l`, shape `(R_p, R_{p+1})`.
    pub fn layer_slice(&self, l: usize) -> Result<Tensor> {
        self.check_layer(l)?;
        let onehot = Tensor::one_hot(self.plan.layers, l)?;
        Ok(tensor::contract(&onehot, self.layer_core(), &[(0, 1)])?)
    }

    /// Dense `(I, O)` adapter matrix of layer `l`, so that
    /// `y_o = Σ_i A[i, o] x_i`. Used as an oracle and for inspection only.
    pub fn reconstruct_layer_weight(&self, l: usize) -> Result<Tensor> {
        self.check_layer(l)?;
        let slice = self.layer_slice(l)?;
        let (rp, rq) = (slice.dims()[0], slice.dims()[1]);
        let mut cores = self.cores.clone();
        cores[self.plan.layer_index()] = slice.reshape(&[rp, 1, rq])?;
        let full = TensorRing::new(cores)?.reconstruct()?;
        Ok(full.reshape(&[self.plan.input_width(), self.plan.output_width()])?)
    }

    /// Applies adapter `l` to one input vector.
    pub fn forward(&self, l: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Eager;
        let input = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
        let y = adapter_forward(&mut g, &self.plan, &self.cores, l, &input)?;
        Ok(y.into_vec())
    }

    /// The full ring including the layer mode.
    pub fn ring(&self) -> TensorRing {
        TensorRing {
            cores: self.cores.clone(),
        }
    }
}

/// Applies adapter `l` to a batch `x` of shape `(B, I)`, returning `(B, O)`.
///
/// Steps: reshape `x` to `(B, I_1..I_p)`; fold the input cores left to
/// right, carrying `(B, remaining inputs.., R_0, R_cur)`; multiply by the
/// layer slice; unfold the output cores as `(B, R_0, O_1..O_j, R_cur)`;
/// close the ring with a trace over `R_0`; reshape to `(B, O)`.
pub fn adapter_forward<G: Graph>(
    g: &mut G,
    plan: &FactorizationPlan,
    cores: &[G::Value],
    l: usize,
    x: &G::Value,
) -> Result<G::Value> {
    if l >= plan.layers {
        return Err(Error::LayerOutOfRange {
            index: l,
            layers: plan.layers,
        });
    }
    let dims = g.value(x).dims().to_vec();
    if dims.len() != 2 || dims[1] != plan.input_width() {
        return Err(Error::LengthMismatch {
            expected: plan.input_width(),
            got: dims.last().copied().unwrap_or(0),
        });
    }
    let batch = dims[0];
    let p = plan.p();

    let mut xdims = vec![batch];
    xdims.extend(&plan.in_factors);
    let xt = g.reshape(x, &xdims)?;

    // (B, I_2..I_p, R_0, R_1)
    let mut state = g.contract(&xt, &cores[0], &[(1, 1)])?;
    for core in &cores[1..p] {
        let last = g.value(&state).rank() - 1;
        state = g.contract(&state, core, &[(last, 0), (1, 1)])?;
    }
    // state is (B, R_0, R_p)
    let onehot = g.constant(&Tensor::one_hot(plan.layers, l)?);
    let slice = g.contract(&onehot, &cores[p], &[(0, 1)])?;
    state = g.contract(&state, &slice, &[(2, 0)])?;
    for core in &cores[p + 1..] {
        let last = g.value(&state).rank() - 1;
        state = g.contract(&state, core, &[(last, 0)])?;
    }
    // (B, R_0, O_1..O_q, R_0) -> trace
    let eye = g.constant(&Tensor::eye(plan.ranks[0])?);
    let last = g.value(&state).rank() - 1;
    let y = g.contract(&state, &eye, &[(1, 0), (last, 1)])?;
    g.reshape(&y, &[batch, plan.output_width()])
}

/// A closed chain of three-way cores `(R_{j-1}, n_j, R_j)` with `R_d = R_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRing {
    cores: Vec<Tensor>,
}

impl TensorRing {
    pub fn new(cores: Vec<Tensor>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::InvalidPlan("ring needs at least one core".into()));
        }
        let d = cores.len();
        for (j, core) in cores.iter().enumerate() {
            if core.rank() != 3 {
                return Err(Error::InvalidPlan(format!("core {j} is not three-way")));
            }
            let next = &cores[(j + 1) % d];
            if core.dims()[2] != next.dims()[0] {
                return Err(Error::InvalidPlan(format!(
                    "bond between core {j} and {} mismatched: {} vs {}",
                    (j + 1) % d,
                    core.dims()[2],
                    next.dims()[0]
                )));
            }
        }
        Ok(TensorRing { cores })
    }

    pub fn cores(&self) -> &[Tensor] {
        &self.cores
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.dims()[1]).collect()
    }

    /// Full tensor of shape `(n_1..n_d)`.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let mut state = self.cores[0].clone();
        for core in &self.cores[1..] {
            state = tensor::contract(&state, core, &[(state.rank() - 1, 0)])?;
        }
        let eye = Tensor::eye(self.cores[0].dims()[0])?;
        let last = state.rank() - 1;
        Ok(tensor::contract(&state, &eye, &[(0, 0), (last, 1)])?)
    }

    /// Ring starting at core `k` (taken modulo the ring length). Its full
    /// tensor is the original with axes rolled left by `k`.
    pub fn cyclic_shift(&self, k: usize) -> TensorRing {
        let d = self.cores.len();
        let k = k % d;
        let cores = self.cores[k..].iter().chain(&self.cores[..k]).cloned().collect();
        TensorRing { cores }
    }
}

/// Ring of `stack` (including the layer mode) rotated by `k`.
pub fn cyclic_shift(stack: &TrAdapterStack, k: usize) -> TensorRing {
    stack.ring().cyclic_shift(k)
}
