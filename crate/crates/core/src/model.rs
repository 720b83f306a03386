//! Toy frozen dual encoder with per-layer fine and coarse ring adapters.
//!
//! Each branch (visual, textual) is a frozen stack of residual tanh layers.
//! At layer `l` the frozen output is augmented with two gated adapters:
//!
//! ```text
//! y = Frozen_l(x) + g_fine(x) * Fine_l(x) + g_coarse(x) * Coarse_l(x)
//! (g_fine, g_coarse) = sigmoid(W_c x + b_c)
//! ```
//!
//! The combinator `(W_c, b_c)` is shared by all layers of a branch. Only the
//! adapter cores and combinators are trainable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::ring::{adapter_forward, trainable_param_count, FactorizationPlan, TrAdapterStack};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Visual,
    Textual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

/// Which adapter granularities are inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    Both,
    FineOnly,
    CoarseOnly,
}

impl AdapterMode {
    pub fn has_fine(self) -> bool {
        matches!(self, AdapterMode::Both | AdapterMode::FineOnly)
    }

    pub fn has_coarse(self) -> bool {
        matches!(self, AdapterMode::Both | AdapterMode::CoarseOnly)
    }
}

/// Dimensions, ranks, seeds and initialization of a [`DualEncoderModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub in_factors: Vec<usize>,
    pub out_factors: Vec<usize>,
    /// Bond dimension of every ring edge except the layer rank.
    pub shared_rank: usize,
    pub fine_layer_rank: usize,
    pub coarse_layer_rank: usize,
    pub adapters: AdapterMode,
    /// Std of the Gaussian used for shared cores.
    pub init_std: f64,
    pub temperature: f64,
    pub activation: Activation,
    /// Seed of the weights common to both branches.
    pub backbone_seed: u64,
    pub visual_seed: u64,
    pub textual_seed: u64,
    /// Mixing weight of the branch-specific perturbation; 0 makes both
    /// branches identical.
    pub branch_divergence: f64,
    pub adapter_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            width: 64,
            layers: 6,
            in_factors: vec![4, 4, 4],
            out_factors: vec![4, 4, 4],
            shared_rank: 2,
            fine_layer_rank: 8,
            coarse_layer_rank: 1,
            adapters: AdapterMode::Both,
            init_std: 0.5,
            temperature: 0.07,
            activation: Activation::Tanh,
            backbone_seed: 0,
            visual_seed: 1,
            textual_seed: 2,
            branch_divergence: 0.6,
            adapter_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn fine_plan(&self) -> Result<FactorizationPlan> {
        self.plan(self.fine_layer_rank)
    }

    pub fn coarse_plan(&self) -> Result<FactorizationPlan> {
        self.plan(self.coarse_layer_rank)
    }

    fn plan(&self, layer_rank: usize) -> Result<FactorizationPlan> {
        FactorizationPlan::with_layer_rank(
            self.in_factors.clone(),
            self.out_factors.clone(),
            self.layers,
            self.shared_rank,
            layer_rank,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.layers == 0 {
            return Err(Error::Config("input_dim, width and layers must be >= 1".into()));
        }
        let plan = self.fine_plan()?;
        self.coarse_plan()?;
        if plan.input_width() != self.width || plan.output_width() != self.width {
            return Err(Error::Config(format!(
                "adapter factors give {}x{}, model width is {}",
                plan.input_width(),
                plan.output_width(),
                self.width
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std must be > 0, got {}", self.init_std)));
        }
        if !(self.branch_divergence >= 0.0 && self.branch_divergence.is_finite()) {
            return Err(Error::Config("branch_divergence must be >= 0".into()));
        }
        Ok(())
    }

    pub fn branch_seed(&self, branch: Branch) -> u64 {
        match branch {
            Branch::Visual => self.visual_seed,
            Branch::Textual => self.textual_seed,
        }
    }

    /// Trainable scalars per branch: adapter stacks plus combinator.
    pub fn trainable_per_branch(&self) -> Result<ParamBreakdown> {
        let fine = if self.adapters.has_fine() {
            trainable_param_count(&self.fine_plan()?)
        } else {
            0
        };
        let coarse = if self.adapters.has_coarse() {
            trainable_param_count(&self.coarse_plan()?)
        } else {
            0
        };
        Ok(ParamBreakdown {
            fine,
            coarse,
            combinator: 2 * self.width + 2,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub fine: usize,
    pub coarse: usize,
    pub combinator: usize,
}

impl ParamBreakdown {
    pub fn adapters(&self) -> usize {
        self.fine + self.coarse
    }

    pub fn total(&self) -> usize {
        self.fine + self.coarse + self.combinator
    }
}

// splitmix64 finalizer, used to derive independent stream seeds
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frozen residual MLP stack: `h_0 = x P`, `h_{l+1} = h_l + act(h_l W_l + b_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    activation: Activation,
    projection: Tensor,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl FrozenEncoder {
    /// Weights are `(shared + divergence * branch) / sqrt(1 + divergence²)`,
    /// with the shared draw seeded by `backbone_seed` and the perturbation by
    /// `branch_seed`.
    pub fn generate(
        input_dim: usize,
        width: usize,
        layers: usize,
        activation: Activation,
        backbone_seed: u64,
        branch_seed: u64,
        divergence: f64,
    ) -> Result<Self> {
        let mut shared = ChaCha8Rng::seed_from_u64(mix(backbone_seed, 0xBAC0));
        let mut own = ChaCha8Rng::seed_from_u64(mix(branch_seed, 0xB7A4));
        let norm = (1.0 + divergence * divergence).sqrt();
        let mut draw = |dims: &[usize], std: f64| -> Result<Tensor> {
            let normal = Normal::new(0.0, std).expect("positive std");
            let n: usize = dims.iter().product();
            let data = (0..n)
                .map(|_| {
                    let s = normal.sample(&mut shared);
                    let b = normal.sample(&mut own);
                    (s + divergence * b) / norm
                })
                .collect();
            Ok(Tensor::from_vec(dims, data)?)
        };
        let projection = draw(&[input_dim, width], 1.0 / (input_dim as f64).sqrt())?;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for _ in 0..layers {
            weights.push(draw(&[width, width], 1.0 / (width as f64).sqrt())?);
            biases.push(draw(&[width], 0.1)?);
        }
        Ok(FrozenEncoder {
            activation,
            projection,
            weights,
            biases,
        })
    }

    /// Identity projection and layers, zero bias, no nonlinearity.
    pub fn identity(width: usize, layers: usize) -> Result<Self> {
        Ok(FrozenEncoder {
            activation: Activation::Linear,
            projection: Tensor::eye(width)?,
            weights: (0..layers)
                .map(|_| Tensor::eye(width))
                .collect::<std::result::Result<_, _>>()?,
            biases: (0..layers)
                .map(|_| Tensor::zeros(&[width]))
                .collect::<std::result::Result<_, _>>()?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.projection.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.projection.dims()[1]
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// SHA-256 over every weight, as hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.projection.to_le_bytes());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            h.update(w.to_le_bytes());
            h.update(b.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn bind<G: Graph>(&self, g: &mut G) -> FrozenParams<G::Value> {
        FrozenParams {
            activation: self.activation,
            projection: g.constant(&self.projection),
            weights: self.weights.iter().map(|w| g.constant(w)).collect(),
            biases: self.biases.iter().map(|b| g.constant(b)).collect(),
        }
    }

    /// Frozen embeddings after the last layer, L2-normalized, for `(B, D_in)`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Eager;
        let fp = self.bind(&mut g);
        let xv = g.constant(x);
        let mut h = fp.project(&mut g, &xv)?;
        for l in 0..self.layers() {
            h = fp.layer(&mut g, l, &h)?;
        }
        g.l2_normalize(&h)
    }
}

struct FrozenParams<V> {
    activation: Activation,
    projection: V,
    weights: Vec<V>,
    biases: Vec<V>,
}

// Broadcasts a `(n)` vector across `rows`, giving `(rows, n)`.
fn broadcast_rows<G: Graph>(g: &mut G, v: &G::Value, rows: usize) -> Result<G::Value> {
    let ones = g.constant(&Tensor::ones(&[rows])?);
    g.contract(&ones, v, &[])
}

impl<V: Clone> FrozenParams<V> {
    fn project<G: Graph<Value = V>>(&self, g: &mut G, x: &V) -> Result<V> {
        let dims = g.value(x).dims().to_vec();
        let want = g.value(&self.projection).dims()[0];
        if dims.len() != 2 || dims[1] != want {
            return Err(Error::LengthMismatch {
                expected: want,
                got: dims.last().copied().unwrap_or(0),
            });
        }
        g.contract(x, &self.projection, &[(1, 0)])
    }

    fn layer<G: Graph<Value = V>>(&self, g: &mut G, l: usize, h: &V) -> Result<V> {
        let rows = g.value(h).dims()[0];
        let lin = g.contract(h, &self.weights[l], &[(1, 0)])?;
        let bias = broadcast_rows(g, &self.biases[l], rows)?;
        let pre = g.add(&lin, &bias)?;
        let act = match self.activation {
            Activation::Tanh => g.tanh(&pre)?,
            Activation::Linear => pre,
        };
        g.add(h, &act)
    }
}

/// Learnable gate generator, `sigmoid(W x + b)` with `W` of shape `(2, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Combinator {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Combinator {
    pub fn zeros(width: usize) -> Result<Self> {
        Ok(Combinator {
            weight: Tensor::zeros(&[2, width])?,
            bias: Tensor::zeros(&[2])?,
        })
    }

    /// `(g_fine, g_coarse)` for one input vector.
    pub fn gates(&self, x: &[f64]) -> Result<(f64, f64)> {
        let mut g = Eager;
        let w = g.constant(&self.weight);
        let b = g.constant(&self.bias);
        let xt = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
        let gates = gates_graph(&mut g, &w, &b, &xt)?;
        Ok((gates.data()[0], gates.data()[1]))
    }
}

// (B, D) -> (B, 2) gates
fn gates_graph<G: Graph>(g: &mut G, w: &G::Value, b: &G::Value, h: &G::Value) -> Result<G::Value> {
    let dims = g.value(h).dims().to_vec();
    let width = g.value(w).dims()[1];
    if dims.len() != 2 || dims[1] != width {
        return Err(Error::LengthMismatch {
            expected: width,
            got: dims.last().copied().unwrap_or(0),
        });
    }
    let z = g.contract(h, w, &[(1, 1)])?;
    let bias = broadcast_rows(g, b, dims[0])?;
    let pre = g.add(&z, &bias)?;
    g.sigmoid(&pre)
}

/// One encoder with its frozen backbone, adapters and combinator.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBranch {
    pub frozen: FrozenEncoder,
    pub fine: Option<TrAdapterStack>,
    pub coarse: Option<TrAdapterStack>,
    pub combinator: Combinator,
}

impl EncoderBranch {
    /// Trainable tensors in canonical order: fine cores, coarse cores,
    /// combinator weight, combinator bias.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        if let Some(s) = &self.fine {
            out.extend(s.cores());
        }
        if let Some(s) = &self.coarse {
            out.extend(s.cores());
        }
        out.push(&self.combinator.weight);
        out.push(&self.combinator.bias);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(s) = &mut self.fine {
            out.extend(s.cores_mut().iter_mut());
        }
        if let Some(s) = &mut self.coarse {
            out.extend(s.cores_mut().iter_mut());
        }
        out.push(&mut self.combinator.weight);
        out.push(&mut self.combinator.bias);
        out
    }

    /// Registers the branch on `g`; adapters and combinator become
    /// trainable leaves when `trainable` is set.
    pub fn bind<G: Graph>(&self, g: &mut G, trainable: bool) -> BoundBranch<G::Value> {
        let params = self.trainable().into_iter().map(|t| g.leaf(t, trainable)).collect();
        self.bind_params(g, params)
            .expect("parameter list built from this branch")
    }

    /// Registers the frozen backbone on `g` and uses `params` (in the order
    /// of [`EncoderBranch::trainable`]) for the adapters and combinator.
    pub fn bind_params<G: Graph>(&self, g: &mut G, params: Vec<G::Value>) -> Result<BoundBranch<G::Value>> {
        let expected = self.trainable().len();
        if params.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: params.len(),
            });
        }
        let mut it = params.into_iter();
        let mut take = |s: &Option<TrAdapterStack>| {
            s.as_ref()
                .map(|s| (s.plan().clone(), it.by_ref().take(s.cores().len()).collect::<Vec<_>>()))
        };
        let fine = take(&self.fine);
        let coarse = take(&self.coarse);
        let comb_w = it.next().expect("combinator weight");
        let comb_b = it.next().expect("combinator bias");
        Ok(BoundBranch {
            frozen: self.frozen.bind(g),
            fine,
            coarse,
            comb_w,
            comb_b,
        })
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }
}

/// An [`EncoderBranch`] registered on a graph.
pub struct BoundBranch<V> {
    frozen: FrozenParams<V>,
    fine: Option<(FactorizationPlan, Vec<V>)>,
    coarse: Option<(FactorizationPlan, Vec<V>)>,
    comb_w: V,
    comb_b: V,
}

impl<V: Clone> BoundBranch<V> {
    /// Trainable handles, in the order of [`EncoderBranch::trainable`].
    pub fn params(&self) -> Vec<V> {
        let mut out = Vec::new();
        if let Some((_, c)) = &self.fine {
            out.extend(c.iter().cloned());
        }
        if let Some((_, c)) = &self.coarse {
            out.extend(c.iter().cloned());
        }
        out.push(self.comb_w.clone());
        out.push(self.comb_b.clone());
        out
    }

    pub fn gates<G: Graph<Value = V>>(&self, g: &mut G, h: &V) -> Result<V> {
        gates_graph(g, &self.comb_w, &self.comb_b, h)
    }

    /// Layer `l` with both gated adapters, for a `(B, D)` batch.
    pub fn layer_forward<G: Graph<Value = V>>(&self, g: &mut G, l: usize, h: &V) -> Result<V> {
        let layers = self.frozen.weights.len();
        if l >= layers {
            return Err(Error::LayerOutOfRange { index: l, layers });
        }
        let mut y = self.frozen.layer(g, l, h)?;
        if self.fine.is_none() && self.coarse.is_none() {
            return Ok(y);
        }
        let (rows, width) = {
            let d = g.value(h).dims();
            (d[0], d[1])
        };
        let gates = self.gates(g, h)?;
        let ones_w = g.constant(&Tensor::ones(&[width])?);
        for (slot, adapter) in [&self.fine, &self.coarse].into_iter().enumerate() {
            let Some((plan, cores)) = adapter else { continue };
            let out = adapter_forward(g, plan, cores, l, h)?;
            let pick = g.constant(&Tensor::one_hot(2, slot)?);
            let gate = g.contract(&gates, &pick, &[(1, 0)])?;
            let gate = g.contract(&gate, &ones_w, &[])?;
            debug_assert_eq!(g.value(&gate).dims(), &[rows, width]);
            let gated = g.mul(&gate, &out)?;
            y = g.add(&y, &gated)?;
        }
        Ok(y)
    }

    /// Hidden state after every layer (unnormalized), `L` entries.
    pub fn trace<G: Graph<Value = V>>(&self, g: &mut G, x: &V) -> Result<Vec<V>> {
        let mut h = self.frozen.project(g, x)?;
        let mut states = Vec::with_capacity(self.frozen.weights.len());
        for l in 0..self.frozen.weights.len() {
            h = self.layer_forward(g, l, &h)?;
            states.push(h.clone());
        }
        Ok(states)
    }

    /// Unit-norm embeddings of a `(B, D_in)` batch.
    pub fn encode<G: Graph<Value = V>>(&self, g: &mut G, x: &V) -> Result<V> {
        let states = self.trace(g, x)?;
        let last = states.last().expect("at least one layer");
        g.l2_normalize(last)
    }
}

/// Frozen visual and textual encoders with inserted adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderModel {
    pub config: ModelConfig,
    pub visual: EncoderBranch,
    pub textual: EncoderBranch,
}

impl DualEncoderModel {
    /// Fresh model: generated backbones, zero layer cores, zero combinators.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let fine_plan = config.fine_plan()?;
        let coarse_plan = config.coarse_plan()?;
        let make = |branch: Branch| -> Result<EncoderBranch> {
            let seed = config.branch_seed(branch);
            let frozen = FrozenEncoder::generate(
                config.input_dim,
                config.width,
                config.layers,
                config.activation,
                config.backbone_seed,
                seed,
                config.branch_divergence,
            )?;
            let stack_seed = |kind: u64| mix(mix(config.adapter_seed, seed), kind);
            let fine = if config.adapters.has_fine() {
                Some(TrAdapterStack::init(&fine_plan, stack_seed(1), config.init_std)?)
            } else {
                None
            };
            let coarse = if config.adapters.has_coarse() {
                Some(TrAdapterStack::init(&coarse_plan, stack_seed(2), config.init_std)?)
            } else {
                None
            };
            Ok(EncoderBranch {
                frozen,
                fine,
                coarse,
                combinator: Combinator::zeros(config.width)?,
            })
        };
        Ok(DualEncoderModel {
            config: config.clone(),
            visual: make(Branch::Visual)?,
            textual: make(Branch::Textual)?,
        })
    }

    pub fn branch(&self, branch: Branch) -> &EncoderBranch {
        match branch {
            Branch::Visual => &self.visual,
            Branch::Textual => &self.textual,
        }
    }

    pub fn branch_mut(&mut self, branch: Branch) -> &mut EncoderBranch {
        match branch {
            Branch::Visual => &mut self.visual,
            Branch::Textual => &mut self.textual,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    /// Visual then textual trainable tensors.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut v = self.visual.trainable();
        v.extend(self.textual.trainable());
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.visual.trainable_mut();
        v.extend(self.textual.trainable_mut());
        v
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Fingerprint over both frozen backbones.
    pub fn frozen_fingerprint(&self) -> String {
        format!(
            "{}:{}",
            self.visual.frozen.fingerprint(),
            self.textual.frozen.fingerprint()
        )
    }

    /// `(g_fine, g_coarse)` of a branch's combinator for a layer input.
    pub fn combinator_gates(&self, branch: Branch, x: &[f64]) -> Result<(f64, f64)> {
        self.branch(branch).combinator.gates(x)
    }

    /// One layer of `branch` applied to a single width-`D` vector.
    pub fn layer_forward(&self, branch: Branch, l: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Eager;
        let bound = self.branch(branch).bind(&mut g, false);
        let h = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
        Ok(bound.layer_forward(&mut g, l, &h)?.into_vec())
    }

    /// Unit-norm embeddings for a `(B, D_in)` batch.
    pub fn encode_batch(&self, branch: Branch, x: &Tensor) -> Result<Tensor> {
        let mut g = Eager;
        let bound = self.branch(branch).bind(&mut g, false);
        bound.encode(&mut g, x)
    }

    /// Frozen-backbone embeddings for a `(B, D_in)` batch.
    pub fn frozen_encode_batch(&self, branch: Branch, x: &Tensor) -> Result<Tensor> {
        self.branch(branch).frozen.encode_batch(x)
    }

    /// Per-layer hidden states for a `(B, D_in)` batch.
    pub fn layer_states(&self, branch: Branch, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Eager;
        let bound = self.branch(branch).bind(&mut g, false);
        bound.trace(&mut g, x)
    }

    pub fn encode_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
        Ok(self.encode_batch(Branch::Visual, &t)?.into_vec())
    }

    pub fn encode_text(&self, prototype: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::from_vec(&[1, prototype.len()], prototype.to_vec())?;
        Ok(self.encode_batch(Branch::Textual, &t)?.into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::norm;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            width: 8,
            layers: 3,
            in_factors: vec![2, 4],
            out_factors: vec![4, 2],
            shared_rank: 2,
            fine_layer_rank: 3,
            coarse_layer_rank: 1,
            ..ModelConfig::default()
        }
    }

    fn perturb(model: &mut DualEncoderModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.3).unwrap();
        for t in model.trainable_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }

    #[test]
    fn gates_zero_and_saturated() {
        let mut c = Combinator::zeros(4).unwrap();
        assert_eq!(c.gates(&[1.0, 2.0, 3.0, 4.0]).unwrap(), (0.5, 0.5));
        c.bias = Tensor::from_vec(&[2], vec![20.0, -20.0]).unwrap();
        let (f, k) = c.gates(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((f - 1.0).abs() < 1e-8 && k.abs() < 1e-8);
    }

    #[test]
    fn gates_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let w: Vec<f64> = (0..10).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..2).map(|_| normal.sample(&mut rng)).collect();
        let x: Vec<f64> = (0..5).map(|_| normal.sample(&mut rng)).collect();
        let c = Combinator {
            weight: Tensor::from_vec(&[2, 5], w.clone()).unwrap(),
            bias: Tensor::from_vec(&[2], b.clone()).unwrap(),
        };
        let (f, k) = c.gates(&x).unwrap();
        for (gate, row) in [(f, 0), (k, 1)] {
            let z: f64 = (0..5).map(|i| w[row * 5 + i] * x[i]).sum::<f64>() + b[row];
            let want = 1.0 / (1.0 + (-z).exp());
            assert!((gate - want).abs() < 1e-14);
            assert!(gate > 0.0 && gate < 1.0);
        }
    }

    #[test]
    fn zero_init_equals_frozen() {
        let model = DualEncoderModel::new(&small_config()).unwrap();
        let x = Tensor::from_vec(&[2, 6], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        for branch in [Branch::Visual, Branch::Textual] {
            let a = model.encode_batch(branch, &x).unwrap();
            let b = model.frozen_encode_batch(branch, &x).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn layer_forward_terms() {
        let mut model = DualEncoderModel::new(&small_config()).unwrap();
        perturb(&mut model, 9);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos()).collect();
        let l = 1;
        let y = model.layer_forward(Branch::Visual, l, &x).unwrap();

        // independent composition of the three terms
        let br = &model.visual;
        let fr = &br.frozen;
        let frozen: Vec<f64> = (0..8)
            .map(|o| {
                let z: f64 = (0..8).map(|i| x[i] * fr.weights[l].at(&[i, o])).sum::<f64>() + fr.biases[l].data()[o];
                x[o] + z.tanh()
            })
            .collect();
        let (gf, gc) = br.combinator.gates(&x).unwrap();
        let fine = br.fine.as_ref().unwrap().forward(l, &x).unwrap();
        let coarse = br.coarse.as_ref().unwrap().forward(l, &x).unwrap();
        for o in 0..8 {
            let want = frozen[o] + gf * fine[o] + gc * coarse[o];
            assert!((y[o] - want).abs() < 1e-12, "{o}: {} vs {want}", y[o]);
        }
    }

    #[test]
    fn saturated_gate_selects_fine() {
        let mut model = DualEncoderModel::new(&small_config()).unwrap();
        perturb(&mut model, 2);
        model.visual.combinator.weight = Tensor::zeros(&[2, 8]).unwrap();
        model.visual.combinator.bias = Tensor::from_vec(&[2], vec![40.0, -40.0]).unwrap();
        let x: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let y = model.layer_forward(Branch::Visual, 0, &x).unwrap();
        let mut frozen_only = model.clone();
        frozen_only.visual.fine = None;
        frozen_only.visual.coarse = None;
        let base = frozen_only.layer_forward(Branch::Visual, 0, &x).unwrap();
        let fine = model.visual.fine.as_ref().unwrap().forward(0, &x).unwrap();
        for o in 0..8 {
            assert!((y[o] - (base[o] + fine[o])).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_out_of_range() {
        let model = DualEncoderModel::new(&small_config()).unwrap();
        assert!(matches!(
            model.layer_forward(Branch::Visual, 3, &[0.0; 8]),
            Err(Error::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn encode_is_unit_norm() {
        let mut model = DualEncoderModel::new(&small_config()).unwrap();
        perturb(&mut model, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| normal.sample(&mut rng)).collect();
            let f = model.encode_image(&x).unwrap();
            assert!((norm(&f) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn branch_symmetry_with_equal_seeds() {
        let cfg = ModelConfig {
            visual_seed: 9,
            textual_seed: 9,
            ..small_config()
        };
        let mut model = DualEncoderModel::new(&cfg).unwrap();
        assert_eq!(model.visual, model.textual);
        perturb(&mut model, 3);
        let x = [0.3, -0.1, 0.8, 0.0, 1.2, -0.7];
        let mut swapped = model.clone();
        std::mem::swap(&mut swapped.visual, &mut swapped.textual);
        assert_eq!(model.encode_image(&x).unwrap(), swapped.encode_text(&x).unwrap());
        assert_eq!(model.encode_text(&x).unwrap(), swapped.encode_image(&x).unwrap());
    }

    #[test]
    fn same_seed_same_backbone() {
        let a = FrozenEncoder::generate(4, 8, 2, Activation::Tanh, 1, 2, 0.5).unwrap();
        let b = FrozenEncoder::generate(4, 8, 2, Activation::Tanh, 1, 2, 0.5).unwrap();
        let c = FrozenEncoder::generate(4, 8, 2, Activation::Tanh, 1, 3, 0.5).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        let d = FrozenEncoder::generate(4, 8, 2, Activation::Tanh, 1, 3, 0.0).unwrap();
        let e = FrozenEncoder::generate(4, 8, 2, Activation::Tanh, 1, 4, 0.0).unwrap();
        assert_eq!(d, e);
    }

    #[test]
    fn config_rejects_bad_factors() {
        let cfg = ModelConfig {
            in_factors: vec![4, 4],
            ..ModelConfig::default()
        };
        assert!(matches!(DualEncoderModel::new(&cfg), Err(Error::Config(_))));
    }
}
