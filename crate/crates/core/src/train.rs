//! Training loop and base/novel evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_program, GradCheckReport, Graph, ScalarProgram, Tape, Var};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{loss_cls, loss_reg, total_loss};
use crate::model::{Branch, DualEncoderModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Preservation ratio λ.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub shots: usize,
    pub shuffle_seed: u64,
    /// Also pull textual class embeddings toward the frozen ones.
    pub textual_reg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            epochs: 10,
            batch_size: 8,
            adam: AdamConfig::default(),
            shots: 16,
            shuffle_seed: 0,
            textual_reg: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.shots == 0 {
            return Err(Error::Config("batch_size and shots must be >= 1".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr < 0.0 || self.adam.eps.is_nan() || self.adam.eps <= 0.0 {
            return Err(Error::Config("lr must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }
}

/// Per-epoch summary; `drift` is the mean `1 - cos` to frozen visual
/// embeddings over the evaluation samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub drift: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss_cls,loss_reg,loss_total,base_acc,novel_acc,hm,drift";

impl Metrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_cls,
            self.loss_reg,
            self.loss_total,
            self.base_acc,
            self.novel_acc,
            self.hm,
            self.drift
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[Metrics]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Frozen-backbone evaluation before any update.
    pub zero_shot: EvalReport,
    pub epochs: Vec<Metrics>,
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&Metrics> {
        self.epochs.last()
    }
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

/// Which model produces the embeddings being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Embedder {
    Adapted,
    Frozen,
}

fn embed(model: &DualEncoderModel, branch: Branch, x: &Tensor, which: Embedder) -> Result<Tensor> {
    match which {
        Embedder::Adapted => model.encode_batch(branch, x),
        Embedder::Frozen => model.frozen_encode_batch(branch, x),
    }
}

/// Fraction of `indices` whose nearest class (by cosine, among `classes`)
/// is their label.
pub fn accuracy(
    model: &DualEncoderModel,
    dataset: &Dataset,
    indices: &[usize],
    classes: &[usize],
    which: Embedder,
) -> Result<f64> {
    if indices.is_empty() || classes.is_empty() {
        return Err(Error::EmptySplit("no samples or classes to evaluate".into()));
    }
    let f_v = embed(model, Branch::Visual, &dataset.features(indices)?, which)?;
    let f_t = embed(model, Branch::Textual, &dataset.prototype_matrix(classes)?, which)?;
    let mut correct = 0usize;
    for (row, &i) in indices.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (k, &c) in classes.iter().enumerate() {
            let s = tensor::cosine_similarity(f_v.row(row), f_t.row(k))?;
            if s > best.0 {
                best = (s, c);
            }
        }
        if best.1 == dataset.samples[i].label {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Base,
    Novel,
}

/// Accuracy on the base or novel test samples, over that task's classes.
pub fn evaluate(model: &DualEncoderModel, dataset: &Dataset, split: &Split, task: Task) -> Result<f64> {
    let (indices, classes, name) = match task {
        Task::Base => (&split.base_test, &split.base_classes, "base"),
        Task::Novel => (&split.novel_test, &split.novel_classes, "novel"),
    };
    if indices.is_empty() {
        return Err(Error::EmptySplit(name.into()));
    }
    accuracy(model, dataset, indices, classes, Embedder::Adapted)
}

/// Mean `1 - cos(f_v, frozen f_v)` over `indices`.
pub fn drift(model: &DualEncoderModel, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptySplit("drift".into()));
    }
    let x = dataset.features(indices)?;
    let a = model.encode_batch(Branch::Visual, &x)?;
    let b = model.frozen_encode_batch(Branch::Visual, &x)?;
    let mut sum = 0.0;
    for r in 0..indices.len() {
        sum += 1.0 - tensor::cosine_similarity(a.row(r), b.row(r))?;
    }
    Ok(sum / indices.len() as f64)
}

fn eval_report(model: &DualEncoderModel, dataset: &Dataset, split: &Split, which: Embedder) -> Result<EvalReport> {
    let score = |indices: &[usize], classes: &[usize]| -> Result<f64> {
        if indices.is_empty() {
            Ok(0.0)
        } else {
            accuracy(model, dataset, indices, classes, which)
        }
    };
    let base_acc = score(&split.base_test, &split.base_classes)?;
    let novel_acc = score(&split.novel_test, &split.novel_classes)?;
    let eval = split.eval_indices();
    let drift = match which {
        Embedder::Frozen => 0.0,
        Embedder::Adapted if eval.is_empty() => 0.0,
        Embedder::Adapted => drift(model, dataset, &eval)?,
    };
    Ok(EvalReport {
        base_acc,
        novel_acc,
        hm: harmonic_mean(base_acc, novel_acc),
        drift,
    })
}

/// Evaluates the adapted model on both tasks.
pub fn evaluate_all(model: &DualEncoderModel, dataset: &Dataset, split: &Split) -> Result<EvalReport> {
    eval_report(model, dataset, split, Embedder::Adapted)
}

/// Evaluates the frozen backbone on both tasks.
pub fn evaluate_zero_shot(model: &DualEncoderModel, dataset: &Dataset, split: &Split) -> Result<EvalReport> {
    eval_report(model, dataset, split, Embedder::Frozen)
}

/// Tensors that stay fixed during one training step.
struct StepInputs<'a> {
    x: &'a Tensor,
    protos: &'a Tensor,
    labels: &'a [usize],
    frozen_v: &'a Tensor,
    frozen_t: Option<&'a Tensor>,
    lambda: f64,
    tau: f64,
}

struct StepLosses<V> {
    cls: V,
    reg: V,
    total: V,
}

fn step_losses<G: Graph>(
    g: &mut G,
    model: &DualEncoderModel,
    params: Vec<G::Value>,
    inp: &StepInputs,
) -> Result<StepLosses<G::Value>> {
    let n_visual = model.visual.trainable().len();
    let mut params = params;
    let textual_params = params.split_off(n_visual);
    let visual = model.visual.bind_params(g, params)?;
    let textual = model.textual.bind_params(g, textual_params)?;

    let x = g.constant(inp.x);
    let protos = g.constant(inp.protos);
    let f_v = visual.encode(g, &x)?;
    let f_t = textual.encode(g, &protos)?;
    let cls = loss_cls(g, &f_v, &f_t, inp.labels, inp.tau)?;
    let frozen_v = g.constant(inp.frozen_v);
    let mut reg = loss_reg(g, &f_v, &frozen_v)?;
    if let Some(ft) = inp.frozen_t {
        let frozen_t = g.constant(ft);
        let reg_t = loss_reg(g, &f_t, &frozen_t)?;
        let sum = g.add(&reg, &reg_t)?;
        reg = g.scale(&sum, 0.5)?;
    }
    let total = total_loss(g, &cls, &reg, inp.lambda)?;
    Ok(StepLosses { cls, reg, total })
}

fn scalar_of(t: &Tensor) -> f64 {
    t.data()[0]
}

/// Fine-tunes adapters and combinators of `model` on the base-class shots.
///
/// Metrics are logged after every epoch; the frozen backbones are never
/// written.
pub fn train(model: &mut DualEncoderModel, dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    dataset.validate()?;
    if dataset.feature_dim() != model.config.input_dim {
        return Err(Error::LengthMismatch {
            expected: model.config.input_dim,
            got: dataset.feature_dim(),
        });
    }
    let split = Split::new(dataset, config.shots);
    if split.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let zero_shot = evaluate_zero_shot(model, dataset, &split)?;

    let frozen_v_all = model.frozen_encode_batch(Branch::Visual, &dataset.features(&split.train)?)?;
    let protos = dataset.prototype_matrix(&split.base_classes)?;
    let frozen_t = if config.textual_reg {
        Some(model.frozen_encode_batch(Branch::Textual, &protos)?)
    } else {
        None
    };
    let width = frozen_v_all.dims()[1];

    let mut adam = Adam::new(config.adam, &model.trainable())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut sum_cls, mut sum_reg, mut sum_total, mut n_steps) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let indices: Vec<usize> = chunk.iter().map(|&k| split.train[k]).collect();
            let labels: Vec<usize> = indices.iter().map(|&i| dataset.samples[i].label).collect();
            let x = dataset.features(&indices)?;
            let mut fv = Vec::with_capacity(chunk.len() * width);
            for &k in chunk {
                fv.extend_from_slice(frozen_v_all.row(k));
            }
            let frozen_v = Tensor::from_vec(&[chunk.len(), width], fv)?;
            let inputs = StepInputs {
                x: &x,
                protos: &protos,
                labels: &labels,
                frozen_v: &frozen_v,
                frozen_t: frozen_t.as_ref(),
                lambda: config.lambda,
                tau: model.temperature(),
            };

            let mut tape = Tape::new();
            let params: Vec<Var> = model.trainable().into_iter().map(|t| tape.param(t)).collect();
            let losses = step_losses(&mut tape, model, params.clone(), &inputs)?;
            let record = StepRecord {
                epoch,
                step,
                loss_cls: scalar_of(tape.value(&losses.cls)),
                loss_reg: scalar_of(tape.value(&losses.reg)),
                loss_total: scalar_of(tape.value(&losses.total)),
            };
            if ![record.loss_cls, record.loss_reg, record.loss_total]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(Error::Diverged { epoch });
            }
            let grads = tape.backward(losses.total)?;
            let grad_list = params
                .iter()
                .zip(model.trainable())
                .map(|(v, t)| match grads.get(*v) {
                    Some(g) => Ok(g.clone()),
                    None => Ok(Tensor::zeros(t.dims())?),
                })
                .collect::<Result<Vec<_>>>()?;
            if grad_list.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            adam.step(model.trainable_mut(), &grad_list)?;

            sum_cls += record.loss_cls;
            sum_reg += record.loss_reg;
            sum_total += record.loss_total;
            n_steps += 1;
            steps.push(record);
        }
        let eval = evaluate_all(model, dataset, &split)?;
        let n = n_steps as f64;
        epochs.push(Metrics {
            epoch,
            loss_cls: sum_cls / n,
            loss_reg: sum_reg / n,
            loss_total: sum_total / n,
            base_acc: eval.base_acc,
            novel_acc: eval.novel_acc,
            hm: eval.hm,
            drift: eval.drift,
        });
    }
    Ok(TrainReport {
        zero_shot,
        epochs,
        steps,
    })
}

/// Full training loss as a function of every trainable tensor of a model.
pub struct FullLoss<'a> {
    pub model: &'a DualEncoderModel,
    pub x: Tensor,
    pub protos: Tensor,
    pub labels: Vec<usize>,
    pub frozen_v: Tensor,
    pub lambda: f64,
}

impl ScalarProgram for FullLoss<'_> {
    fn eval<G: Graph>(&self, g: &mut G, inputs: &[G::Value]) -> Result<G::Value> {
        let inp = StepInputs {
            x: &self.x,
            protos: &self.protos,
            labels: &self.labels,
            frozen_v: &self.frozen_v,
            frozen_t: None,
            lambda: self.lambda,
            tau: self.model.temperature(),
        };
        Ok(step_losses(g, self.model, inputs.to_vec(), &inp)?.total)
    }
}

/// Finite-difference check of `L_cls + λ·L_reg` with respect to all
/// adapter and combinator parameters, on the given batch.
pub fn full_loss_grad_check(
    model: &DualEncoderModel,
    dataset: &Dataset,
    indices: &[usize],
    classes: &[usize],
    lambda: f64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let x = dataset.features(indices)?;
    let labels = indices
        .iter()
        .map(|&i| {
            let y = dataset.samples[i].label;
            classes.iter().position(|&c| c == y).ok_or(Error::LabelOutOfRange {
                label: y,
                classes: classes.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let program = FullLoss {
        model,
        frozen_v: model.frozen_encode_batch(Branch::Visual, &x)?,
        protos: dataset.prototype_matrix(classes)?,
        x,
        labels,
        lambda,
    };
    let params: Vec<Tensor> = model.trainable().into_iter().cloned().collect();
    check_program("full_loss", &program, &params, h, tol)
}
