//! Repeated-run experiments: sweeps, the gradient-check suite and paired
//! adapter comparisons.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::{check_program, op_suite, GradCheckReport, Graph, ScalarProgram};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{gen_data, Dataset, GenConfig, Split};
use crate::error::{Error, Result};
use crate::model::{AdapterMode, Branch, DualEncoderModel, ModelConfig};
use crate::ring::{adapter_forward, FactorizationPlan, TrAdapterStack};
use crate::tensor::Tensor;
use crate::train::{full_loss_grad_check, train, write_metrics_csv, TrainReport};

pub const THREADS_ENV: &str = "ADARING_THREADS";

/// Parallel sweep workers: `ADARING_THREADS` if set to a positive
/// integer, otherwise 1.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Builds the model and dataset of `cfg` and trains.
pub fn run_training(cfg: &RunConfig) -> Result<(DualEncoderModel, Dataset, TrainReport)> {
    let dataset = cfg.dataset()?;
    let mut model = DualEncoderModel::new(&cfg.model)?;
    let report = train(&mut model, &dataset, &cfg.train)?;
    Ok((model, dataset, report))
}

/// Writes the run log, the JSON report and the final checkpoint.
pub fn write_run(dir: &Path, model: &DualEncoderModel, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, &report.epochs)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    checkpoint::save_model(model, &dir.join("checkpoint"))
}

/// One grid point of a sweep with its final-epoch metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub layer_rank: usize,
    pub seed: u64,
    pub trainable_params: usize,
    pub zero_shot_base_acc: f64,
    pub zero_shot_novel_acc: f64,
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub drift: f64,
}

pub const SWEEP_HEADER: &str = "lambda,layer_rank,seed,trainable_params,zero_shot_base_acc,zero_shot_novel_acc,\
epoch,loss_cls,loss_reg,loss_total,base_acc,novel_acc,hm,drift";

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.lambda,
            r.layer_rank,
            r.seed,
            r.trainable_params,
            r.zero_shot_base_acc,
            r.zero_shot_novel_acc,
            r.epoch,
            r.loss_cls,
            r.loss_reg,
            r.loss_total,
            r.base_acc,
            r.novel_acc,
            r.hm,
            r.drift
        )?;
    }
    Ok(())
}

/// Runs `f` over `points` with up to `workers` threads; results keep the
/// order of `points`.
fn run_grid<T, R, F>(points: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let workers = workers.clamp(1, points.len().max(1));
    if workers == 1 {
        return points.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= points.len() {
                    break;
                }
                let r = f(&points[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every point visited"))
        .collect()
}

fn sweep_point(cfg: &RunConfig, label: &str, out: Option<&Path>) -> Result<SweepRow> {
    let (model, _, report) = run_training(cfg)?;
    if let Some(dir) = out {
        write_run(&dir.join("points").join(label), &model, &report)?;
    }
    let last = report
        .last()
        .ok_or_else(|| Error::Config("sweeps need epochs >= 1".into()))?;
    Ok(SweepRow {
        lambda: cfg.train.lambda,
        layer_rank: cfg.model.fine_layer_rank,
        seed: cfg.train.shuffle_seed,
        trainable_params: model.trainable_count(),
        zero_shot_base_acc: report.zero_shot.base_acc,
        zero_shot_novel_acc: report.zero_shot.novel_acc,
        epoch: last.epoch,
        loss_cls: last.loss_cls,
        loss_reg: last.loss_reg,
        loss_total: last.loss_total,
        base_acc: last.base_acc,
        novel_acc: last.novel_acc,
        hm: last.hm,
        drift: last.drift,
    })
}

/// One training run per `(λ, seed)` in the sweep grid.
pub fn sweep_lambda(cfg: &RunConfig, workers: usize, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    let points: Vec<(f64, u64)> = cfg
        .sweep
        .lambdas
        .iter()
        .flat_map(|&l| cfg.sweep.seeds.iter().map(move |&s| (l, s)))
        .collect();
    run_grid(&points, workers, |&(lambda, seed)| {
        let mut c = cfg.clone().with_seed(seed);
        c.train.lambda = lambda;
        sweep_point(&c, &format!("lambda_{lambda}_seed_{seed}"), out)
    })
}

/// One training run per `(fine layer rank, seed)` in the sweep grid.
pub fn sweep_rank(cfg: &RunConfig, workers: usize, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    let points: Vec<(usize, u64)> = cfg
        .sweep
        .layer_ranks
        .iter()
        .flat_map(|&r| cfg.sweep.seeds.iter().map(move |&s| (r, s)))
        .collect();
    run_grid(&points, workers, |&(rank, seed)| {
        let mut c = cfg.clone().with_seed(seed);
        c.model.fine_layer_rank = rank;
        sweep_point(&c, &format!("rank_{rank}_seed_{seed}"), out)
    })
}

/// Mean cosine to the frozen visual embeddings over the evaluation samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdapterComparison {
    pub seed: u64,
    pub coarse_only_cos: f64,
    pub fine_only_cos: f64,
}

/// Trains coarse-only and fine-only models under identical budgets and
/// seeds, and reports how close each stays to the frozen embeddings.
pub fn compare_granularity(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<AdapterComparison>> {
    seeds
        .iter()
        .map(|&seed| {
            let mean_cos = |mode: AdapterMode| -> Result<f64> {
                let mut c = cfg.clone().with_seed(seed);
                c.model.adapters = mode;
                let (model, dataset, _) = run_training(&c)?;
                let split = Split::new(&dataset, c.train.shots);
                let samples: Vec<Vec<f64>> = split
                    .eval_indices()
                    .iter()
                    .map(|&i| dataset.samples[i].features.clone())
                    .collect();
                Ok(crate::analysis::drift_summary(&model, &model, &samples)?.mean)
            };
            Ok(AdapterComparison {
                seed,
                coarse_only_cos: mean_cos(AdapterMode::CoarseOnly)?,
                fine_only_cos: mean_cos(AdapterMode::FineOnly)?,
            })
        })
        .collect()
}

/// Cosine between an adapter's output and a fixed target, averaged.
struct AdapterCosine {
    plan: FactorizationPlan,
    layer: usize,
    x: Tensor,
    target: Tensor,
}

impl ScalarProgram for AdapterCosine {
    fn eval<G: Graph>(&self, g: &mut G, cores: &[G::Value]) -> Result<G::Value> {
        let x = g.constant(&self.x);
        let y = adapter_forward(g, &self.plan, cores, self.layer, &x)?;
        let target = g.constant(&self.target);
        let cos = g.cosine_similarity(&y, &target)?;
        g.mean(&cos)
    }
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = dims.iter().product();
    Ok(Tensor::from_vec(dims, (0..n).map(|_| normal.sample(rng)).collect())?)
}

/// `trials` random adapters composed with a cosine loss.
pub fn adapter_cosine_checks(seed: u64, trials: usize, h: f64, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|t| {
            let plan = FactorizationPlan::new(vec![2, 3], vec![3, 2], 3, vec![2, 3, 2, 2, 3, 2])?;
            let stack = TrAdapterStack::init(&plan, seed.wrapping_add(t as u64), 1.0)?;
            let mut cores = stack.cores().to_vec();
            let p = plan.layer_index();
            cores[p] = randn(&mut rng, cores[p].dims(), 1.0)?;
            let program = AdapterCosine {
                layer: t % plan.layers,
                x: randn(&mut rng, &[3, plan.input_width()], 1.0)?,
                target: randn(&mut rng, &[3, plan.output_width()], 1.0)?,
                plan,
            };
            check_program(&format!("adapter_cosine_{t}"), &program, &cores, h, tol)
        })
        .collect()
}

/// Default model with every trainable scalar drawn from `N(0, std²)`.
pub fn perturbed_model(config: &ModelConfig, seed: u64, std: f64) -> Result<DualEncoderModel> {
    let mut model = DualEncoderModel::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.trainable_mut() {
        *t = randn(&mut rng, t.dims(), std)?;
    }
    Ok(model)
}

/// Full training loss on a 2-class, 8-sample batch.
pub fn full_loss_check(config: &ModelConfig, seed: u64, lambda: f64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let model = perturbed_model(config, seed, 0.5)?;
    let data = gen_data(&GenConfig {
        classes: 2,
        per_class: 4,
        input_dim: config.input_dim,
        seed,
        ..GenConfig::default()
    })?;
    let indices: Vec<usize> = (0..data.samples.len()).collect();
    full_loss_grad_check(&model, &data, &indices, &[0, 1], lambda, h, tol)
}

/// Every recorded op, adapter-with-cosine trials and the full loss.
pub fn grad_check_suite(cfg: &RunConfig, seed: u64, adapter_trials: usize) -> Result<Vec<GradCheckReport>> {
    let (h, tol) = (1e-5, 1e-4);
    let mut reports = op_suite(seed, h, tol)?;
    reports.extend(adapter_cosine_checks(seed, adapter_trials, h, tol)?);
    reports.push(full_loss_check(&cfg.model, seed, cfg.train.lambda, h, tol)?);
    Ok(reports)
}

/// Cosine-summary helper for the CLI: visual samples of a dataset.
pub fn visual_samples(dataset: &Dataset, limit: usize) -> Vec<Vec<f64>> {
    dataset.samples.iter().take(limit).map(|s| s.features.clone()).collect()
}

/// Textual embeddings for every class prototype.
pub fn class_prototypes(dataset: &Dataset) -> Result<Tensor> {
    let classes: Vec<usize> = (0..dataset.classes()).collect();
    dataset.prototype_matrix(&classes)
}

pub fn branch_name(branch: Branch) -> &'static str {
    match branch {
        Branch::Visual => "visual",
        Branch::Textual => "textual",
    }
}
