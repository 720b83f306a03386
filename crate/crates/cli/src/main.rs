//! `adaring` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaring_core::analysis::{class_similarity, drift_summary, layer_similarity, off_diagonal_mean, write_matrix_csv};
use adaring_core::checkpoint;
use adaring_core::config::RunConfig;
use adaring_core::data::{gen_data, Split};
use adaring_core::experiments::{
    class_prototypes, grad_check_suite, run_training, sweep_lambda, sweep_rank, visual_samples, worker_count,
    write_run, write_sweep_csv,
};
use adaring_core::model::{Branch, DualEncoderModel};
use adaring_core::ring::per_layer_matrix_count;
use adaring_core::train::{evaluate_all, evaluate_zero_shot};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "adaring",
    version,
    about = "Cross-layer tensor-ring adapters on a toy dual encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Reseeds data generation, adapter initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Preservation ratio override.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Clone)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory; an untrained model is used when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters and write the run log and checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the base and novel tasks.
    Eval(WithCheckpoint),
    /// Write a synthetic dataset as JSON lines.
    GenData(Common),
    /// Trainable parameter counts for the configured plans.
    ParamCount(Common),
    /// Finite-difference gradient checks.
    GradCheck(Common),
    /// Layer-to-layer embedding similarity.
    AnalyzeLayers(WithCheckpoint),
    /// Class-to-class textual embedding similarity.
    AnalyzeClasses(WithCheckpoint),
    /// Cosine between adapted and frozen visual embeddings.
    AnalyzeDrift(WithCheckpoint),
    /// Train across the preservation-ratio grid.
    SweepLambda(Common),
    /// Train across the fine layer-rank grid.
    SweepRank(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(l) = c.lambda {
        cfg.train.lambda = l;
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(args: &WithCheckpoint, cfg: &RunConfig) -> Result<DualEncoderModel> {
    Ok(match &args.checkpoint {
        Some(dir) => checkpoint::load_model(dir)?,
        None => DualEncoderModel::new(&cfg.model)?,
    })
}

fn write_json(out: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    fs::write(&path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
    println!("{value}");
    Ok(())
}

fn write_csv_matrix(out: &Path, name: &str, m: &[Vec<f64>]) -> Result<()> {
    fs::create_dir_all(out)?;
    write_matrix_csv(fs::File::create(out.join(name))?, m)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let (model, _, report) = run_training(&cfg)?;
            write_run(&c.out, &model, &report)?;
            let last = report.last();
            println!("{}", json!({"zero_shot": report.zero_shot, "final": last}));
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.common)?;
            let model = load_model(&a, &cfg)?;
            let dataset = cfg.dataset()?;
            let split = Split::new(&dataset, cfg.train.shots);
            let report = json!({
                "adapted": evaluate_all(&model, &dataset, &split)?,
                "zero_shot": evaluate_zero_shot(&model, &dataset, &split)?,
            });
            write_json(&a.common.out, "eval.json", &report)?;
        }
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let dataset = gen_data(&cfg.data.gen_config(cfg.model.input_dim))?;
            fs::create_dir_all(&c.out)?;
            let (s, p) = (c.out.join("samples.jsonl"), c.out.join("prototypes.jsonl"));
            dataset.write(&s, &p)?;
            println!(
                "{}",
                json!({"samples": s, "prototypes": p, "classes": dataset.classes(), "count": dataset.samples.len()})
            );
        }
        Command::ParamCount(c) => {
            let cfg = load_config(&c)?;
            let m = &cfg.model;
            let per_branch = m.trainable_per_branch()?;
            let (i, o) = (m.width, m.width);
            let baseline = per_layer_matrix_count(i, o, m.fine_layer_rank, m.layers);
            let report = json!({
                "fine": per_branch.fine,
                "coarse": per_branch.coarse,
                "combinator": per_branch.combinator,
                "per_branch": per_branch.total(),
                "total": 2 * per_branch.total(),
                "per_layer_baseline_per_branch": baseline,
                "ratio": per_branch.total() as f64 / baseline as f64,
            });
            write_json(&c.out, "param_count.json", &report)?;
        }
        Command::GradCheck(c) => {
            let cfg = load_config(&c)?;
            let reports = grad_check_suite(&cfg, c.seed.unwrap_or(0), 50)?;
            let all_pass = reports.iter().all(|r| r.pass);
            write_json(
                &c.out,
                "grad_check.json",
                &json!({"all_pass": all_pass, "reports": reports}),
            )?;
            if !all_pass {
                bail!("gradient check failed");
            }
        }
        Command::AnalyzeLayers(a) => {
            let cfg = load_config(&a.common)?;
            let model = load_model(&a, &cfg)?;
            let samples = visual_samples(&cfg.dataset()?, cfg.analysis.samples);
            let mut summary = serde_json::Map::new();
            for (name, branch) in [("visual", Branch::Visual), ("textual", Branch::Textual)] {
                let m = layer_similarity(&model, branch, &samples)?;
                write_csv_matrix(&a.common.out, &format!("layers_{name}.csv"), &m)?;
                let adjacent: Vec<f64> = (1..m.len()).map(|l| m[l - 1][l]).collect();
                summary.insert(
                    name.into(),
                    json!({"adjacent": adjacent, "off_diagonal_mean": off_diagonal_mean(&m)}),
                );
            }
            write_json(&a.common.out, "layers.json", &summary.into())?;
        }
        Command::AnalyzeClasses(a) => {
            let cfg = load_config(&a.common)?;
            let model = load_model(&a, &cfg)?;
            let m = class_similarity(&model, &class_prototypes(&cfg.dataset()?)?)?;
            write_csv_matrix(&a.common.out, "classes.csv", &m)?;
            write_json(
                &a.common.out,
                "classes.json",
                &json!({"off_diagonal_mean": off_diagonal_mean(&m)}),
            )?;
        }
        Command::AnalyzeDrift(a) => {
            let cfg = load_config(&a.common)?;
            let model = load_model(&a, &cfg)?;
            let reference = DualEncoderModel::new(&model.config)?;
            let dataset = cfg.dataset()?;
            let split = Split::new(&dataset, cfg.train.shots);
            let samples: Vec<Vec<f64>> = split
                .eval_indices()
                .iter()
                .map(|&i| dataset.samples[i].features.clone())
                .collect();
            let s = drift_summary(&model, &reference, &samples)?;
            write_json(&a.common.out, "drift.json", &serde_json::to_value(s)?)?;
        }
        Command::SweepLambda(c) => {
            let cfg = load_config(&c)?;
            fs::create_dir_all(&c.out)?;
            let rows = sweep_lambda(&cfg, worker_count(), Some(&c.out))?;
            write_sweep_csv(fs::File::create(c.out.join("sweep_lambda.csv"))?, &rows)?;
            println!("{}", json!({"rows": rows.len(), "csv": c.out.join("sweep_lambda.csv")}));
        }
        Command::SweepRank(c) => {
            let cfg = load_config(&c)?;
            fs::create_dir_all(&c.out)?;
            let rows = sweep_rank(&cfg, worker_count(), Some(&c.out))?;
            write_sweep_csv(fs::File::create(c.out.join("sweep_rank.csv"))?, &rows)?;
            println!("{}", json!({"rows": rows.len(), "csv": c.out.join("sweep_rank.csv")}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.downcast_ref::<adaring_core::Error>() {
                Some(adaring_core::Error::DatasetNotFound(_)) => "dataset_not_found",
                Some(adaring_core::Error::Config(_)) => "config",
                Some(adaring_core::Error::Checkpoint(_)) => "checkpoint",
                Some(_) => "runtime",
                None => "failure",
            };
            eprintln!("{}", json!({"error": kind, "message": format!("{e:#}")}));
            ExitCode::FAILURE
        }
    }
}
