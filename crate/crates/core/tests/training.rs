use adaring_core::analysis::drift_summary;
use adaring_core::config::RunConfig;
use adaring_core::data::{gen_data, GenConfig, Split};
use adaring_core::experiments::run_training;
use adaring_core::model::{Branch, DualEncoderModel};
use adaring_core::tensor::{cosine_similarity, Tensor};
use adaring_core::train::{accuracy, evaluate, train, Embedder, Task, TrainConfig};
use adaring_core::Error;

fn nearest_prototype_accuracy(std: f64, seed: u64) -> f64 {
    let ds = gen_data(&GenConfig {
        classes: 8,
        cluster_std: std,
        seed,
        ..GenConfig::default()
    })
    .unwrap();
    let correct = ds
        .samples
        .iter()
        .filter(|s| {
            let best = (0..ds.classes())
                .max_by(|&a, &b| {
                    let ca = cosine_similarity(&s.features, &ds.prototypes[a]).unwrap();
                    let cb = cosine_similarity(&s.features, &ds.prototypes[b]).unwrap();
                    ca.total_cmp(&cb)
                })
                .unwrap();
            best == s.label
        })
        .count();
    correct as f64 / ds.samples.len() as f64
}

#[test]
fn generated_clusters_are_separable() {
    for seed in 0..3 {
        assert!(nearest_prototype_accuracy(0.05, seed) > 0.95);
    }
}

#[test]
fn frozen_baseline_beats_chance() {
    let cfg = RunConfig::default();
    let ds = cfg.dataset().unwrap();
    let model = DualEncoderModel::new(&cfg.model).unwrap();
    let split = Split::new(&ds, cfg.train.shots);
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    let classes: Vec<usize> = (0..ds.classes()).collect();
    let acc = accuracy(&model, &ds, &all, &classes, Embedder::Frozen).unwrap();
    assert!(acc > 1.0 / ds.classes() as f64, "{acc}");
    assert!(evaluate(&model, &ds, &split, Task::Base).unwrap() > 0.25);
}

#[test]
fn permuted_labels_fall_to_chance() {
    let cfg = RunConfig::default();
    let mut gen = cfg.data.gen_config(cfg.model.input_dim);
    gen.per_class = 200;
    let ds = gen_data(&gen).unwrap().with_permuted_labels(11);
    let model = DualEncoderModel::new(&cfg.model).unwrap();
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    let classes: Vec<usize> = (0..8).collect();
    let acc = accuracy(&model, &ds, &all, &classes, Embedder::Adapted).unwrap();
    // 1/8 ± 4 binomial standard deviations over 1600 samples
    let sd = (0.125f64 * 0.875 / 1600.0).sqrt();
    assert!((acc - 0.125).abs() < 4.0 * sd, "{acc}");
}

#[test]
fn empty_training_set() {
    let ds = gen_data(&GenConfig::default()).unwrap();
    let mut model = DualEncoderModel::new(&RunConfig::default().model).unwrap();
    let mut only_novel = ds.clone();
    only_novel.samples.retain(|s| s.label >= 4);
    let err = train(&mut model, &only_novel, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::EmptyDataset), "{err}");
}

#[test]
fn lambda_one_drifts_less_than_lambda_zero() {
    let run = |lambda: f64| {
        let mut cfg = RunConfig::default();
        cfg.train.lambda = lambda;
        run_training(&cfg).unwrap().2.last().unwrap().drift
    };
    let (d0, d1) = (run(0.0), run(1.0));
    assert!(d1 < d0, "{d1} !< {d0}");
}

#[test]
fn default_run_learns_and_preserves_backbone() {
    let cfg = RunConfig::default();
    let ds = cfg.dataset().unwrap();
    let mut model = DualEncoderModel::new(&cfg.model).unwrap();
    let frozen = model.frozen_fingerprint();
    let report = train(&mut model, &ds, &cfg.train).unwrap();
    assert_eq!(model.frozen_fingerprint(), frozen);
    let (first, last) = (&report.epochs[0], report.last().unwrap());
    assert!(last.loss_total < first.loss_total);
    let samples: Vec<Vec<f64>> = ds.samples.iter().take(16).map(|s| s.features.clone()).collect();
    let fresh = DualEncoderModel::new(&cfg.model).unwrap();
    let drift = drift_summary(&model, &fresh, &samples).unwrap();
    assert!(drift.mean < 1.0 && drift.min <= drift.mean && drift.mean <= drift.max);
    let x = Tensor::from_rows(&samples).unwrap();
    assert_eq!(
        model.frozen_encode_batch(Branch::Visual, &x).unwrap(),
        fresh.frozen_encode_batch(Branch::Visual, &x).unwrap()
    );
}
