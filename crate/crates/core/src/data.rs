//! Synthetic clustered datasets and their JSON-lines files.
//!
//! A dataset is two files: samples, one `{"features": [...], "label": k}`
//! per line, and prototypes, one `{"class": k, "prototype": [...]}` per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

const MAX_PROTOTYPE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeLine {
    class: usize,
    prototype: Vec<f64>,
}

/// Labelled samples plus one prototype vector per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub prototypes: Vec<Vec<f64>>,
}

/// Parameters of [`gen_data`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub cluster_std: f64,
    pub seed: u64,
    /// Smallest allowed angle between two prototypes, in degrees.
    pub min_angle_deg: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 8,
            per_class: 48,
            input_dim: 32,
            cluster_std: 0.1,
            seed: 0,
            min_angle_deg: 45.0,
        }
    }
}

/// Prototypes uniform on the unit sphere, separated by at least
/// `min_angle_deg` (rejection sampling); samples are prototype plus
/// isotropic Gaussian noise. Samples are written class by class.
pub fn gen_data(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.per_class < 1 || cfg.input_dim < 1 {
        return Err(Error::InvalidArgument(
            "gen-data needs classes >= 2, per_class >= 1, input_dim >= 1".into(),
        ));
    }
    if !(cfg.cluster_std >= 0.0 && cfg.cluster_std.is_finite()) {
        return Err(Error::InvalidArgument("cluster_std must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let max_cos = cfg.min_angle_deg.to_radians().cos();

    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    let mut attempts = 0;
    while prototypes.len() < cfg.classes {
        attempts += 1;
        if attempts > MAX_PROTOTYPE_ATTEMPTS * cfg.classes {
            return Err(Error::InfeasibleSeparation {
                classes: cfg.classes,
                dim: cfg.input_dim,
                min_angle_deg: cfg.min_angle_deg,
            });
        }
        let raw: Vec<f64> = (0..cfg.input_dim).map(|_| unit.sample(&mut rng)).collect();
        let Ok(v) = tensor::l2_normalize(&raw) else { continue };
        if prototypes.iter().all(|p| tensor::dot(p, &v) <= max_cos) {
            prototypes.push(v);
        }
    }

    let mut samples = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (label, proto) in prototypes.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let features = proto
                .iter()
                .map(|&p| {
                    let n = unit.sample(&mut rng);
                    p + cfg.cluster_std * n
                })
                .collect();
            samples.push(Sample { features, label });
        }
    }
    Ok(Dataset { samples, prototypes })
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.feature_dim();
        if self.prototypes.is_empty() || self.samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.prototypes.iter().any(|p| p.len() != width) {
            return Err(Error::InvalidArgument("prototype widths differ".into()));
        }
        for s in &self.samples {
            if s.features.len() != width {
                return Err(Error::LengthMismatch {
                    expected: width,
                    got: s.features.len(),
                });
            }
            if s.label >= self.classes() {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: self.classes(),
                });
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument("non-finite feature".into()));
            }
        }
        for (i, a) in self.prototypes.iter().enumerate() {
            if self.prototypes[..i].iter().any(|b| b == a) {
                return Err(Error::InvalidArgument(format!(
                    "prototype {i} duplicates another class"
                )));
            }
        }
        Ok(())
    }

    /// `(n, D_in)` feature matrix for the given sample indices.
    pub fn features(&self, indices: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.samples[i].features.clone()).collect();
        Ok(Tensor::from_rows(&rows)?)
    }

    /// `(k, D_in)` prototype matrix for the given classes.
    pub fn prototype_matrix(&self, classes: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = classes.iter().map(|&c| self.prototypes[c].clone()).collect();
        Ok(Tensor::from_rows(&rows)?)
    }

    /// Writes the two JSON-lines files.
    pub fn write(&self, samples_path: &Path, prototypes_path: &Path) -> Result<()> {
        fs::write(samples_path, self.samples_jsonl()?)?;
        fs::write(prototypes_path, self.prototypes_jsonl()?)?;
        Ok(())
    }

    pub fn samples_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(out)
    }

    pub fn prototypes_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (class, p) in self.prototypes.iter().enumerate() {
            serde_json::to_writer(
                &mut out,
                &PrototypeLine {
                    class,
                    prototype: p.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        Ok(out)
    }

    /// Reads and validates a dataset pair.
    pub fn read(samples_path: &Path, prototypes_path: &Path) -> Result<Self> {
        let load = |p: &Path| {
            fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::DatasetNotFound(p.display().to_string()),
                _ => Error::Io(e),
            })
        };
        let samples_text = load(samples_path)?;
        let protos_text = load(prototypes_path)?;

        let mut lines: Vec<PrototypeLine> = protos_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        lines.sort_by_key(|l| l.class);
        if lines.iter().enumerate().any(|(i, l)| l.class != i) {
            return Err(Error::InvalidArgument("prototype classes must be dense 0..C".into()));
        }
        let prototypes = lines.into_iter().map(|l| l.prototype).collect();
        let samples = samples_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let ds = Dataset { samples, prototypes };
        ds.validate()?;
        Ok(ds)
    }

    /// Copy with labels shuffled by a seeded permutation.
    pub fn with_permuted_labels(&self, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut labels: Vec<usize> = self.samples.iter().map(|s| s.label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, label)| Sample {
                features: s.features.clone(),
                label,
            })
            .collect();
        Dataset {
            samples,
            prototypes: self.prototypes.clone(),
        }
    }
}

/// Base/novel partition of a dataset.
///
/// Classes sorted by index; the first `ceil(C/2)` are base, the rest novel.
/// The first `shots` samples of each base class (in file order) form the
/// training set; the remaining base samples are the base test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub train: Vec<usize>,
    pub base_test: Vec<usize>,
    pub novel_test: Vec<usize>,
}

impl Split {
    pub fn new(dataset: &Dataset, shots: usize) -> Self {
        let c = dataset.classes();
        let n_base = c.div_ceil(2);
        let base_classes: Vec<usize> = (0..n_base).collect();
        let novel_classes: Vec<usize> = (n_base..c).collect();
        let mut seen = vec![0usize; c];
        let (mut train, mut base_test, mut novel_test) = (Vec::new(), Vec::new(), Vec::new());
        for (i, s) in dataset.samples.iter().enumerate() {
            if s.label < n_base {
                if seen[s.label] < shots {
                    train.push(i);
                } else {
                    base_test.push(i);
                }
                seen[s.label] += 1;
            } else {
                novel_test.push(i);
            }
        }
        Split {
            base_classes,
            novel_classes,
            train,
            base_test,
            novel_test,
        }
    }

    /// Base test then novel test indices.
    pub fn eval_indices(&self) -> Vec<usize> {
        self.base_test.iter().chain(&self.novel_test).copied().collect()
    }
}
