//! Layer, class and drift similarity analyses.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Branch, DualEncoderModel};
use crate::tensor::{cosine_similarity, Tensor};

fn sample_matrix(samples: &[Vec<f64>], what: &str) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::EmptySplit(format!("{what} needs samples")));
    }
    Ok(Tensor::from_rows(samples)?)
}

/// `L×L` matrix of mean cosine similarity between hidden states after
/// layers `i` and `j`, averaged over `samples`.
pub fn layer_similarity(model: &DualEncoderModel, branch: Branch, samples: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let x = sample_matrix(samples, "layer similarity")?;
    let n = samples.len();
    let states = model.layer_states(branch, &x)?;
    let layers = states.len();
    let mut out = vec![vec![0.0; layers]; layers];
    for i in 0..layers {
        for j in i..layers {
            let mut sum = 0.0;
            for r in 0..n {
                sum += cosine_similarity(states[i].row(r), states[j].row(r))?;
            }
            out[i][j] = sum / n as f64;
            out[j][i] = out[i][j];
        }
    }
    Ok(out)
}

/// `C×C` cosine similarity of the textual embeddings of `prototypes`.
pub fn class_similarity(model: &DualEncoderModel, prototypes: &Tensor) -> Result<Vec<Vec<f64>>> {
    let f_t = model.encode_batch(Branch::Textual, prototypes)?;
    cosine_matrix(&f_t)
}

/// Pairwise cosine of the rows of a matrix.
pub fn cosine_matrix(rows: &Tensor) -> Result<Vec<Vec<f64>>> {
    let c = rows.dims()[0];
    (0..c)
        .map(|i| {
            (0..c)
                .map(|j| Ok(cosine_similarity(rows.row(i), rows.row(j))?))
                .collect()
        })
        .collect()
}

/// Mean of the off-diagonal entries of a square matrix.
pub fn off_diagonal_mean(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                sum += v;
            }
        }
    }
    sum / (n * (n - 1)) as f64
}

/// Summary of per-sample cosine between adapted and frozen visual embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub samples: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Compares `model`'s visual embeddings with `reference`'s frozen backbone.
pub fn drift_summary(
    model: &DualEncoderModel,
    reference: &DualEncoderModel,
    samples: &[Vec<f64>],
) -> Result<DriftSummary> {
    let (a, b) = (model.config.backbone_seed, reference.config.backbone_seed);
    if a != b || model.visual.frozen.fingerprint() != reference.visual.frozen.fingerprint() {
        return Err(Error::BackboneMismatch(a, b));
    }
    let x = sample_matrix(samples, "drift")?;
    let n = samples.len();
    let adapted = model.encode_batch(Branch::Visual, &x)?;
    let frozen = reference.frozen_encode_batch(Branch::Visual, &x)?;
    let mut s = DriftSummary {
        samples: n,
        mean: 0.0,
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
    };
    for r in 0..n {
        let c = cosine_similarity(adapted.row(r), frozen.row(r))?;
        s.mean += c;
        s.min = s.min.min(c);
        s.max = s.max.max(c);
    }
    s.mean /= n as f64;
    Ok(s)
}

/// Writes a matrix as headerless CSV.
pub fn write_matrix_csv<W: Write>(mut w: W, m: &[Vec<f64>]) -> Result<()> {
    for row in m {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}
