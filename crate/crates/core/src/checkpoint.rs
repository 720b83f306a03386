//! Checkpoints: a JSON manifest plus a flat little-endian `f64` blob.
//!
//! A checkpoint directory holds `manifest.json` and `weights.bin`. Each
//! manifest block names a tensor, its shape and its element offset into
//! the blob. Blocks are stored in declaration order, so saving a loaded
//! checkpoint reproduces both files byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Branch, DualEncoderModel, ModelConfig};
use crate::ring::{FactorizationPlan, TrAdapterStack};
use crate::tensor::Tensor;

pub const FORMAT: &str = "adaring-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements, not bytes.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Contents {
    /// A single adapter stack.
    Stack { plan: FactorizationPlan },
    /// A dual-encoder model; backbones are regenerated from the config.
    Model {
        config: ModelConfig,
        frozen_fingerprint: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub contents: Contents,
    pub blocks: Vec<Block>,
}

/// Serialized manifest and blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub manifest: Vec<u8>,
    pub weights: Vec<u8>,
}

fn encode(contents: Contents, tensors: &[(String, &Tensor)]) -> Result<Encoded> {
    let mut blocks = Vec::with_capacity(tensors.len());
    let mut weights = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        blocks.push(Block {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset,
        });
        offset += t.len();
        weights.extend_from_slice(&t.to_le_bytes());
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        contents,
        blocks,
    };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    Ok(Encoded {
        manifest: text,
        weights,
    })
}

fn decode(encoded: &Encoded) -> Result<(Manifest, Vec<Tensor>)> {
    let manifest: Manifest = serde_json::from_slice(&encoded.manifest)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if !encoded.weights.len().is_multiple_of(8) {
        return Err(Error::Checkpoint("weight blob length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = encoded
        .weights
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut expected_offset = 0;
    let mut tensors = Vec::with_capacity(manifest.blocks.len());
    for b in &manifest.blocks {
        let n: usize = b.shape.iter().product();
        if b.offset != expected_offset || b.offset + n > values.len() {
            return Err(Error::Checkpoint(format!("block {} out of place", b.name)));
        }
        tensors.push(Tensor::from_vec(&b.shape, values[b.offset..b.offset + n].to_vec())?);
        expected_offset += n;
    }
    if expected_offset != values.len() {
        return Err(Error::Checkpoint("trailing data in weight blob".into()));
    }
    Ok((manifest, tensors))
}

fn check_names(manifest: &Manifest, expected: &[String]) -> Result<()> {
    let got: Vec<&String> = manifest.blocks.iter().map(|b| &b.name).collect();
    if got.len() != expected.len() || got.iter().zip(expected).any(|(a, b)| *a != b) {
        return Err(Error::Checkpoint("block names do not match the model layout".into()));
    }
    Ok(())
}

fn stack_names(prefix: &str, stack: &TrAdapterStack) -> Vec<String> {
    (0..stack.cores().len()).map(|j| format!("{prefix}core{j}")).collect()
}

pub fn encode_stack(stack: &TrAdapterStack) -> Result<Encoded> {
    let tensors: Vec<(String, &Tensor)> = stack_names("", stack).into_iter().zip(stack.cores()).collect();
    encode(
        Contents::Stack {
            plan: stack.plan().clone(),
        },
        &tensors,
    )
}

pub fn decode_stack(encoded: &Encoded) -> Result<TrAdapterStack> {
    let (manifest, tensors) = decode(encoded)?;
    let Contents::Stack { plan } = &manifest.contents else {
        return Err(Error::Checkpoint("not a stack checkpoint".into()));
    };
    let names: Vec<String> = (0..plan.num_cores()).map(|j| format!("core{j}")).collect();
    check_names(&manifest, &names)?;
    TrAdapterStack::from_cores(plan.clone(), tensors)
}

fn model_tensors(model: &DualEncoderModel) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (prefix, branch) in [("visual", Branch::Visual), ("textual", Branch::Textual)] {
        let b = model.branch(branch);
        for (kind, stack) in [("fine", &b.fine), ("coarse", &b.coarse)] {
            if let Some(s) = stack {
                let names = stack_names(&format!("{prefix}.{kind}."), s);
                out.extend(names.into_iter().zip(s.cores()));
            }
        }
        out.push((format!("{prefix}.combinator.weight"), &b.combinator.weight));
        out.push((format!("{prefix}.combinator.bias"), &b.combinator.bias));
    }
    out
}

pub fn encode_model(model: &DualEncoderModel) -> Result<Encoded> {
    encode(
        Contents::Model {
            config: model.config.clone(),
            frozen_fingerprint: model.frozen_fingerprint(),
        },
        &model_tensors(model),
    )
}

/// Rebuilds the model from its config, verifies the backbone fingerprint
/// and restores every trainable tensor.
pub fn decode_model(encoded: &Encoded) -> Result<DualEncoderModel> {
    let (manifest, tensors) = decode(encoded)?;
    let Contents::Model {
        config,
        frozen_fingerprint,
    } = &manifest.contents
    else {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    };
    let mut model = DualEncoderModel::new(config)?;
    if &model.frozen_fingerprint() != frozen_fingerprint {
        return Err(Error::Checkpoint("frozen backbone fingerprint differs".into()));
    }
    let names: Vec<String> = model_tensors(&model).into_iter().map(|(n, _)| n).collect();
    check_names(&manifest, &names)?;
    for (slot, t) in model.trainable_mut().into_iter().zip(tensors) {
        if slot.dims() != t.dims() {
            return Err(Error::Checkpoint("block shape does not match the model".into()));
        }
        *slot = t;
    }
    Ok(model)
}

fn write(dir: &Path, encoded: &Encoded) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), &encoded.manifest)?;
    fs::write(dir.join(WEIGHTS_FILE), &encoded.weights)?;
    Ok(())
}

fn read(dir: &Path) -> Result<Encoded> {
    let load = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", p.display())))
    };
    Ok(Encoded {
        manifest: load(MANIFEST_FILE)?,
        weights: load(WEIGHTS_FILE)?,
    })
}

pub fn save_stack(stack: &TrAdapterStack, dir: &Path) -> Result<()> {
    write(dir, &encode_stack(stack)?)
}

pub fn load_stack(dir: &Path) -> Result<TrAdapterStack> {
    decode_stack(&read(dir)?)
}

pub fn save_model(model: &DualEncoderModel, dir: &Path) -> Result<()> {
    write(dir, &encode_model(model)?)
}

pub fn load_model(dir: &Path) -> Result<DualEncoderModel> {
    decode_model(&read(dir)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomized_model() -> DualEncoderModel {
        let mut model = DualEncoderModel::new(&ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in model.trainable_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        model
    }

    #[test]
    fn stack_round_trip_is_byte_exact() {
        let plan = FactorizationPlan::with_layer_rank(vec![2, 3], vec![3, 2], 4, 2, 3).unwrap();
        let mut stack = TrAdapterStack::init(&plan, 1, 0.5).unwrap();
        stack.layer_core_mut().data_mut()[0] = 0.1;
        let enc = encode_stack(&stack).unwrap();
        let back = decode_stack(&enc).unwrap();
        assert_eq!(back, stack);
        assert_eq!(encode_stack(&back).unwrap(), enc);
    }

    #[test]
    fn model_round_trip_is_byte_exact() {
        let model = randomized_model();
        let enc = encode_model(&model).unwrap();
        let back = decode_model(&enc).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode_model(&back).unwrap(), enc);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = randomized_model();
        save_model(&model, dir.path()).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), model);
    }

    #[test]
    fn truncated_blob_rejected() {
        let mut enc = encode_model(&randomized_model()).unwrap();
        enc.weights.truncate(enc.weights.len() - 8);
        assert!(matches!(decode_model(&enc), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_kind_rejected() {
        let enc = encode_model(&randomized_model()).unwrap();
        assert!(decode_stack(&enc).is_err());
    }

    #[test]
    fn missing_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_model(&dir.path().join("none")),
            Err(Error::Checkpoint(_))
        ));
    }
}
