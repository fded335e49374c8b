//! JSON checkpoints.
//!
//! Parameters are stored as named tensors in [`Parameters::slices`] order:
//! weight matrices as row-major nested lists (`[outputs][inputs]`), vectors
//! as flat lists. Loading rebuilds the architecture from the stored variant
//! and policy config, then checks every name and shape before copying.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::NormStats;
use crate::nn::{AdamState, Parameters};
use crate::policy::{BranchKind, PolicyConfig, PolicyParams, VariantConfig};
use crate::ppo::PpoConfig;
use crate::Rng;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or run a backtest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyParams,
    pub policy_config: PolicyConfig,
    pub ppo: PpoConfig,
    pub adam: AdamState,
    pub steps: usize,
    pub updates: usize,
    pub rng: Rng,
    pub norm: NormStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum TensorValues {
    Matrix(Vec<Vec<f64>>),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: TensorValues,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VariantRecord {
    name: String,
    branches: Vec<BranchKind>,
    garch_feature: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamRecord {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    first_moment: Vec<NamedTensor>,
    second_moment: Vec<NamedTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    variant: VariantRecord,
    policy_config: PolicyConfig,
    ppo: PpoConfig,
    parameters: Vec<NamedTensor>,
    adam: AdamRecord,
    steps: usize,
    updates: usize,
    rng: Rng,
    norm_stats: NormStats,
}

/// Only the version, read first so a format change is reported as such.
#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

/// Names and shapes of the parameter slices, in slice order.
pub fn tensor_specs(p: &PolicyParams) -> Vec<(String, Vec<usize>)> {
    fn net(prefix: &str, n: &crate::nn::Network, out: &mut Vec<(String, Vec<usize>)>) {
        for (i, l) in n.layers.iter().enumerate() {
            out.push((format!("{prefix}.layer{i}.weight"), vec![l.outputs, l.inputs]));
            out.push((format!("{prefix}.layer{i}.bias"), vec![l.outputs]));
        }
    }
    let mut out = Vec::new();
    for b in &p.branches {
        let prefix = format!("branch.{}", format!("{:?}", b.kind).to_lowercase());
        net(&prefix, &b.net, &mut out);
        out.push((format!("{prefix}.output_weight"), vec![b.weights.len()]));
    }
    net("policy_trunk", &p.policy_trunk, &mut out);
    net("value_trunk", &p.value_trunk, &mut out);
    out.push(("log_std".into(), vec![1]));
    out
}

fn to_tensors(specs: &[(String, Vec<usize>)], slices: &[&[f64]]) -> Vec<NamedTensor> {
    specs
        .iter()
        .zip(slices)
        .map(|((name, shape), s)| NamedTensor {
            name: name.clone(),
            shape: shape.clone(),
            values: if shape.len() == 2 {
                TensorValues::Matrix(s.chunks(shape[1]).map(<[f64]>::to_vec).collect())
            } else {
                TensorValues::Vector(s.to_vec())
            },
        })
        .collect()
}

/// Checks names and shapes against `specs` and flattens in order.
fn from_tensors(specs: &[(String, Vec<usize>)], tensors: &[NamedTensor], what: &str) -> Result<Vec<Vec<f64>>> {
    if tensors.len() != specs.len() {
        return Err(Error::Shape(format!(
            "{what}: checkpoint has {} tensors, architecture expects {}",
            tensors.len(),
            specs.len()
        )));
    }
    let mut out = Vec::with_capacity(specs.len());
    for ((name, shape), t) in specs.iter().zip(tensors) {
        if &t.name != name || &t.shape != shape {
            return Err(Error::Shape(format!(
                "{what}: expected {name} {shape:?}, found {} {:?}",
                t.name, t.shape
            )));
        }
        let flat: Vec<f64> = match &t.values {
            TensorValues::Matrix(rows) => {
                if rows.iter().any(|r| r.len() != shape[1]) {
                    return Err(Error::Shape(format!("{what}: ragged rows in {name}")));
                }
                rows.concat()
            }
            TensorValues::Vector(v) => v.clone(),
        };
        if flat.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{what}: {name} holds {} values for shape {shape:?}",
                flat.len()
            )));
        }
        out.push(flat);
    }
    Ok(out)
}

impl Checkpoint {
    fn to_file(&self) -> CheckpointFile {
        let specs = tensor_specs(&self.policy);
        let moment = |m: &[Vec<f64>]| {
            let s: Vec<&[f64]> = m.iter().map(Vec::as_slice).collect();
            to_tensors(&specs, &s)
        };
        CheckpointFile {
            version: CHECKPOINT_VERSION,
            variant: VariantRecord {
                name: self.policy.variant.name(),
                branches: self.policy.variant.branches.clone(),
                garch_feature: self.policy.variant.garch_feature,
            },
            policy_config: self.policy_config.clone(),
            ppo: self.ppo.clone(),
            parameters: to_tensors(&specs, &self.policy.slices()),
            adam: AdamRecord {
                learning_rate: self.adam.learning_rate,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                epsilon: self.adam.epsilon,
                step: self.adam.step,
                first_moment: moment(&self.adam.first_moment),
                second_moment: moment(&self.adam.second_moment),
            },
            steps: self.steps,
            updates: self.updates,
            rng: self.rng.clone(),
            norm_stats: self.norm.clone(),
        }
    }

    fn from_file(f: CheckpointFile) -> Result<Self> {
        let variant = VariantConfig::new(f.variant.branches, f.variant.garch_feature)?;
        // Weights are overwritten below; the seed only fixes the shapes.
        let mut policy = PolicyParams::new(variant, &f.policy_config, &mut crate::seeded_rng(0))?;
        let specs = tensor_specs(&policy);
        let values = from_tensors(&specs, &f.parameters, "parameters")?;
        for (dst, src) in policy.slices_mut().into_iter().zip(&values) {
            dst.copy_from_slice(src);
        }
        let first_moment = from_tensors(&specs, &f.adam.first_moment, "adam.first_moment")?;
        let second_moment = from_tensors(&specs, &f.adam.second_moment, "adam.second_moment")?;
        Ok(Checkpoint {
            policy,
            policy_config: f.policy_config,
            ppo: f.ppo,
            adam: AdamState {
                learning_rate: f.adam.learning_rate,
                beta1: f.adam.beta1,
                beta2: f.adam.beta2,
                epsilon: f.adam.epsilon,
                step: f.adam.step,
                first_moment,
                second_moment,
            },
            steps: f.steps,
            updates: f.updates,
            rng: f.rng,
            norm: f.norm_stats,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: probe.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        Self::from_file(file)
    }
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = ck.to_json()?;
    let tmp = path.with_extension("json.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads and checks that the checkpoint was built for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &VariantConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if &ck.policy.variant != expected {
        let input = |v: &VariantConfig| -> Vec<usize> {
            v.branches.iter().map(|b| b.input_size(v.garch_feature)).collect()
        };
        return Err(Error::Shape(format!(
            "checkpoint is a {} policy (branch inputs {:?}) but the run expects {} (branch inputs {:?})",
            ck.policy.variant.name(),
            input(&ck.policy.variant),
            expected.name(),
            input(expected)
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::ColumnStats;
    use rand::Rng as _;

    fn stats(cols: usize) -> ColumnStats {
        ColumnStats {
            mean: (0..cols).map(|i| i as f64 * 0.1).collect(),
            std: vec![1.5; cols],
        }
    }

    fn sample(variant: VariantConfig) -> Checkpoint {
        let mut rng = crate::seeded_rng(11);
        let policy = PolicyParams::new(variant, &PolicyConfig::default(), &mut rng).unwrap();
        let mut adam = AdamState::new(&policy, 0.00025);
        adam.step = 17;
        for m in adam.first_moment.iter_mut().chain(adam.second_moment.iter_mut()) {
            m.iter_mut().for_each(|v| *v = rng.random::<f64>() * 1e-3);
        }
        let _ = rng.random::<u64>();
        Checkpoint {
            policy,
            policy_config: PolicyConfig::default(),
            ppo: PpoConfig::default(),
            adam,
            steps: 2048,
            updates: 2,
            rng,
            norm: NormStats {
                short: stats(6),
                mid: stats(7),
                long: stats(6),
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        for (_, v) in VariantConfig::presets() {
            let ck = sample(v);
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            let bits = |c: &Checkpoint| -> Vec<u64> { c.policy.to_flat().iter().map(|x| x.to_bits()).collect() };
            assert_eq!(bits(&ck), bits(&back));
            assert_eq!(ck, back);
            // The restored generator continues the same stream.
            let (mut a, mut b) = (ck.rng.clone(), back.rng.clone());
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn weights_are_nested_row_major() {
        let ck = sample(VariantConfig::dnn());
        let v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        let t = &v["parameters"][0];
        assert_eq!(t["name"], "branch.mid.layer0.weight");
        assert_eq!(t["shape"], serde_json::json!([32, 180]));
        let row1 = t["values"][1].as_array().unwrap();
        assert_eq!(row1.len(), 180);
        let w = &ck.policy.branches[0].net.layers[0].weights;
        assert_eq!(row1[3].as_f64().unwrap(), w[180 + 3]);
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let ck = sample(VariantConfig::mct());
        let json = ck.to_json().unwrap().replacen("\"version\":1", "\"version\":2", 1);
        let e = Checkpoint::from_json(&json).unwrap_err();
        assert!(matches!(e, Error::VersionMismatch { found: 2, expected: 1 }));
        let msg = e.to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = sample(VariantConfig::mctg());
        save_checkpoint(&ck, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        let e = load_checkpoint(&path).unwrap_err();
        assert!(matches!(e, Error::Checkpoint(_)), "{e}");
    }

    #[test]
    fn shape_tampering_and_variant_guard() {
        let ck = sample(VariantConfig::dnn());
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["parameters"][1]["shape"] = serde_json::json!([31]);
        let e = Checkpoint::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(e, Error::Shape(_)), "{e}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dnn.json");
        save_checkpoint(&ck, &path).unwrap();
        assert!(load_checkpoint_for(&path, &VariantConfig::dnn()).is_ok());
        let e = load_checkpoint_for(&path, &VariantConfig::mctg()).unwrap_err();
        assert!(matches!(e, Error::Shape(_)));
        assert!(e.to_string().contains("DNN") && e.to_string().contains("MCTG"));
    }
}
