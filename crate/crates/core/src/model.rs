//! Tiny MLP classifiers under a fixed parameter-memory budget, and the
//! `SZM1` model container.
//!
//! Hidden layers use ReLU, the single output unit a sigmoid. Parameters are
//! stored per layer as a row-major `out x in` weight matrix followed by `out`
//! biases.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureVector;

/// 34 KiB of parameter payload per model.
pub const MODEL_BUDGET_BYTES: usize = 34 * 1024;
pub const BYTES_PER_PARAM: usize = 4;
pub const MODEL_MAGIC: &[u8; 4] = b"SZM1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("budget exceeded: parameter payload is {payload_bytes} bytes, budget is {budget_bytes} bytes")]
    BudgetExceeded {
        payload_bytes: usize,
        budget_bytes: usize,
    },
    #[error("model of {model_bytes} bytes does not fit {profile} memory of {memory_bytes} bytes")]
    ExceedsProfile {
        profile: String,
        model_bytes: usize,
        memory_bytes: u64,
    },
    #[error("dimension mismatch: model expects {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("bad model container: {0}")]
    BadContainer(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<f32>,
    pub version: String,
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|l| l[0] * l[1] + l[1]).sum()
}

fn header_len(version: &str, layers: usize) -> usize {
    4 + 2 + version.len() + 2 + 4 * layers + 4
}

impl ModelSpec {
    pub fn zeros(layer_sizes: Vec<usize>, version: impl Into<String>) -> Self {
        let n = param_count(&layer_sizes);
        ModelSpec {
            layer_sizes,
            weights: vec![0.0; n],
            version: version.into(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.layer_sizes.first().copied().unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.layer_sizes)
    }

    pub fn payload_bytes(&self) -> usize {
        self.param_count() * BYTES_PER_PARAM
    }

    pub fn header_bytes(&self) -> usize {
        header_len(&self.version, self.layer_sizes.len())
    }

    pub fn serialized_bytes(&self) -> usize {
        self.header_bytes() + self.payload_bytes()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.is_empty() {
            return Err(ModelError::Invalid("no layers".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(ModelError::Invalid("layer of size zero".into()));
        }
        if *self.layer_sizes.last().expect("non-empty") != 1 {
            return Err(ModelError::Invalid(
                "output layer must have one unit".into(),
            ));
        }
        if self.weights.len() != self.param_count() {
            return Err(ModelError::Invalid(format!(
                "{} weights for {} parameters",
                self.weights.len(),
                self.param_count()
            )));
        }
        if self.version.len() > u16::MAX as usize || self.layer_sizes.len() > u16::MAX as usize {
            return Err(ModelError::Invalid("header field too long".into()));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::Invalid("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn encode(&self, budget_bytes: usize) -> Result<Vec<u8>, ModelError> {
        check_budget(self, budget_bytes)?;
        self.validate()?;
        let mut out = Vec::with_capacity(self.serialized_bytes());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.version.len() as u16).to_le_bytes());
        out.extend_from_slice(self.version.as_bytes());
        out.extend_from_slice(&(self.layer_sizes.len() as u16).to_le_bytes());
        for &l in &self.layer_sizes {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.param_count() as u32).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses a container, refusing it from the header alone if the declared
    /// parameter payload exceeds `budget_bytes`.
    pub fn decode(buf: &[u8], budget_bytes: usize) -> Result<ModelSpec, ModelError> {
        let bad = |m: &str| ModelError::BadContainer(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            let s = buf.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MODEL_MAGIC {
            return Err(bad("missing SZM1 magic"));
        }
        let vlen = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let version =
            String::from_utf8(take(vlen)?.to_vec()).map_err(|_| bad("version is not utf-8"))?;
        let n_layers = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let mut layer_sizes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layer_sizes.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
        }
        let declared = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let payload_bytes = declared.saturating_mul(BYTES_PER_PARAM);
        if payload_bytes > budget_bytes {
            return Err(ModelError::BudgetExceeded {
                payload_bytes,
                budget_bytes,
            });
        }
        if declared != param_count(&layer_sizes) {
            return Err(bad("parameter count does not match layer table"));
        }
        let raw = take(payload_bytes)?;
        let weights = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        let m = ModelSpec {
            layer_sizes,
            weights,
            version,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path, budget_bytes: usize) -> Result<usize, ModelError> {
        let bytes = self.encode(budget_bytes)?;
        fs::write(path, &bytes).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(bytes.len())
    }

    pub fn load(path: &Path, budget_bytes: usize) -> Result<ModelSpec, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ModelSpec::decode(&bytes, budget_bytes)
    }
}

/// Returns the serialized size, or refuses a model whose parameter payload
/// (header excluded) exceeds `budget_bytes`.
pub fn check_budget(m: &ModelSpec, budget_bytes: usize) -> Result<usize, ModelError> {
    let payload_bytes = m.payload_bytes();
    if payload_bytes > budget_bytes {
        return Err(ModelError::BudgetExceeded {
            payload_bytes,
            budget_bytes,
        });
    }
    Ok(m.serialized_bytes())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Forward pass; returns the preictal probability.
pub fn infer(m: &ModelSpec, f: &FeatureVector) -> Result<f64, ModelError> {
    infer_slice(m, &f.values)
}

pub fn infer_slice(m: &ModelSpec, x: &[f64]) -> Result<f64, ModelError> {
    if x.len() != m.input_len() {
        return Err(ModelError::DimensionMismatch {
            expected: m.input_len(),
            got: x.len(),
        });
    }
    let mut act: Vec<f64> = x.to_vec();
    let mut offset = 0;
    let n_layers = m.layer_sizes.len();
    for (li, dims) in m.layer_sizes.windows(2).enumerate() {
        let (n_in, n_out) = (dims[0], dims[1]);
        let w = &m.weights[offset..offset + n_in * n_out];
        let b = &m.weights[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let last = li + 2 == n_layers;
        act = (0..n_out)
            .map(|o| {
                let z = b[o] as f64
                    + w[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(&act)
                        .map(|(&wi, &a)| wi as f64 * a)
                        .sum::<f64>();
                if last {
                    z
                } else {
                    z.max(0.0)
                }
            })
            .collect();
    }
    Ok(sigmoid(act[0]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    pub logic_cells: u64,
    pub dsp_slices: u64,
    pub memory_bytes: u64,
    /// Width, length, height.
    pub footprint_mm: [f64; 3],
}

impl Default for HardwareProfile {
    fn default() -> Self {
        HardwareProfile::kv260()
    }
}

impl HardwareProfile {
    pub fn kv260() -> Self {
        HardwareProfile {
            name: "kv260".into(),
            logic_cells: 256_000,
            dsp_slices: 1_200,
            memory_bytes: 4 * 1024 * 1024 * 1024,
            footprint_mm: [60.0, 77.0, 27.0],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.logic_cells == 0
            || self.dsp_slices == 0
            || self.memory_bytes == 0
            || self.footprint_mm.iter().any(|&d| !(d > 0.0))
        {
            return Err(ModelError::Invalid(format!(
                "hardware profile {} must have positive resources",
                self.name
            )));
        }
        Ok(())
    }

    pub fn check_model(&self, m: &ModelSpec) -> Result<(), ModelError> {
        let model_bytes = m.serialized_bytes();
        if model_bytes as u64 > self.memory_bytes {
            return Err(ModelError::ExceedsProfile {
                profile: self.name.clone(),
                model_bytes,
                memory_bytes: self.memory_bytes,
            });
        }
        Ok(())
    }
}
