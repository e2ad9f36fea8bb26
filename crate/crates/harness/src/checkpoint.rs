//! Model persistence: JSON checkpoints that round-trip parameters bitwise
//! (floats are written as shortest round-trip decimals).

use std::fmt;
use std::path::Path;

use purbench_core::diffusion::NoiseSchedule;
use purbench_core::models::{ClassifierParams, MlpParams};
use purbench_core::Tensor;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    /// Parse failure with the byte offset of the error in the file.
    Parse { offset: usize, detail: String },
    Version { found: u32, expected: u32 },
    Invalid(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Parse { offset, detail } => {
                write!(f, "checkpoint parse error at byte {offset}: {detail}")
            }
            CheckpointError::Version { found, expected } => write!(
                f,
                "checkpoint format version {found} is not the supported version {expected}"
            ),
            CheckpointError::Invalid(msg) => write!(f, "invalid checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
}

/// On-disk checkpoint document. `schedule`/`time_embed_dim` are present for
/// diffusion models, `num_classes` for classifiers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub model_kind: String,
    pub layer_dims: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule_betas: Option<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub metadata: TrainMeta,
}

/// A loaded model.
#[derive(Debug)]
pub enum Checkpoint {
    Diffusion {
        params: MlpParams,
        schedule: NoiseSchedule,
        meta: TrainMeta,
    },
    Classifier {
        params: ClassifierParams,
        meta: TrainMeta,
    },
}

fn layers_to_json(weights: &[Tensor], biases: &[Tensor]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (
        weights.iter().map(|w| w.data().to_vec()).collect(),
        biases.iter().map(|b| b.data().to_vec()).collect(),
    )
}

pub fn save_diffusion(
    params: &MlpParams,
    schedule: &NoiseSchedule,
    meta: TrainMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let (weights, biases) = layers_to_json(&params.weights, &params.biases);
    let doc = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        model_kind: "diffusion".into(),
        layer_dims: params.layer_dims.clone(),
        time_embed_dim: Some(params.time_embed_dim),
        num_classes: None,
        schedule_betas: Some((1..=schedule.t_max()).map(|t| schedule.beta(t)).collect()),
        weights,
        biases,
        metadata: meta,
    };
    write_doc(&doc, path)
}

pub fn save_classifier(
    params: &ClassifierParams,
    meta: TrainMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let (weights, biases) = layers_to_json(&params.weights, &params.biases);
    let doc = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        model_kind: "classifier".into(),
        layer_dims: params.layer_dims.clone(),
        time_embed_dim: None,
        num_classes: Some(params.num_classes),
        schedule_betas: None,
        weights,
        biases,
        metadata: meta,
    };
    write_doc(&doc, path)
}

fn write_doc(doc: &CheckpointFile, path: &Path) -> Result<(), CheckpointError> {
    let json = serde_json::to_string_pretty(doc)
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

fn rebuild_layers(
    doc: &CheckpointFile,
) -> Result<(Vec<Tensor>, Vec<Tensor>), CheckpointError> {
    if doc.layer_dims.len() < 2 || doc.weights.len() != doc.layer_dims.len() - 1 {
        return Err(CheckpointError::Invalid(format!(
            "layer_dims {:?} does not match {} weight arrays",
            doc.layer_dims,
            doc.weights.len()
        )));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (i, pair) in doc.layer_dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        weights.push(
            Tensor::matrix(fan_in, fan_out, doc.weights[i].clone())
                .map_err(|e| CheckpointError::Invalid(e.to_string()))?,
        );
        if doc.biases[i].len() != fan_out {
            return Err(CheckpointError::Invalid(format!(
                "bias {i} has {} entries, expected {fan_out}",
                doc.biases[i].len()
            )));
        }
        biases.push(Tensor::vector(doc.biases[i].clone()));
    }
    Ok((weights, biases))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let doc: CheckpointFile = serde_json::from_str(&text).map_err(|e| {
        let offset = byte_offset(&text, e.line(), e.column());
        CheckpointError::Parse {
            offset,
            detail: e.to_string(),
        }
    })?;
    if doc.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: doc.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (weights, biases) = rebuild_layers(&doc)?;
    match doc.model_kind.as_str() {
        "diffusion" => {
            let ted = doc
                .time_embed_dim
                .ok_or_else(|| CheckpointError::Invalid("missing time_embed_dim".into()))?;
            let betas = doc
                .schedule_betas
                .clone()
                .ok_or_else(|| CheckpointError::Invalid("missing schedule".into()))?;
            let schedule = NoiseSchedule::from_betas(betas)
                .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
            Ok(Checkpoint::Diffusion {
                params: MlpParams {
                    layer_dims: doc.layer_dims.clone(),
                    weights,
                    biases,
                    time_embed_dim: ted,
                },
                schedule,
                meta: doc.metadata,
            })
        }
        "classifier" => {
            let k = doc
                .num_classes
                .ok_or_else(|| CheckpointError::Invalid("missing num_classes".into()))?;
            Ok(Checkpoint::Classifier {
                params: ClassifierParams {
                    layer_dims: doc.layer_dims.clone(),
                    weights,
                    biases,
                    num_classes: k,
                },
                meta: doc.metadata,
            })
        }
        other => Err(CheckpointError::Invalid(format!("unknown model kind '{other}'"))),
    }
}

/// Byte offset of a 1-based (line, column) position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.lines().enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    text.len()
}
