//! Toy 2-D datasets scaled into the unit box, standing in for the image
//! benchmarks. Generation is deterministic per seed and class-balanced
//! within one point.

use purbench_core::rng::StreamRng;
use purbench_core::{CoreError, Result, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Moons,
    Blobs,
    Rings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DataKind,
    pub n_points: usize,
    pub noise_scale: f64,
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub data_dim: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_dim() -> usize {
    2
}

fn default_classes() -> usize {
    2
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub points: Vec<(Tensor, usize)>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Deterministic split into a training head and a test tail. Labels are
    /// assigned round-robin at generation, so both halves stay balanced.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train >= self.len() {
            return Err(CoreError::Config(format!(
                "cannot take {n_train} training points from {}",
                self.len()
            )));
        }
        Ok((
            Dataset {
                points: self.points[..n_train].to_vec(),
                num_classes: self.num_classes,
            },
            Dataset {
                points: self.points[n_train..].to_vec(),
                num_classes: self.num_classes,
            },
        ))
    }
}

/// Cluster centers for the blob layout: two blobs per side, classes split
/// by the vertical midline so a linear probe separates them.
const BLOB_CENTERS: [(f64, f64); 4] = [(0.2, 0.3), (0.2, 0.7), (0.8, 0.3), (0.8, 0.7)];

/// Generates a dataset: labels round-robin (balance within one point),
/// features jittered by `noise_scale` and clamped into `[0, 1]^2`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.data_dim != 2 {
        return Err(CoreError::Config(format!(
            "toy datasets are 2-dimensional, got data_dim {}",
            spec.data_dim
        )));
    }
    if spec.n_points < 2 * spec.num_classes {
        return Err(CoreError::Config(format!(
            "need at least {} points for {} classes",
            2 * spec.num_classes,
            spec.num_classes
        )));
    }
    if spec.noise_scale < 0.0 {
        return Err(CoreError::Config("noise_scale must be nonnegative".into()));
    }
    let valid_classes = match spec.kind {
        DataKind::Blobs => spec.num_classes == 2 || spec.num_classes == 4,
        DataKind::Moons | DataKind::Rings => spec.num_classes == 2,
    };
    if !valid_classes {
        return Err(CoreError::Config(format!(
            "{:?} supports 2{} classes, got {}",
            spec.kind,
            if spec.kind == DataKind::Blobs { " or 4" } else { "" },
            spec.num_classes
        )));
    }

    let rng = StreamRng::new(spec.seed, "dataset");
    let mut points = Vec::with_capacity(spec.n_points);
    for i in 0..spec.n_points {
        let label = i % spec.num_classes;
        let mut prng = rng.derive(&format!("point={i}"));
        let (mut x, mut y) = match spec.kind {
            DataKind::Blobs => {
                // Alternate between the clusters belonging to this class.
                let cluster = if spec.num_classes == 4 {
                    label
                } else {
                    label * 2 + (i / spec.num_classes) % 2
                };
                BLOB_CENTERS[cluster]
            }
            DataKind::Moons => {
                let theta = prng.uniform() * std::f64::consts::PI;
                let (cx, cy) = if label == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                // Ideal moons span x in [-1, 2], y in [-0.5, 1].
                ((cx + 1.0) / 3.0, (cy + 0.5) / 1.5)
            }
            DataKind::Rings => {
                let theta = prng.uniform() * std::f64::consts::TAU;
                let r = if label == 0 { 0.18 } else { 0.38 };
                (0.5 + r * theta.cos(), 0.5 + r * theta.sin())
            }
        };
        x += prng.normal() * spec.noise_scale;
        y += prng.normal() * spec.noise_scale;
        points.push((
            Tensor::vector(vec![x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]),
            label,
        ));
    }
    Ok(Dataset {
        points,
        num_classes: spec.num_classes,
    })
}
