//! Training pipelines for the noise predictor and the classifier.

use purbench_core::autodiff::Tape;
use purbench_core::diffusion::{
    ddpm_loss_record, sample_loss_draws, score_matching_loss_record, NoiseSchedule,
};
use purbench_core::models::{adam_step, ClassifierParams, MlpParams, OptimState};
use purbench_core::rng::StreamRng;
use purbench_core::{CoreError, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionLoss {
    Ddpm,
    ScoreMatching,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_diffusion_steps")]
    pub diffusion_steps: usize,
    #[serde(default = "default_classifier_steps")]
    pub classifier_steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_loss")]
    pub loss: DiffusionLoss,
}

fn default_diffusion_steps() -> usize {
    4000
}
fn default_classifier_steps() -> usize {
    1500
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    2e-3
}
fn default_loss() -> DiffusionLoss {
    DiffusionLoss::Ddpm
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            diffusion_steps: default_diffusion_steps(),
            classifier_steps: default_classifier_steps(),
            batch: default_batch(),
            lr: default_lr(),
            loss: default_loss(),
        }
    }
}

fn sample_batch(data: &Dataset, batch: usize, rng: &mut StreamRng) -> Vec<usize> {
    (0..batch).map(|_| rng.below(data.len())).collect()
}

/// Trains the noise predictor on the dataset until the configured step
/// budget, recording the loss curve. A non-finite loss aborts with the step
/// index.
pub fn train_diffusion(
    data: &Dataset,
    schedule: &NoiseSchedule,
    hidden: &[usize],
    time_embed_dim: usize,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(MlpParams, Vec<f64>)> {
    if data.is_empty() {
        return Err(CoreError::Config("training needs a nonempty dataset".into()));
    }
    let dim = data.points[0].0.len();
    let root = StreamRng::new(seed, "train-diffusion");
    let mut init_rng = root.derive("init");
    let mut params = MlpParams::init(dim, hidden, time_embed_dim, &mut init_rng)?;
    let mut state = OptimState::new(tc.lr, &params.params());
    let mut curve = Vec::with_capacity(tc.diffusion_steps);

    for step in 0..tc.diffusion_steps {
        let mut srng = root.derive(&format!("step={step}"));
        let idx = sample_batch(data, tc.batch, &mut srng);
        let batch: Vec<Tensor> = idx.iter().map(|&i| data.points[i].0.clone()).collect();
        let draws = sample_loss_draws(batch.len(), dim, schedule, &mut srng)?;

        let mut tape = Tape::new();
        let handle = params.place_on(&mut tape, true);
        let refs = handle.param_refs();
        let loss_node = match tc.loss {
            DiffusionLoss::Ddpm => ddpm_loss_record(&mut tape, &handle, &batch, schedule, &draws),
            DiffusionLoss::ScoreMatching => {
                score_matching_loss_record(&mut tape, &handle, &batch, schedule, &draws)
            }
        }
        .map_err(|e| diverged(step, e))?;
        let loss = tape.value(loss_node).as_scalar()?;
        if !loss.is_finite() {
            return Err(CoreError::domain(
                "train_diffusion",
                format!("loss diverged at step {step}"),
            ));
        }
        curve.push(loss);
        let grads = tape.backward(loss_node, Tensor::scalar(1.0))?;
        let mut tensors = params.params_mut();
        adam_step(&mut tensors, &refs, &grads, &mut state)?;
    }
    Ok((params, curve))
}

fn diverged(step: usize, e: CoreError) -> CoreError {
    CoreError::domain("train_diffusion", format!("aborted at step {step}: {e}"))
}

/// Fraction of points the classifier labels correctly.
pub fn train_accuracy(params: &ClassifierParams, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (x, y) in &data.points {
        if params.predict(x)? == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains the classifier on clean data. Stops early once training accuracy
/// reaches 98%; errors if the dataset dimension does not match or the loss
/// diverges.
pub fn train_classifier(
    data: &Dataset,
    hidden: &[usize],
    tc: &TrainConfig,
    seed: u64,
) -> Result<(ClassifierParams, Vec<f64>)> {
    if data.is_empty() {
        return Err(CoreError::Config("training needs a nonempty dataset".into()));
    }
    let dim = data.points[0].0.len();
    let root = StreamRng::new(seed, "train-classifier");
    let mut init_rng = root.derive("init");
    let mut params = ClassifierParams::init(dim, hidden, data.num_classes, &mut init_rng)?;
    let mut state = OptimState::new(tc.lr, &params.params());
    let mut curve = Vec::new();

    for step in 0..tc.classifier_steps {
        let mut srng = root.derive(&format!("step={step}"));
        let idx = sample_batch(data, tc.batch, &mut srng);

        let mut tape = Tape::new();
        let handle = params.place_on(&mut tape, true);
        let refs = handle.param_refs();
        let mut total = None;
        for &i in &idx {
            let (x, y) = &data.points[i];
            if x.len() != dim || params.data_dim() != dim {
                return Err(CoreError::shape(
                    "train_classifier",
                    format!("point dim {} vs model dim {}", x.len(), params.data_dim()),
                ));
            }
            let xr = tape.constant(x.clone());
            let logits = handle.logits(&mut tape, xr)?;
            let ce = tape.cross_entropy(logits, *y)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        let loss_node = tape.scale(total.expect("nonempty batch"), 1.0 / idx.len() as f64)?;
        let loss = tape.value(loss_node).as_scalar()?;
        if !loss.is_finite() {
            return Err(CoreError::domain(
                "train_classifier",
                format!("loss diverged at step {step}"),
            ));
        }
        curve.push(loss);
        let grads = tape.backward(loss_node, Tensor::scalar(1.0))?;
        let mut tensors = params.params_mut();
        adam_step(&mut tensors, &refs, &grads, &mut state)?;

        if step % 50 == 49 && train_accuracy(&params, data)? >= 0.98 {
            break;
        }
    }
    Ok((params, curve))
}

/// Dimension guard shared by the callers that pair a dataset with an
/// existing classifier.
pub fn check_dims(params: &ClassifierParams, data: &Dataset) -> Result<()> {
    let dim = data.points.first().map(|(x, _)| x.len()).unwrap_or(0);
    if params.data_dim() != dim {
        return Err(CoreError::shape(
            "classifier/dataset",
            format!("model dim {} vs data dim {}", params.data_dim(), dim),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_dataset, DataKind, DatasetSpec};

    fn blobs(n: usize, seed: u64) -> Dataset {
        gen_dataset(&DatasetSpec {
            kind: DataKind::Blobs,
            n_points: n,
            noise_scale: 0.05,
            seed,
            data_dim: 2,
            num_classes: 2,
        })
        .unwrap()
    }

    #[test]
    fn diffusion_training_halves_the_loss() {
        // Initial and trained loss measured on the same held-out draws.
        let data = blobs(256, 3);
        let schedule = NoiseSchedule::linear(50, 1e-3, 5e-2).unwrap();
        let batch: Vec<Tensor> = data.points.iter().map(|(x, _)| x.clone()).collect();
        let mut erng = StreamRng::new(99, "eval-draws");
        let draws =
            purbench_core::diffusion::sample_loss_draws(batch.len(), 2, &schedule, &mut erng)
                .unwrap();

        let tc0 = TrainConfig {
            diffusion_steps: 0,
            ..TrainConfig::default()
        };
        let (p0, _) = train_diffusion(&data, &schedule, &[64, 64], 8, &tc0, 1).unwrap();
        let initial =
            purbench_core::diffusion::ddpm_loss_with_draws(&p0, &batch, &schedule, &draws)
                .unwrap();

        let tc = TrainConfig {
            diffusion_steps: 2000,
            ..TrainConfig::default()
        };
        let (p, curve) = train_diffusion(&data, &schedule, &[64, 64], 8, &tc, 1).unwrap();
        let trained =
            purbench_core::diffusion::ddpm_loss_with_draws(&p, &batch, &schedule, &draws)
                .unwrap();
        assert!(
            trained < 0.5 * initial,
            "training did not halve the loss: {initial} -> {trained}"
        );
        assert_eq!(curve.len(), 2000);
    }

    #[test]
    fn zero_steps_leave_params_at_init() {
        let data = blobs(64, 4);
        let schedule = NoiseSchedule::linear(10, 1e-3, 5e-2).unwrap();
        let tc = TrainConfig {
            diffusion_steps: 0,
            ..TrainConfig::default()
        };
        let (p, curve) = train_diffusion(&data, &schedule, &[8], 4, &tc, 9).unwrap();
        assert!(curve.is_empty());
        let mut init_rng = StreamRng::new(9, "train-diffusion").derive("init");
        let fresh = MlpParams::init(2, &[8], 4, &mut init_rng).unwrap();
        for (a, b) in p.weights.iter().zip(fresh.weights.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = blobs(64, 5);
        let schedule = NoiseSchedule::linear(10, 1e-3, 5e-2).unwrap();
        let tc = TrainConfig {
            diffusion_steps: 50,
            batch: 16,
            ..TrainConfig::default()
        };
        let (a, _) = train_diffusion(&data, &schedule, &[8], 4, &tc, 7).unwrap();
        let (b, _) = train_diffusion(&data, &schedule, &[8], 4, &tc, 7).unwrap();
        for (wa, wb) in a.weights.iter().zip(b.weights.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(wa), bits(wb));
        }
    }

    #[test]
    fn classifier_reaches_training_accuracy() {
        let data = blobs(256, 6);
        let tc = TrainConfig {
            classifier_steps: 800,
            batch: 32,
            ..TrainConfig::default()
        };
        let (clf, _) = train_classifier(&data, &[16, 16], &tc, 2).unwrap();
        assert!(train_accuracy(&clf, &data).unwrap() >= 0.95);

        // Held-out accuracy on a fresh draw of the same distribution.
        let test = blobs(128, 60);
        assert!(train_accuracy(&clf, &test).unwrap() >= 0.95);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let data = blobs(64, 8);
        let mut rng = StreamRng::new(1, "clf");
        let wrong = ClassifierParams::init(3, &[8], 2, &mut rng).unwrap();
        assert!(check_dims(&wrong, &data).is_err());
    }
}
