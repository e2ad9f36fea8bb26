//! Experiment orchestration: builds trained benchmarks per seed and runs
//! the attack evaluations, ablation sweeps, memory benchmark, and theory
//! checks behind the CLI subcommands.

use std::sync::Arc;

use purbench_core::attack::{
    clean_accuracy, robust_accuracy, AttackMethod, Defense,
};
use purbench_core::chainckpt::{
    forward_record, fullgraph_backward, peak_live_bytes, segmentwise_backward, InjectMap,
    MemoryMeter,
};
use purbench_core::diffusion::{build_purify_steps, NoiseSchedule, PurifierConfig, PurifyKind};
use purbench_core::rng::StreamRng;
use purbench_core::theory::{gaussian_pilot, PilotConfig, PilotReport};
use purbench_core::{CoreError, Result, Tensor};
use serde_json::{json, Value};

use crate::config::BenchConfig;
use crate::dataset::{gen_dataset, Dataset, DatasetSpec};
use crate::train::{train_classifier, train_diffusion};

/// A fully built benchmark for one seed: trained models and the data split.
pub struct Bench {
    pub defense: Defense,
    pub train_data: Dataset,
    pub test_data: Dataset,
    pub schedule: Arc<NoiseSchedule>,
    pub diffusion_curve: Vec<f64>,
    pub classifier_curve: Vec<f64>,
}

fn purify_kind(name: &str) -> Result<PurifyKind> {
    match name {
        "ddpm" => Ok(PurifyKind::Ddpm),
        "vpsde" => Ok(PurifyKind::Vpsde),
        other => Err(CoreError::Config(format!("unknown purifier kind '{other}'"))),
    }
}

/// Generates data and trains both models deterministically for
/// `config.seed + seed_offset`.
pub fn build_bench(config: &BenchConfig, seed_offset: u64) -> Result<Bench> {
    let seed = config.seed + seed_offset;
    let spec = DatasetSpec {
        seed: config.dataset.seed + seed,
        ..config.dataset.clone()
    };
    let data = gen_dataset(&spec)?;
    let (train_data, test_data) = data.split(config.train_points)?;

    let schedule = Arc::new(NoiseSchedule::linear(
        config.schedule.t_max,
        config.schedule.beta_min,
        config.schedule.beta_max,
    )?);
    let (eps_model, diffusion_curve) = train_diffusion(
        &train_data,
        &schedule,
        &config.model.hidden,
        config.model.time_embed_dim,
        &config.train,
        seed,
    )?;
    let (classifier, classifier_curve) =
        train_classifier(&train_data, &config.classifier.hidden, &config.train, seed)?;

    let mut purifier = PurifierConfig::new(
        purify_kind(&config.purifier.kind)?,
        config.purifier.t_star,
        Arc::clone(&schedule),
    )?;
    purifier.eot_samples = config.purifier.eot_samples;

    Ok(Bench {
        defense: Defense {
            purifier,
            eps_model: Arc::new(eps_model),
            classifier: Arc::new(classifier),
        },
        train_data,
        test_data,
        schedule,
        diffusion_curve,
        classifier_curve,
    })
}

/// Evaluation slice: the first `n_points` test points.
pub fn eval_points(bench: &Bench, n_points: usize) -> Vec<(Tensor, usize)> {
    bench
        .test_data
        .points
        .iter()
        .take(n_points)
        .cloned()
        .collect()
}

/// Clean and per-method robust accuracy for one seed.
pub struct SeedEval {
    pub seed: u64,
    pub clean_acc: f64,
    pub robust: Vec<(String, f64)>,
}

pub fn evaluate_seed(
    config: &BenchConfig,
    seed_offset: u64,
    methods: &[AttackMethod],
    t_star_override: Option<usize>,
) -> Result<SeedEval> {
    let mut bench = build_bench(config, seed_offset)?;
    if let Some(t) = t_star_override {
        bench.defense.purifier = PurifierConfig::new(
            bench.defense.purifier.kind,
            t,
            Arc::clone(&bench.schedule),
        )?;
    }
    let cfg = config.attack_config()?;
    let points = eval_points(&bench, config.eval.n_points);
    let eval_rng = StreamRng::new(config.seed + seed_offset, "evaluation");
    let clean = clean_accuracy(&points, &bench.defense, config.eval.n_eval_draws, &eval_rng)?;
    let mut robust = Vec::new();
    for method in methods {
        let acc = robust_accuracy(
            &points,
            *method,
            &bench.defense,
            &cfg,
            config.eval.n_eval_draws,
            &eval_rng.derive(method.name()),
        )?;
        robust.push((method.name().to_string(), acc));
    }
    Ok(SeedEval {
        seed: config.seed + seed_offset,
        clean_acc: clean,
        robust,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Multi-seed attack evaluation; the `attack` subcommand.
pub struct AttackEval {
    pub per_seed: Vec<SeedEval>,
    pub clean_mean: f64,
    pub robust_mean: Vec<(String, f64)>,
}

pub fn run_attack_eval(
    config: &BenchConfig,
    methods: &[AttackMethod],
    t_star_override: Option<usize>,
) -> Result<AttackEval> {
    let mut per_seed = Vec::new();
    for &s in &config.eval.seeds {
        per_seed.push(evaluate_seed(config, s, methods, t_star_override)?);
    }
    let clean_mean = mean(&per_seed.iter().map(|e| e.clean_acc).collect::<Vec<_>>());
    let mut robust_mean = Vec::new();
    for (i, method) in methods.iter().enumerate() {
        let accs: Vec<f64> = per_seed.iter().map(|e| e.robust[i].1).collect();
        robust_mean.push((method.name().to_string(), mean(&accs)));
    }
    Ok(AttackEval {
        per_seed,
        clean_mean,
        robust_mean,
    })
}

pub fn attack_eval_json(eval: &AttackEval) -> (Value, Value) {
    let per_seed: Vec<Value> = eval
        .per_seed
        .iter()
        .map(|e| {
            json!({
                "seed": e.seed,
                "clean_acc": e.clean_acc,
                "robust": e.robust.iter().map(|(m, a)| json!({"method": m, "robust_acc": a})).collect::<Vec<_>>(),
            })
        })
        .collect();
    let aggregates = json!({
        "clean_acc_mean": eval.clean_mean,
        "robust_acc_mean": eval.robust_mean.iter().map(|(m, a)| json!({"method": m, "robust_acc": a})).collect::<Vec<_>>(),
    });
    (Value::Array(per_seed), aggregates)
}

/// One row of the diffusion-length sweep.
pub struct SweepRow {
    pub t_star: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

/// Diffusion-length ablation: multi-seed mean clean/robust accuracy of the
/// adaptive attack at every `t_star` in the sweep.
pub fn ablate_t(config: &BenchConfig, t_values: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &t in t_values {
        if t > config.schedule.t_max {
            return Err(CoreError::Config(format!(
                "t_star {t} exceeds schedule length {}",
                config.schedule.t_max
            )));
        }
        let eval = run_attack_eval(config, &[AttackMethod::DiffAttack], Some(t))?;
        rows.push(SweepRow {
            t_star: t,
            clean_acc: eval.clean_mean,
            robust_acc: eval.robust_mean[0].1,
        });
    }
    Ok(rows)
}

/// One row of the time-step-placement sweep.
pub struct StrategyRow {
    pub strategy: String,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub drop: f64,
}

/// Deviated-loss placement ablation over the three sampling strategies.
pub fn ablate_steps(config: &BenchConfig) -> Result<Vec<StrategyRow>> {
    let mut rows = Vec::new();
    for strategy in ["uniform", "initial_third", "final_third"] {
        let mut cfg = config.clone();
        cfg.attack.timestep_strategy = strategy.into();
        let eval = run_attack_eval(&cfg, &[AttackMethod::DiffAttack], None)?;
        rows.push(StrategyRow {
            strategy: strategy.into(),
            clean_acc: eval.clean_mean,
            robust_acc: eval.robust_mean[0].1,
            drop: eval.clean_mean - eval.robust_mean[0].1,
        });
    }
    Ok(rows)
}

/// One row of the loss-weight sweep.
pub struct LambdaRow {
    pub lambda: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

pub fn ablate_lambda(config: &BenchConfig, lambdas: &[f64]) -> Result<Vec<LambdaRow>> {
    let mut rows = Vec::new();
    for &l in lambdas {
        let mut cfg = config.clone();
        cfg.attack.lambda = l;
        let eval = run_attack_eval(&cfg, &[AttackMethod::DiffAttack], None)?;
        rows.push(LambdaRow {
            lambda: l,
            clean_acc: eval.clean_mean,
            robust_acc: eval.robust_mean[0].1,
        });
    }
    Ok(rows)
}

/// One row of the memory benchmark.
pub struct MemRow {
    pub t: usize,
    pub graph_peak_bytes: usize,
    pub sample_bytes: usize,
    /// `None` means the whole-graph baseline was skipped over budget.
    pub fullgraph_peak_bytes: Option<usize>,
}

/// Measures peak graph bytes of the segment-wise backward against the
/// whole-graph baseline on real purifier chains of increasing length. The
/// baseline is skipped (with an explicit cell) when its projected size
/// exceeds `fullgraph_budget_bytes`.
pub fn memcheck(
    config: &BenchConfig,
    t_values: &[usize],
    fullgraph_budget_bytes: usize,
) -> Result<Vec<MemRow>> {
    let mut rows = Vec::new();
    for &t in t_values {
        if t == 0 {
            return Err(CoreError::Config("memcheck needs t >= 1".into()));
        }
        // A schedule long enough for the requested chain; betas rescaled so
        // the total noise budget stays comparable across lengths.
        let schedule = Arc::new(NoiseSchedule::linear(
            t,
            config.schedule.beta_min,
            config.schedule.beta_max.min(0.5),
        )?);
        let mut rng = StreamRng::new(config.seed, "memcheck");
        let eps_model = Arc::new(purbench_core::models::MlpParams::init(
            config.dataset.data_dim,
            &config.model.hidden,
            config.model.time_embed_dim,
            &mut rng,
        )?);
        let purifier = PurifierConfig::new(purify_kind(&config.purifier.kind)?, t, schedule)?;
        let x = Tensor::vector(vec![0.5; config.dataset.data_dim]);
        let steps = build_purify_steps(&purifier, &eps_model);
        let record = forward_record(steps, &x, &StreamRng::new(config.seed, "memchain"))?;
        let seed_grad = Tensor::vector(vec![1.0; config.dataset.data_dim]);

        let seg_meter = MemoryMeter::new();
        segmentwise_backward(&record, &seed_grad, &InjectMap::new(), &seg_meter)?;
        let graph_peak = peak_live_bytes(&seg_meter);

        // Whole-graph projection: one segment's bytes times the chain length.
        let projected = graph_peak * record.len();
        let fullgraph_peak = if projected <= fullgraph_budget_bytes {
            let full_meter = MemoryMeter::new();
            fullgraph_backward(&record, &seed_grad, &InjectMap::new(), &full_meter)?;
            Some(peak_live_bytes(&full_meter))
        } else {
            None
        };
        rows.push(MemRow {
            t,
            graph_peak_bytes: graph_peak,
            sample_bytes: record.sample_bytes(),
            fullgraph_peak_bytes: fullgraph_peak,
        });
    }
    Ok(rows)
}

/// Runs the analytic pilot on the configured schedule's default grid.
pub fn theory_check(config: &BenchConfig) -> Result<PilotReport> {
    let schedule = Arc::new(NoiseSchedule::linear(
        config.schedule.t_max,
        config.schedule.beta_min,
        config.schedule.beta_max,
    )?);
    gaussian_pilot(&PilotConfig::default_grid(schedule))
}

pub fn pilot_report_json(report: &PilotReport) -> Value {
    json!({
        "grid": report.entries.iter().map(|e| json!([e.delta, e.t])).collect::<Vec<_>>(),
        "lhs": report.entries.iter().map(|e| e.lhs).collect::<Vec<_>>(),
        "rhs": report.entries.iter().map(|e| e.rhs).collect::<Vec<_>>(),
        "violations": report.violations,
    })
}

/// Deterministic work counters recorded in place of wall-clock timing.
pub fn work_counters(config: &BenchConfig, methods: usize) -> Value {
    let evals_per_point = (config.attack.n_iter + 1) * config.attack.eot;
    json!({
        "points_per_seed": config.eval.n_points,
        "seeds": config.eval.seeds.len(),
        "methods": methods,
        "gradient_evals_per_point": evals_per_point,
        "chain_steps_per_eval": 2 * config.purifier.t_star,
    })
}
