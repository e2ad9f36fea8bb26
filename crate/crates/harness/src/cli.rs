//! Command-line interface. Every subcommand writes a canonical run-record
//! JSON to `--out`; sweep subcommands additionally write a CSV. Exit codes:
//! 0 success, 1 configuration/usage error, 2 runtime failure.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use purbench_core::attack::AttackMethod;
use purbench_core::Result;
use serde_json::{json, Value};

use crate::checkpoint::{save_classifier, save_diffusion, TrainMeta};
use crate::config::{load_config, BenchConfig};
use crate::dataset::gen_dataset;
use crate::experiments::{
    ablate_lambda, ablate_steps, ablate_t, attack_eval_json, build_bench, memcheck,
    pilot_report_json, run_attack_eval, theory_check, work_counters,
};
use crate::record::{run_record, write_run_record, CsvTable};

#[derive(Parser)]
#[command(
    name = "purbench",
    about = "Diffusion-purification attack testbed",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Path to the JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<String>,
    /// Top-level config overrides, `dotted.path=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run-record output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and write it as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV path.
        #[arg(long)]
        data_out: PathBuf,
    },
    /// Train the diffusion model and classifier; write checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        diffusion_out: PathBuf,
        #[arg(long)]
        classifier_out: PathBuf,
    },
    /// Evaluate the configured attacks (multi-seed means).
    Attack {
        #[command(flatten)]
        common: Common,
        /// Optional per-method summary CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Sweep the purification length.
    AblateT {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "5,15,25,40", value_delimiter = ',')]
        t_values: Vec<usize>,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Compare deviated-loss time-step placements.
    AblateSteps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Sweep the deviated-loss weight.
    AblateLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0.1,1.0,10.0", value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Peak graph memory of segment-wise vs whole-graph backward.
    Memcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "16,64,256,512", value_delimiter = ',')]
        t_values: Vec<usize>,
        /// Skip the whole-graph baseline above this projected size.
        #[arg(long, default_value_t = 1 << 30)]
        fullgraph_budget_bytes: usize,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Run the analytic Gaussian pilot for the distribution bound.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Entry point used by `main` and the tests. Returns the process exit code.
pub fn run_cli(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let outcome = match &cli.command {
        Command::GenData { common, data_out } => {
            with_config(common, |cfg| cmd_gen_data(cfg, common, data_out))
        }
        Command::Train {
            common,
            diffusion_out,
            classifier_out,
        } => with_config(common, |cfg| {
            cmd_train(cfg, common, diffusion_out, classifier_out)
        }),
        Command::Attack { common, csv } => {
            with_config(common, |cfg| cmd_attack(cfg, common, csv.as_deref()))
        }
        Command::AblateT {
            common,
            t_values,
            csv,
        } => with_config(common, |cfg| cmd_ablate_t(cfg, common, t_values, csv)),
        Command::AblateSteps { common, csv } => {
            with_config(common, |cfg| cmd_ablate_steps(cfg, common, csv))
        }
        Command::AblateLambda {
            common,
            lambdas,
            csv,
        } => with_config(common, |cfg| cmd_ablate_lambda(cfg, common, lambdas, csv)),
        Command::Memcheck {
            common,
            t_values,
            fullgraph_budget_bytes,
            csv,
        } => with_config(common, |cfg| {
            cmd_memcheck(cfg, common, t_values, *fullgraph_budget_bytes, csv)
        }),
        Command::TheoryCheck { common } => {
            with_config(common, |cfg| cmd_theory_check(cfg, common))
        }
    };
    match outcome {
        Ok(()) => {
            eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
            0
        }
        Err(Exit::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            1
        }
        Err(Exit::Runtime(msg)) => {
            eprintln!("runtime failure: {msg}");
            2
        }
    }
}

enum Exit {
    Config(String),
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> Exit {
    Exit::Runtime(e.to_string())
}

/// Loads and validates the config first, so schema problems exit with
/// code 1 before any work starts.
fn with_config<F>(common: &Common, f: F) -> std::result::Result<(), Exit>
where
    F: FnOnce(BenchConfig) -> std::result::Result<(), Exit>,
{
    let cfg = load_config(common.config.as_deref(), &common.overrides)
        .map_err(|e| Exit::Config(e.to_string()))?;
    f(cfg)
}

fn config_value(cfg: &BenchConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn finish(
    command: &str,
    cfg: &BenchConfig,
    results: Value,
    aggregates: Value,
    work: Value,
    common: &Common,
) -> std::result::Result<(), Exit> {
    let record = run_record(command, config_value(cfg), results, aggregates, work);
    write_run_record(&record, &common.out).map_err(runtime)?;
    Ok(())
}

fn cmd_gen_data(
    cfg: BenchConfig,
    common: &Common,
    data_out: &std::path::Path,
) -> std::result::Result<(), Exit> {
    let data = gen_dataset(&cfg.dataset).map_err(|e| Exit::Config(e.to_string()))?;
    let mut csv = CsvTable::new(&["x0", "x1", "label"]);
    for (x, y) in &data.points {
        csv.push_row(vec![
            CsvTable::cell_f64(x.data()[0]),
            CsvTable::cell_f64(x.data()[1]),
            y.to_string(),
        ]);
    }
    csv.write(data_out).map_err(runtime)?;
    println!("wrote {} points to {}", data.len(), data_out.display());
    let counts: Vec<usize> = (0..data.num_classes)
        .map(|c| data.points.iter().filter(|(_, y)| *y == c).count())
        .collect();
    finish(
        "gen-data",
        &cfg,
        json!({"class_counts": counts}),
        json!({"n_points": data.len()}),
        json!({}),
        common,
    )
}

fn cmd_train(
    cfg: BenchConfig,
    common: &Common,
    diffusion_out: &std::path::Path,
    classifier_out: &std::path::Path,
) -> std::result::Result<(), Exit> {
    let bench = build_bench(&cfg, 0).map_err(runtime)?;
    let seed = cfg.seed;
    save_diffusion(
        &bench.defense.eps_model,
        &bench.schedule,
        TrainMeta {
            seed,
            steps: bench.diffusion_curve.len(),
            final_loss: *bench.diffusion_curve.last().unwrap_or(&f64::NAN),
        },
        diffusion_out,
    )
    .map_err(runtime)?;
    save_classifier(
        &bench.defense.classifier,
        TrainMeta {
            seed,
            steps: bench.classifier_curve.len(),
            final_loss: *bench.classifier_curve.last().unwrap_or(&f64::NAN),
        },
        classifier_out,
    )
    .map_err(runtime)?;
    println!(
        "trained diffusion ({} steps, final loss {:.4}) and classifier ({} steps)",
        bench.diffusion_curve.len(),
        bench.diffusion_curve.last().unwrap_or(&f64::NAN),
        bench.classifier_curve.len()
    );
    finish(
        "train",
        &cfg,
        json!({
            "diffusion_loss_curve": bench.diffusion_curve,
            "classifier_loss_curve": bench.classifier_curve,
        }),
        json!({
            "diffusion_final_loss": bench.diffusion_curve.last(),
            "classifier_final_loss": bench.classifier_curve.last(),
        }),
        json!({"diffusion_steps": bench.diffusion_curve.len()}),
        common,
    )
}

fn parse_methods(cfg: &BenchConfig) -> Result<Vec<AttackMethod>> {
    cfg.attack
        .methods
        .iter()
        .map(|m| AttackMethod::from_name(m))
        .collect()
}

fn cmd_attack(
    cfg: BenchConfig,
    common: &Common,
    csv: Option<&std::path::Path>,
) -> std::result::Result<(), Exit> {
    let methods = parse_methods(&cfg).map_err(|e| Exit::Config(e.to_string()))?;
    let eval = run_attack_eval(&cfg, &methods, None).map_err(runtime)?;
    println!("clean accuracy (mean): {:.4}", eval.clean_mean);
    println!("{:<14} robust accuracy", "method");
    for (m, a) in &eval.robust_mean {
        println!("{m:<14} {a:.4}");
    }
    if let Some(path) = csv {
        let mut table = CsvTable::new(&["method", "clean_acc", "robust_acc"]);
        for (m, a) in &eval.robust_mean {
            table.push_row(vec![
                m.clone(),
                CsvTable::cell_f64(eval.clean_mean),
                CsvTable::cell_f64(*a),
            ]);
        }
        table.write(path).map_err(runtime)?;
    }
    let (results, aggregates) = attack_eval_json(&eval);
    let work = work_counters(&cfg, methods.len());
    finish("attack", &cfg, results, aggregates, work, common)
}

fn cmd_ablate_t(
    cfg: BenchConfig,
    common: &Common,
    t_values: &[usize],
    csv: &std::path::Path,
) -> std::result::Result<(), Exit> {
    let rows = ablate_t(&cfg, t_values).map_err(runtime)?;
    let mut table = CsvTable::new(&["t_star", "clean_acc", "robust_acc"]);
    println!("{:<8} {:<10} {:<10}", "t_star", "clean", "robust");
    for r in &rows {
        println!("{:<8} {:<10.4} {:<10.4}", r.t_star, r.clean_acc, r.robust_acc);
        table.push_row(vec![
            r.t_star.to_string(),
            CsvTable::cell_f64(r.clean_acc),
            CsvTable::cell_f64(r.robust_acc),
        ]);
    }
    table.write(csv).map_err(runtime)?;
    let results: Vec<Value> = rows
        .iter()
        .map(|r| json!({"t_star": r.t_star, "clean_acc": r.clean_acc, "robust_acc": r.robust_acc}))
        .collect();
    let aggregates = json!({
        "best_robust_t_star": rows
            .iter()
            .max_by(|a, b| a.robust_acc.total_cmp(&b.robust_acc))
            .map(|r| r.t_star),
    });
    finish(
        "ablate-t",
        &cfg,
        Value::Array(results),
        aggregates,
        work_counters(&cfg, t_values.len()),
        common,
    )
}

fn cmd_ablate_steps(
    cfg: BenchConfig,
    common: &Common,
    csv: &std::path::Path,
) -> std::result::Result<(), Exit> {
    let rows = ablate_steps(&cfg).map_err(runtime)?;
    let mut table = CsvTable::new(&["strategy", "clean_acc", "robust_acc", "drop"]);
    println!("{:<15} {:<10} {:<10} {:<10}", "strategy", "clean", "robust", "drop");
    for r in &rows {
        println!(
            "{:<15} {:<10.4} {:<10.4} {:<10.4}",
            r.strategy, r.clean_acc, r.robust_acc, r.drop
        );
        table.push_row(vec![
            r.strategy.clone(),
            CsvTable::cell_f64(r.clean_acc),
            CsvTable::cell_f64(r.robust_acc),
            CsvTable::cell_f64(r.drop),
        ]);
    }
    table.write(csv).map_err(runtime)?;
    let results: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "strategy": r.strategy,
                "clean_acc": r.clean_acc,
                "robust_acc": r.robust_acc,
                "drop": r.drop,
            })
        })
        .collect();
    finish(
        "ablate-steps",
        &cfg,
        Value::Array(results),
        json!({}),
        work_counters(&cfg, 3),
        common,
    )
}

fn cmd_ablate_lambda(
    cfg: BenchConfig,
    common: &Common,
    lambdas: &[f64],
    csv: &std::path::Path,
) -> std::result::Result<(), Exit> {
    let rows = ablate_lambda(&cfg, lambdas).map_err(runtime)?;
    let mut table = CsvTable::new(&["lambda", "clean_acc", "robust_acc"]);
    println!("{:<8} {:<10} {:<10}", "lambda", "clean", "robust");
    for r in &rows {
        println!("{:<8} {:<10.4} {:<10.4}", r.lambda, r.clean_acc, r.robust_acc);
        table.push_row(vec![
            CsvTable::cell_f64(r.lambda),
            CsvTable::cell_f64(r.clean_acc),
            CsvTable::cell_f64(r.robust_acc),
        ]);
    }
    table.write(csv).map_err(runtime)?;
    let results: Vec<Value> = rows
        .iter()
        .map(|r| json!({"lambda": r.lambda, "clean_acc": r.clean_acc, "robust_acc": r.robust_acc}))
        .collect();
    let aggregates = json!({
        "best_lambda": rows
            .iter()
            .min_by(|a, b| a.robust_acc.total_cmp(&b.robust_acc))
            .map(|r| r.lambda),
    });
    finish(
        "ablate-lambda",
        &cfg,
        Value::Array(results),
        aggregates,
        work_counters(&cfg, lambdas.len()),
        common,
    )
}

fn cmd_memcheck(
    cfg: BenchConfig,
    common: &Common,
    t_values: &[usize],
    budget: usize,
    csv: &std::path::Path,
) -> std::result::Result<(), Exit> {
    let rows = memcheck(&cfg, t_values, budget).map_err(runtime)?;
    let mut table = CsvTable::new(&[
        "t",
        "graph_peak_bytes",
        "sample_bytes",
        "fullgraph_peak_bytes",
    ]);
    println!(
        "{:<8} {:<18} {:<14} {:<20}",
        "t", "graph_peak_bytes", "sample_bytes", "fullgraph_peak_bytes"
    );
    for r in &rows {
        let full = r
            .fullgraph_peak_bytes
            .map(|b| b.to_string())
            .unwrap_or_else(|| "skipped".into());
        println!(
            "{:<8} {:<18} {:<14} {:<20}",
            r.t, r.graph_peak_bytes, r.sample_bytes, full
        );
        table.push_row(vec![
            r.t.to_string(),
            r.graph_peak_bytes.to_string(),
            r.sample_bytes.to_string(),
            full,
        ]);
    }
    table.write(csv).map_err(runtime)?;
    let results: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "t": r.t,
                "graph_peak_bytes": r.graph_peak_bytes,
                "sample_bytes": r.sample_bytes,
                "fullgraph_peak_bytes": r.fullgraph_peak_bytes,
            })
        })
        .collect();
    finish(
        "memcheck",
        &cfg,
        Value::Array(results),
        json!({}),
        json!({"t_values": t_values}),
        common,
    )
}

fn cmd_theory_check(cfg: BenchConfig, common: &Common) -> std::result::Result<(), Exit> {
    let report = theory_check(&cfg).map_err(runtime)?;
    println!(
        "pilot: {} grid points, {} violations",
        report.entries.len(),
        report.violations
    );
    let results = pilot_report_json(&report);
    let aggregates = json!({"violations": report.violations});
    finish("theory-check", &cfg, results, aggregates, json!({}), common)
}
