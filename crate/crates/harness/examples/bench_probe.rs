// scratch: probe benchmark attack ordering
use purbench_core::attack::{clean_accuracy, robust_accuracy, AttackMethod};
use purbench_core::rng::StreamRng;
use purbench_harness::config::BenchConfig;
use purbench_harness::experiments::{build_bench, eval_points};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let t_star: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let eps: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.08);
    let n_points: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut config = BenchConfig::default();
    config.purifier.t_star = t_star;
    config.attack.eps = eps;
    config.eval.n_points = n_points;
    config.seed = seed;

    let t0 = std::time::Instant::now();
    let bench = build_bench(&config, 0).unwrap();
    eprintln!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    let cfg = config.attack_config().unwrap();
    let points = eval_points(&bench, n_points);
    let eval_rng = StreamRng::new(seed, "evaluation");
    let clean = clean_accuracy(&points, &bench.defense, 5, &eval_rng).unwrap();
    println!("t_star={t_star} eps={eps} n={n_points} seed={seed}  clean={clean:.3}");
    for m in [AttackMethod::DiffAttack, AttackMethod::LambdaZero, AttackMethod::Bpda, AttackMethod::Spsa] {
        let t1 = std::time::Instant::now();
        let acc = robust_accuracy(&points, m, &bench.defense, &cfg, 5, &eval_rng.derive(m.name())).unwrap();
        println!("  {:<12} robust={acc:.3}   [{:.1}s]", m.name(), t1.elapsed().as_secs_f64());
    }
}
