// scratch: inspect loss component magnitudes along attack iterations
use purbench_core::attack::*;
use purbench_core::rng::StreamRng;
use purbench_harness::config::BenchConfig;
use purbench_harness::experiments::{build_bench, eval_points};

fn main() {
    let t_star: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let mut config = BenchConfig::default();
    config.purifier.t_star = t_star;
    config.attack.eps = 0.10;
    let bench = build_bench(&config, 0).unwrap();
    let cfg = config.attack_config().unwrap();
    let points = eval_points(&bench, 6);

    for (i, (x, y)) in points.iter().enumerate() {
        let rng = StreamRng::new(1000 + i as u64, "probe");
        // Loss pieces at the clean point.
        let mut c0 = cfg.clone(); c0.lambda = 0.0;
        let g_ce = eot_gradient(x, *y, &bench.defense, &c0, &rng).unwrap();
        let g_full = eot_gradient(x, *y, &bench.defense, &cfg, &rng).unwrap();
        let (l_full, _) = combined_objective(x, *y, &bench.defense, &cfg, &rng.derive("draw=0")).unwrap();
        let (l_ce, _) = combined_objective(x, *y, &bench.defense, &c0, &rng.derive("draw=0")).unwrap();
        let g_dev = g_full.sub(&g_ce).unwrap();
        println!(
            "pt{i} y={y}: L_ce={l_ce:.3} L_dev={:.3} |g_ce|={:.3} |g_dev|={:.3} cos(ce,dev)={:.2}",
            l_full - l_ce,
            g_ce.l2_norm(),
            g_dev.l2_norm(),
            g_ce.dot(&g_dev).unwrap() / (g_ce.l2_norm() * g_dev.l2_norm() + 1e-12),
        );
    }
}
