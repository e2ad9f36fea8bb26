// scratch: probe clean accuracy vs training strength
use purbench_core::attack::clean_accuracy;
use purbench_core::rng::StreamRng;
use purbench_harness::config::BenchConfig;
use purbench_harness::experiments::{build_bench, eval_points};

fn main() {
    for (steps, lr, hidden, batch) in [
        (2000usize, 1e-3, vec![64usize, 64], 64usize),
        (4000, 2e-3, vec![64, 64], 64),
        (4000, 2e-3, vec![64, 64, 64], 128),
        (8000, 2e-3, vec![64, 64, 64], 128),
    ] {
        let mut config = BenchConfig::default();
        config.purifier.t_star = 15;
        config.model.hidden = hidden.clone();
        config.train.diffusion_steps = steps;
        config.train.lr = lr;
        config.train.batch = batch;
        config.eval.n_points = 128;
        let t0 = std::time::Instant::now();
        let bench = build_bench(&config, 0).unwrap();
        let train_time = t0.elapsed().as_secs_f64();
        let points = eval_points(&bench, 128);
        let eval_rng = StreamRng::new(0, "evaluation");
        let clean = clean_accuracy(&points, &bench.defense, 5, &eval_rng).unwrap();
        println!("steps={steps} lr={lr} hidden={hidden:?} batch={batch}: clean={clean:.3} [train {train_time:.1}s]");
    }
}
