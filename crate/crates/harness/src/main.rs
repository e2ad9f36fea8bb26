fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(purbench_harness::run_cli(&args));
}
