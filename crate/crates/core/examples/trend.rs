//! Run the desk-scale FOMAML vs joint comparison for one seed.
//!
//! Usage: `trend <seed> <work-dir> [spec.json]`

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use metasep::evalcli::trend::{run_trend, TrendSpec};
use metasep::par::Execution;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args[1].parse().expect("seed");
    let dir = std::path::PathBuf::from(&args[2]);
    let spec: TrendSpec = match args.get(3) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).expect("spec file")).expect("spec json"),
        None => TrendSpec::default(),
    };
    std::fs::create_dir_all(&dir).expect("work dir");
    let run = run_trend(&spec, seed, &dir, Execution::Parallel).expect("trend run");
    println!("{}", serde_json::to_string(&run).unwrap());
}
