//! Writes a small synthetic dataset and OOD database for trying the CLI.
//!
//! cargo run --example make_fixture -- <dir> [frames] [seed]

use std::path::PathBuf;
use std::process::ExitCode;

use ood_core::detector::DetectorConfig;
use ood_core::synth::{write_fixture, SynthConfig};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(dir) = args.first().map(PathBuf::from) else {
        eprintln!("usage: make_fixture <dir> [frames] [seed]");
        return ExitCode::from(1);
    };
    let parse = |i: usize, default: u64| args.get(i).map_or(Ok(default), |s| s.parse::<u64>());
    let (Ok(frames), Ok(seed)) = (parse(1, 50), parse(2, 0)) else {
        eprintln!("frames and seed must be non-negative integers");
        return ExitCode::from(1);
    };
    let cfg = SynthConfig {
        frames: frames as usize,
        seed,
        ..Default::default()
    };
    match write_fixture(&cfg, &DetectorConfig::default(), &dir) {
        Ok((manifest, db)) => {
            println!("dataset  {}", manifest.display());
            println!("ood db   {}", db.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
