//! Runs the whole reference experiment (data, base, four methods, report)
//! into a directory and prints the summary.
//!
//! cargo run --release --example full_pipeline -- [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use filora::pipeline::{write_reference_configs, Experiment, Overrides};

fn main() -> filora::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("filora-full-pipeline"));
    let manifest = write_reference_configs(&out)?;
    let exp = Experiment::load(
        &manifest,
        &Overrides {
            out: Some(out.join("bundle")),
            ..Overrides::default()
        },
    )?;
    let start = Instant::now();
    let (outcomes, _) = exp.run_all()?;
    for o in &outcomes {
        let first = o.report.trace.first().map_or(f64::NAN, |e| e.mean_loss);
        let last = o.report.trace.last().map_or(f64::NAN, |e| e.mean_loss);
        println!("{:<12} loss {first:.4} -> {last:.4}  {:.1}s", o.method.name(), o.seconds);
    }
    println!("total {:.1}s\n", start.elapsed().as_secs_f64());
    print!("{}", std::fs::read_to_string(exp.path("summary.txt")).expect("summary written"));
    Ok(())
}
