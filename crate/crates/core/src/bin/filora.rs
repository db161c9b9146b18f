use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use filora::model::Method;
use filora::pipeline::{intervene, Experiment, Overrides};
use filora::synthdata::{generate_dataset, DatasetSpec};
use filora::instructions::TemplateBank;
use filora::Error;

#[derive(Parser)]
#[command(name = "filora", version, about = "Grouped LoRA with instruction-conditioned gates: experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory, overriding the manifest's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of filora,full_ft,lora,prompt_only.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated ascending suppression strengths in [0, 1].
    #[arg(long, value_delimiter = ',')]
    strengths: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset, from a manifest or directly from a spec file.
    GenData {
        #[arg(long, conflicts_with = "spec")]
        manifest: Option<PathBuf>,
        /// Dataset spec (TOML); writes to --out.
        #[arg(long, requires = "out")]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the frozen base network.
    Pretrain(Common),
    /// Train every requested method from the base checkpoint.
    Train(Common),
    /// Evaluate checkpoints and write the report bundle.
    Report(Common),
    /// Suppress the spurious groups of one evaluation sample and compare predictions.
    Intervene {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "filora")]
        method: String,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 1.0)]
        strength: f64,
        /// Instruction text; a held-out neutral render when omitted.
        #[arg(long)]
        instruction: Option<String>,
    },
}

fn experiment(c: &Common) -> filora::Result<Experiment> {
    Experiment::load(
        &c.manifest,
        &Overrides {
            out: c.out.clone(),
            seed: c.seed,
            methods: c.methods.clone(),
            strengths: c.strengths.clone(),
        },
    )
}

fn run(cli: Cli) -> filora::Result<()> {
    match cli.command {
        Command::GenData {
            manifest,
            spec,
            out,
            seed,
        } => {
            let data = match (manifest, spec) {
                (Some(m), _) => {
                    let exp = Experiment::load(
                        &m,
                        &Overrides {
                            out,
                            seed,
                            ..Overrides::default()
                        },
                    )?;
                    exp.gen_data()?
                }
                (None, Some(s)) => {
                    let mut spec = DatasetSpec::load(&s)?;
                    if let Some(seed) = seed {
                        spec.seed = seed;
                    }
                    let data = generate_dataset(&spec, &TemplateBank::builtin())?;
                    data.save(&out.expect("clap enforces --out"))?;
                    data
                }
                (None, None) => return Err(Error::config("gen-data needs --manifest or --spec")),
            };
            println!(
                "n={} eval={} K={} rho={} y_spurious=y rate={:.4}",
                data.train.len(),
                data.eval.len(),
                data.spec.num_classes,
                data.spec.rho,
                data.agreement_rate()
            );
        }
        Command::Pretrain(c) => {
            let exp = experiment(&c)?;
            let start = Instant::now();
            exp.pretrain()?;
            println!("base pretrained in {:.1}s", start.elapsed().as_secs_f64());
        }
        Command::Train(c) => {
            let exp = experiment(&c)?;
            for o in exp.train_all()? {
                let last = o.report.trace.last().map_or(f64::NAN, |e| e.mean_loss);
                println!("{:<12} final loss {last:.4}  {:.1}s", o.method.name(), o.seconds);
            }
        }
        Command::Report(c) => {
            let exp = experiment(&c)?;
            exp.report()?;
            let summary = std::fs::read_to_string(exp.path("summary.txt")).map_err(|e| Error::io(exp.path("summary.txt"), e))?;
            print!("{summary}");
        }
        Command::Intervene {
            common,
            method,
            sample,
            strength,
            instruction,
        } => {
            let exp = experiment(&common)?;
            let method: Method = method.parse()?;
            let r = intervene(&exp, method, sample, strength, instruction.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
