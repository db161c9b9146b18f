//! Pretrains the base network on the reference benchmark, then trains FiLoRA
//! on top of it and shows what changed: the loss trace, mean gates per
//! condition on held-out phrasings, and the base weights (which must not).
//!
//! cargo run --release --example train_filora

use filora::instructions::Condition;
use filora::model::Method;
use filora::pipeline::{reference_manifest, Experiment, Overrides};
use filora::synthdata::DatasetSpec;
use filora::training::TrainingConfig;

fn main() -> filora::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| filora::Error::io(std::env::temp_dir(), e))?;
    let exp = Experiment::from_parts(
        reference_manifest(),
        DatasetSpec::reference(),
        TrainingConfig::reference(),
        &Overrides {
            out: Some(dir.path().to_path_buf()),
            ..Overrides::default()
        },
    )?;
    let data = exp.gen_data()?;
    let base = exp.pretrain()?;
    let inputs: Vec<_> = data.eval.iter().map(|s| (&s.features, &s.instruction)).collect();
    let labels: Vec<usize> = data.eval.iter().map(|s| s.y).collect();
    println!("base eval accuracy {:.4}", base.accuracy(&inputs, &labels)?);

    let outcome = exp.train_method(&data, &base, Method::Filora)?;
    for e in &outcome.report.trace {
        println!(
            "epoch {:>2}  loss {:.4}  cls {:.4}  gate {:+.4}",
            e.epoch, e.mean_loss, e.mean_cls, e.mean_gate
        );
    }
    println!(
        "trained in {:.1}s, epoch-1 |lambda L_gate| / L_cls = {:.4}",
        outcome.seconds,
        outcome.report.lambda_dominance()
    );

    let net = exp.load_method(Method::Filora)?;
    println!(
        "{} trainable parameters, base checksum unchanged: {}",
        net.trainable_param_count(),
        net.base_checksum() == base.base_checksum()
    );
    println!("filora eval accuracy {:.4}", net.accuracy(&inputs, &labels)?);

    let enc = net.encoder.as_ref().expect("filora has an encoder");
    let names: Vec<String> = enc.layout.iter().map(|g| format!("{:>16}", g.as_str())).collect();
    println!("\n{:<16}{}", "held-out gates", names.join(""));
    for c in Condition::ALL {
        let rows = enc.gate_rows(&exp.renders(c, 50)?)?;
        let means: Vec<String> = (0..enc.layout.len())
            .map(|j| format!("{:>16.3}", rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64))
            .collect();
        println!("{:<16}{}", c.name(), means.join(""));
    }
    Ok(())
}
