//! The reliance instruments on a trained FiLoRA model: gate modulation range
//! between focus and ignore phrasings, reliance sensitivity per condition
//! (finite-difference and analytic), and the core/spurious RS ratio.
//!
//! cargo run --release --example reliance_metrics

use filora::instructions::Condition;
use filora::metrics::{core_spurious_ratio, gmr, jsd, mutual_information, reliance_sensitivity};
use filora::model::Method;
use filora::pipeline::{reference_manifest, Experiment, Overrides};
use filora::synthdata::DatasetSpec;
use filora::training::TrainingConfig;

fn main() -> filora::Result<()> {
    // The estimators on inputs with known answers first.
    let fair: Vec<usize> = (0..1000).map(|i| i % 2).collect();
    println!("MI(X, X) for a fair bit = {:.12} (ln 2 = {:.12})", mutual_information(&fair, &fair)?, 2f64.ln());
    println!("JSD([1,0], [0,1]) = {:.12}", jsd(&[1.0, 0.0], &[0.0, 1.0])?);

    let dir = tempfile::tempdir().map_err(|e| filora::Error::io(std::env::temp_dir(), e))?;
    let manifest = reference_manifest();
    let delta = manifest.rs_delta;
    let exp = Experiment::from_parts(
        manifest,
        DatasetSpec::reference(),
        TrainingConfig::reference(),
        &Overrides {
            out: Some(dir.path().to_path_buf()),
            methods: Some(vec!["filora".into()]),
            ..Overrides::default()
        },
    )?;
    let data = exp.gen_data()?;
    let base = exp.pretrain()?;
    exp.train_method(&data, &base, Method::Filora)?;
    let net = exp.load_method(Method::Filora)?;
    let (layout, roles) = (net.gate_layout(), net.gate_roles());

    let modulation = gmr(&net, &exp.renders(Condition::FocusCore, 100)?, &exp.renders(Condition::IgnoreCore, 100)?)?;
    println!("\nGMR (FocusCore vs IgnoreCore, held-out phrasings):");
    for g in &layout {
        println!("  {:<16} {:.4}", g.as_str(), modulation[g]);
    }

    let eval = &data.eval[..300];
    println!("\nRS with delta {delta}, {} eval samples:", eval.len());
    for c in Condition::ALL {
        let rs = reliance_sensitivity(&net, eval, &exp.renders(c, 100)?, delta)?;
        let row: Vec<String> = layout
            .iter()
            .map(|g| format!("{}={:.4}/{:.4}", g.as_str(), rs.fd[g], rs.analytic[g]))
            .collect();
        println!(
            "  {:<15} core/spurious {:.3}   fd/analytic {}",
            c.name(),
            core_spurious_ratio(&rs.fd, &layout, &roles)?,
            row.join(" ")
        );
    }
    Ok(())
}
