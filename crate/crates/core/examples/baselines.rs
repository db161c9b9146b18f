//! FiLoRA against full fine-tuning, ungated LoRA and a prompt-only baseline:
//! parameter budgets, accuracy, how often predictions survive removal of the
//! spurious groups, and accuracy as those groups are suppressed.
//!
//! cargo run --release --example baselines

use filora::metrics::{agreement, curve_from_predictions, suppression_predictions};
use filora::instructions::Condition;
use filora::model::Method;
use filora::pipeline::{reference_manifest, Experiment, Overrides};
use filora::synthdata::{DatasetSpec, FeatureRole};
use filora::training::TrainingConfig;

fn main() -> filora::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| filora::Error::io(std::env::temp_dir(), e))?;
    let manifest = reference_manifest();
    let strengths = manifest.strengths.clone();
    let exp = Experiment::from_parts(
        manifest,
        DatasetSpec::reference(),
        TrainingConfig::reference(),
        &Overrides {
            out: Some(dir.path().to_path_buf()),
            ..Overrides::default()
        },
    )?;
    let data = exp.gen_data()?;
    let base = exp.pretrain()?;
    let neutral = exp.renders(Condition::Neutral, 100)?;
    let spurious = data.spec.group_ids(FeatureRole::Spurious);
    // 0 and 1 bracket the curve so stability can be read off the same predictions.
    let mut grid = vec![0.0];
    grid.extend(strengths.iter().copied().filter(|s| *s > 0.0 && *s < 1.0));
    grid.push(1.0);

    println!(
        "{:<12} {:>9} {:>9} {:>10} {:>7}   accuracy at strengths {grid:?}",
        "method", "trainable", "adapters", "stability", "secs"
    );
    for m in Method::TRAINED {
        let o = exp.train_method(&data, &base, m)?;
        let net = exp.load_method(m)?;
        let preds = suppression_predictions(&net, &data.eval, &neutral, &spurious, &grid)?;
        let curve = curve_from_predictions(&data.eval, &grid, &preds);
        let accs: Vec<String> = curve.iter().map(|(_, a)| format!("{a:.3}")).collect();
        println!(
            "{:<12} {:>9} {:>9} {:>10.4} {:>7.1}   {}",
            m.name(),
            net.trainable_param_count(),
            net.adapter_param_count(),
            agreement(&preds[0], &preds[grid.len() - 1]),
            o.seconds,
            accs.join(" ")
        );
    }
    Ok(())
}
