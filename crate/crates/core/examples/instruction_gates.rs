//! Instruction templates, the regularizer signs per condition, and how the
//! gate encoder's outputs move apart once it is trained.
//!
//! cargo run --release --example instruction_gates

use filora::instructions::{Condition, Instruction, TemplateBank, TemplateSplit};
use filora::model::{pretrain_base, Network};
use filora::pipeline::reference_manifest;
use filora::synthdata::{generate_dataset, DatasetSpec};
use filora::training::{train, TrainingConfig};

fn show_gates(net: &Network, renders: &[(Condition, Vec<Instruction>)]) -> filora::Result<()> {
    let enc = net.encoder.as_ref().expect("filora has an encoder");
    let header: Vec<String> = enc.layout.iter().map(|g| format!("{:>16}", g.as_str())).collect();
    println!("{:<16}{}", "", header.join(""));
    for (c, list) in renders {
        let rows = enc.gate_rows(list)?;
        let means: Vec<String> = (0..enc.layout.len())
            .map(|j| format!("{:>16.3}", rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64))
            .collect();
        println!("{:<16}{}", c.name(), means.join(""));
    }
    Ok(())
}

fn main() -> filora::Result<()> {
    let bank = TemplateBank::builtin();
    println!("vocabulary: {} tokens", bank.vocabulary().len());
    for c in Condition::ALL {
        let train = bank.templates(c, TemplateSplit::Train).len();
        let held = bank.templates(c, TemplateSplit::HeldOut).len();
        let sample = bank.render(c, TemplateSplit::HeldOut, 1)?;
        println!("{:<15} {train:>3} train / {held:>2} held-out, e.g. \"{}\"", c.name(), sample.text());
    }

    let spec = DatasetSpec::reference();
    let data = generate_dataset(&spec, &bank)?;
    let manifest = reference_manifest();
    let base = pretrain_base(&data, manifest.model, &manifest.pretrain)?;
    let mut net = base.build_filora(bank.vocabulary(), manifest.seed)?;

    println!("\nalpha by condition (layout order):");
    for c in Condition::ALL {
        println!("  {:<15} {:?}", c.name(), net.alpha(c));
    }

    let renders: Vec<(Condition, Vec<Instruction>)> = Condition::ALL
        .iter()
        .map(|&c| {
            let list = (0..20).map(|i| bank.render(c, TemplateSplit::HeldOut, i)).collect::<filora::Result<_>>()?;
            Ok((c, list))
        })
        .collect::<filora::Result<_>>()?;
    println!("\nmean held-out gates before training:");
    show_gates(&net, &renders)?;

    let cfg = TrainingConfig::reference();
    train(&mut net, &data.train, &cfg)?;
    println!("\nafter {} epochs:", cfg.epochs);
    show_gates(&net, &renders)?;
    Ok(())
}
