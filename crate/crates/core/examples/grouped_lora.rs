//! A single grouped LoRA layer: per-group updates, gating, and the two
//! reductions (all gates closed gives the base map, one open group gives
//! plain LoRA).
//!
//! cargo run --example grouped_lora

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use filora::adapters::{GateVector, GroupId, GroupedLoraLinear};
use filora::tensor::Tensor;

fn main() -> filora::Result<()> {
    let groups = [GroupId::from("core"), GroupId::from("spurious")];
    let mut layer = GroupedLoraLinear::init("demo", 8, 6, &groups, 2, 2.0, 11)?;
    // B starts at zero; give it something so the groups differ.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for g in layer.groups_mut() {
        let shape = g.b.value.shape().to_vec();
        g.b.value = Tensor::randn(&shape, 0.5, &mut rng);
    }
    println!(
        "8 -> 6 layer, {} groups at rank 2, scale {}, {} adapter parameters",
        groups.len(),
        layer.scale(),
        layer.adapter_param_count()
    );

    let x = Tensor::randn(&[8], 1.0, &mut rng);
    let base = affine(&layer.base.weight.value, &layer.base.bias.value, &x)?;
    for (label, core, spurious) in [
        ("closed", 0.0, 0.0),
        ("core only", 1.0, 0.0),
        ("spurious only", 0.0, 1.0),
        ("half/half", 0.5, 0.5),
        ("open", 1.0, 1.0),
    ] {
        let gates = GateVector::new(vec![(groups[0].clone(), core), (groups[1].clone(), spurious)])?;
        let y = layer.forward_adapted(&x, &gates)?;
        // The merged weight gives the same map as the factored forward.
        let merged = affine(&layer.effective_weight(&gates)?, &layer.base.bias.value, &x)?;
        println!(
            "{label:<14} max|y - base| = {:.6}  merged mismatch {:.1e}",
            y.max_abs_diff(&base),
            y.max_abs_diff(&merged)
        );
    }

    for g in layer.groups() {
        let d = g.delta()?;
        println!("group {:<9} rank {}  |B A^T|_F = {:.4}", g.group.as_str(), g.rank(), d.norm_sq().sqrt());
    }
    Ok(())
}

fn affine(w: &Tensor, b: &Tensor, x: &Tensor) -> filora::Result<Tensor> {
    let col = x.clone().reshape(vec![x.len(), 1])?;
    w.matmul(&col)?.reshape(vec![w.rows()])?.add(b)
}
