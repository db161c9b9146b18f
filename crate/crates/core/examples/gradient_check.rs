//! Central finite differences against the tape: a few primitives, then the
//! complete FiLoRA objective (cross-entropy plus gate regularizer) with
//! respect to every trainable parameter of a small network.
//!
//! cargo run --release --example gradient_check

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use filora::gradcheck::{check_gradient, CheckOptions};
use filora::instructions::{EncoderConfig, TemplateBank};
use filora::model::{slots_for, Method, ModelConfig, Network};
use filora::synthdata::{generate_dataset, DatasetSpec};
use filora::tape::{Tape, TrainPolicy, Var};
use filora::tensor::Tensor;
use filora::training::{batch_loss, route};

fn primitive(name: &str, build: impl Fn(&mut Tape, Var) -> Var) -> filora::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let eval = |xs: &[f64]| -> filora::Result<(f64, Vec<f64>)> {
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::new(vec![3, 4], xs.to_vec())?);
        let y = build(&mut t, x);
        // Squaring keeps the reduction sensitive to every output entry.
        let sq = t.mul(y, y)?;
        let l = t.sum(sq);
        let f = t.value(l).data()[0];
        Ok((f, t.backward(l)?.param("x").expect("leaf has a gradient").into_data()))
    };
    let (_, analytic) = eval(x0.data())?;
    let r = check_gradient(|xs| eval(xs).map_or(f64::NAN, |v| v.0), x0.data(), &analytic, &CheckOptions::default())?;
    println!("{name:<12} max rel error {:.2e} over {} coordinates", r.max_rel_error, r.checked);
    Ok(())
}

fn main() -> filora::Result<()> {
    primitive("sigmoid", |t, x| t.sigmoid(x))?;
    primitive("gelu", |t, x| t.gelu(x))?;
    primitive("log_softmax", |t, x| t.log_softmax(x))?;

    let spec = DatasetSpec {
        size: 12,
        eval_size: 4,
        ..DatasetSpec::reference()
    };
    let bank = TemplateBank::builtin();
    let data = generate_dataset(&spec, &bank)?;
    let cfg = ModelConfig {
        group_hidden: 6,
        fusion_hidden: 8,
        rank: 2,
        lora_alpha: 4.0,
        encoder: EncoderConfig {
            embed_dim: 5,
            hidden_dim: 6,
        },
        prompt_dim: 4,
    };
    let base = Network::init_base(slots_for(&spec), spec.num_classes, cfg, 3)?;
    let mut net = base.build_filora(bank.vocabulary(), 4)?;
    // Fresh adapters have B = 0 and a zero-init projection; perturb every
    // trainable tensor so no gradient path is trivially zero.
    let policy = Method::Filora.policy();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in net.params_mut().into_iter().filter(|p| policy.trains(p.role)) {
        let shape = p.value.shape().to_vec();
        p.value = p.value.add(&Tensor::randn(&shape, 0.3, &mut rng))?;
    }
    let examples = route(&net, &data.train);
    let batch: Vec<_> = examples.iter().collect();
    let lambda = 0.05;

    let mut tape = Tape::new();
    let b = batch_loss(&net, &mut tape, &batch, lambda, policy)?;
    println!("\nloss {:.6} (cls {:.6}, gate {:+.6})", tape.value(b.loss).data()[0], b.cls, b.gate);
    let grads = tape.backward(b.loss)?;

    let names: Vec<String> = net
        .params()
        .into_iter()
        .filter(|p| policy.trains(p.role))
        .map(|p| p.name.clone())
        .collect();
    let mut worst: f64 = 0.0;
    for name in &names {
        let analytic = grads.param(name).expect("trainable parameter on tape").into_data();
        let point = net.params().into_iter().find(|p| &p.name == name).expect("named").value.clone();
        let objective = |xs: &[f64]| {
            let mut probe = net.clone();
            let p = probe.params_mut().into_iter().find(|p| &p.name == name).expect("named");
            p.value.data_mut().copy_from_slice(xs);
            let mut t = Tape::new();
            let l = batch_loss(&probe, &mut t, &batch, lambda, TrainPolicy::FROZEN).expect("loss");
            t.value(l.loss).data()[0]
        };
        let opts = CheckOptions {
            sample: Some(12),
            ..CheckOptions::default()
        };
        let r = check_gradient(objective, point.data(), &analytic, &opts)?;
        worst = worst.max(r.max_rel_error);
        println!("{name:<44} {:.2e}", r.max_rel_error);
    }
    println!("worst relative error {worst:.2e} (threshold 1e-4)");
    Ok(())
}
