//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use filora::gradcheck::{check_gradient, CheckOptions};
use filora::instructions::{EncoderConfig, Instruction, TemplateBank};
use filora::model::{FeatureSlot, Method, ModelConfig, Network};
use filora::synthdata::{generate_dataset, Dataset, DatasetSpec, FeatureMap};
use filora::tape::{Tape, TrainPolicy};
use filora::tensor::Tensor;
use filora::training::{batch_loss, route, RoutedExample};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        group_hidden: 6,
        fusion_hidden: 8,
        rank: 2,
        lora_alpha: 4.0,
        encoder: EncoderConfig {
            embed_dim: 5,
            hidden_dim: 6,
        },
        prompt_dim: 4,
    }
}

/// Reference layout with narrow groups and few samples.
pub fn tiny_dataset(seed: u64, size: usize) -> Dataset {
    let mut spec = DatasetSpec {
        size,
        eval_size: 4,
        seed,
        ..DatasetSpec::reference()
    };
    for g in &mut spec.groups {
        g.dim = 5;
    }
    generate_dataset(&spec, &TemplateBank::builtin()).expect("valid tiny spec")
}

/// Adds `N(0, std²)` noise to every parameter `policy` trains, so that
/// zero-initialized factors and projections carry gradient signal.
pub fn perturb(net: &mut Network, policy: TrainPolicy, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut().into_iter().filter(|p| policy.trains(p.role)) {
        let shape = p.value.shape().to_vec();
        p.value = p.value.add(&Tensor::randn(&shape, std, &mut rng)).expect("same shape");
    }
}

pub fn tiny_method(method: Method, seed: u64) -> (Network, Dataset) {
    let data = tiny_dataset(seed, 10);
    let base = Network::init_base(
        filora::model::slots_for(&data.spec),
        data.spec.num_classes,
        tiny_config(),
        seed,
    )
    .expect("base");
    let mut net = base
        .build(method, TemplateBank::builtin().vocabulary(), seed + 1)
        .expect("variant");
    perturb(&mut net, method.policy(), 0.3, seed + 2);
    (net, data)
}

/// Worst relative error of the full objective's gradient over every
/// coordinate of every trainable parameter.
pub fn full_loss_gradcheck(net: &Network, examples: &[RoutedExample], lambda: f64) -> f64 {
    let policy = net.method.policy();
    let batch: Vec<&RoutedExample> = examples.iter().collect();
    let mut tape = Tape::new();
    let b = batch_loss(net, &mut tape, &batch, lambda, policy).expect("loss");
    let grads = tape.backward(b.loss).expect("backward");
    let mut worst: f64 = 0.0;
    let trainable: Vec<(String, Tensor)> = net
        .params()
        .into_iter()
        .filter(|p| policy.trains(p.role))
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    assert!(!trainable.is_empty());
    for (name, value) in trainable {
        let analytic = grads.param(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let mut probe = net.clone();
        let objective = |xs: &[f64]| {
            let p = probe
                .params_mut()
                .into_iter()
                .find(|p| p.name == name)
                .expect("named parameter");
            p.value.data_mut().copy_from_slice(xs);
            let mut t = Tape::new();
            let l = batch_loss(&probe, &mut t, &batch, lambda, TrainPolicy::FROZEN).expect("loss");
            t.value(l.loss).data()[0]
        };
        let r = check_gradient(objective, value.data(), analytic.data(), &CheckOptions::default()).expect("check");
        worst = worst.max(r.max_rel_error);
    }
    worst
}

pub fn routed(net: &Network, data: &Dataset) -> Vec<RoutedExample> {
    route(net, &data.train)
}

pub fn random_features(slots: &[FeatureSlot], rng: &mut ChaCha8Rng) -> FeatureMap {
    slots
        .iter()
        .map(|s| (s.id.clone(), Tensor::randn(&[s.dim], 1.0, rng)))
        .collect()
}

pub fn any_instruction(seed: u64) -> Instruction {
    use filora::instructions::{Condition, TemplateSplit};
    let c = Condition::ALL[(seed % 4) as usize];
    TemplateBank::builtin()
        .render(c, TemplateSplit::Train, seed)
        .expect("render")
}
