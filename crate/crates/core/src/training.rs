//! Supervision routing, the gated objective, and the optimizer loop.
//!
//! Samples are routed once into [`RoutedExample`]s that hold only what the
//! optimizer may see: features, instruction tokens, the target label and the
//! per-gate alpha. Training never touches the hidden condition afterwards.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{GateVector, GroupId};
use crate::error::{Error, Result};
use crate::instructions::{Condition, Instruction};
use crate::model::{GateSource, Method, Network};
use crate::synthdata::{toml_error, FeatureMap, Sample};
use crate::tape::{Role, Tape, TrainPolicy};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// SGD with decoupled weight decay.
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate_adapters: f64,
    pub learning_rate_encoder: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate_adapters: 2e-4,
            learning_rate_encoder: 1e-4,
            weight_decay: 1e-2,
            grad_clip_norm: 1.0,
            batch_size: 16,
            epochs: 10,
            lambda: 0.01,
            seed: 0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainingConfig {
    /// Plain-SGD settings for the reference benchmark. Weight decay is off:
    /// at these rates the decoupled decay term erases the encoder weights and
    /// pins every gate at 0.5.
    pub fn reference() -> Self {
        Self {
            learning_rate_adapters: 0.3,
            learning_rate_encoder: 2.0,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 36,
            lambda: 0.03,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("learning_rate_adapters", self.learning_rate_adapters),
            ("learning_rate_encoder", self.learning_rate_encoder),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config_key(key, format!("must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config_key("weight_decay", "must be non-negative"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config_key("lambda", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config_key("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config_key("epochs", "must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("training config serializes")
    }

    fn rate(&self, role: Role) -> f64 {
        match role {
            Role::Base | Role::Adapter => self.learning_rate_adapters,
            Role::Encoder | Role::InstructionEmbedding => self.learning_rate_encoder,
        }
    }
}

/// Core label for every condition except `IgnoreCore`, which trains on the proxy.
pub fn route_target(sample: &Sample) -> usize {
    if sample.condition.uses_proxy_target() {
        sample.y_spurious
    } else {
        sample.y
    }
}

/// `Σ_g alpha[g] · gates[g]`.
pub fn gate_regularizer(gates: &GateVector, alpha: &BTreeMap<GroupId, f64>) -> Result<f64> {
    gates
        .iter()
        .map(|(g, v)| {
            alpha
                .get(g)
                .map(|a| a * v)
                .ok_or_else(|| Error::config_key("alpha", format!("no alpha for group `{g}`")))
        })
        .sum()
}

/// Everything training needs from a sample, with the condition already consumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutedExample {
    pub features: FeatureMap,
    pub instruction: Instruction,
    pub target: usize,
    /// One entry per gate in the model's layout order; empty for ungated models.
    pub alpha: Vec<f64>,
}

pub fn route(model: &Network, samples: &[Sample]) -> Vec<RoutedExample> {
    let alphas: BTreeMap<Condition, Vec<f64>> = Condition::ALL.iter().map(|&c| (c, model.alpha(c))).collect();
    samples
        .iter()
        .map(|s| RoutedExample {
            features: s.features.clone(),
            instruction: Instruction {
                tokens: s.instruction.tokens.clone(),
                source: None,
            },
            target: route_target(s),
            alpha: alphas[&s.condition].clone(),
        })
        .collect()
}

pub struct BatchLoss {
    pub loss: crate::tape::Var,
    pub cls: f64,
    /// Mean of `L_gate` over the batch (unweighted).
    pub gate: f64,
    /// Mean of `|λ · L_gate|` over the batch.
    pub abs_weighted_gate: f64,
}

/// Batch-mean of `CE(f(x, I), target) + λ Σ_g alpha_g g_g(I)`.
pub fn batch_loss(
    model: &Network,
    tape: &mut Tape,
    batch: &[&RoutedExample],
    lambda: f64,
    policy: TrainPolicy,
) -> Result<BatchLoss> {
    let inputs: Vec<(&FeatureMap, &Instruction)> = batch.iter().map(|e| (&e.features, &e.instruction)).collect();
    let targets: Vec<usize> = batch.iter().map(|e| e.target).collect();
    let input = model.batch_input(&inputs)?;
    let out = model.forward_tape(tape, &input, GateSource::Encoder, policy)?;
    let ce = tape.cross_entropy(out.logits, &targets)?;
    let cls_mean = tape.mean(ce);
    let cls = tape.value(cls_mean).data()[0];
    let m = batch.len();
    match out.gates {
        Some(g) => {
            let width = tape.value(g).cols();
            let mut alpha = Vec::with_capacity(m * width);
            for e in batch {
                if e.alpha.len() != width {
                    return Err(Error::config_key(
                        "alpha",
                        format!("{} alpha entries for {width} gates", e.alpha.len()),
                    ));
                }
                alpha.extend_from_slice(&e.alpha);
            }
            let per_sample: Vec<f64> = (0..m)
                .map(|i| {
                    let row = tape.value(g).row(i);
                    row.iter().zip(&alpha[i * width..(i + 1) * width]).map(|(v, a)| v * a).sum()
                })
                .collect();
            let a = tape.constant(Tensor::new(vec![m, width], alpha)?);
            let weighted = tape.mul(g, a)?;
            let total = tape.sum(weighted);
            let gate_term = tape.scale(total, lambda / m as f64);
            let loss = tape.add(cls_mean, gate_term)?;
            Ok(BatchLoss {
                loss,
                cls,
                gate: per_sample.iter().sum::<f64>() / m as f64,
                abs_weighted_gate: per_sample.iter().map(|v| (lambda * v).abs()).sum::<f64>() / m as f64,
            })
        }
        _ => Ok(BatchLoss {
            loss: cls_mean,
            cls,
            gate: 0.0,
            abs_weighted_gate: 0.0,
        }),
    }
}

/// Single-sample objective value.
pub fn loss(model: &Network, sample: &Sample, lambda: f64) -> Result<f64> {
    let routed = route(model, std::slice::from_ref(sample));
    let mut tape = Tape::new();
    let b = batch_loss(model, &mut tape, &[&routed[0]], lambda, TrainPolicy::FROZEN)?;
    Ok(tape.value(b.loss).data()[0])
}

/// Scales all gradients by `max_norm / norm` when the global ℓ2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// SGD with decoupled weight decay: `θ ← θ − lr·(g + wd·θ)`.
pub struct Sgd<F: Fn(Role) -> f64> {
    pub learning_rate: F,
    pub weight_decay: f64,
}

impl<F: Fn(Role) -> f64> Sgd<F> {
    pub fn apply(&self, net: &mut Network, grads: &BTreeMap<String, Tensor>, policy: TrainPolicy) {
        for p in net.params_mut() {
            if !policy.trains(p.role) {
                continue;
            }
            let Some(g) = grads.get(&p.name) else { continue };
            let lr = (self.learning_rate)(p.role);
            let decay = 1.0 - lr * self.weight_decay;
            for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w = *w * decay - lr * d;
            }
        }
    }
}

#[derive(Default)]
struct AdamState {
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn apply(&mut self, net: &mut Network, grads: &BTreeMap<String, Tensor>, cfg: &TrainingConfig, policy: TrainPolicy) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for p in net.params_mut() {
            if !policy.trains(p.role) {
                continue;
            }
            let Some(g) = grads.get(&p.name) else { continue };
            let lr = cfg.rate(p.role);
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let d = g.data()[i];
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * d;
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * d * d;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                *w = *w * (1.0 - lr * cfg.weight_decay) - lr * update;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_cls: f64,
    pub mean_gate: f64,
    pub mean_abs_weighted_gate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub trace: Vec<EpochStats>,
}

impl TrainReport {
    /// `mean |λ·L_gate| / mean L_cls` over the first epoch.
    pub fn lambda_dominance(&self) -> f64 {
        self.trace
            .first()
            .map_or(0.0, |e| e.mean_abs_weighted_gate / e.mean_cls.max(f64::MIN_POSITIVE))
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,mean_cls,mean_gate\n");
        for e in &self.trace {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.mean_loss, e.mean_cls, e.mean_gate));
        }
        out
    }
}

pub fn train(model: &mut Network, samples: &[Sample], cfg: &TrainingConfig) -> Result<TrainReport> {
    let routed = route(model, samples);
    train_routed(model, &routed, cfg)
}

/// The optimizer loop over pre-routed examples.
pub fn train_routed(model: &mut Network, examples: &[RoutedExample], cfg: &TrainingConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    let policy = model.method.policy();
    let sgd = Sgd {
        learning_rate: |r| cfg.rate(r),
        weight_decay: cfg.weight_decay,
    };
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut cls_sum, mut gate_sum, mut abs_sum, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&RoutedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut tape = Tape::new();
            let b = batch_loss(model, &mut tape, &batch, cfg.lambda, policy)?;
            let value = tape.value(b.loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "{} loss became {value} at epoch {epoch}, batch {bi}",
                    model.method
                )));
            }
            let m = batch.len() as f64;
            loss_sum += value * m;
            cls_sum += b.cls * m;
            gate_sum += b.gate * m;
            abs_sum += b.abs_weighted_gate * m;
            n += batch.len();
            let mut grads = tape.backward(b.loss)?.into_map();
            clip_gradients(&mut grads, cfg.grad_clip_norm);
            match cfg.optimizer {
                Optimizer::Sgd => sgd.apply(model, &grads, policy),
                Optimizer::AdamW => adam.apply(model, &grads, cfg, policy),
            }
        }
        let n = n as f64;
        trace.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n,
            mean_cls: cls_sum / n,
            mean_gate: gate_sum / n,
            mean_abs_weighted_gate: abs_sum / n,
        });
    }
    Ok(TrainReport {
        method: model.method,
        trace,
    })
}
