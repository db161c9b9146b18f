//! The multimodal classifier, its FiLoRA variant, and the comparison baselines.
//!
//! Architecture: one adapted `dim → group_hidden` layer + GELU per feature
//! group, a fusion layer over the concatenated group outputs + GELU, and a
//! classification head. FiLoRA attaches each group's adapter to that group's
//! own layer, a `fusion` adapter to the fusion layer and a `head` adapter to
//! the head, all gated by one shared instruction-conditioned gate vector.
//! Baselines see the instruction through a mean-pooled embedding that is
//! concatenated at fusion.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{max_rank, GateInput, GateVector, GroupId, GroupedLoraLinear, Linear};
use crate::error::{Error, Result};
use crate::instructions::{Condition, EncoderConfig, GateRole, Instruction, InstructionEncoder, Vocabulary};
use crate::ops::argmax;
use crate::synthdata::{Dataset, DatasetSpec, FeatureMap, FeatureRole};
use crate::tape::{Param, Role, Tape, TrainPolicy, Var};
use crate::tensor::Tensor;
use crate::training::{clip_gradients, Sgd};

pub const CHECKPOINT_SCHEMA: &str = "filora.checkpoint.v1";
pub const FUSION_GROUP: &str = "fusion";
pub const HEAD_GROUP: &str = "head";
/// Adapter id used by plain LoRA's single undifferentiated update.
pub const PLAIN_GROUP: &str = "lora";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub group_hidden: usize,
    pub fusion_hidden: usize,
    pub rank: usize,
    /// LoRA scale is `lora_alpha / rank`.
    pub lora_alpha: f64,
    pub encoder: EncoderConfig,
    /// Width of the baselines' instruction embedding.
    pub prompt_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            group_hidden: 32,
            fusion_hidden: 64,
            rank: 8,
            lora_alpha: 16.0,
            encoder: EncoderConfig::default(),
            prompt_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The pretrained, un-adapted network.
    Base,
    Filora,
    FullFineTune,
    PlainLora,
    PromptOnly,
}

impl Method {
    pub const TRAINED: [Method; 4] = [Method::Filora, Method::FullFineTune, Method::PlainLora, Method::PromptOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Filora => "filora",
            Method::FullFineTune => "full_ft",
            Method::PlainLora => "lora",
            Method::PromptOnly => "prompt_only",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Method::FullFineTune | Method::PlainLora | Method::PromptOnly)
    }

    /// Roles that receive gradients when this method trains.
    pub fn policy(self) -> TrainPolicy {
        let mut p = TrainPolicy::FROZEN;
        match self {
            Method::Base => p.base = true,
            Method::Filora => {
                p.adapter = true;
                p.encoder = true;
            }
            Method::FullFineTune => {
                p.base = true;
                p.instruction_embedding = true;
            }
            Method::PlainLora => {
                p.adapter = true;
                p.instruction_embedding = true;
            }
            Method::PromptOnly => p.instruction_embedding = true,
        }
        p
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Method::Base, Method::Filora, Method::FullFineTune, Method::PlainLora, Method::PromptOnly]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config_key("methods", format!("unknown method `{s}`")))
    }
}

/// One input feature group as seen by the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSlot {
    pub id: GroupId,
    pub dim: usize,
    pub role: FeatureRole,
}

pub fn slots_for(spec: &DatasetSpec) -> Vec<FeatureSlot> {
    spec.groups
        .iter()
        .map(|g| FeatureSlot {
            id: g.id.clone(),
            dim: g.dim,
            role: g.role,
        })
        .collect()
}

/// Instruction embedding concatenated at fusion by the baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPathway {
    pub vocab: Vocabulary,
    pub embedding: Param,
}

/// Feature matrices (one `[m×dim]` per slot) and token ids for a batch.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub features: Vec<Tensor>,
    pub token_ids: Vec<Vec<usize>>,
}

impl BatchInput {
    pub fn len(&self) -> usize {
        self.features.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where a forward pass takes its gates from.
#[derive(Clone, Copy, Debug)]
pub enum GateSource {
    Encoder,
    /// A `[m×|layout|]` node supplied by the caller.
    Fixed(Var),
}

pub struct Forward {
    pub logits: Var,
    pub gates: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub method: Method,
    pub slots: Vec<FeatureSlot>,
    pub num_classes: usize,
    pub config: ModelConfig,
    pub group_layers: Vec<GroupedLoraLinear>,
    pub fusion: GroupedLoraLinear,
    pub head: GroupedLoraLinear,
    pub encoder: Option<InstructionEncoder>,
    pub prompt: Option<PromptPathway>,
}

/// Anything that maps a batch of (features, instruction) pairs to logits.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// `[m×K]` logits.
    fn logits(&self, inputs: &[(&FeatureMap, &Instruction)]) -> Result<Tensor>;

    fn predict_batch(&self, inputs: &[(&FeatureMap, &Instruction)]) -> Result<Vec<usize>> {
        let l = self.logits(inputs)?;
        Ok((0..l.rows()).map(|r| argmax(l.row(r))).collect())
    }
}

impl Network {
    /// A randomly initialized, un-adapted network.
    pub fn init_base(slots: Vec<FeatureSlot>, num_classes: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::config_key("groups", "network needs at least one feature group"));
        }
        if num_classes < 2 {
            return Err(Error::config_key("num_classes", "need at least 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let group_layers = slots
            .iter()
            .map(|s| {
                let l = Linear::init(&format!("group.{}", s.id), s.dim, config.group_hidden, Role::Base, &mut rng);
                GroupedLoraLinear::plain(l, Role::Base)
            })
            .collect();
        let fused = config.group_hidden * slots.len();
        let fusion = Linear::init("fusion", fused, config.fusion_hidden, Role::Base, &mut rng);
        let head = Linear::init("head", config.fusion_hidden, num_classes, Role::Base, &mut rng);
        Ok(Self {
            method: Method::Base,
            slots,
            num_classes,
            config,
            group_layers,
            fusion: GroupedLoraLinear::plain(fusion, Role::Base),
            head: GroupedLoraLinear::plain(head, Role::Base),
            encoder: None,
            prompt: None,
        })
    }

    fn expect_base(&self) -> Result<()> {
        if self.method != Method::Base {
            return Err(Error::Contract(format!(
                "variants are built from a base network, not `{}`",
                self.method
            )));
        }
        Ok(())
    }

    /// Head rank: the configured rank clamped to what a `fusion_hidden → K` map admits.
    pub fn head_rank(&self) -> usize {
        self.config.rank.min(max_rank(self.config.fusion_hidden, self.num_classes)).max(1)
    }

    /// FiLoRA on top of a frozen base: group-aligned adapters plus the gating encoder.
    pub fn build_filora(&self, vocab: Vocabulary, seed: u64) -> Result<Self> {
        self.expect_base()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = self.config.lora_scale();
        let group_layers = self
            .slots
            .iter()
            .zip(&self.group_layers)
            .map(|(s, l)| {
                GroupedLoraLinear::wrap(
                    &format!("group.{}", s.id),
                    l.base.clone(),
                    std::slice::from_ref(&s.id),
                    self.config.rank,
                    scale,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = GroupedLoraLinear::wrap(
            "fusion",
            self.fusion.base.clone(),
            &[GroupId::from(FUSION_GROUP)],
            self.config.rank,
            scale,
            &mut rng,
        )?;
        let head = GroupedLoraLinear::wrap(
            "head",
            self.head.base.clone(),
            &[GroupId::from(HEAD_GROUP)],
            self.head_rank(),
            self.config.lora_alpha / self.head_rank() as f64,
            &mut rng,
        )?;
        let layout = self.gate_layout_for_slots();
        let encoder = InstructionEncoder::init(vocab, layout, self.config.encoder, seed ^ 0xe4c0_d3e5);
        Ok(Self {
            method: Method::Filora,
            slots: self.slots.clone(),
            num_classes: self.num_classes,
            config: self.config,
            group_layers,
            fusion,
            head,
            encoder: Some(encoder),
            prompt: None,
        })
    }

    /// A baseline variant. The fusion layer gains `prompt_dim` extra input
    /// columns for the instruction embedding; the embedding starts at zero so
    /// every baseline initially computes exactly what the base computes.
    pub fn build_baseline(&self, kind: Method, vocab: Vocabulary, seed: u64) -> Result<Self> {
        self.expect_base()?;
        if !kind.is_baseline() {
            return Err(Error::config_key("methods", format!("`{kind}` is not a baseline")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = self.config;
        let base_fusion = &self.fusion.base;
        let (d_out, d_old) = (base_fusion.d_out(), base_fusion.d_in());
        let d_new = d_old + cfg.prompt_dim;
        let extra = Tensor::randn(&[d_out, cfg.prompt_dim], (1.0 / d_new as f64).sqrt(), &mut rng);
        let mut w = Vec::with_capacity(d_out * d_new);
        for r in 0..d_out {
            w.extend_from_slice(base_fusion.weight.value.row(r));
            w.extend_from_slice(extra.row(r));
        }
        let fusion_base = Linear {
            weight: Param::new("fusion.weight", Role::Base, Tensor::new(vec![d_out, d_new], w)?),
            bias: base_fusion.bias.clone(),
        };
        let plain = [GroupId::from(PLAIN_GROUP)];
        let scale = cfg.lora_scale();
        let adapt = |name: &str, base: Linear, rank: usize, scale: f64, rng: &mut ChaCha8Rng| -> Result<GroupedLoraLinear> {
            if kind == Method::PlainLora {
                GroupedLoraLinear::wrap(name, base, &plain, rank, scale, rng)
            } else {
                Ok(GroupedLoraLinear::plain(base, Role::Base))
            }
        };
        let group_layers = self
            .slots
            .iter()
            .zip(&self.group_layers)
            .map(|(s, l)| adapt(&format!("group.{}", s.id), l.base.clone(), cfg.rank, scale, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = adapt("fusion", fusion_base, cfg.rank, scale, &mut rng)?;
        let head_rank = self.head_rank();
        let head = adapt("head", self.head.base.clone(), head_rank, cfg.lora_alpha / head_rank as f64, &mut rng)?;
        let embedding = Param::new(
            "prompt.embedding",
            Role::InstructionEmbedding,
            Tensor::zeros(&[vocab.len(), cfg.prompt_dim]),
        );
        Ok(Self {
            method: kind,
            slots: self.slots.clone(),
            num_classes: self.num_classes,
            config: cfg,
            group_layers,
            fusion,
            head,
            encoder: None,
            prompt: Some(PromptPathway { vocab, embedding }),
        })
    }

    pub fn build(&self, method: Method, vocab: Vocabulary, seed: u64) -> Result<Self> {
        match method {
            Method::Filora => self.build_filora(vocab, seed),
            Method::Base => {
                self.expect_base()?;
                Ok(self.clone())
            }
            kind => self.build_baseline(kind, vocab, seed),
        }
    }

    fn gate_layout_for_slots(&self) -> Vec<GroupId> {
        let mut layout: Vec<GroupId> = self.slots.iter().map(|s| s.id.clone()).collect();
        layout.push(GroupId::from(FUSION_GROUP));
        layout.push(GroupId::from(HEAD_GROUP));
        layout
    }

    /// Gate order: feature groups in slot order, then `fusion`, then `head`.
    pub fn gate_layout(&self) -> Vec<GroupId> {
        self.encoder
            .as_ref()
            .map(|e| e.layout.clone())
            .unwrap_or_default()
    }

    pub fn gate_roles(&self) -> Vec<GateRole> {
        self.gate_layout()
            .iter()
            .map(|g| {
                self.slots
                    .iter()
                    .find(|s| &s.id == g)
                    .map_or(GateRole::Structural, |s| s.role.into())
            })
            .collect()
    }

    /// Alpha per gate (layout order) for a condition.
    pub fn alpha(&self, condition: Condition) -> Vec<f64> {
        condition.alpha(&self.gate_roles())
    }

    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        self.encoder
            .as_ref()
            .map(|e| &e.vocab)
            .or(self.prompt.as_ref().map(|p| &p.vocab))
    }

    pub fn token_ids(&self, instruction: &Instruction) -> Result<Vec<usize>> {
        match self.vocabulary() {
            Some(v) => v.ids(instruction),
            None => Ok(Vec::new()),
        }
    }

    /// Stacks samples into per-slot matrices, validating group coverage and widths.
    pub fn batch_input(&self, inputs: &[(&FeatureMap, &Instruction)]) -> Result<BatchInput> {
        if inputs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let m = inputs.len();
        let mut features = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            let mut data = Vec::with_capacity(m * slot.dim);
            for (f, _) in inputs {
                let t = f
                    .get(&slot.id)
                    .ok_or_else(|| Error::Input(format!("missing features for group `{}`", slot.id)))?;
                if t.len() != slot.dim {
                    return Err(Error::Input(format!(
                        "group `{}` expects width {}, got {}",
                        slot.id,
                        slot.dim,
                        t.len()
                    )));
                }
                data.extend_from_slice(t.data());
            }
            features.push(Tensor::new(vec![m, slot.dim], data)?);
        }
        let token_ids = inputs
            .iter()
            .map(|(_, i)| self.token_ids(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchInput { features, token_ids })
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        input: &BatchInput,
        source: GateSource,
        policy: TrainPolicy,
    ) -> Result<Forward> {
        let layout = self.gate_layout();
        let gates = match (&self.encoder, source) {
            (_, GateSource::Fixed(g)) => Some(g),
            (Some(enc), GateSource::Encoder) => Some(enc.gates_tape(tape, &input.token_ids, policy)?),
            (None, GateSource::Encoder) => None,
        };
        let gate_input = match gates {
            Some(g) if self.method == Method::Filora => GateInput::Batch { gates: g, layout: &layout },
            _ => GateInput::Ungated,
        };
        let mut parts = Vec::with_capacity(self.slots.len() + 1);
        for (layer, x) in self.group_layers.iter().zip(&input.features) {
            let xv = tape.constant(x.clone());
            let h = layer.forward_tape(tape, xv, gate_input, policy)?;
            parts.push(tape.gelu(h));
        }
        if let Some(p) = &self.prompt {
            let table = tape.bind(&p.embedding, policy);
            parts.push(tape.embed_mean(table, &input.token_ids)?);
        }
        let fused = tape.concat_cols(&parts)?;
        let f = self.fusion.forward_tape(tape, fused, gate_input, policy)?;
        let f = tape.gelu(f);
        let logits = self.head.forward_tape(tape, f, gate_input, policy)?;
        Ok(Forward { logits, gates })
    }

    /// Logits for one sample, `[K]`.
    pub fn forward(&self, features: &FeatureMap, instruction: &Instruction) -> Result<Tensor> {
        let l = self.logits(&[(features, instruction)])?;
        l.reshape(vec![self.num_classes])
    }

    /// Logits with caller-supplied gates (FiLoRA only), `[K]`.
    pub fn forward_with_gates(&self, features: &FeatureMap, gates: &GateVector) -> Result<Tensor> {
        let rows = Tensor::new(vec![1, self.gate_layout().len()], self.gate_row(gates)?)?;
        let empty = Instruction {
            tokens: Vec::new(),
            source: None,
        };
        let l = self.logits_with_gate_rows(&[(features, &empty)], &rows)?;
        l.reshape(vec![self.num_classes])
    }

    fn gate_row(&self, gates: &GateVector) -> Result<Vec<f64>> {
        if self.method != Method::Filora {
            return Err(Error::Gating(format!("`{}` has no gates", self.method)));
        }
        gates.ordered(&self.gate_layout())
    }

    /// Batch logits with a fixed `[m×|layout|]` gate matrix.
    pub fn logits_with_gate_rows(&self, inputs: &[(&FeatureMap, &Instruction)], gates: &Tensor) -> Result<Tensor> {
        if self.method != Method::Filora {
            return Err(Error::Gating(format!("`{}` has no gates", self.method)));
        }
        let features: Vec<(&FeatureMap, &Instruction)> = inputs.to_vec();
        let input = self.features_only(&features)?;
        let mut tape = Tape::new();
        let g = tape.constant(gates.clone());
        let out = self.forward_tape(&mut tape, &input, GateSource::Fixed(g), TrainPolicy::FROZEN)?;
        Ok(tape.value(out.logits).clone())
    }

    fn features_only(&self, inputs: &[(&FeatureMap, &Instruction)]) -> Result<BatchInput> {
        let placeholder = Instruction {
            tokens: vec![crate::instructions::UNK.to_string()],
            source: None,
        };
        let swapped: Vec<(&FeatureMap, &Instruction)> = inputs.iter().map(|(f, _)| (*f, &placeholder)).collect();
        self.batch_input(&swapped)
    }

    pub fn gates(&self, instruction: &Instruction) -> Result<GateVector> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::Gating(format!("`{}` has no gates", self.method)))?
            .gates(instruction)
    }

    pub fn predict(&self, features: &FeatureMap, instruction: &Instruction) -> Result<usize> {
        Ok(argmax(self.forward(features, instruction)?.data()))
    }

    pub fn log_prob(&self, features: &FeatureMap, instruction: &Instruction, label: usize) -> Result<f64> {
        if label >= self.num_classes {
            return Err(Error::Label {
                label,
                classes: self.num_classes,
            });
        }
        let lp = crate::ops::log_softmax(&self.forward(features, instruction)?);
        Ok(lp.data()[label])
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        for l in &self.group_layers {
            p.extend(l.params());
        }
        p.extend(self.fusion.params());
        p.extend(self.head.params());
        if let Some(e) = &self.encoder {
            p.extend(e.params());
        }
        if let Some(pp) = &self.prompt {
            p.push(&pp.embedding);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for l in &mut self.group_layers {
            p.extend(l.params_mut());
        }
        p.extend(self.fusion.params_mut());
        p.extend(self.head.params_mut());
        if let Some(e) = &mut self.encoder {
            p.extend(e.params_mut());
        }
        if let Some(pp) = &mut self.prompt {
            p.push(&mut pp.embedding);
        }
        p
    }

    pub fn trainable_param_count(&self) -> usize {
        let policy = self.method.policy();
        self.params()
            .iter()
            .filter(|p| policy.trains(p.role))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn adapter_param_count(&self) -> usize {
        let mut n = self.fusion.adapter_param_count() + self.head.adapter_param_count();
        for l in &self.group_layers {
            n += l.adapter_param_count();
        }
        n
    }

    /// SHA-256 over every base parameter's name, shape and bits.
    pub fn base_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params().into_iter().filter(|p| p.role == Role::Base) {
            h.update(p.name.as_bytes());
            p.value.feed_digest(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every parameter.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name.as_bytes());
            p.value.feed_digest(&mut h);
        }
        hex::encode(h.finalize())
    }

    pub fn accuracy(&self, inputs: &[(&FeatureMap, &Instruction)], labels: &[usize]) -> Result<f64> {
        let preds = self.predict_batch(inputs)?;
        let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

impl Classifier for Network {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, inputs: &[(&FeatureMap, &Instruction)]) -> Result<Tensor> {
        let input = self.batch_input(inputs)?;
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, &input, GateSource::Encoder, TrainPolicy::FROZEN)?;
        Ok(tape.value(out.logits).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            batch_size: 32,
            learning_rate: 0.1,
            grad_clip_norm: 1.0,
            seed: 11,
        }
    }
}

/// Trains the un-adapted network on neutral-condition samples against `y`.
pub fn pretrain_base(dataset: &Dataset, model: ModelConfig, cfg: &PretrainConfig) -> Result<Network> {
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::config("pretraining needs a positive batch size and learning rate"));
    }
    let mut net = Network::init_base(slots_for(&dataset.spec), dataset.spec.num_classes, model, cfg.seed)?;
    let pool: Vec<_> = dataset
        .train
        .iter()
        .filter(|s| s.condition == Condition::Neutral)
        .collect();
    if pool.is_empty() {
        return Err(Error::Training("no neutral-condition samples to pretrain on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = order.len();
    let sgd = Sgd {
        learning_rate: |_| cfg.learning_rate,
        weight_decay: 0.0,
    };
    let policy = Method::Base.policy();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(pool.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(pool[order[cursor]]);
            cursor += 1;
        }
        let inputs: Vec<(&FeatureMap, &Instruction)> = batch.iter().map(|s| (&s.features, &s.instruction)).collect();
        let targets: Vec<usize> = batch.iter().map(|s| s.y).collect();
        let input = net.batch_input(&inputs)?;
        let mut tape = Tape::new();
        let out = net.forward_tape(&mut tape, &input, GateSource::Encoder, policy)?;
        let ce = tape.cross_entropy(out.logits, &targets)?;
        let loss = tape.mean(ce);
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Training(format!("pretraining loss is {value} at step {step}")));
        }
        let mut grads = tape.backward(loss)?.into_map();
        clip_gradients(&mut grads, cfg.grad_clip_norm);
        sgd.apply(&mut net, &grads, policy);
    }
    Ok(net)
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    role: Role,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    method: Method,
    manifest_hash: Option<String>,
    config: ModelConfig,
    num_classes: usize,
    slots: Vec<FeatureSlot>,
    vocab: Option<Vocabulary>,
    params: Vec<StoredParam>,
}

impl Network {
    pub fn to_checkpoint_json(&self, manifest_hash: Option<&str>) -> Result<String> {
        let ck = Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            method: self.method,
            manifest_hash: manifest_hash.map(String::from),
            config: self.config,
            num_classes: self.num_classes,
            slots: self.slots.clone(),
            vocab: self.vocabulary().cloned(),
            params: self
                .params()
                .into_iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    role: p.role,
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    /// Rebuilds the structure for the stored method, then restores every parameter by name.
    pub fn from_checkpoint_json(text: &str) -> Result<(Self, Option<String>)> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Input(format!("unsupported checkpoint schema `{}`", ck.schema)));
        }
        let base = Network::init_base(ck.slots, ck.num_classes, ck.config, 0)?;
        let mut net = match (ck.method, ck.vocab) {
            (Method::Base, _) => base,
            (m, Some(v)) => base.build(m, v, 0)?,
            (m, None) => return Err(Error::Input(format!("checkpoint for `{m}` lacks a vocabulary"))),
        };
        let mut stored: BTreeMap<String, StoredParam> = ck.params.into_iter().map(|p| (p.name.clone(), p)).collect();
        for p in net.params_mut() {
            let s = stored
                .remove(&p.name)
                .ok_or_else(|| Error::Input(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if s.shape != p.value.shape() {
                return Err(Error::Input(format!("parameter `{}` has shape {:?}", p.name, s.shape)));
            }
            p.value = Tensor::new(s.shape, s.data)?;
            p.role = s.role;
        }
        if let Some(name) = stored.keys().next() {
            return Err(Error::Input(format!("checkpoint has unexpected parameter `{name}`")));
        }
        Ok((net, ck.manifest_hash))
    }

    pub fn save(&self, path: &Path, manifest_hash: Option<&str>) -> Result<()> {
        crate::pipeline::write_atomic(path, self.to_checkpoint_json(manifest_hash)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instructions::TemplateBank;

    fn tiny_base() -> Network {
        let slots = vec![
            FeatureSlot {
                id: GroupId::from("c"),
                dim: 4,
                role: FeatureRole::Core,
            },
            FeatureSlot {
                id: GroupId::from("s"),
                dim: 4,
                role: FeatureRole::Spurious,
            },
        ];
        let cfg = ModelConfig {
            group_hidden: 4,
            fusion_hidden: 6,
            rank: 2,
            lora_alpha: 4.0,
            encoder: EncoderConfig {
                embed_dim: 4,
                hidden_dim: 5,
            },
            prompt_dim: 3,
        };
        Network::init_base(slots, 3, cfg, 5).unwrap()
    }

    fn features(seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ["c", "s"]
            .iter()
            .map(|g| (GroupId::from(*g), Tensor::randn(&[4], 1.0, &mut rng)))
            .collect()
    }

    #[test]
    fn fresh_variants_match_base() {
        let base = tiny_base();
        let vocab = TemplateBank::builtin().vocabulary();
        let inst = Instruction::from_text("rely on the plot semantics").unwrap();
        let f = features(1);
        let reference = base.forward(&f, &inst).unwrap();
        for m in Method::TRAINED {
            let v = base.build(m, vocab.clone(), 3).unwrap();
            assert!(v.forward(&f, &inst).unwrap().max_abs_diff(&reference) < 1e-12, "{m}");
            assert_eq!(v.method, m);
        }
    }

    #[test]
    fn missing_group_is_input_error() {
        let base = tiny_base();
        let mut f = features(1);
        f.remove(&GroupId::from("s"));
        let inst = Instruction::from_text("classify this").unwrap();
        assert!(matches!(base.forward(&f, &inst), Err(Error::Input(_))));
    }

    #[test]
    fn log_prob_properties() {
        let base = tiny_base();
        let f = features(2);
        let inst = Instruction::from_text("classify this").unwrap();
        let total: f64 = (0..3).map(|k| base.log_prob(&f, &inst, k).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let logits = base.forward(&f, &inst).unwrap();
        assert_eq!(
            -base.log_prob(&f, &inst, 1).unwrap(),
            crate::ops::cross_entropy(&logits, 1).unwrap()
        );
        assert!(matches!(base.log_prob(&f, &inst, 3), Err(Error::Label { .. })));
    }

    #[test]
    fn gate_layout_and_roles() {
        let net = tiny_base().build_filora(TemplateBank::builtin().vocabulary(), 1).unwrap();
        let names: Vec<String> = net.gate_layout().iter().map(|g| g.to_string()).collect();
        assert_eq!(names, ["c", "s", "fusion", "head"]);
        assert_eq!(
            net.gate_roles(),
            [GateRole::Core, GateRole::Spurious, GateRole::Structural, GateRole::Structural]
        );
        assert_eq!(net.alpha(Condition::FocusCore), [-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut net = tiny_base().build_filora(TemplateBank::builtin().vocabulary(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in net.params_mut() {
            let s = p.value.shape().to_vec();
            p.value = Tensor::randn(&s, 0.3, &mut rng);
        }
        let json = net.to_checkpoint_json(Some("abc")).unwrap();
        let (back, hash) = Network::from_checkpoint_json(&json).unwrap();
        assert_eq!(hash.as_deref(), Some("abc"));
        assert_eq!(back, net);
        let inst = Instruction::from_text("judge only by the surface style").unwrap();
        let f = features(4);
        assert_eq!(
            back.forward(&f, &inst).unwrap().data(),
            net.forward(&f, &inst).unwrap().data()
        );
    }

    #[test]
    fn unknown_method_is_config_error() {
        assert!("adapters".parse::<Method>().unwrap_err().is_config());
        let base = tiny_base();
        assert!(base
            .build_baseline(Method::Filora, TemplateBank::builtin().vocabulary(), 0)
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn prediction_ties_and_shift() {
        assert_eq!(argmax(&[0.1, 2.0, 0.1, 0.1]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 0.0, 0.0]), 0);
        let v = [0.3, -0.2, 0.9, 0.9];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.0).collect();
        assert_eq!(argmax(&v), argmax(&shifted));
    }
}
