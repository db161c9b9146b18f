//! Natural-language instructions, their encoder, and the gates they produce.
//!
//! Instructions are rendered from plain-text template banks (one template per
//! line, `{slot}` markers filled from `slots.txt`). Every fifth template of a
//! bank (indices 4, 9, 14, ...) is held out from training and used only for
//! evaluation. The encoder mean-pools token embeddings, applies two GELU
//! layers, and projects to one sigmoid gate per group.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{GateVector, GroupId, Linear};
use crate::error::{Error, Result};
use crate::tape::{Param, Role, Tape, TrainPolicy, Var};
use crate::tensor::Tensor;

pub const MAX_INSTRUCTION_TOKENS: usize = 32;
pub const UNK: &str = "<unk>";
pub const MIN_BANK_SIZE: usize = 25;
/// Templates whose index satisfies `i % HELD_OUT_STRIDE == HELD_OUT_STRIDE - 1` are held out.
pub const HELD_OUT_STRIDE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    FocusCore,
    IgnoreSpurious,
    Neutral,
    IgnoreCore,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::FocusCore,
        Condition::IgnoreSpurious,
        Condition::Neutral,
        Condition::IgnoreCore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::FocusCore => "FocusCore",
            Condition::IgnoreSpurious => "IgnoreSpurious",
            Condition::Neutral => "Neutral",
            Condition::IgnoreCore => "IgnoreCore",
        }
    }

    /// Whether supervision under this condition uses the spurious proxy label.
    pub fn uses_proxy_target(self) -> bool {
        matches!(self, Condition::IgnoreCore)
    }

    /// Gate-regularizer sign for a group: −1 encouraged, +1 discouraged, 0 neutral.
    pub fn alpha_for(self, role: GateRole) -> f64 {
        use Condition::*;
        use GateRole::*;
        match (self, role) {
            (_, Structural) => 0.0,
            (FocusCore, Core) => -1.0,
            (FocusCore, Spurious) => 1.0,
            (IgnoreSpurious, Core) => 0.0,
            (IgnoreSpurious, Spurious) => 1.0,
            (Neutral, _) => 0.0,
            (IgnoreCore, Core) => 1.0,
            (IgnoreCore, Spurious) => -1.0,
        }
    }

    /// Alpha for every group of a layout, in layout order.
    pub fn alpha(self, roles: &[GateRole]) -> Vec<f64> {
        roles.iter().map(|&r| self.alpha_for(r)).collect()
    }

    fn bank_file(self) -> &'static str {
        match self {
            Condition::FocusCore => "focus_core.txt",
            Condition::IgnoreSpurious => "ignore_spurious.txt",
            Condition::Neutral => "neutral.txt",
            Condition::IgnoreCore => "ignore_core.txt",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Condition::FocusCore => 0x1f0c,
            Condition::IgnoreSpurious => 0x2a5e,
            Condition::Neutral => 0x3e07,
            Condition::IgnoreCore => 0x4c0e,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config_key("condition", format!("unknown condition `{s}`")))
    }
}

/// Which kind of computation path a gate controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRole {
    Core,
    Spurious,
    /// Fusion/head paths; neutral under every condition.
    Structural,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateSplit {
    Train,
    HeldOut,
}

impl TemplateSplit {
    fn admits(self, index: usize) -> bool {
        let held = index % HELD_OUT_STRIDE == HELD_OUT_STRIDE - 1;
        match self {
            TemplateSplit::Train => !held,
            TemplateSplit::HeldOut => held,
        }
    }
}

/// A rendered instruction. Only `tokens` is ever seen by a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<String>,
    /// Metadata for bookkeeping; never a model input.
    pub source: Option<Condition>,
}

impl Instruction {
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Contract("instruction text is empty".into()));
        }
        if tokens.len() > MAX_INSTRUCTION_TOKENS {
            return Err(Error::Contract(format!(
                "instruction has {} tokens, limit is {MAX_INSTRUCTION_TOKENS}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, source: None })
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Paraphrase banks for all four conditions plus slot fills.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateBank {
    templates: BTreeMap<Condition, Vec<String>>,
    slots: BTreeMap<String, Vec<String>>,
}

const BUILTIN: [(&str, &str); 5] = [
    ("focus_core.txt", include_str!("../templates/focus_core.txt")),
    ("ignore_spurious.txt", include_str!("../templates/ignore_spurious.txt")),
    ("neutral.txt", include_str!("../templates/neutral.txt")),
    ("ignore_core.txt", include_str!("../templates/ignore_core.txt")),
    ("slots.txt", include_str!("../templates/slots.txt")),
];

impl TemplateBank {
    /// The banks shipped in `templates/`.
    pub fn builtin() -> Self {
        Self::from_sources(|file| {
            BUILTIN
                .iter()
                .find(|(n, _)| *n == file)
                .map(|(_, s)| s.to_string())
                .ok_or_else(|| Error::config(format!("missing builtin bank {file}")))
        })
        .expect("builtin template banks are valid")
    }

    /// Loads `focus_core.txt`, `ignore_spurious.txt`, `neutral.txt`,
    /// `ignore_core.txt` and `slots.txt` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::from_sources(|file| {
            let p = dir.join(file);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        })
    }

    fn from_sources(mut read: impl FnMut(&str) -> Result<String>) -> Result<Self> {
        let slots = parse_slots(&read("slots.txt")?)?;
        let mut templates = BTreeMap::new();
        for c in Condition::ALL {
            let lines: Vec<String> = read(c.bank_file())?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect();
            if lines.len() < MIN_BANK_SIZE {
                return Err(Error::config(format!(
                    "bank {} has {} templates, need at least {MIN_BANK_SIZE}",
                    c.bank_file(),
                    lines.len()
                )));
            }
            for l in &lines {
                for slot in slot_names(l) {
                    if !slots.contains_key(&slot) {
                        return Err(Error::config(format!("template `{l}` uses unknown slot {{{slot}}}")));
                    }
                }
            }
            templates.insert(c, lines);
        }
        Ok(Self { templates, slots })
    }

    pub fn templates(&self, condition: Condition, split: TemplateSplit) -> Vec<&str> {
        self.templates[&condition]
            .iter()
            .enumerate()
            .filter(|(i, _)| split.admits(*i))
            .map(|(_, t)| t.as_str())
            .collect()
    }

    /// Deterministic render: the seed picks a template of `split` and one fill per slot.
    pub fn render(&self, condition: Condition, split: TemplateSplit, seed: u64) -> Result<Instruction> {
        let pool = self.templates(condition, split);
        if pool.is_empty() {
            return Err(Error::config(format!("no {split:?} templates for {condition}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ condition.stream().wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let template = pool[rng.random_range(0..pool.len())];
        let mut fills: BTreeMap<String, &str> = BTreeMap::new();
        for slot in slot_names(template) {
            let options = &self.slots[&slot];
            fills
                .entry(slot)
                .or_insert_with(|| options[rng.random_range(0..options.len())].as_str());
        }
        let mut text = template.to_string();
        for (slot, fill) in &fills {
            text = text.replace(&format!("{{{slot}}}"), fill);
        }
        let mut inst = Instruction::from_text(&text)?;
        inst.source = Some(condition);
        Ok(inst)
    }

    /// Vocabulary over training templates and all slot fills; `<unk>` is id 0.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words = BTreeSet::new();
        for c in Condition::ALL {
            for t in self.templates(c, TemplateSplit::Train) {
                let stripped = strip_slots(t);
                words.extend(tokenize(&stripped));
            }
        }
        for fills in self.slots.values() {
            for f in fills {
                words.extend(tokenize(f));
            }
        }
        Vocabulary::new(words.into_iter().collect())
    }
}

fn parse_slots(src: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for line in src.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, rest) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("slot line without `=`: {line}")))?;
        let fills: Vec<String> = rest
            .split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        if fills.is_empty() {
            return Err(Error::config(format!("slot `{}` has no fills", name.trim())));
        }
        out.insert(name.trim().to_string(), fills);
    }
    Ok(out)
}

fn slot_names(template: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start..].find('}') else { break };
        names.push(rest[start + 1..start + len].to_string());
        rest = &rest[start + len + 1..];
    }
    names
}

fn strip_slots(template: &str) -> String {
    let mut out = template.to_string();
    for s in slot_names(template) {
        out = out.replace(&format!("{{{s}}}"), " ");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// `words` must not contain `<unk>`; it is prepended as id 0.
    pub fn new(words: Vec<String>) -> Self {
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(words.into_iter().filter(|w| w != UNK));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens[1..]
            .binary_search_by(|t| t.as_str().cmp(token))
            .map(|i| i + 1)
            .unwrap_or(0)
    }

    pub fn ids(&self, instruction: &Instruction) -> Result<Vec<usize>> {
        if instruction.tokens.is_empty() {
            return Err(Error::Contract("instruction text is empty".into()));
        }
        Ok(instruction.tokens.iter().map(|t| self.id(t)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
        }
    }
}

/// Embedding → mean pool → two GELU layers → linear projection → sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEncoder {
    pub vocab: Vocabulary,
    pub layout: Vec<GroupId>,
    pub embedding: Param,
    pub hidden1: Linear,
    pub hidden2: Linear,
    /// `[|layout| × hidden_dim]`, zero at initialization so all gates start at 0.5.
    pub projection: Param,
}

impl InstructionEncoder {
    pub fn init(vocab: Vocabulary, layout: Vec<GroupId>, cfg: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Param::new(
            "encoder.embedding",
            Role::Encoder,
            Tensor::randn(&[vocab.len(), cfg.embed_dim], 1.0, &mut rng),
        );
        let hidden1 = Linear::init("encoder.hidden1", cfg.embed_dim, cfg.hidden_dim, Role::Encoder, &mut rng);
        let hidden2 = Linear::init("encoder.hidden2", cfg.hidden_dim, cfg.hidden_dim, Role::Encoder, &mut rng);
        let projection = Param::new(
            "encoder.projection",
            Role::Encoder,
            Tensor::zeros(&[layout.len(), cfg.hidden_dim]),
        );
        Self {
            vocab,
            layout,
            embedding,
            hidden1,
            hidden2,
            projection,
        }
    }

    pub fn token_ids(&self, instruction: &Instruction) -> Result<Vec<usize>> {
        self.vocab.ids(instruction)
    }

    /// Hidden representation `z[m×hidden]` for a batch of token-id sequences.
    pub fn encode_tape(&self, tape: &mut Tape, ids: &[Vec<usize>], policy: TrainPolicy) -> Result<Var> {
        let table = tape.bind(&self.embedding, policy);
        let pooled = tape.embed_mean(table, ids)?;
        let h1 = self.hidden1.forward_tape(tape, pooled, policy)?;
        let h1 = tape.gelu(h1);
        let h2 = self.hidden2.forward_tape(tape, h1, policy)?;
        Ok(tape.gelu(h2))
    }

    /// Gate matrix `[m×|layout|]`.
    pub fn gates_tape(&self, tape: &mut Tape, ids: &[Vec<usize>], policy: TrainPolicy) -> Result<Var> {
        let z = self.encode_tape(tape, ids, policy)?;
        let proj = tape.bind(&self.projection, policy);
        let logits = tape.matmul_t(z, proj)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn encode(&self, instruction: &Instruction) -> Result<Tensor> {
        let ids = self.token_ids(instruction)?;
        let mut tape = Tape::new();
        let z = self.encode_tape(&mut tape, &[ids], TrainPolicy::FROZEN)?;
        let v = tape.value(z).clone();
        let n = v.len();
        v.reshape(vec![n])
    }

    pub fn gates(&self, instruction: &Instruction) -> Result<GateVector> {
        let rows = self.gate_rows(std::slice::from_ref(instruction))?;
        GateVector::new(self.layout.iter().cloned().zip(rows[0].iter().copied()).collect())
    }

    /// Gate values for many instructions, one row each in layout order.
    pub fn gate_rows(&self, instructions: &[Instruction]) -> Result<Vec<Vec<f64>>> {
        let ids = instructions
            .iter()
            .map(|i| self.token_ids(i))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let g = self.gates_tape(&mut tape, &ids, TrainPolicy::FROZEN)?;
        let v = tape.value(g);
        Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.embedding];
        p.extend(self.hidden1.params());
        p.extend(self.hidden2.params());
        p.push(&self.projection);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.embedding];
        p.extend(self.hidden1.params_mut());
        p.extend(self.hidden2.params_mut());
        p.push(&mut self.projection);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, CheckOptions};

    fn layout() -> Vec<GroupId> {
        ["a", "b", "c"].iter().map(|s| GroupId::from(*s)).collect()
    }

    #[test]
    fn builtin_banks_are_complete() {
        let bank = TemplateBank::builtin();
        for c in Condition::ALL {
            assert_eq!(bank.templates(c, TemplateSplit::Train).len(), 20);
            assert_eq!(bank.templates(c, TemplateSplit::HeldOut).len(), 5);
        }
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let bank = TemplateBank::builtin();
        for c in Condition::ALL {
            for seed in 0..200 {
                let a = bank.render(c, TemplateSplit::Train, seed).unwrap();
                assert_eq!(a, bank.render(c, TemplateSplit::Train, seed).unwrap());
                assert!(!a.tokens.is_empty() && a.tokens.len() <= MAX_INSTRUCTION_TOKENS);
            }
        }
    }

    #[test]
    fn held_out_renders_never_appear_in_training_set() {
        let bank = TemplateBank::builtin();
        for c in Condition::ALL {
            let train: BTreeSet<String> = (0..1000)
                .map(|s| bank.render(c, TemplateSplit::Train, s).unwrap().text())
                .collect();
            for s in 0..200 {
                let held = bank.render(c, TemplateSplit::HeldOut, s).unwrap().text();
                assert!(!train.contains(&held), "{held}");
            }
        }
    }

    #[test]
    fn tokens_never_name_conditions() {
        let bank = TemplateBank::builtin();
        let forbidden: Vec<String> = Condition::ALL.iter().map(|c| c.name().to_lowercase()).collect();
        for t in bank.vocabulary().tokens() {
            assert!(!forbidden.contains(t), "token {t} names a condition");
        }
        for c in Condition::ALL {
            for s in 0..100 {
                for split in [TemplateSplit::Train, TemplateSplit::HeldOut] {
                    let inst = bank.render(c, split, s).unwrap();
                    assert!(inst.tokens.iter().all(|t| !forbidden.contains(t)));
                }
            }
        }
    }

    #[test]
    fn conditions_share_vocabulary_but_not_phrasing() {
        let bank = TemplateBank::builtin();
        let focus: BTreeSet<&str> = bank.templates(Condition::FocusCore, TemplateSplit::Train).into_iter().collect();
        let ignore: BTreeSet<&str> = bank.templates(Condition::IgnoreCore, TemplateSplit::Train).into_iter().collect();
        assert!(focus.is_disjoint(&ignore));
        let words = |c| -> BTreeSet<String> {
            (0..50)
                .flat_map(|s| bank.render(c, TemplateSplit::Train, s).unwrap().tokens)
                .collect()
        };
        assert!(!words(Condition::FocusCore).is_disjoint(&words(Condition::IgnoreCore)));
    }

    #[test]
    fn alpha_table() {
        use GateRole::*;
        let roles = [Core, Spurious, Structural];
        assert_eq!(Condition::FocusCore.alpha(&roles), vec![-1.0, 1.0, 0.0]);
        assert_eq!(Condition::IgnoreSpurious.alpha(&roles), vec![0.0, 1.0, 0.0]);
        assert_eq!(Condition::Neutral.alpha(&roles), vec![0.0, 0.0, 0.0]);
        assert_eq!(Condition::IgnoreCore.alpha(&roles), vec![1.0, -1.0, 0.0]);
        for c in Condition::ALL {
            assert_eq!(c.uses_proxy_target(), c == Condition::IgnoreCore);
        }
    }

    #[test]
    fn unknown_condition_and_unknown_tokens() {
        assert!("Sideways".parse::<Condition>().unwrap_err().is_config());
        let vocab = TemplateBank::builtin().vocabulary();
        assert_eq!(vocab.id(UNK), 0);
        assert_eq!(vocab.id("zyzzyva"), 0);
        assert_ne!(vocab.id("the"), 0);
    }

    #[test]
    fn empty_text_is_contract_error() {
        assert!(matches!(Instruction::from_text("  ,, "), Err(Error::Contract(_))));
        let enc = InstructionEncoder::init(TemplateBank::builtin().vocabulary(), layout(), EncoderConfig::default(), 0);
        let empty = Instruction {
            tokens: vec![],
            source: None,
        };
        assert!(matches!(enc.encode(&empty), Err(Error::Contract(_))));
    }

    #[test]
    fn encoding_is_deterministic_and_order_invariant() {
        let enc = InstructionEncoder::init(TemplateBank::builtin().vocabulary(), layout(), EncoderConfig::default(), 7);
        let a = Instruction::from_text("rely on the plot semantics").unwrap();
        let b = Instruction::from_text("the semantics plot on rely").unwrap();
        let za = enc.encode(&a).unwrap();
        assert_eq!(za, enc.encode(&a.clone()).unwrap());
        assert!(za.max_abs_diff(&enc.encode(&b).unwrap()) < 1e-12);
    }

    #[test]
    fn zero_projection_gives_half_gates() {
        let enc = InstructionEncoder::init(TemplateBank::builtin().vocabulary(), layout(), EncoderConfig::default(), 7);
        let g = enc.gates(&Instruction::from_text("judge only by the surface style").unwrap()).unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|(_, v)| v == 0.5));
    }

    #[test]
    fn gates_stay_in_open_unit_interval() {
        let mut enc = InstructionEncoder::init(TemplateBank::builtin().vocabulary(), layout(), EncoderConfig::default(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        enc.projection.value = Tensor::randn(&[3, 64], 3.0, &mut rng);
        let bank = TemplateBank::builtin();
        for s in 0..50 {
            let inst = bank.render(Condition::ALL[s as usize % 4], TemplateSplit::Train, s).unwrap();
            for (_, v) in enc.gates(&inst).unwrap().iter() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let mut enc = InstructionEncoder::init(
            TemplateBank::builtin().vocabulary(),
            layout(),
            EncoderConfig {
                embed_dim: 6,
                hidden_dim: 5,
            },
            3,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        enc.projection.value = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let insts: Vec<Instruction> = (0..3)
            .map(|s| TemplateBank::builtin().render(Condition::ALL[s], TemplateSplit::Train, s as u64).unwrap())
            .collect();
        let ids: Vec<Vec<usize>> = insts.iter().map(|i| enc.token_ids(i).unwrap()).collect();
        let weights = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let policy = TrainPolicy {
            encoder: true,
            ..TrainPolicy::FROZEN
        };
        let run = |enc: &InstructionEncoder, grad: bool| {
            let mut t = Tape::new();
            let g = enc.gates_tape(&mut t, &ids, policy).unwrap();
            let w = t.constant(weights.clone());
            let p = t.mul(g, w).unwrap();
            let l = t.sum(p);
            let f = t.value(l).data()[0];
            (f, grad.then(|| t.backward(l).unwrap().param("encoder.embedding").unwrap()))
        };
        let analytic = run(&enc, true).1.unwrap();
        let point = enc.embedding.value.clone();
        let f = |v: &[f64]| {
            let mut probe = enc.clone();
            probe.embedding.value = Tensor::new(point.shape().to_vec(), v.to_vec()).unwrap();
            run(&probe, false).0
        };
        // Rows of unused tokens have zero gradient on both sides.
        let r = check_gradient(f, point.data(), analytic.data(), &CheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
