//! Synthetic multimodal classification data with known core and spurious
//! feature groups.
//!
//! Every sample draws a core label `y` and a latent spurious label that agrees
//! with `y` at rate `rho`. Core groups are generated from `y`, spurious groups
//! from the latent label, and the proxy label `y_spurious` is recovered from
//! spurious groups only (nearest prototype, then random flips).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::GroupId;
use crate::error::{Error, Result};
use crate::instructions::{Condition, GateRole, Instruction, TemplateBank, TemplateSplit};
use crate::tensor::Tensor;

pub const DATASET_SCHEMA: &str = "filora.dataset.v1";

pub type FeatureMap = BTreeMap<GroupId, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Vision,
    Audio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Core,
    Spurious,
}

impl From<FeatureRole> for GateRole {
    fn from(r: FeatureRole) -> Self {
        match r {
            FeatureRole::Core => GateRole::Core,
            FeatureRole::Spurious => GateRole::Spurious,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureGroupSpec {
    pub id: GroupId,
    pub modality: Modality,
    pub role: FeatureRole,
    pub dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub groups: Vec<FeatureGroupSpec>,
    pub num_classes: usize,
    pub rho: f64,
    pub proxy_noise: f64,
    /// Training samples.
    pub size: usize,
    /// Evaluation samples; their instructions come from held-out templates.
    pub eval_size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// K=4, two core and two spurious groups of width 16, rho 0.9. The
    /// spurious groups are less noisy than the core ones, so they are the
    /// easier shortcut.
    pub fn reference() -> Self {
        let group = |id: &str, modality, role, noise_sigma| FeatureGroupSpec {
            id: GroupId::from(id),
            modality,
            role,
            dim: 16,
            class_separation: 1.0,
            noise_sigma,
        };
        Self {
            groups: vec![
                group("text_semantics", Modality::Text, FeatureRole::Core, 0.5),
                group("visual_content", Modality::Vision, FeatureRole::Core, 0.5),
                group("visual_style", Modality::Vision, FeatureRole::Spurious, 0.2),
                group("acoustic_tone", Modality::Audio, FeatureRole::Spurious, 0.2),
            ],
            num_classes: 4,
            rho: 0.9,
            proxy_noise: 0.05,
            size: 4000,
            eval_size: 1000,
            seed: 2024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config_key("num_classes", "need at least 2 classes"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config_key("rho", format!("{} not in [0, 1]", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.proxy_noise) {
            return Err(Error::config_key("proxy_noise", format!("{} not in [0, 1]", self.proxy_noise)));
        }
        if self.size < self.num_classes {
            return Err(Error::config_key("size", format!("{} samples for {} classes", self.size, self.num_classes)));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if self.groups[..i].iter().any(|o| o.id == g.id) {
                return Err(Error::config_key("groups", format!("duplicate group `{}`", g.id)));
            }
            if g.dim == 0 {
                return Err(Error::config_key("dim", format!("group `{}` has zero width", g.id)));
            }
            if !(g.class_separation > 0.0 && g.class_separation.is_finite()) {
                return Err(Error::config_key("class_separation", format!("group `{}` must be > 0", g.id)));
            }
            if !(g.noise_sigma >= 0.0 && g.noise_sigma.is_finite()) {
                return Err(Error::config_key("noise_sigma", format!("group `{}` must be >= 0", g.id)));
            }
        }
        for role in [FeatureRole::Core, FeatureRole::Spurious] {
            if !self.groups.iter().any(|g| g.role == role) {
                return Err(Error::config_key("groups", format!("need at least one {role:?} group")));
            }
        }
        Ok(())
    }

    pub fn group_ids(&self, role: FeatureRole) -> Vec<GroupId> {
        self.groups.iter().filter(|g| g.role == role).map(|g| g.id.clone()).collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(toml_error)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("dataset spec serializes")
    }
}

pub(crate) fn toml_error(e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    let key = message
        .split('`')
        .nth(1)
        .filter(|_| message.starts_with("unknown field") || message.starts_with("missing field"))
        .map(String::from);
    match key {
        Some(k) => Error::config_key(k, message),
        None => Error::config(message),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureMap,
    pub y: usize,
    pub y_spurious: usize,
    /// Hidden experimental condition; only supervision routing reads it.
    pub condition: Condition,
    pub instruction: Instruction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Fixed per-class unit prototypes for every group, drawn once per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    by_group: BTreeMap<GroupId, Vec<Tensor>>,
}

impl Prototypes {
    pub fn draw(spec: &DatasetSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_c1a55);
        let by_group = spec
            .groups
            .iter()
            .map(|g| {
                let protos = (0..spec.num_classes)
                    .map(|_| {
                        let v = Tensor::randn(&[g.dim], 1.0, &mut rng);
                        let n = v.norm_sq().sqrt();
                        v.scaled(1.0 / n)
                    })
                    .collect();
                (g.id.clone(), protos)
            })
            .collect();
        Self { by_group }
    }

    pub fn get(&self, group: &GroupId, class: usize) -> Option<&Tensor> {
        self.by_group.get(group).and_then(|p| p.get(class))
    }

    /// Nearest class over the spurious groups (scaled prototypes), ties to
    /// the lowest class, then flipped uniformly to another class with
    /// probability `proxy_noise`.
    pub fn proxy_label(&self, spec: &DatasetSpec, features: &FeatureMap, proxy_noise: f64, seed: u64) -> Result<usize> {
        let spurious: Vec<&FeatureGroupSpec> =
            spec.groups.iter().filter(|g| g.role == FeatureRole::Spurious).collect();
        if spurious.is_empty() {
            return Err(Error::config_key("groups", "proxy label needs a spurious group"));
        }
        let mut best = (0, f64::INFINITY);
        for class in 0..spec.num_classes {
            let mut dist = 0.0;
            for g in &spurious {
                let x = features
                    .get(&g.id)
                    .ok_or_else(|| Error::Input(format!("sample lacks spurious group `{}`", g.id)))?;
                let p = &self.by_group[&g.id][class];
                dist += x
                    .data()
                    .iter()
                    .zip(p.data())
                    .map(|(a, b)| (a - g.class_separation * b).powi(2))
                    .sum::<f64>();
            }
            if dist < best.1 {
                best = (class, dist);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let label = best.0;
        if rng.random::<f64>() < proxy_noise {
            Ok(other_class(label, spec.num_classes, &mut rng))
        } else {
            Ok(label)
        }
    }
}

fn other_class(class: usize, k: usize, rng: &mut ChaCha8Rng) -> usize {
    let pick = rng.random_range(0..k - 1);
    if pick >= class {
        pick + 1
    } else {
        pick
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

const SHARD: usize = 500;

pub fn generate_dataset(spec: &DatasetSpec, bank: &TemplateBank) -> Result<Dataset> {
    spec.validate()?;
    let protos = Prototypes::draw(spec);
    let draw_split = |split: Split, n: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(n);
        for shard in 0..n.div_ceil(SHARD) {
            let stream = match split {
                Split::Train => 1u64,
                Split::Eval => 2u64,
            };
            let shard_seed = derive_seed(spec.seed, stream, shard as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(shard_seed);
            for i in shard * SHARD..((shard + 1) * SHARD).min(n) {
                out.push(draw_sample(spec, &protos, bank, split, i, &mut rng)?);
            }
        }
        Ok(out)
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: draw_split(Split::Train, spec.size)?,
        eval: draw_split(Split::Eval, spec.eval_size)?,
    })
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 16);
    rng.random()
}

fn draw_sample(
    spec: &DatasetSpec,
    protos: &Prototypes,
    bank: &TemplateBank,
    split: Split,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let k = spec.num_classes;
    let y = rng.random_range(0..k);
    let latent = if rng.random::<f64>() < spec.rho {
        y
    } else {
        other_class(y, k, rng)
    };
    let mut features = FeatureMap::new();
    for g in &spec.groups {
        let class = match g.role {
            FeatureRole::Core => y,
            FeatureRole::Spurious => latent,
        };
        let proto = &protos.by_group[&g.id][class];
        let data = proto
            .data()
            .iter()
            .map(|p| {
                let noise = if g.noise_sigma > 0.0 {
                    Normal::new(0.0, g.noise_sigma).expect("validated sigma").sample(rng)
                } else {
                    0.0
                };
                g.class_separation * p + noise
            })
            .collect();
        features.insert(g.id.clone(), Tensor::vector(data));
    }
    let proxy_seed: u64 = rng.random();
    let y_spurious = protos.proxy_label(spec, &features, spec.proxy_noise, proxy_seed)?;
    let condition = Condition::ALL[rng.random_range(0..Condition::ALL.len())];
    let template_split = match split {
        Split::Train => TemplateSplit::Train,
        Split::Eval => TemplateSplit::HeldOut,
    };
    let render_seed = rng.random::<u64>() ^ index as u64;
    let instruction = bank.render(condition, template_split, render_seed)?;
    Ok(Sample {
        features,
        y,
        y_spurious,
        condition,
        instruction,
    })
}

/// Scales the targeted groups by `1 - strength`; nothing else changes.
pub fn suppress(sample: &Sample, groups: &[GroupId], strength: f64) -> Result<Sample> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::config_key("strength", format!("{strength} not in [0, 1]")));
    }
    let mut out = sample.clone();
    for g in groups {
        let f = out
            .features
            .get_mut(g)
            .ok_or_else(|| Error::config_key("groups", format!("unknown group `{g}`")))?;
        let keep = 1.0 - strength;
        for v in f.data_mut() {
            *v *= keep;
        }
    }
    Ok(out)
}

pub fn remove(sample: &Sample, groups: &[GroupId]) -> Result<Sample> {
    suppress(sample, groups, 1.0)
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest_hash: Option<String>,
    spec: DatasetSpec,
    train: usize,
    eval: usize,
}

#[derive(Serialize, Deserialize)]
struct Line {
    split: Split,
    features: BTreeMap<GroupId, Vec<f64>>,
    y: usize,
    y_spurious: usize,
    condition: Condition,
    instruction_tokens: Vec<String>,
}

impl Dataset {
    /// Fraction of training samples whose proxy label equals the core label.
    pub fn agreement_rate(&self) -> f64 {
        let hits = self.train.iter().filter(|s| s.y == s.y_spurious).count();
        hits as f64 / self.train.len().max(1) as f64
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        self.write_jsonl_tagged(out, None)
    }

    /// JSON Lines with an optional manifest hash recorded in the header line.
    pub fn write_jsonl_tagged(&self, out: &mut impl Write, manifest_hash: Option<&str>) -> Result<()> {
        let header = Header {
            schema: DATASET_SCHEMA.to_string(),
            manifest_hash: manifest_hash.map(String::from),
            spec: self.spec.clone(),
            train: self.train.len(),
            eval: self.eval.len(),
        };
        let io = |e| Error::io("<dataset stream>", e);
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n").map_err(io)?;
        for (split, samples) in [(Split::Train, &self.train), (Split::Eval, &self.eval)] {
            for s in samples {
                let line = Line {
                    split,
                    features: s.features.iter().map(|(k, v)| (k.clone(), v.data().to_vec())).collect(),
                    y: s.y,
                    y_spurious: s.y_spurious,
                    condition: s.condition,
                    instruction_tokens: s.instruction.tokens.clone(),
                };
                serde_json::to_writer(&mut *out, &line)?;
                out.write_all(b"\n").map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let io = |e| Error::io("<dataset stream>", e);
        let first = lines
            .next()
            .ok_or_else(|| Error::Input("empty dataset file".into()))?
            .map_err(io)?;
        let header: Header = serde_json::from_str(&first)?;
        if header.schema != DATASET_SCHEMA {
            return Err(Error::Input(format!("unsupported dataset schema `{}`", header.schema)));
        }
        let mut train = Vec::with_capacity(header.train);
        let mut eval = Vec::with_capacity(header.eval);
        for line in lines {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line)?;
            let sample = Sample {
                features: l.features.into_iter().map(|(k, v)| (k, Tensor::vector(v))).collect(),
                y: l.y,
                y_spurious: l.y_spurious,
                condition: l.condition,
                instruction: Instruction {
                    tokens: l.instruction_tokens,
                    source: Some(l.condition),
                },
            };
            match l.split {
                Split::Train => train.push(sample),
                Split::Eval => eval.push(sample),
            }
        }
        if train.len() != header.train || eval.len() != header.eval {
            return Err(Error::Input("dataset line counts disagree with header".into()));
        }
        Ok(Self {
            spec: header.spec,
            train,
            eval,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        crate::pipeline::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}
