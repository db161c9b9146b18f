//! Grouped, gated low-rank adaptation of frozen linear maps.
//!
//! A [`GroupedLoraLinear`] holds a frozen `W[d_out×d_in]` and bias plus one
//! low-rank pair `(A_g[d_in×r], B_g[d_out×r])` per feature group. With a gate
//! value `g_g ∈ [0,1]` per group the layer computes
//!
//! ```text
//! y = W x + Σ_g g_g · s · B_g (A_gᵀ x) + bias,     s = lora_alpha / r
//! ```
//!
//! which equals `(W + s Σ_g g_g B_g A_gᵀ) x + bias` without ever forming the
//! adapted weight. `B_g` starts at zero, so a fresh layer is exactly the base.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Param, Role, Tape, TrainPolicy, Var};
use crate::tensor::Tensor;

/// Identifier of a feature group (a computation path that carries its own adapter).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(String);

impl GroupId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for GroupId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Per-group gate values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    entries: Vec<(GroupId, f64)>,
}

impl GateVector {
    pub fn new(entries: Vec<(GroupId, f64)>) -> Result<Self> {
        for (i, (g, v)) in entries.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Gating(format!("gate for `{g}` is {v}, outside [0, 1]")));
            }
            if entries[..i].iter().any(|(h, _)| h == g) {
                return Err(Error::Gating(format!("duplicate gate for `{g}`")));
            }
        }
        Ok(Self { entries })
    }

    /// Every listed group pinned to `value`.
    pub fn constant(groups: &[GroupId], value: f64) -> Result<Self> {
        Self::new(groups.iter().map(|g| (g.clone(), value)).collect())
    }

    pub fn get(&self, group: &GroupId) -> Option<f64> {
        self.entries.iter().find(|(g, _)| g == group).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupId, f64)> {
        self.entries.iter().map(|(g, v)| (g, *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Values ordered as `layout`.
    pub fn ordered(&self, layout: &[GroupId]) -> Result<Vec<f64>> {
        layout
            .iter()
            .map(|g| self.get(g).ok_or_else(|| Error::Gating(format!("missing gate for group `{g}`"))))
            .collect()
    }
}

/// How adapter contributions are scaled during a tape forward.
#[derive(Clone, Copy, Debug)]
pub enum GateInput<'a> {
    /// Every adapter contributes fully, as in plain LoRA.
    Ungated,
    /// Row `i` of `gates[m×|layout|]` gates sample `i`; columns follow `layout`.
    Batch { gates: Var, layout: &'a [GroupId] },
}

/// Affine map `y = W x + b` with named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// `W ~ N(0, 1/d_in)`, zero bias.
    pub fn init(name: &str, d_in: usize, d_out: usize, role: Role, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), role, Tensor::randn(&[d_out, d_in], std, rng)),
            bias: Param::new(format!("{name}.bias"), role, Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var, policy: TrainPolicy) -> Result<Var> {
        let w = tape.bind(&self.weight, policy);
        let b = tape.bind(&self.bias, policy);
        let xw = tape.matmul_t(x, w)?;
        tape.add_bias(xw, b)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn with_role(mut self, role: Role) -> Self {
        self.weight.role = role;
        self.bias.role = role;
        self
    }
}

/// One group's low-rank factors; `ΔW_g = B_g A_gᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraGroup {
    pub group: GroupId,
    pub a: Param,
    pub b: Param,
}

impl LoraGroup {
    pub fn rank(&self) -> usize {
        self.a.value.shape()[1]
    }

    pub fn delta(&self) -> Result<Tensor> {
        self.b.value.matmul(&self.a.value.transpose()?)
    }
}

/// Frozen linear map plus per-group low-rank updates.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedLoraLinear {
    pub base: Linear,
    groups: Vec<LoraGroup>,
    scale: f64,
}

/// Rank accepted for a `d_in × d_out` layer.
pub fn max_rank(d_in: usize, d_out: usize) -> usize {
    d_in.min(d_out) / 2
}

impl GroupedLoraLinear {
    /// Fresh layer with its own random base weight (`N(0, 1/d_in)`, zero bias).
    pub fn init(
        name: &str,
        d_in: usize,
        d_out: usize,
        group_ids: &[GroupId],
        rank: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Linear::init(name, d_in, d_out, Role::Base, &mut rng);
        Self::wrap(name, base, group_ids, rank, scale, &mut rng)
    }

    /// Attaches adapters to an existing base map. `A_g ~ N(0, 1/d_in)`, `B_g = 0`.
    pub fn wrap(
        name: &str,
        base: Linear,
        group_ids: &[GroupId],
        rank: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (d_in, d_out) = (base.d_in(), base.d_out());
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config_key("scale", format!("must be positive, got {scale}")));
        }
        if !group_ids.is_empty() && (rank == 0 || rank > max_rank(d_in, d_out)) {
            return Err(Error::config_key(
                "rank",
                format!(
                    "rank {rank} not in [1, {}] for a {d_in}->{d_out} layer",
                    max_rank(d_in, d_out)
                ),
            ));
        }
        for (i, g) in group_ids.iter().enumerate() {
            if group_ids[..i].contains(g) {
                return Err(Error::config_key("group_ids", format!("duplicate group `{g}`")));
            }
        }
        let std = (1.0 / d_in as f64).sqrt();
        let groups = group_ids
            .iter()
            .map(|g| LoraGroup {
                group: g.clone(),
                a: Param::new(
                    format!("{name}.lora.{g}.a"),
                    Role::Adapter,
                    Tensor::randn(&[d_in, rank], std, rng),
                ),
                b: Param::new(format!("{name}.lora.{g}.b"), Role::Adapter, Tensor::zeros(&[d_out, rank])),
            })
            .collect();
        Ok(Self { base, groups, scale })
    }

    /// Base-only layer (no adapters); its weights carry `role`.
    pub fn plain(base: Linear, role: Role) -> Self {
        Self {
            base: base.with_role(role),
            groups: Vec::new(),
            scale: 1.0,
        }
    }

    pub fn groups(&self) -> &[LoraGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [LoraGroup] {
        &mut self.groups
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn d_in(&self) -> usize {
        self.base.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.base.d_out()
    }

    pub fn group_ids(&self) -> Vec<GroupId> {
        self.groups.iter().map(|g| g.group.clone()).collect()
    }

    /// Number of adapter scalars, `Σ_g r (d_in + d_out)`.
    pub fn adapter_param_count(&self) -> usize {
        self.groups.iter().map(|g| g.a.value.len() + g.b.value.len()).sum()
    }

    fn gate_values(&self, gates: &GateVector) -> Result<Vec<f64>> {
        self.groups
            .iter()
            .map(|g| {
                gates
                    .get(&g.group)
                    .ok_or_else(|| Error::Gating(format!("missing gate for group `{}`", g.group)))
            })
            .collect()
    }

    /// `W + s Σ_g gates[g] B_g A_gᵀ`.
    pub fn effective_weight(&self, gates: &GateVector) -> Result<Tensor> {
        let values = self.gate_values(gates)?;
        let mut w = self.base.weight.value.clone();
        for (group, gate) in self.groups.iter().zip(values) {
            let delta = group.delta()?.scaled(self.scale * gate);
            w = w.add(&delta)?;
        }
        Ok(w)
    }

    /// Adapted forward of a single input vector.
    pub fn forward_adapted(&self, x: &Tensor, gates: &GateVector) -> Result<Tensor> {
        let values = self.gate_values(gates)?;
        let layout = self.group_ids();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone().reshape(vec![1, x.len()])?);
        let gv = tape.constant(Tensor::new(vec![1, values.len().max(1)], pad(values))?);
        let y = self.forward_tape(
            &mut tape,
            xv,
            GateInput::Batch {
                gates: gv,
                layout: &layout,
            },
            TrainPolicy::FROZEN,
        )?;
        tape.value(y).clone().reshape(vec![self.d_out()])
    }

    /// Batched forward `x[m×d_in] -> [m×d_out]` on a tape.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, gates: GateInput<'_>, policy: TrainPolicy) -> Result<Var> {
        let mut out = self.base.forward_tape(tape, x, policy)?;
        for group in &self.groups {
            let a = tape.bind(&group.a, policy);
            let b = tape.bind(&group.b, policy);
            let down = tape.matmul(x, a)?;
            let up = tape.matmul_t(down, b)?;
            let mut update = tape.scale(up, self.scale);
            if let GateInput::Batch { gates, layout } = gates {
                let col = layout
                    .iter()
                    .position(|g| *g == group.group)
                    .ok_or_else(|| Error::Gating(format!("missing gate for group `{}`", group.group)))?;
                let gate = tape.column(gates, col)?;
                update = tape.scale_rows(update, gate)?;
            }
            out = tape.add(out, update)?;
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.base.params();
        for g in &self.groups {
            p.push(&g.a);
            p.push(&g.b);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.base.params_mut();
        for g in &mut self.groups {
            p.push(&mut g.a);
            p.push(&mut g.b);
        }
        p
    }
}

fn pad(mut v: Vec<f64>) -> Vec<f64> {
    if v.is_empty() {
        v.push(0.0);
    }
    v
}
