//! Reliance and robustness instruments: gate modulation range, reliance
//! sensitivity, decision stability, degradation curves, mutual information and
//! label separability.
//!
//! Per-sample work fans out over a rayon pool sized by `FILORA_THREADS`
//! (default: all cores). Results are collected in input order and reduced
//! sequentially, so every number is independent of the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::GroupId;
use crate::error::{Error, Result};
use crate::instructions::{Condition, GateRole, Instruction};
use crate::model::{Classifier, GateSource, Network};
use crate::ops::argmax;
use crate::synthdata::{suppress, FeatureMap, FeatureRole, Sample};
use crate::tape::{Tape, TrainPolicy};
use crate::tensor::Tensor;

pub const THREADS_ENV: &str = "FILORA_THREADS";
pub const DEFAULT_RS_DELTA: f64 = 0.05;
pub const DEFAULT_MI_BINS: usize = 8;
const CHUNK: usize = 64;

pub fn evaluation_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over fixed-size chunks in parallel and concatenates results in order.
fn par_chunks<T: Sync, R: Send>(items: &[T], f: impl Fn(&[T]) -> Result<Vec<R>> + Sync) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(evaluation_threads())
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let parts: Vec<Result<Vec<R>>> = pool.install(|| items.par_chunks(CHUNK).map(&f).collect());
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Instruction for sample `i`: `renders[i % renders.len()]`.
fn paired<'a>(samples: &'a [Sample], renders: &'a [Instruction]) -> Result<Vec<(&'a FeatureMap, &'a Instruction)>> {
    if samples.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    if renders.is_empty() {
        return Err(Error::Contract("no instruction renders".into()));
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| (&s.features, &renders[i % renders.len()]))
        .collect())
}

/// `mean_i |g(focus_i) − g(ignore_i)|` per group from precomputed gate rows.
pub fn gmr_from_rows(layout: &[GroupId], focus: &[Vec<f64>], ignore: &[Vec<f64>]) -> Result<BTreeMap<GroupId, f64>> {
    if focus.is_empty() || ignore.is_empty() {
        return Err(Error::Contract("GMR needs at least one render per side".into()));
    }
    if focus.len() != ignore.len() {
        return Err(Error::Contract(format!(
            "GMR pairs {} focus renders with {} ignore renders",
            focus.len(),
            ignore.len()
        )));
    }
    let mut out = BTreeMap::new();
    for (j, g) in layout.iter().enumerate() {
        let total: f64 = focus.iter().zip(ignore).map(|(f, i)| (f[j] - i[j]).abs()).sum();
        out.insert(g.clone(), total / focus.len() as f64);
    }
    Ok(out)
}

/// Gate modulation range over paired held-out focus/ignore renders.
pub fn gmr(model: &Network, focus: &[Instruction], ignore: &[Instruction]) -> Result<BTreeMap<GroupId, f64>> {
    let enc = model
        .encoder
        .as_ref()
        .ok_or_else(|| Error::Gating(format!("`{}` has no gates", model.method)))?;
    if focus.is_empty() || ignore.is_empty() {
        return Err(Error::Contract("GMR needs at least one render per side".into()));
    }
    gmr_from_rows(&enc.layout, &enc.gate_rows(focus)?, &enc.gate_rows(ignore)?)
}

/// Clamped central difference of `f` around `x` inside `[0, 1]`.
///
/// Near a boundary the stencil becomes `[max(x−δ, 0), min(x+δ, 1)]` and
/// the difference is divided by its actual width.
pub fn clamped_difference(f: impl Fn(f64) -> f64, x: f64, delta: f64) -> f64 {
    let lo = (x - delta).max(0.0);
    let hi = (x + delta).min(1.0);
    (f(hi) - f(lo)) / (hi - lo)
}

/// Per-sample `|∂ log p(ŷ)/∂ g_j|` by clamped central differences, `[m][|layout|]`.
pub fn fd_gate_sensitivities(
    log_probs: impl Fn(&Tensor, &[usize]) -> Result<Vec<f64>>,
    gates: &Tensor,
    labels: &[usize],
    delta: f64,
) -> Result<Vec<Vec<f64>>> {
    let (m, width) = (gates.rows(), gates.cols());
    let mut out = vec![vec![0.0; width]; m];
    for j in 0..width {
        let mut plus = gates.clone();
        let mut minus = gates.clone();
        let mut widths = vec![0.0; m];
        for i in 0..m {
            let g = gates.at(i, j);
            let (lo, hi) = ((g - delta).max(0.0), (g + delta).min(1.0));
            plus.data_mut()[i * width + j] = hi;
            minus.data_mut()[i * width + j] = lo;
            widths[i] = hi - lo;
        }
        let lp = log_probs(&plus, labels)?;
        let lm = log_probs(&minus, labels)?;
        for i in 0..m {
            out[i][j] = (lp[i] - lm[i]).abs() / widths[i];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelianceSensitivity {
    /// Finite-difference RS per group (canonical).
    pub fd: BTreeMap<GroupId, f64>,
    /// Analytic-gradient RS per group.
    pub analytic: BTreeMap<GroupId, f64>,
    /// RS at the gold label instead of the prediction.
    pub gold_fd: BTreeMap<GroupId, f64>,
}

struct RsChunk {
    fd: Vec<Vec<f64>>,
    analytic: Vec<Vec<f64>>,
    gold: Vec<Vec<f64>>,
}

fn gate_log_probs(model: &Network, inputs: &[(&FeatureMap, &Instruction)], gates: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let logits = model.logits_with_gate_rows(inputs, gates)?;
    let lp = crate::ops::log_softmax(&logits);
    Ok(labels.iter().enumerate().map(|(i, &y)| lp.at(i, y)).collect())
}

fn rs_chunk(model: &Network, inputs: &[(&FeatureMap, &Instruction)], gold: &[usize], delta: f64) -> Result<RsChunk> {
    let enc = model.encoder.as_ref().expect("checked by caller");
    let instructions: Vec<Instruction> = inputs.iter().map(|(_, i)| (*i).clone()).collect();
    let rows = enc.gate_rows(&instructions)?;
    let width = enc.layout.len();
    let gates = Tensor::new(vec![rows.len(), width], rows.concat())?;
    let logits = model.logits_with_gate_rows(inputs, &gates)?;
    let pred: Vec<usize> = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
    let lp = |g: &Tensor, y: &[usize]| gate_log_probs(model, inputs, g, y);
    let fd = fd_gate_sensitivities(lp, &gates, &pred, delta)?;
    let gold = fd_gate_sensitivities(lp, &gates, gold, delta)?;

    // The analytic slope is taken at each stencil's midpoint, which is the gate
    // itself for interior gates and the one-sided midpoint after clamping.
    let input = model.batch_input(inputs)?;
    let (m, width) = (gates.rows(), gates.cols());
    let mut analytic = vec![vec![0.0; width]; m];
    for j in 0..width {
        let mut centered = gates.clone();
        for i in 0..m {
            let v = gates.at(i, j);
            centered.data_mut()[i * width + j] = 0.5 * ((v - delta).max(0.0) + (v + delta).min(1.0));
        }
        let mut tape = Tape::new();
        let g = tape.leaf("gates", centered.clone());
        let out = model.forward_tape(&mut tape, &input, GateSource::Fixed(g), TrainPolicy::FROZEN)?;
        let ls = tape.log_softmax(out.logits);
        let picked = tape.gather(ls, &pred)?;
        let total = tape.sum(picked);
        let grads = tape.backward(total)?;
        if let Some(dg) = grads.get(g) {
            for (i, row) in analytic.iter_mut().enumerate() {
                row[j] = dg.at(i, j).abs();
            }
        }
    }
    Ok(RsChunk { fd, analytic, gold })
}

/// Reliance sensitivity of every gate under the given instruction renders.
pub fn reliance_sensitivity(
    model: &Network,
    samples: &[Sample],
    renders: &[Instruction],
    delta: f64,
) -> Result<RelianceSensitivity> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::Contract(format!("RS delta must be in (0, 0.5), got {delta}")));
    }
    let enc = model
        .encoder
        .as_ref()
        .ok_or_else(|| Error::Gating(format!("`{}` has no gates", model.method)))?;
    let inputs = paired(samples, renders)?;
    let indexed: Vec<(usize, (&FeatureMap, &Instruction))> = inputs.into_iter().enumerate().collect();
    let chunks = par_chunks(&indexed, |chunk| {
        let inp: Vec<(&FeatureMap, &Instruction)> = chunk.iter().map(|(_, p)| *p).collect();
        let gold: Vec<usize> = chunk.iter().map(|(i, _)| samples[*i].y).collect();
        Ok(vec![rs_chunk(model, &inp, &gold, delta)?])
    })?;
    let width = enc.layout.len();
    let mut sums = [vec![0.0; width], vec![0.0; width], vec![0.0; width]];
    for c in &chunks {
        for (k, rows) in [&c.fd, &c.analytic, &c.gold].into_iter().enumerate() {
            for row in rows {
                for (s, v) in sums[k].iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
    }
    let n = samples.len() as f64;
    let to_map = |v: &[f64]| -> BTreeMap<GroupId, f64> {
        enc.layout.iter().cloned().zip(v.iter().map(|s| s / n)).collect()
    };
    Ok(RelianceSensitivity {
        fd: to_map(&sums[0]),
        analytic: to_map(&sums[1]),
        gold_fd: to_map(&sums[2]),
    })
}

/// Mean RS over core groups divided by mean RS over spurious groups.
pub fn core_spurious_ratio(rs: &BTreeMap<GroupId, f64>, layout: &[GroupId], roles: &[GateRole]) -> Result<f64> {
    let mean = |role: GateRole| -> Result<f64> {
        let vals: Vec<f64> = layout
            .iter()
            .zip(roles)
            .filter(|(_, r)| **r == role)
            .map(|(g, _)| rs.get(g).copied().ok_or_else(|| Error::Contract(format!("no RS for `{g}`"))))
            .collect::<Result<_>>()?;
        if vals.is_empty() {
            return Err(Error::Contract(format!("no {role:?} groups")));
        }
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(mean(GateRole::Core)? / mean(GateRole::Spurious)?)
}

pub fn predictions<C: Classifier + ?Sized>(model: &C, inputs: &[(&FeatureMap, &Instruction)]) -> Result<Vec<usize>> {
    par_chunks(inputs, |chunk| model.predict_batch(chunk))
}

/// Fraction of samples whose prediction survives `intervention`.
pub fn decision_stability<C: Classifier + ?Sized>(
    model: &C,
    samples: &[Sample],
    instructions: &[Instruction],
    intervention: impl Fn(&Sample) -> Result<Sample>,
) -> Result<f64> {
    let changed: Vec<Sample> = samples.iter().map(&intervention).collect::<Result<_>>()?;
    let before = predictions(model, &paired(samples, instructions)?)?;
    let after = predictions(model, &paired(&changed, instructions)?)?;
    Ok(agreement(&before, &after))
}

pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    same as f64 / a.len().max(1) as f64
}

/// Predictions at each suppression strength of `groups`, one vector per strength.
pub fn suppression_predictions<C: Classifier + ?Sized>(
    model: &C,
    samples: &[Sample],
    instructions: &[Instruction],
    groups: &[GroupId],
    strengths: &[f64],
) -> Result<Vec<Vec<usize>>> {
    if strengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config_key("strengths", "must be strictly ascending"));
    }
    strengths
        .iter()
        .map(|&s| {
            let changed: Vec<Sample> = samples.iter().map(|x| suppress(x, groups, s)).collect::<Result<_>>()?;
            predictions(model, &paired(&changed, instructions)?)
        })
        .collect()
}

/// `(strength, accuracy on y)` for each strength.
pub fn degradation_curve<C: Classifier + ?Sized>(
    model: &C,
    samples: &[Sample],
    instructions: &[Instruction],
    groups: &[GroupId],
    strengths: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let preds = suppression_predictions(model, samples, instructions, groups, strengths)?;
    Ok(curve_from_predictions(samples, strengths, &preds))
}

pub fn curve_from_predictions(samples: &[Sample], strengths: &[f64], preds: &[Vec<usize>]) -> Vec<(f64, f64)> {
    let labels: Vec<usize> = samples.iter().map(|s| s.y).collect();
    strengths
        .iter()
        .zip(preds)
        .map(|(&s, p)| (s, agreement(p, &labels)))
        .collect()
}

/// Plug-in MI in nats from an (unnormalized) joint count or probability table.
pub fn mutual_information_from_joint(joint: &[Vec<f64>]) -> Result<f64> {
    let total: f64 = joint.iter().flatten().sum();
    if !(total > 0.0) || joint.iter().flatten().any(|v| *v < 0.0) {
        return Err(Error::Contract("joint table must be non-negative with positive mass".into()));
    }
    let cols = joint.first().map_or(0, Vec::len);
    if joint.iter().any(|r| r.len() != cols) {
        return Err(Error::Contract("ragged joint table".into()));
    }
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / total).collect();
    let py: Vec<f64> = (0..cols).map(|j| joint.iter().map(|r| r[j]).sum::<f64>() / total).collect();
    let mut mi = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                let p = c / total;
                mi += p * (p / (px[i] * py[j])).ln();
            }
        }
    }
    Ok(mi)
}

/// Plug-in MI between two discrete series.
pub fn mutual_information(x: &[usize], y: &[usize]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("series lengths {} and {} differ", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::Contract("empty series".into()));
    }
    let xs: Vec<usize> = dense_codes(x);
    let ys: Vec<usize> = dense_codes(y);
    let nx = xs.iter().max().map_or(0, |m| m + 1);
    let ny = ys.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![vec![0.0; ny]; nx];
    for (a, b) in xs.iter().zip(&ys) {
        joint[*a][*b] += 1.0;
    }
    mutual_information_from_joint(&joint)
}

fn dense_codes(x: &[usize]) -> Vec<usize> {
    let mut levels: Vec<usize> = x.to_vec();
    levels.sort_unstable();
    levels.dedup();
    x.iter().map(|v| levels.binary_search(v).expect("present")).collect()
}

/// Plug-in Shannon entropy in nats.
pub fn entropy(x: &[usize]) -> Result<f64> {
    mutual_information(x, x)
}

/// Equal-frequency quantization: rank `r` of `n` goes to bin `r·q/n`; ties broken by position.
pub fn equal_frequency_bins(values: &[f64], q: usize) -> Result<Vec<usize>> {
    if q == 0 {
        return Err(Error::Contract("need at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value to quantize".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let n = values.len();
    let mut bins = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        bins[i] = rank * q / n;
    }
    Ok(bins)
}

/// Mean over a group's coordinates of MI(quantized coordinate, y).
pub fn group_mutual_information(samples: &[Sample], group: &GroupId, bins: usize) -> Result<f64> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty sample set".into()))?;
    let dim = first
        .features
        .get(group)
        .ok_or_else(|| Error::config_key("groups", format!("unknown group `{group}`")))?
        .len();
    let labels: Vec<usize> = samples.iter().map(|s| s.y).collect();
    let mut total = 0.0;
    for d in 0..dim {
        let col: Vec<f64> = samples.iter().map(|s| s.features[group].data()[d]).collect();
        total += mutual_information(&equal_frequency_bins(&col, bins)?, &labels)?;
    }
    Ok(total / dim as f64)
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats, `0·ln 0 = 0`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Contract("distributions must share a non-empty support".into()));
    }
    for d in [p, q] {
        if d.iter().any(|v| *v < 0.0 || !v.is_finite()) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract("argument is not a probability distribution".into()));
        }
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Full,
    CoreOnly,
    SpuriousOnly,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::Full, MaskMode::CoreOnly, MaskMode::SpuriousOnly];

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Full => "full",
            MaskMode::CoreOnly => "core_only",
            MaskMode::SpuriousOnly => "spurious_only",
        }
    }

    fn keeps(self, role: FeatureRole) -> bool {
        match self {
            MaskMode::Full => true,
            MaskMode::CoreOnly => role == FeatureRole::Core,
            MaskMode::SpuriousOnly => role == FeatureRole::Spurious,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub jsd: f64,
    pub l2: f64,
}

/// Pairwise separation of label-wise mean feature vectors after masking.
///
/// `l2` is the mean pairwise Euclidean distance between label means. `jsd`
/// normalizes each mean's absolute values into a distribution and averages
/// pairwise JSD; an all-zero mean maps to the uniform distribution.
pub fn label_separability(
    samples: &[Sample],
    roles: &[(GroupId, FeatureRole)],
    num_classes: usize,
    mode: MaskMode,
) -> Result<Separability> {
    if samples.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let width: usize = roles
        .iter()
        .map(|(g, _)| samples[0].features.get(g).map_or(0, Tensor::len))
        .sum();
    let mut sums = vec![vec![0.0; width]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for s in samples {
        if s.y >= num_classes {
            return Err(Error::Label {
                label: s.y,
                classes: num_classes,
            });
        }
        counts[s.y] += 1;
        let mut off = 0;
        for (g, role) in roles {
            let f = s
                .features
                .get(g)
                .ok_or_else(|| Error::Input(format!("sample lacks group `{g}`")))?;
            if mode.keeps(*role) {
                for (acc, v) in sums[s.y][off..off + f.len()].iter_mut().zip(f.data()) {
                    *acc += v;
                }
            }
            off += f.len();
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("label {k} has no samples")));
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    let dists: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            let total: f64 = m.iter().map(|v| v.abs()).sum();
            if total > 0.0 {
                m.iter().map(|v| v.abs() / total).collect()
            } else {
                vec![1.0 / m.len() as f64; m.len()]
            }
        })
        .collect();
    let (mut l2, mut js, mut pairs) = (0.0, 0.0, 0usize);
    for a in 0..num_classes {
        for b in a + 1..num_classes {
            l2 += means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            js += jsd(&dists[a], &dists[b])?;
            pairs += 1;
        }
    }
    Ok(Separability {
        jsd: js / pairs as f64,
        l2: l2 / pairs as f64,
    })
}

/// Everything the report command emits, keyed for stable serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub manifest_hash: String,
    pub gmr: BTreeMap<GroupId, f64>,
    /// Canonical (finite-difference, predicted-label) RS by condition and group.
    pub rs: BTreeMap<Condition, BTreeMap<GroupId, f64>>,
    pub rs_analytic: BTreeMap<Condition, BTreeMap<GroupId, f64>>,
    pub rs_gold_label: BTreeMap<Condition, BTreeMap<GroupId, f64>>,
    pub rs_core_spurious_ratio: BTreeMap<Condition, f64>,
    pub rs_fd_analytic_max_rel_gap: f64,
    pub stability: BTreeMap<String, f64>,
    pub degradation: BTreeMap<String, Vec<(f64, f64)>>,
    pub accuracy: BTreeMap<String, f64>,
    pub mi_table: BTreeMap<GroupId, f64>,
    pub separability: BTreeMap<MaskMode, Separability>,
    pub lambda_dominance: f64,
    pub base_checksum_stable: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mi_exact_cases() {
        let x = [0, 1, 0, 1];
        assert!((mutual_information(&x, &x).unwrap() - 2f64.ln()).abs() < 1e-12);
        let joint = vec![vec![0.1, 0.3], vec![0.15, 0.45]];
        assert!(mutual_information_from_joint(&joint).unwrap().abs() < 1e-12);
        assert!(mutual_information(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn jsd_exact_cases() {
        assert_eq!(jsd(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bins_are_equal_frequency() {
        let v: Vec<f64> = (0..80).map(|i| ((i * 37) % 80) as f64).collect();
        let b = equal_frequency_bins(&v, 8).unwrap();
        for k in 0..8 {
            assert_eq!(b.iter().filter(|&&x| x == k).count(), 10);
        }
    }

    #[test]
    fn gmr_hand_pinned() {
        let layout = vec![GroupId::from("a"), GroupId::from("b")];
        let g = gmr_from_rows(&layout, &[vec![1.0, 0.5]], &[vec![0.0, 0.5]]).unwrap();
        assert_eq!(g[&layout[0]], 1.0);
        assert_eq!(g[&layout[1]], 0.0);
        assert!(gmr_from_rows(&layout, &[], &[]).is_err());
    }

    #[test]
    fn clamped_stencil() {
        let f = |g: f64| 3.0 * g;
        assert!((clamped_difference(f, 0.0, 0.05) - 3.0).abs() < 1e-12);
        assert!((clamped_difference(f, 1.0, 0.05) - 3.0).abs() < 1e-12);
        assert!((clamped_difference(|g| g * g, 0.5, 0.05) - 1.0).abs() < 1e-12);
    }
}
