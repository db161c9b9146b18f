//! Manifest-driven experiment runs: data generation, base pretraining,
//! training every method, and the report bundle.
//!
//! Every artifact embeds the manifest hash (SHA-256 over the manifest, the
//! dataset spec, the training config and the effective seed). Nothing time-
//! or host-dependent is written, so identical manifests give identical bundles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::GroupId;
use crate::error::{Error, Result};
use crate::instructions::{Condition, Instruction, TemplateBank, TemplateSplit};
use crate::metrics::{self, MaskMode, MetricsReport};
use crate::model::{pretrain_base, Method, ModelConfig, Network, PretrainConfig};
use crate::synthdata::{generate_dataset, toml_error, Dataset, DatasetSpec, FeatureRole};
use crate::training::{train, TrainReport, TrainingConfig};

pub const REPORT_SCHEMA: &str = "filora.report.v1";

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn default_methods() -> Vec<String> {
    Method::TRAINED.iter().map(|m| m.name().to_string()).collect()
}

fn default_strengths() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_renders() -> usize {
    200
}

fn default_delta() -> f64 {
    metrics::DEFAULT_RS_DELTA
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Relative paths resolve against the manifest's directory.
    pub dataset_spec: PathBuf,
    pub training_config: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "default_strengths")]
    pub strengths: Vec<f64>,
    /// Held-out renders per condition used by the gate and reliance metrics.
    #[serde(default = "default_renders")]
    pub eval_renders: usize,
    #[serde(default = "default_delta")]
    pub rs_delta: f64,
    #[serde(default = "default_true")]
    pub svg: bool,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(toml_error)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// Command-line overrides applied on top of a manifest.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub methods: Option<Vec<String>>,
    pub strengths: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub manifest: Manifest,
    pub dataset_spec: DatasetSpec,
    pub training: TrainingConfig,
    pub methods: Vec<Method>,
    pub out: PathBuf,
    pub hash: String,
    pub bank: TemplateBank,
}

/// Result of training one method.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub method: Method,
    pub report: TrainReport,
    pub seconds: f64,
}

impl Experiment {
    pub fn load(manifest_path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest = Manifest::from_toml(&text)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        let spec_path = resolve(&manifest.dataset_spec);
        let spec_text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let cfg_path = resolve(&manifest.training_config);
        let cfg_text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let dataset_spec = DatasetSpec::from_toml(&spec_text)?;
        let training = TrainingConfig::from_toml(&cfg_text)?;
        let out = overrides.out.clone().unwrap_or_else(|| resolve(&manifest.output_dir));
        Self::assemble(manifest, dataset_spec, training, out, overrides, [&text, &spec_text, &cfg_text])
    }

    /// An experiment built from in-memory parts (hash covers their TOML forms).
    pub fn from_parts(
        manifest: Manifest,
        dataset_spec: DatasetSpec,
        training: TrainingConfig,
        overrides: &Overrides,
    ) -> Result<Self> {
        dataset_spec.validate()?;
        training.validate()?;
        let texts = [manifest.to_toml(), dataset_spec.to_toml(), training.to_toml()];
        let out = overrides.out.clone().unwrap_or_else(|| manifest.output_dir.clone());
        Self::assemble(
            manifest,
            dataset_spec,
            training,
            out,
            overrides,
            [&texts[0], &texts[1], &texts[2]],
        )
    }

    fn assemble(
        mut manifest: Manifest,
        dataset_spec: DatasetSpec,
        training: TrainingConfig,
        out: PathBuf,
        overrides: &Overrides,
        texts: [&String; 3],
    ) -> Result<Self> {
        if let Some(s) = overrides.seed {
            manifest.seed = s;
        }
        if let Some(m) = &overrides.methods {
            manifest.methods = m.clone();
        }
        if let Some(s) = &overrides.strengths {
            manifest.strengths = s.clone();
        }
        let methods = manifest
            .methods
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<Result<Vec<_>>>()?;
        if methods.contains(&Method::Base) {
            return Err(Error::config_key("methods", "`base` is pretrained, not trained"));
        }
        let s = &manifest.strengths;
        if s.is_empty() || s.iter().any(|v| !(0.0..=1.0).contains(v)) || s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config_key("strengths", "must be strictly ascending values in [0, 1]"));
        }
        if manifest.eval_renders == 0 {
            return Err(Error::config_key("eval_renders", "must be positive"));
        }
        if !(manifest.rs_delta > 0.0 && manifest.rs_delta < 0.5) {
            return Err(Error::config_key("rs_delta", "must lie in (0, 0.5)"));
        }
        let mut h = Sha256::new();
        for t in texts {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.update(manifest.seed.to_le_bytes());
        h.update(manifest.methods.join(",").as_bytes());
        for v in &manifest.strengths {
            h.update(v.to_bits().to_le_bytes());
        }
        Ok(Self {
            hash: hex::encode(h.finalize()),
            manifest,
            dataset_spec,
            training,
            methods,
            out,
            bank: TemplateBank::builtin(),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn checkpoint_path(&self, method: Method) -> PathBuf {
        self.path(&format!("{}.json", method.name()))
    }

    fn build_seed(&self, method: Method) -> u64 {
        self.manifest.seed.wrapping_mul(0x9e37_79b9).wrapping_add(method as u64)
    }

    /// Generates and writes the dataset if it is absent, else loads it.
    pub fn dataset(&self) -> Result<Dataset> {
        let path = self.path("dataset.jsonl");
        if path.exists() {
            return Dataset::load(&path);
        }
        self.gen_data()
    }

    pub fn gen_data(&self) -> Result<Dataset> {
        let d = generate_dataset(&self.dataset_spec, &self.bank)?;
        let mut buf = Vec::new();
        d.write_jsonl_tagged(&mut buf, Some(&self.hash))?;
        write_atomic(&self.path("dataset.jsonl"), &buf)?;
        Ok(d)
    }

    pub fn pretrain(&self) -> Result<Network> {
        let data = self.dataset()?;
        let base = pretrain_base(&data, self.manifest.model, &self.manifest.pretrain)?;
        base.save(&self.checkpoint_path(Method::Base), Some(&self.hash))?;
        Ok(base)
    }

    pub fn base(&self) -> Result<Network> {
        let path = self.checkpoint_path(Method::Base);
        if path.exists() {
            return Ok(Network::load(&path)?.0);
        }
        self.pretrain()
    }

    pub fn build(&self, base: &Network, method: Method) -> Result<Network> {
        base.build(method, self.bank.vocabulary(), self.build_seed(method))
    }

    pub fn train_method(&self, data: &Dataset, base: &Network, method: Method) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut net = self.build(base, method)?;
        let report = train(&mut net, &data.train, &self.training)
            .map_err(|e| Error::Training(format!("method `{method}`: {e}")))?;
        net.save(&self.checkpoint_path(method), Some(&self.hash))?;
        let mut csv = String::new();
        let _ = writeln!(csv, "# manifest_hash={}", self.hash);
        csv.push_str(&report.trace_csv());
        write_atomic(&self.path(&format!("{}_trace.csv", method.name())), csv.as_bytes())?;
        write_atomic(
            &self.path(&format!("{}_train.json", method.name())),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
        Ok(TrainOutcome {
            method,
            report,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn train_all(&self) -> Result<Vec<TrainOutcome>> {
        let data = self.dataset()?;
        let base = self.base()?;
        self.methods
            .iter()
            .map(|&m| self.train_method(&data, &base, m))
            .collect()
    }

    pub fn load_method(&self, method: Method) -> Result<Network> {
        let path = self.checkpoint_path(method);
        if !path.exists() {
            return Err(Error::Input(format!(
                "no checkpoint for method `{method}` at {}",
                path.display()
            )));
        }
        Ok(Network::load(&path)?.0)
    }

    /// `n` held-out renders of a condition, render seed `i` for the `i`-th.
    pub fn renders(&self, condition: Condition, n: usize) -> Result<Vec<Instruction>> {
        (0..n as u64)
            .map(|i| self.bank.render(condition, TemplateSplit::HeldOut, self.manifest.seed ^ (i << 8)))
            .collect()
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let data = self.dataset()?;
        let base = self.base()?;
        let mut nets = BTreeMap::new();
        for &m in &self.methods {
            nets.insert(m, self.load_method(m)?);
        }
        let report = compute_report(self, &data, &base, &nets)?;
        write_bundle(self, &report)?;
        Ok(report)
    }

    /// gen-data → pretrain → train → report.
    pub fn run_all(&self) -> Result<(Vec<TrainOutcome>, MetricsReport)> {
        self.gen_data()?;
        self.pretrain()?;
        let outcomes = self.train_all()?;
        let report = self.report()?;
        Ok((outcomes, report))
    }
}

fn role_table(spec: &DatasetSpec) -> Vec<(GroupId, FeatureRole)> {
    spec.groups.iter().map(|g| (g.id.clone(), g.role)).collect()
}

pub fn compute_report(
    exp: &Experiment,
    data: &Dataset,
    base: &Network,
    nets: &BTreeMap<Method, Network>,
) -> Result<MetricsReport> {
    let n_renders = exp.manifest.eval_renders;
    let neutral = exp.renders(Condition::Neutral, n_renders)?;
    let spurious = data.spec.group_ids(FeatureRole::Spurious);
    let strengths = &exp.manifest.strengths;
    let mut grid = strengths.clone();
    for anchor in [0.0, 1.0] {
        if !grid.contains(&anchor) {
            grid.push(anchor);
        }
    }
    grid.sort_by(f64::total_cmp);

    let mut report = MetricsReport {
        manifest_hash: exp.hash.clone(),
        gmr: BTreeMap::new(),
        rs: BTreeMap::new(),
        rs_analytic: BTreeMap::new(),
        rs_gold_label: BTreeMap::new(),
        rs_core_spurious_ratio: BTreeMap::new(),
        rs_fd_analytic_max_rel_gap: 0.0,
        stability: BTreeMap::new(),
        degradation: BTreeMap::new(),
        accuracy: BTreeMap::new(),
        mi_table: BTreeMap::new(),
        separability: BTreeMap::new(),
        lambda_dominance: 0.0,
        base_checksum_stable: true,
    };

    if let Some(f) = nets.get(&Method::Filora) {
        let focus = exp.renders(Condition::FocusCore, n_renders)?;
        let ignore = exp.renders(Condition::IgnoreCore, n_renders)?;
        report.gmr = metrics::gmr(f, &focus, &ignore)?;
        let layout = f.gate_layout();
        let roles = f.gate_roles();
        for c in Condition::ALL {
            let renders = exp.renders(c, n_renders)?;
            let rs = metrics::reliance_sensitivity(f, &data.eval, &renders, exp.manifest.rs_delta)?;
            report
                .rs_core_spurious_ratio
                .insert(c, metrics::core_spurious_ratio(&rs.fd, &layout, &roles)?);
            for (g, role) in layout.iter().zip(&roles) {
                if *role != crate::instructions::GateRole::Structural {
                    let (fd, an) = (rs.fd[g], rs.analytic[g]);
                    let gap = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
                    report.rs_fd_analytic_max_rel_gap = report.rs_fd_analytic_max_rel_gap.max(gap);
                }
            }
            report.rs.insert(c, rs.fd);
            report.rs_analytic.insert(c, rs.analytic);
            report.rs_gold_label.insert(c, rs.gold_fd);
        }
        report.base_checksum_stable &= f.base_checksum() == base.base_checksum();
        let trace = exp.path("filora_train.json");
        if trace.exists() {
            let text = std::fs::read_to_string(&trace).map_err(|e| Error::io(&trace, e))?;
            let tr: TrainReport = serde_json::from_str(&text)?;
            report.lambda_dominance = tr.lambda_dominance();
        }
    }
    if let Some(p) = nets.get(&Method::PromptOnly) {
        let fresh = exp.build(base, Method::PromptOnly)?;
        report.base_checksum_stable &= p.base_checksum() == fresh.base_checksum();
    }

    let mut evaluated: Vec<(String, &Network)> = vec![(Method::Base.name().to_string(), base)];
    evaluated.extend(nets.iter().map(|(m, n)| (m.name().to_string(), n)));
    for (name, net) in evaluated {
        let preds = metrics::suppression_predictions(net, &data.eval, &neutral, &spurious, &grid)?;
        let curve = metrics::curve_from_predictions(&data.eval, &grid, &preds);
        let at = |s: f64| grid.iter().position(|g| *g == s).expect("anchor present");
        report
            .stability
            .insert(name.clone(), metrics::agreement(&preds[at(0.0)], &preds[at(1.0)]));
        report.accuracy.insert(name.clone(), curve[at(0.0)].1);
        report.degradation.insert(
            name,
            curve.into_iter().filter(|(s, _)| strengths.contains(s)).collect(),
        );
    }

    for g in &data.spec.groups {
        report.mi_table.insert(
            g.id.clone(),
            metrics::group_mutual_information(&data.train, &g.id, metrics::DEFAULT_MI_BINS)?,
        );
    }
    let roles = role_table(&data.spec);
    for mode in MaskMode::ALL {
        report.separability.insert(
            mode,
            metrics::label_separability(&data.train, &roles, data.spec.num_classes, mode)?,
        );
    }
    Ok(report)
}

/// Baselines compared against FiLoRA for robustness.
pub const BASELINES: [Method; 3] = [Method::FullFineTune, Method::PlainLora, Method::PromptOnly];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Qualitative properties the report can decide on its own.
pub fn report_checks(report: &MetricsReport, spec: &DatasetSpec) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        })
    };
    let spurious = spec.group_ids(FeatureRole::Spurious);
    if !report.gmr.is_empty() {
        let min = spurious
            .iter()
            .filter_map(|g| report.gmr.get(g))
            .fold(f64::INFINITY, |a, b| a.min(*b));
        push("gate controllability", min >= 0.3, format!("min spurious GMR {min:.4} (need >= 0.3)"));
    }
    if let (Some(f), Some(n), Some(i)) = (
        report.rs_core_spurious_ratio.get(&Condition::FocusCore),
        report.rs_core_spurious_ratio.get(&Condition::Neutral),
        report.rs_core_spurious_ratio.get(&Condition::IgnoreCore),
    ) {
        push(
            "RS redistribution",
            f / n >= 1.2 && n / i >= 1.2,
            format!("core/spurious RS ratio FocusCore {f:.3} > Neutral {n:.3} > IgnoreCore {i:.3} (gaps x1.2)"),
        );
        push(
            "RS finite-difference vs analytic",
            report.rs_fd_analytic_max_rel_gap < 0.05,
            format!("max relative gap {:.5} (need < 0.05)", report.rs_fd_analytic_max_rel_gap),
        );
    }
    if let Some(fs) = report.stability.get(Method::Filora.name()) {
        let gaps: Vec<(String, f64)> = BASELINES
            .iter()
            .filter_map(|b| report.stability.get(b.name()).map(|s| (b.name().to_string(), fs - s)))
            .collect();
        if !gaps.is_empty() {
            let detail = gaps
                .iter()
                .map(|(b, g)| format!("{b} {g:+.4}"))
                .collect::<Vec<_>>()
                .join(", ");
            push(
                "robustness: stability gap",
                gaps.iter().all(|(_, g)| *g >= 0.10),
                format!("filora {fs:.4} minus baselines: {detail} (need >= 0.10)"),
            );
            let ours = &report.degradation[Method::Filora.name()];
            let dominates = BASELINES.iter().filter_map(|b| report.degradation.get(b.name())).all(|curve| {
                ours.iter()
                    .zip(curve)
                    .filter(|((s, _), _)| *s >= 0.5)
                    .all(|((_, a), (_, b))| a >= b)
            });
            push("robustness: degradation dominance", dominates, "filora accuracy >= each baseline at strength >= 0.5".into());
        }
    }
    if let (Some(f), Some(c), Some(s)) = (
        report.separability.get(&MaskMode::Full),
        report.separability.get(&MaskMode::CoreOnly),
        report.separability.get(&MaskMode::SpuriousOnly),
    ) {
        push(
            "separability ordering",
            f.l2 >= c.l2 && c.l2 >= s.l2 && s.l2 > 0.0,
            format!("l2 full {:.4} >= core_only {:.4} >= spurious_only {:.4} > 0", f.l2, c.l2, s.l2),
        );
    }
    if !report.gmr.is_empty() {
        push(
            "lambda dominance",
            report.lambda_dominance < 0.2,
            format!("epoch-1 mean |lambda L_gate| / mean L_cls = {:.4}", report.lambda_dominance),
        );
    }
    push(
        "frozen base",
        report.base_checksum_stable,
        "base checksums of filora/prompt_only unchanged".into(),
    );
    checks
}

fn csv_start(hash: &str, header: &str) -> String {
    format!("# manifest_hash={hash}\n{header}\n")
}

pub fn write_bundle(exp: &Experiment, report: &MetricsReport) -> Result<()> {
    let h = &exp.hash;
    let mut json = serde_json::to_value(report)?;
    json.as_object_mut()
        .expect("report is an object")
        .insert("schema".into(), REPORT_SCHEMA.into());
    write_atomic(&exp.path("report.json"), serde_json::to_string_pretty(&json)?.as_bytes())?;

    let mut gmr = csv_start(h, "group,gmr");
    for (g, v) in &report.gmr {
        let _ = writeln!(gmr, "{g},{v}");
    }
    write_atomic(&exp.path("gmr.csv"), gmr.as_bytes())?;

    let mut rs = csv_start(h, "condition,group,rs_fd,rs_analytic,rs_gold_label");
    for (c, groups) in &report.rs {
        for (g, v) in groups {
            let _ = writeln!(
                rs,
                "{c},{g},{v},{},{}",
                report.rs_analytic[c][g], report.rs_gold_label[c][g]
            );
        }
    }
    write_atomic(&exp.path("rs.csv"), rs.as_bytes())?;

    let mut ratio = csv_start(h, "condition,core_spurious_ratio");
    for (c, v) in &report.rs_core_spurious_ratio {
        let _ = writeln!(ratio, "{c},{v}");
    }
    write_atomic(&exp.path("rs_ratio.csv"), ratio.as_bytes())?;

    let mut stab = csv_start(h, "method,stability,accuracy");
    for (m, v) in &report.stability {
        let _ = writeln!(stab, "{m},{v},{}", report.accuracy[m]);
    }
    write_atomic(&exp.path("stability.csv"), stab.as_bytes())?;

    let mut deg = csv_start(h, "method,strength,accuracy");
    for m in &exp.methods {
        for (s, a) in &report.degradation[m.name()] {
            let _ = writeln!(deg, "{},{s},{a}", m.name());
        }
    }
    write_atomic(&exp.path("degradation.csv"), deg.as_bytes())?;

    let mut mi = csv_start(h, "rank,group,role,mi_nats");
    let mut ranked: Vec<(&GroupId, f64)> = report.mi_table.iter().map(|(g, v)| (g, *v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    for (i, (g, v)) in ranked.iter().enumerate() {
        let role = exp
            .dataset_spec
            .groups
            .iter()
            .find(|s| &s.id == *g)
            .map_or("unknown", |s| match s.role {
                FeatureRole::Core => "core",
                FeatureRole::Spurious => "spurious",
            });
        let _ = writeln!(mi, "{},{g},{role},{v}", i + 1);
    }
    write_atomic(&exp.path("mi.csv"), mi.as_bytes())?;

    let mut sep = csv_start(h, "mask_mode,metric,value");
    for (mode, s) in &report.separability {
        let _ = writeln!(sep, "{},jsd,{}", mode.name(), s.jsd);
        let _ = writeln!(sep, "{},l2,{}", mode.name(), s.l2);
    }
    write_atomic(&exp.path("separability.csv"), sep.as_bytes())?;

    let mut summary = format!("FiLoRA report\nmanifest_hash={h}\n\n");
    for c in report_checks(report, &exp.dataset_spec) {
        let _ = writeln!(summary, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let _ = writeln!(summary, "\naccuracy on y (neutral instruction, no intervention):");
    for (m, a) in &report.accuracy {
        let _ = writeln!(summary, "  {m:<12} {a:.4}");
    }
    write_atomic(&exp.path("summary.txt"), summary.as_bytes())?;

    if exp.manifest.svg {
        let curves: Vec<(&str, &[(f64, f64)])> = exp
            .methods
            .iter()
            .map(|m| (m.name(), report.degradation[m.name()].as_slice()))
            .collect();
        write_atomic(&exp.path("degradation.svg"), line_chart_svg(h, &curves).as_bytes())?;
        let bars: Vec<(&str, f64)> = exp
            .methods
            .iter()
            .map(|m| (m.name(), report.stability[m.name()]))
            .collect();
        write_atomic(&exp.path("stability.svg"), bar_chart_svg(h, &bars).as_bytes())?;
    }
    Ok(())
}

const PALETTE: [&str; 5] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e"];

/// Accuracy-vs-strength lines on a unit square.
pub fn line_chart_svg(hash: &str, curves: &[(&str, &[(f64, f64)])]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let x = |v: f64| pad + v * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<!-- manifest_hash={hash} -->\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">suppression strength</text>\n\
         <text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">accuracy</text>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad,
        w / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0
    );
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|(a, b)| format!("{:.2},{:.2}", x(*a), y(*b))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            w - pad - 90.0,
            pad + 14.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn bar_chart_svg(hash: &str, bars: &[(&str, f64)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let slot = (w - 2.0 * pad) / bars.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<!-- manifest_hash={hash} -->\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad,
        h - pad
    );
    for (i, (name, v)) in bars.iter().enumerate() {
        let bh = v.clamp(0.0, 1.0) * (h - 2.0 * pad);
        let x0 = pad + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            "<rect x=\"{x0:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"{}\"/>",
            h - pad - bh,
            slot * 0.7,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{name} {v:.3}</text>",
            x0 + slot * 0.35,
            h - pad + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Outcome of a single ad-hoc intervention query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub method: String,
    pub sample: usize,
    pub instruction: String,
    pub strength: f64,
    pub y: usize,
    pub before: usize,
    pub after: usize,
    pub logits_before: Vec<f64>,
    pub logits_after: Vec<f64>,
}

/// Suppresses the spurious groups of one evaluation sample and reports both predictions.
pub fn intervene(
    exp: &Experiment,
    method: Method,
    sample: usize,
    strength: f64,
    instruction: Option<&str>,
) -> Result<InterventionResult> {
    let data = exp.dataset()?;
    let net = if method == Method::Base {
        exp.base()?
    } else {
        exp.load_method(method)?
    };
    let s = data
        .eval
        .get(sample)
        .ok_or_else(|| Error::Input(format!("eval sample {sample} out of range ({})", data.eval.len())))?;
    let inst = match instruction {
        Some(t) => Instruction::from_text(t)?,
        None => exp.renders(Condition::Neutral, 1)?.remove(0),
    };
    let changed = crate::synthdata::suppress(s, &data.spec.group_ids(FeatureRole::Spurious), strength)?;
    let lb = net.forward(&s.features, &inst)?;
    let la = net.forward(&changed.features, &inst)?;
    Ok(InterventionResult {
        method: method.name().to_string(),
        sample,
        instruction: inst.text(),
        strength,
        y: s.y,
        before: crate::ops::argmax(lb.data()),
        after: crate::ops::argmax(la.data()),
        logits_before: lb.into_data(),
        logits_after: la.into_data(),
    })
}

/// Reference manifest, dataset spec and training config as TOML files in `dir`.
pub fn write_reference_configs(dir: &Path) -> Result<PathBuf> {
    let manifest = reference_manifest();
    write_atomic(&dir.join("dataset.toml"), DatasetSpec::reference().to_toml().as_bytes())?;
    write_atomic(&dir.join("training.toml"), TrainingConfig::reference().to_toml().as_bytes())?;
    let path = dir.join("manifest.toml");
    write_atomic(&path, manifest.to_toml().as_bytes())?;
    Ok(path)
}

pub fn reference_manifest() -> Manifest {
    Manifest {
        dataset_spec: "dataset.toml".into(),
        training_config: "training.toml".into(),
        methods: default_methods(),
        output_dir: "out".into(),
        seed: 7,
        strengths: default_strengths(),
        eval_renders: default_renders(),
        rs_delta: default_delta(),
        svg: true,
        // A short pretrain leaves the base reliant on both kinds of group.
        pretrain: PretrainConfig {
            steps: 20,
            ..PretrainConfig::default()
        },
        model: ModelConfig::default(),
    }
}
