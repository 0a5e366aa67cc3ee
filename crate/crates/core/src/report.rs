//! Synthetic fixtures with planted geometry, and the end-to-end pipeline that
//! turns an activation dump into curve, phase, probe, lens and comparison
//! files.
//!
//! Output is deterministic: maps are ordered, floats are printed with the
//! shortest round-trip representation, and nothing time- or host-dependent is
//! written. CSV files start with one `#` comment line carrying the software
//! version and the run manifest; JSON files wrap their payload as
//! `{"meta": ..., "data": ...}`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actdump::{
    read_dump, read_unembedding, ActivationSet, ChoiceTokens, ConditionLabel, ContextKind, DumpError, TruthSide,
    UnembeddingBundle,
};
use crate::exec::Exec;
use crate::geometry::{self, CurveOptions, LayerCurve, MagnitudeMode, PhaseOutcome, PhaseParams, Quantity};
use crate::lens::{self, LensCurve, LensMode, LensOptions};
use crate::probes::{self, ProbeFamily, ProbeHyper, ProbeOptions, ProbeReport};
use crate::stats::{self, Alternative, ComparisonResult, CompareOptions, Label, Threshold};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("infeasible synthetic spec: {0}")]
    Synthetic(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model {model}, dataset {dataset}, layer {layer}, condition {condition}: {message}")]
    Cell { model: String, dataset: String, layer: String, condition: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

// ---------------------------------------------------------------------------
// Synthetic fixtures

/// Planted per-layer geometry for a synthetic activation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub model_name: String,
    pub n_statements: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    /// Planted angle between with- and without-context truth vectors, per layer.
    pub theta_deg: Vec<f64>,
    /// Planted `‖v_c‖² / ‖v_nc‖²`, per layer.
    pub rel_magnitude: Vec<f64>,
    /// Magnitude of each component of `v_nc`; `‖v_nc‖ = scale·√d`. This is
    /// also the class separation seen by the probes.
    pub component_scale: f64,
    /// Expected noise-vector norm relative to `‖v_nc‖`, added to every activation.
    pub noise_rel: f64,
    /// Half-width of the uniform context-induced shift of the base activation.
    pub context_shift: f64,
    /// Random-context conditions to include.
    pub random_kinds: Vec<ContextKind>,
    /// Random contexts get `θ·a` and `1 + (rm − 1)·a`.
    pub random_attenuation: f64,
}

impl SyntheticSpec {
    pub fn constant(n_statements: usize, n_layers: usize, hidden_dim: usize, theta_deg: f64, rel_magnitude: f64) -> Self {
        Self {
            model_name: "synthetic".to_string(),
            n_statements,
            n_layers,
            hidden_dim,
            theta_deg: vec![theta_deg; n_layers],
            rel_magnitude: vec![rel_magnitude; n_layers],
            component_scale: 0.25,
            noise_rel: 0.0,
            context_shift: 0.25,
            random_kinds: Vec::new(),
            random_attenuation: 0.5,
        }
    }

    /// Orthogonal early layers, convergence, then a flat stretch; magnitude
    /// rising linearly from 1 to 1.4; every random-context kind present.
    pub fn three_phase(n_statements: usize, n_layers: usize, hidden_dim: usize) -> Self {
        let rel_magnitude = (0..n_layers)
            .map(|l| 1.0 + 0.4 * l as f64 / (n_layers.max(2) - 1) as f64)
            .collect();
        Self {
            theta_deg: three_phase_curve(n_layers, 8, 16, 90.0, 25.0),
            rel_magnitude,
            noise_rel: 0.05,
            random_kinds: ContextKind::RANDOM.to_vec(),
            ..Self::constant(n_statements, n_layers, hidden_dim, 0.0, 1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ReportError::Synthetic(m));
        if self.n_statements == 0 || self.n_layers == 0 || self.hidden_dim == 0 {
            return fail("n_statements, n_layers and hidden_dim must be positive".into());
        }
        if self.theta_deg.len() != self.n_layers || self.rel_magnitude.len() != self.n_layers {
            return fail(format!("planted curves must have {} entries", self.n_layers));
        }
        if let Some(t) = self.theta_deg.iter().find(|t| !(0.0..=180.0).contains(*t)) {
            return fail(format!("planted angle {t} outside [0, 180]"));
        }
        if self.hidden_dim < 2 && self.theta_deg.iter().any(|&t| t != 0.0 && t != 180.0) {
            return fail("a nonzero angle needs hidden_dim >= 2".into());
        }
        if let Some(r) = self.rel_magnitude.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return fail(format!("planted relative magnitude {r} must be positive"));
        }
        if !(self.noise_rel.is_finite() && self.noise_rel >= 0.0) {
            return fail(format!("noise {} must be non-negative", self.noise_rel));
        }
        if !(self.component_scale.is_finite() && self.component_scale > 0.0) {
            return fail("component_scale must be positive".into());
        }
        if !(self.context_shift.is_finite() && self.context_shift >= 0.0) {
            return fail("context_shift must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.random_attenuation) {
            return fail("random_attenuation must lie in [0, 1]".into());
        }
        if self.random_kinds.iter().any(|k| !ContextKind::RANDOM.contains(k)) {
            return fail("random_kinds may only hold random-context kinds".into());
        }
        Ok(())
    }

    fn planted(&self, kind: ContextKind, layer: usize) -> (f64, f64) {
        let (theta, rm) = (self.theta_deg[layer], self.rel_magnitude[layer]);
        if kind == ContextKind::Relevant {
            (theta, rm)
        } else {
            let a = self.random_attenuation;
            (theta * a, 1.0 + (rm - 1.0) * a)
        }
    }
}

/// `high` through layer `flat_until`, linear down to `low` at layer
/// `converged_at`, then `low`. Layers are 1-based.
pub fn three_phase_curve(n_layers: usize, flat_until: usize, converged_at: usize, high: f64, low: f64) -> Vec<f64> {
    (1..=n_layers)
        .map(|l| {
            if l <= flat_until {
                high
            } else if l >= converged_at {
                low
            } else {
                let t = (l - flat_until) as f64 / (converged_at - flat_until) as f64;
                high + (low - high) * t
            }
        })
        .collect()
}

/// Values on a 2⁻⁸ grid in `[-half_width, half_width]`, exactly representable in f32.
fn grid_vector(rng: &mut ChaCha8Rng, dim: usize, half_width: f64) -> Vec<f64> {
    let steps = (half_width * 256.0).floor() as i64;
    (0..dim).map(|_| rng.random_range(-steps..=steps) as f64 / 256.0).collect()
}

/// A vector orthogonal to `u` (whose entries share one magnitude), built by
/// flipping the signs of a balanced half of its entries. The dot product is
/// exactly zero in floating point.
fn orthogonal_partner(u: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = u.len();
    let half = d / 2;
    let mut signs: Vec<f64> = (0..2 * half).map(|i| if i < half { 1.0 } else { -1.0 }).collect();
    signs.shuffle(rng);
    signs.resize(d, 0.0);
    u.iter().zip(&signs).map(|(a, s)| a * s).collect()
}

fn planted_vector(u: &[f64], w: &[f64], theta_deg: f64, rel_magnitude: f64) -> Vec<f64> {
    let scale = rel_magnitude.sqrt();
    let rad = theta_deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let norm_u = geometry_norm(u);
    let norm_w = geometry_norm(w);
    u.iter()
        .zip(w)
        .map(|(a, b)| {
            let along_w = if norm_w > 0.0 { sin * b * (norm_u / norm_w) } else { 0.0 };
            scale * (cos * a + along_w)
        })
        .collect()
}

fn geometry_norm(v: &[f64]) -> f64 {
    crate::numeric::squared_norm(v).sqrt()
}

/// Activation set whose truth vectors realize the planted angle and magnitude
/// at every layer, plus isotropic Gaussian noise.
///
/// Per layer a shared direction `u` with `‖u‖ = scale·√d` is drawn. Each
/// statement gets a base activation `b` and its own direction `w ⊥ u`; the
/// with-context truth vector is `u` rotated by θ towards `w`, scaled by
/// `√rm`. True and false activations sit at `b ± v/2`. All instruction flags
/// are set.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<ActivationSet> {
    spec.validate()?;
    let (k_n, l_n, d) = (spec.n_statements, spec.n_layers, spec.hidden_dim);
    let sigma = spec.noise_rel * spec.component_scale;
    let noise = Normal::new(0.0, sigma).map_err(|e| ReportError::Synthetic(e.to_string()))?;

    let context_kinds: Vec<ContextKind> =
        std::iter::once(ContextKind::Relevant).chain(spec.random_kinds.iter().copied()).collect();
    let mut conditions = ConditionLabel::BASE.to_vec();
    for &kind in &spec.random_kinds {
        conditions.push(ConditionLabel::new(TruthSide::True, kind));
        conditions.push(ConditionLabel::new(TruthSide::False, kind));
    }
    let row_of = |side: TruthSide, kind: ContextKind| {
        conditions
            .iter()
            .position(|c| *c == ConditionLabel::new(side, kind))
            .expect("condition listed above")
    };
    let rows: Vec<(ContextKind, usize, usize)> = std::iter::once(ContextKind::None)
        .chain(context_kinds.iter().copied())
        .map(|k| (k, row_of(TruthSide::True, k), row_of(TruthSide::False, k)))
        .collect();

    let mut tensor = vec![0.0f64; conditions.len() * k_n * l_n * d];
    let offset = |c: usize, k: usize, l: usize| ((c * k_n + k) * l_n + l) * d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..l_n {
        let u: Vec<f64> = (0..d)
            .map(|_| if rng.random_bool(0.5) { spec.component_scale } else { -spec.component_scale })
            .collect();
        for k in 0..k_n {
            let base = grid_vector(&mut rng, d, 0.5);
            for &(kind, row_t, row_f) in &rows {
                let (v, shift) = if kind == ContextKind::None {
                    (u.clone(), vec![0.0; d])
                } else {
                    let (theta, rm) = spec.planted(kind, l);
                    let w = orthogonal_partner(&u, &mut rng);
                    (planted_vector(&u, &w, theta, rm), grid_vector(&mut rng, d, spec.context_shift))
                };
                for j in 0..d {
                    let centre = base[j] + shift[j];
                    tensor[offset(row_t, k, l) + j] = centre + v[j] / 2.0;
                    tensor[offset(row_f, k, l) + j] = centre - v[j] / 2.0;
                }
            }
        }
    }
    if sigma > 0.0 {
        tensor.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    }
    let tensor = tensor.into_iter().map(|x| x as f32).collect();
    let ids = (0..k_n).map(|k| format!("syn-{k:05}")).collect();
    Ok(ActivationSet::with_all_ok(spec.model_name.clone(), l_n, d, ids, conditions, tensor)?)
}

/// Small random unembedding matching a synthetic set. Token 0 is the true
/// choice and token 1 the false choice.
pub fn synthetic_unembedding(vocab_size: usize, hidden_dim: usize, seed: u64) -> Result<UnembeddingBundle> {
    if vocab_size < 2 {
        return Err(ReportError::Synthetic("vocabulary needs at least two tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrix = (0..vocab_size * hidden_dim)
        .map(|_| rng.random_range(-256i32..=256) as f32 / 256.0)
        .collect();
    Ok(UnembeddingBundle::new(vocab_size, hidden_dim, matrix, ChoiceTokens { true_token: 0, false_token: 1 })?)
}

// ---------------------------------------------------------------------------
// Configuration

/// Which layers comparison tables are computed at. Curves always span every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum LayerSelection {
    #[default]
    Final,
    All,
    /// 1-based, inclusive.
    Range(usize, usize),
}

impl LayerSelection {
    /// 0-based layer indices for a model with `n_layers` layers.
    pub fn resolve(self, n_layers: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelection::Final => Ok(vec![n_layers - 1]),
            LayerSelection::All => Ok((0..n_layers).collect()),
            LayerSelection::Range(lo, hi) => {
                if lo == 0 || hi < lo || hi > n_layers {
                    return Err(ReportError::Config(format!(
                        "layer range {lo}-{hi} outside 1-{n_layers}"
                    )));
                }
                Ok((lo - 1..hi).collect())
            }
        }
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::Final => f.write_str("final"),
            LayerSelection::All => f.write_str("all"),
            LayerSelection::Range(lo, hi) if lo == hi => write!(f, "{lo}"),
            LayerSelection::Range(lo, hi) => write!(f, "{lo}-{hi}"),
        }
    }
}

impl FromStr for LayerSelection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("expected final, all, N or A-B, got {s:?}");
        match s {
            "final" => Ok(LayerSelection::Final),
            "all" => Ok(LayerSelection::All),
            _ => {
                let (lo, hi) = s.split_once('-').unwrap_or((s, s));
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                if lo == 0 || hi < lo {
                    return Err(bad());
                }
                Ok(LayerSelection::Range(lo, hi))
            }
        }
    }
}

impl From<LayerSelection> for String {
    fn from(s: LayerSelection) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for LayerSelection {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
    Both,
}

impl OutputFormat {
    fn csv(self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }

    fn json(self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "both" => Ok(OutputFormat::Both),
            _ => Err(format!("expected csv, json or both, got {s:?}")),
        }
    }
}

/// Which parts of the report to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sections {
    /// θ curves and phase boundaries.
    pub theta: bool,
    /// Relative-magnitude curves and the per-layer summary against 1.
    pub magnitude: bool,
    pub probes: bool,
    /// Needs an unembedding bundle.
    pub lens: bool,
    /// Relevant-vs-random comparison tables.
    pub compare: bool,
}

impl Sections {
    pub const ALL: Sections = Sections { theta: true, magnitude: true, probes: true, lens: true, compare: true };
    pub const NONE: Sections = Sections { theta: false, magnitude: false, probes: false, lens: false, compare: false };
}

impl Default for Sections {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dump: Option<PathBuf>,
    pub unembed: Option<PathBuf>,
    /// Not part of the manifest, so reports written to different directories compare equal.
    #[serde(skip)]
    pub out_dir: PathBuf,
    pub dataset: String,
    pub format: OutputFormat,
    pub sections: Sections,
    pub alpha: f64,
    /// Tests per quantity for the Bonferroni threshold. Defaults to the
    /// number of comparisons this run makes per quantity.
    pub bonferroni_n: Option<usize>,
    /// Seeds the probe split and probe training.
    pub seed: u64,
    pub layers: LayerSelection,
    pub alternative: Alternative,
    pub magnitude_mode: MagnitudeMode,
    pub lens_mode: LensMode,
    pub lens_final_norm: bool,
    pub probe_families: Vec<ProbeFamily>,
    pub probe_context: ContextKind,
    pub probe_hyper: ProbeHyper,
    pub split_ratio: f64,
    pub phase_params: PhaseParams,
    pub filter_instruction: bool,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dump: None,
            unembed: None,
            out_dir: PathBuf::from("report"),
            dataset: "dataset".to_string(),
            format: OutputFormat::Csv,
            sections: Sections::ALL,
            alpha: 0.05,
            bonferroni_n: None,
            seed: 0,
            layers: LayerSelection::Final,
            alternative: Alternative::Greater,
            magnitude_mode: MagnitudeMode::Squared,
            lens_mode: LensMode::Ratio,
            lens_final_norm: false,
            probe_families: ProbeFamily::ALL.to_vec(),
            probe_context: ContextKind::None,
            probe_hyper: ProbeHyper::default(),
            split_ratio: 0.8,
            phase_params: PhaseParams::default(),
            filter_instruction: true,
            exec: Exec::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Report model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub probe_split: u64,
    pub probe_train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policies {
    pub zero_differences: String,
    pub wilcoxon_exact_max_n: usize,
    pub alternative: Alternative,
    pub magnitude_mode: MagnitudeMode,
    pub lens_mode: LensMode,
    pub lens_side: TruthSide,
    pub lens_final_norm: bool,
    pub lens_eps_den: f64,
    pub eps_zero_scale: f64,
    pub bonferroni_n: usize,
    pub bonferroni_n_combined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub software: String,
    pub version: String,
    pub model_name: String,
    pub dataset: String,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_statements_total: usize,
    pub n_statements_used: usize,
    pub contexts: Vec<ContextKind>,
    /// 1-based layers of the comparison tables.
    pub compared_layers: Vec<usize>,
    pub seeds: Seeds,
    pub policies: Policies,
    pub config: RunConfig,
}

/// One comparison cell: the kind is missing from the dump, the test could not
/// be run (e.g. too few valid pairs), or a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Cell {
    Absent,
    Undefined { reason: String },
    Value(ComparisonResult),
}

impl Cell {
    pub fn result(&self) -> Option<&ComparisonResult> {
        match self {
            Cell::Value(r) => Some(r),
            _ => None,
        }
    }

    fn render(&self, significant: impl Fn(&ComparisonResult) -> bool) -> String {
        match self {
            Cell::Absent => "absent".to_string(),
            Cell::Undefined { .. } => "n/a".to_string(),
            Cell::Value(r) => format!("{:.4}{}", r.mean_difference, if significant(r) { "*" } else { "" }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindComparison {
    pub kind: ContextKind,
    pub theta: Cell,
    pub rm: Cell,
    pub label_raw: Option<Label>,
    /// Both tests judged at `α / (2N)`.
    pub label_bonferroni: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub layer: usize,
    pub kinds: Vec<KindComparison>,
}

/// Relative magnitude at one layer tested two-sided against 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeSummary {
    pub layer: usize,
    pub quantity: Quantity,
    pub mean: Option<f64>,
    pub sem: Option<f64>,
    pub n: usize,
    pub p_value: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PhaseEntry {
    Computed(PhaseOutcome),
    Undefined { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensSection {
    pub lens: LensCurve,
    pub r_theta: Vec<Option<f64>>,
    pub r_rm: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub manifest: Manifest,
    /// Keyed `<quantity>_<context>`, e.g. `theta_relevant`.
    pub curves: BTreeMap<String, LayerCurve>,
    /// θ phase boundaries keyed by context.
    pub phases: BTreeMap<String, PhaseEntry>,
    pub probes: Vec<ProbeReport>,
    pub lens: Option<LensSection>,
    pub comparisons: Vec<ComparisonRow>,
    pub magnitude_summary: Vec<MagnitudeSummary>,
}

impl Report {
    /// Every combined label equals the classification of its own θ and
    /// magnitude cells at the raw threshold.
    pub fn labels_consistent(&self) -> bool {
        self.comparisons.iter().flat_map(|r| &r.kinds).all(|k| {
            let expected = match (k.theta.result(), k.rm.result()) {
                (Some(t), Some(m)) => Some(stats::classify(t, m, Threshold::Raw)),
                _ => None,
            };
            k.label_raw == expected
        })
    }
}

// ---------------------------------------------------------------------------
// Pipeline

struct CellContext<'a> {
    model: &'a str,
    dataset: &'a str,
}

impl CellContext<'_> {
    fn err(&self, layer: Option<usize>, condition: impl fmt::Display, message: impl fmt::Display) -> ReportError {
        ReportError::Cell {
            model: self.model.to_string(),
            dataset: self.dataset.to_string(),
            layer: layer.map_or_else(|| "all".to_string(), |l| l.to_string()),
            condition: condition.to_string(),
            message: message.to_string(),
        }
    }
}

fn with_n_tests(result: &ComparisonResult, n_tests: usize) -> ComparisonResult {
    let threshold = result.alpha / n_tests as f64;
    ComparisonResult {
        n_tests,
        significant_bonferroni: result.wilcoxon.p_value < threshold,
        ..result.clone()
    }
}

/// Compute every requested section for an in-memory set.
pub fn analyze(set: &ActivationSet, bundle: Option<&UnembeddingBundle>, config: &RunConfig) -> Result<Report> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(ReportError::Config(format!("alpha {} outside (0, 1)", config.alpha)));
    }
    if config.bonferroni_n == Some(0) {
        return Err(ReportError::Config("bonferroni_n must be positive".into()));
    }
    let sections = config.sections;
    if sections.lens && bundle.is_none() && config.unembed.is_some() {
        return Err(ReportError::Config("unembedding path given but no bundle loaded".into()));
    }
    let used = if config.filter_instruction { set.filter_instruction_following() } else { set.clone() };
    let cx = CellContext { model: set.model_name(), dataset: &config.dataset };
    if used.n_statements() == 0 {
        return Err(cx.err(None, "base", "no statement passes the instruction filter"));
    }
    let l_n = used.n_layers();
    let contexts: Vec<ContextKind> = std::iter::once(ContextKind::Relevant)
        .chain(ContextKind::RANDOM.into_iter().filter(|&k| used.has_context(k)))
        .collect();
    let random_present = contexts.len() - 1;
    let compared = config.layers.resolve(l_n)?;
    let n_tests = config.bonferroni_n.unwrap_or((random_present * compared.len()).max(1));
    let curve_opts = |context| CurveOptions { context, magnitude_mode: config.magnitude_mode, exec: config.exec };

    let mut curves = BTreeMap::new();
    let mut phases = BTreeMap::new();
    let mut quantities = Vec::new();
    if sections.theta {
        quantities.push(Quantity::ThetaDegrees);
    }
    if sections.magnitude {
        quantities.extend([Quantity::RmTcFc, Quantity::RmTcFnc, Quantity::RmTncFc]);
    }
    for &ctx in &contexts {
        for &q in &quantities {
            let curve = geometry::layer_curve(&used, q, &curve_opts(ctx)).map_err(|e| cx.err(None, ctx, e))?;
            if q == Quantity::ThetaDegrees {
                let entry = match geometry::phase_segment(&curve, config.phase_params) {
                    Ok(outcome) => PhaseEntry::Computed(outcome),
                    Err(e) => PhaseEntry::Undefined { reason: e.to_string() },
                };
                phases.insert(ctx.short_name().to_string(), entry);
            }
            curves.insert(format!("{}_{}", q.file_stem(), ctx.short_name()), curve);
        }
    }

    let mut probe_reports = Vec::new();
    if sections.probes {
        let opts = ProbeOptions {
            ratio: config.split_ratio,
            split_seed: config.seed,
            context: config.probe_context,
            hyper: ProbeHyper { seed: config.seed, ..config.probe_hyper },
            exec: config.exec,
        };
        for &family in &config.probe_families {
            let (_, report) = probes::accuracy_curve(&used, family, &opts)
                .map_err(|e| cx.err(None, config.probe_context, format!("{} probe: {e}", family.name())))?;
            probe_reports.push(report);
        }
    }

    let lens_section = match (sections.lens, bundle) {
        (true, Some(bundle)) => {
            let opts = LensOptions {
                context: ContextKind::Relevant,
                mode: config.lens_mode,
                side: TruthSide::True,
                apply_final_norm: config.lens_final_norm,
                exec: config.exec,
            };
            let lens = lens::normalized_p(&used, bundle, &opts).map_err(|e| cx.err(None, "relevant", e))?;
            let rel = curve_opts(ContextKind::Relevant);
            let theta = geometry::statement_values_all_layers(&used, Quantity::ThetaDegrees, &rel)
                .map_err(|e| cx.err(None, "relevant", e))?;
            let rm = geometry::statement_values_all_layers(&used, Quantity::RmTcFc, &rel)
                .map_err(|e| cx.err(None, "relevant", e))?;
            let r = |other: &[Vec<Option<f64>>]| -> Vec<Option<f64>> {
                lens.values.iter().zip(other).map(|(p, o)| lens::correlate_layer(p, o).ok()).collect()
            };
            let (r_theta, r_rm) = (r(&theta), r(&rm));
            Some(LensSection { lens, r_theta, r_rm })
        }
        _ => None,
    };

    let mut comparisons = Vec::new();
    if sections.compare {
        let opts = CompareOptions {
            alpha: config.alpha,
            n_tests,
            alternative: config.alternative,
            curve: curve_opts(ContextKind::Relevant),
        };
        for &l in &compared {
            let kinds = ContextKind::RANDOM
                .into_iter()
                .map(|kind| {
                    if !used.has_context(kind) {
                        return KindComparison { kind, theta: Cell::Absent, rm: Cell::Absent, label_raw: None, label_bonferroni: None };
                    }
                    let cell = |q| match stats::compare_conditions(&used, q, ContextKind::Relevant, kind, l, &opts) {
                        Ok(r) => Cell::Value(r),
                        Err(e) => Cell::Undefined { reason: e.to_string() },
                    };
                    let (theta, rm) = (cell(Quantity::ThetaDegrees), cell(Quantity::RmTcFc));
                    let (label_raw, label_bonferroni) = match (theta.result(), rm.result()) {
                        (Some(t), Some(m)) => (
                            Some(stats::classify(t, m, Threshold::Raw)),
                            Some(stats::classify(
                                &with_n_tests(t, 2 * n_tests),
                                &with_n_tests(m, 2 * n_tests),
                                Threshold::Bonferroni,
                            )),
                        ),
                        _ => (None, None),
                    };
                    KindComparison { kind, theta, rm, label_raw, label_bonferroni }
                })
                .collect();
            comparisons.push(ComparisonRow { layer: l + 1, kinds });
        }
    }

    let mut magnitude_summary = Vec::new();
    if sections.magnitude {
        let rel = curve_opts(ContextKind::Relevant);
        for &l in &compared {
            for q in [Quantity::RmTcFc, Quantity::RmTcFnc, Quantity::RmTncFc] {
                let values: Vec<f64> = geometry::statement_values(&used, q, &rel, l)
                    .map_err(|e| cx.err(Some(l + 1), "relevant", e))?
                    .into_iter()
                    .flatten()
                    .collect();
                let s = crate::numeric::summarize(&values);
                let ones = vec![1.0; values.len()];
                let test = stats::compare_paired(&values, &ones, config.alpha, 1, Alternative::TwoSided).ok();
                magnitude_summary.push(MagnitudeSummary {
                    layer: l + 1,
                    quantity: q,
                    mean: s.mean,
                    sem: s.sem,
                    n: s.n,
                    p_value: test.as_ref().map(|t| t.wilcoxon.p_value),
                    significant: test.is_some_and(|t| t.significant_raw),
                });
            }
        }
    }

    let manifest = Manifest {
        software: "ctxgeom".to_string(),
        version: crate::VERSION.to_string(),
        model_name: set.model_name().to_string(),
        dataset: config.dataset.clone(),
        n_layers: l_n,
        hidden_dim: used.hidden_dim(),
        n_statements_total: set.n_statements(),
        n_statements_used: used.n_statements(),
        contexts,
        compared_layers: compared.iter().map(|l| l + 1).collect(),
        seeds: Seeds { probe_split: config.seed, probe_train: config.seed },
        policies: Policies {
            zero_differences: "drop".to_string(),
            wilcoxon_exact_max_n: stats::EXACT_MAX_N,
            alternative: config.alternative,
            magnitude_mode: config.magnitude_mode,
            lens_mode: config.lens_mode,
            lens_side: TruthSide::True,
            lens_final_norm: config.lens_final_norm,
            lens_eps_den: lens::EPS_DEN,
            eps_zero_scale: geometry::EPS_ZERO_SCALE,
            bonferroni_n: n_tests,
            bonferroni_n_combined: 2 * n_tests,
        },
        config: config.clone(),
    };
    let report = Report {
        manifest,
        curves,
        phases,
        probes: probe_reports,
        lens: lens_section,
        comparisons,
        magnitude_summary,
    };
    debug_assert!(report.labels_consistent());
    Ok(report)
}

/// Read the dump (and unembedding, if configured), analyze and write the report.
pub fn run_pipeline(config: &RunConfig) -> Result<Report> {
    let dump = config.dump.as_ref().ok_or_else(|| ReportError::Config("no dump path given".into()))?;
    let set = read_dump(dump)?;
    let bundle = config.unembed.as_ref().map(read_unembedding).transpose()?;
    let report = analyze(&set, bundle.as_ref(), config)?;
    write_report(&report, &config.out_dir, config.format)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Writers

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

struct Writer<'a> {
    dir: &'a Path,
    format: OutputFormat,
    meta_line: String,
    meta: &'a Manifest,
    written: Vec<String>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, stem: &str, body: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<()> {
        if !self.format.csv() {
            return Ok(());
        }
        let mut out = self.meta_line.clone().into_bytes();
        body(&mut out)?;
        self.put(&format!("{stem}.csv"), &out)
    }

    fn json_always<T: Serialize>(&mut self, stem: &str, data: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Wrapped<'a, T> {
            meta: &'a Manifest,
            data: &'a T,
        }
        let mut bytes = serde_json::to_vec_pretty(&Wrapped { meta: self.meta, data })?;
        bytes.push(b'\n');
        self.put(&format!("{stem}.json"), &bytes)
    }

    fn json<T: Serialize>(&mut self, stem: &str, data: &T) -> Result<()> {
        if self.format.json() {
            self.json_always(stem, data)?;
        }
        Ok(())
    }
}

fn table<W: std::io::Write>(
    out: W,
    rows: &[ComparisonRow],
    dataset: &str,
    render: impl Fn(&KindComparison) -> String,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["dataset".to_string(), "layer".to_string()];
    header.extend(ContextKind::RANDOM.iter().map(|k| k.short_name().to_string()));
    w.write_record(&header)?;
    for row in rows {
        let mut record = vec![dataset.to_string(), row.layer.to_string()];
        record.extend(row.kinds.iter().map(&render));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn label_cell(kind: &KindComparison, label: Option<Label>) -> String {
    match (&kind.theta, label) {
        (Cell::Absent, _) => "absent".to_string(),
        (_, Some(l)) => l.to_string(),
        (_, None) => "n/a".to_string(),
    }
}

/// Write the report files into `dir` and return their names in write order.
pub fn write_report(report: &Report, dir: &Path, format: OutputFormat) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_json = serde_json::to_string(&report.manifest)?;
    let mut w = Writer {
        dir,
        format,
        meta_line: format!("# ctxgeom {} {}\n", crate::VERSION, manifest_json),
        meta: &report.manifest,
        written: Vec::new(),
    };
    let mut manifest = serde_json::to_vec_pretty(&report.manifest)?;
    manifest.push(b'\n');
    w.put("manifest.json", &manifest)?;

    for (name, curve) in &report.curves {
        w.csv(name, |out| curve.write_csv(out))?;
        w.json(name, curve)?;
    }
    if !report.phases.is_empty() {
        w.json_always("phases", &report.phases)?;
    }
    for probe in &report.probes {
        let stem = format!("probe_{}", probe.family.name());
        w.csv(&stem, |out| probe.write_csv(out))?;
        w.json(&stem, probe)?;
    }
    if let Some(section) = &report.lens {
        w.csv("lens", |out| lens::write_csv(&section.lens, &section.r_theta, &section.r_rm, out))?;
        w.json("lens", section)?;
    }
    if !report.comparisons.is_empty() {
        let rows = &report.comparisons;
        let dataset = &report.manifest.dataset;
        w.csv("compare_theta", |out| table(out, rows, dataset, |k| k.theta.render(|r| r.significant_raw)))?;
        w.csv("compare_theta_bonferroni", |out| {
            table(out, rows, dataset, |k| k.theta.render(|r| r.significant_bonferroni))
        })?;
        w.csv("compare_rm", |out| table(out, rows, dataset, |k| k.rm.render(|r| r.significant_raw)))?;
        w.csv("compare_rm_bonferroni", |out| {
            table(out, rows, dataset, |k| k.rm.render(|r| r.significant_bonferroni))
        })?;
        w.csv("compare_labels", |out| table(out, rows, dataset, |k| label_cell(k, k.label_raw)))?;
        w.csv("compare_labels_bonferroni", |out| {
            table(out, rows, dataset, |k| label_cell(k, k.label_bonferroni))
        })?;
        w.json("comparisons", rows)?;
    }
    if !report.magnitude_summary.is_empty() {
        w.csv("rm_summary", |out| {
            let mut cw = csv::Writer::from_writer(out);
            cw.write_record(["dataset", "layer", "quantity", "mean", "sem", "n", "p_value", "significant"])?;
            for s in &report.magnitude_summary {
                let mean = match s.mean {
                    Some(m) => format!("{m}{}", if s.significant { "*" } else { "" }),
                    None => String::new(),
                };
                cw.write_record([
                    report.manifest.dataset.clone(),
                    s.layer.to_string(),
                    s.quantity.file_stem().to_string(),
                    mean,
                    geometry::fmt_opt(s.sem),
                    s.n.to_string(),
                    geometry::fmt_opt(s.p_value),
                    s.significant.to_string(),
                ])?;
            }
            cw.flush()?;
            Ok(())
        })?;
        w.json("rm_summary", &report.magnitude_summary)?;
    }
    Ok(w.written)
}
