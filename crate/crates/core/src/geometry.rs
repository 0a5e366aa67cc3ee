//! Truth-vector geometry: directional change θ between the with-context and
//! without-context truth vectors, squared-norm magnitude ratios, per-layer
//! aggregation with standard errors and three-phase segmentation of θ curves.
//!
//! All arithmetic is f64 regardless of the f32 storage precision.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actdump::{ActivationSet, ConditionLabel, ContextKind, DumpError, TruthSide};
use crate::exec::Exec;
use crate::numeric::{self, dot, squared_norm};

/// A truth vector whose norm falls below `EPS_ZERO_SCALE * sqrt(d)` is invalid.
pub const EPS_ZERO_SCALE: f64 = 1e-12;

pub fn eps_zero(dim: usize) -> f64 {
    EPS_ZERO_SCALE * (dim as f64).sqrt()
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid truth vector: norm {norm:e} below {eps:e}")]
    InvalidVector { norm: f64, eps: f64 },
    #[error("no valid values to aggregate")]
    Empty,
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("quantity {0:?} is not computed from truth vectors")]
    UnsupportedQuantity(Quantity),
    #[error("phase segmentation needs at least {needed} layers, curve has {found}")]
    TooFewLayers { needed: usize, found: usize },
    #[error("curve mean undefined at layer {0}")]
    UndefinedLayer(usize),
    #[error("expected a θ curve, got {0:?}")]
    NotTheta(Quantity),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// `a_true − a_false`, componentwise, widened to f64.
pub fn truth_vector(a_true: &[f32], a_false: &[f32]) -> Result<Vec<f64>> {
    if a_true.len() != a_false.len() {
        return Err(GeometryError::DimensionMismatch { left: a_true.len(), right: a_false.len() });
    }
    Ok(a_true.iter().zip(a_false).map(|(&t, &f)| f64::from(t) - f64::from(f)).collect())
}

fn check_valid(v: &[f64]) -> Result<f64> {
    let norm = squared_norm(v).sqrt();
    let eps = eps_zero(v.len());
    if norm < eps {
        Err(GeometryError::InvalidVector { norm, eps })
    } else {
        Ok(norm)
    }
}

fn is_valid(v: &[f64]) -> bool {
    check_valid(v).is_ok()
}

/// Angle between `v_c` and `v_nc` in degrees, in `[0, 180]`. The cosine is
/// clamped to `[-1, 1]` before `acos`.
pub fn theta_degrees(v_c: &[f64], v_nc: &[f64]) -> Result<f64> {
    if v_c.len() != v_nc.len() {
        return Err(GeometryError::DimensionMismatch { left: v_c.len(), right: v_nc.len() });
    }
    let nc = check_valid(v_c)?;
    let nnc = check_valid(v_nc)?;
    let cos = (dot(v_c, v_nc) / (nc * nnc)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// Mean of valid per-statement θ values at one layer, with the count.
pub fn dataset_theta(thetas: &[f64]) -> Result<(f64, usize)> {
    if thetas.is_empty() {
        return Err(GeometryError::Empty);
    }
    Ok((numeric::pairwise_sum(thetas) / thetas.len() as f64, thetas.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeMode {
    /// `‖v‖² / ‖v_nc‖²`
    #[default]
    Squared,
    /// `‖v‖ / ‖v_nc‖`, for sensitivity analysis only.
    Unsquared,
}

/// `‖v_num‖² / ‖v_nc‖²`.
pub fn rel_magnitude(v_num: &[f64], v_nc: &[f64]) -> Result<f64> {
    rel_magnitude_with(v_num, v_nc, MagnitudeMode::Squared)
}

pub fn rel_magnitude_with(v_num: &[f64], v_nc: &[f64], mode: MagnitudeMode) -> Result<f64> {
    if v_num.len() != v_nc.len() {
        return Err(GeometryError::DimensionMismatch { left: v_num.len(), right: v_nc.len() });
    }
    check_valid(v_nc)?;
    let ratio = squared_norm(v_num) / squared_norm(v_nc);
    Ok(match mode {
        MagnitudeMode::Squared => ratio,
        MagnitudeMode::Unsquared => ratio.sqrt(),
    })
}

/// The per-layer quantity a [`LayerCurve`] aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quantity {
    ThetaDegrees,
    RmTcFc,
    RmTcFnc,
    RmTncFc,
    LensP,
    ProbeAccuracy,
}

impl Quantity {
    pub const GEOMETRIC: [Quantity; 4] =
        [Quantity::ThetaDegrees, Quantity::RmTcFc, Quantity::RmTcFnc, Quantity::RmTncFc];

    pub fn file_stem(self) -> &'static str {
        match self {
            Quantity::ThetaDegrees => "theta",
            Quantity::RmTcFc => "rm_tc_fc",
            Quantity::RmTcFnc => "rm_tc_fnc",
            Quantity::RmTncFc => "rm_tnc_fc",
            Quantity::LensP => "lens_p",
            Quantity::ProbeAccuracy => "probe_accuracy",
        }
    }
}

/// The four truth vectors of one statement at one layer. `None` marks a
/// vector below the zero-norm threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthVectors {
    pub nc: Option<Vec<f64>>,
    pub c: Option<Vec<f64>>,
    pub tc_fnc: Option<Vec<f64>>,
    pub tnc_fc: Option<Vec<f64>>,
}

/// Row indices of the four activations needed for one context kind.
#[derive(Debug, Clone, Copy)]
struct ConditionRows {
    true_nc: usize,
    false_nc: usize,
    true_c: usize,
    false_c: usize,
}

impl ConditionRows {
    fn resolve(set: &ActivationSet, context: ContextKind) -> Result<Self> {
        let row = |side, kind| set.require_condition(ConditionLabel::new(side, kind));
        Ok(Self {
            true_nc: row(TruthSide::True, ContextKind::None)?,
            false_nc: row(TruthSide::False, ContextKind::None)?,
            true_c: row(TruthSide::True, context)?,
            false_c: row(TruthSide::False, context)?,
        })
    }
}

fn valid_or_none(v: Vec<f64>) -> Option<Vec<f64>> {
    is_valid(&v).then_some(v)
}

fn truth_vectors_at(set: &ActivationSet, rows: ConditionRows, k: usize, l: usize) -> TruthVectors {
    let a = |c| set.vector(c, k, l);
    // Dimensions are equal by construction of the set.
    let diff = |t, f| truth_vector(a(t), a(f)).expect("equal dims");
    TruthVectors {
        nc: valid_or_none(diff(rows.true_nc, rows.false_nc)),
        c: valid_or_none(diff(rows.true_c, rows.false_c)),
        tc_fnc: valid_or_none(diff(rows.true_c, rows.false_nc)),
        tnc_fc: valid_or_none(diff(rows.true_nc, rows.false_c)),
    }
}

/// Materialized truth vectors for every (statement, layer) of one context kind.
#[derive(Debug, Clone)]
pub struct TruthVectorSet {
    pub context: ContextKind,
    pub n_statements: usize,
    pub n_layers: usize,
    /// statement-major: index `k * n_layers + l`
    vectors: Vec<TruthVectors>,
}

impl TruthVectorSet {
    pub fn compute(set: &ActivationSet, context: ContextKind, exec: Exec) -> Result<Self> {
        let rows = ConditionRows::resolve(set, context)?;
        let (k_n, l_n) = (set.n_statements(), set.n_layers());
        let vectors = exec.map(k_n * l_n, |i| truth_vectors_at(set, rows, i / l_n, i % l_n));
        Ok(Self { context, n_statements: k_n, n_layers: l_n, vectors })
    }

    pub fn get(&self, statement: usize, layer: usize) -> &TruthVectors {
        &self.vectors[statement * self.n_layers + layer]
    }

    /// Number of statements whose vectors needed for `quantity` are invalid at `layer`.
    pub fn excluded_count(&self, quantity: Quantity, layer: usize) -> usize {
        (0..self.n_statements)
            .filter(|&k| value_from_vectors(self.get(k, layer), quantity, MagnitudeMode::Squared).is_none())
            .count()
    }
}

fn value_from_vectors(tv: &TruthVectors, quantity: Quantity, mode: MagnitudeMode) -> Option<f64> {
    let nc = tv.nc.as_deref()?;
    let other = match quantity {
        Quantity::ThetaDegrees | Quantity::RmTcFc => tv.c.as_deref()?,
        Quantity::RmTcFnc => tv.tc_fnc.as_deref()?,
        Quantity::RmTncFc => tv.tnc_fc.as_deref()?,
        Quantity::LensP | Quantity::ProbeAccuracy => return None,
    };
    match quantity {
        Quantity::ThetaDegrees => theta_degrees(other, nc).ok(),
        _ => rel_magnitude_with(other, nc, mode).ok(),
    }
}

/// Which context condition plays "with context", and how curves are computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveOptions {
    pub context: ContextKind,
    pub magnitude_mode: MagnitudeMode,
    pub exec: Exec,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self { context: ContextKind::Relevant, magnitude_mode: MagnitudeMode::Squared, exec: Exec::default() }
    }
}

impl CurveOptions {
    pub fn with_context(context: ContextKind) -> Self {
        Self { context, ..Self::default() }
    }
}

fn check_geometric(quantity: Quantity) -> Result<()> {
    match quantity {
        Quantity::LensP | Quantity::ProbeAccuracy => Err(GeometryError::UnsupportedQuantity(quantity)),
        _ => Ok(()),
    }
}

/// Per-statement values of `quantity` at `layer` (0-based). `None` where a
/// required truth vector is invalid.
pub fn statement_values(
    set: &ActivationSet,
    quantity: Quantity,
    opts: &CurveOptions,
    layer: usize,
) -> Result<Vec<Option<f64>>> {
    check_geometric(quantity)?;
    let rows = ConditionRows::resolve(set, opts.context)?;
    Ok(opts.exec.map(set.n_statements(), |k| {
        value_from_vectors(&truth_vectors_at(set, rows, k, layer), quantity, opts.magnitude_mode)
    }))
}

/// Per-statement values for every layer: `[layer][statement]`.
pub fn statement_values_all_layers(
    set: &ActivationSet,
    quantity: Quantity,
    opts: &CurveOptions,
) -> Result<Vec<Vec<Option<f64>>>> {
    check_geometric(quantity)?;
    let rows = ConditionRows::resolve(set, opts.context)?;
    let (k_n, l_n) = (set.n_statements(), set.n_layers());
    let flat = opts.exec.map(k_n * l_n, |i| {
        let (l, k) = (i / k_n, i % k_n);
        value_from_vectors(&truth_vectors_at(set, rows, k, l), quantity, opts.magnitude_mode)
    });
    Ok(flat.chunks(k_n.max(1)).take(l_n).map(|c| c.to_vec()).collect())
}

/// One layer of a [`LayerCurve`]. `layer` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPoint {
    pub layer: usize,
    pub mean: Option<f64>,
    pub sem: Option<f64>,
    pub n_valid: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub quantity: Quantity,
    pub points: Vec<LayerPoint>,
}

impl LayerCurve {
    /// Aggregate `[layer][statement]` values; `None` entries are excluded and counted.
    pub fn from_statement_values(quantity: Quantity, values: &[Vec<Option<f64>>]) -> Self {
        let points = values
            .iter()
            .enumerate()
            .map(|(l, row)| {
                let valid: Vec<f64> = row.iter().flatten().copied().collect();
                let s = numeric::summarize(&valid);
                LayerPoint {
                    layer: l + 1,
                    mean: s.mean,
                    sem: s.sem,
                    n_valid: s.n,
                    n_excluded: row.len() - s.n,
                }
            })
            .collect();
        Self { quantity, points }
    }

    pub fn n_layers(&self) -> usize {
        self.points.len()
    }

    pub fn means(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.mean).collect()
    }

    /// CSV with columns `layer,mean,sem,n_valid`; undefined cells are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "mean", "sem", "n_valid"])?;
        for p in &self.points {
            w.write_record([
                p.layer.to_string(),
                fmt_opt(p.mean),
                fmt_opt(p.sem),
                p.n_valid.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-layer mean, SEM and valid count of `quantity` across statements.
pub fn layer_curve(set: &ActivationSet, quantity: Quantity, opts: &CurveOptions) -> Result<LayerCurve> {
    let values = statement_values_all_layers(set, quantity, opts)?;
    Ok(LayerCurve::from_statement_values(quantity, &values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseParams {
    /// Number of leading layers averaged for the phase-1 baseline.
    pub window: usize,
    /// Drop below the baseline (degrees) that starts phase 2.
    pub drop_deg: f64,
    /// Mean per-layer change (degrees/layer) under which the curve counts as flat.
    pub tolerance_deg: f64,
    /// Layers the flat stretch must span.
    pub run: usize,
}

impl Default for PhaseParams {
    fn default() -> Self {
        Self { window: 4, drop_deg: 10.0, tolerance_deg: 2.0, run: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase3Method {
    FlatRun,
    Argmin,
}

/// 1-based layer indices where phases 2 and 3 begin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegmentation {
    pub p2_start: usize,
    pub p3_start: usize,
    pub p3_method: Phase3Method,
    pub params: PhaseParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PhaseOutcome {
    Segmented(PhaseSegmentation),
    NoPhase { params: PhaseParams, reason: String },
}

impl PhaseOutcome {
    pub fn segmentation(&self) -> Option<&PhaseSegmentation> {
        match self {
            PhaseOutcome::Segmented(s) => Some(s),
            PhaseOutcome::NoPhase { .. } => None,
        }
    }
}

/// Locate the start of the convergence phase and of the stable phase in a θ curve.
///
/// Phase 2 starts at the first layer whose θ is below `mean(θ[1..=window]) − drop`.
/// Phase 3 starts at the first later layer `l` with
/// `|θ[l + run] − θ[l]| / run < tolerance`; if none exists, at the first
/// minimum after the phase-2 start.
pub fn phase_segment(curve: &LayerCurve, params: PhaseParams) -> Result<PhaseOutcome> {
    if curve.quantity != Quantity::ThetaDegrees {
        return Err(GeometryError::NotTheta(curve.quantity));
    }
    let needed = 6.max(params.window);
    if curve.n_layers() < needed {
        return Err(GeometryError::TooFewLayers { needed, found: curve.n_layers() });
    }
    let theta: Vec<f64> = curve
        .points
        .iter()
        .map(|p| p.mean.ok_or(GeometryError::UndefinedLayer(p.layer)))
        .collect::<Result<_>>()?;
    Ok(segment_values(&theta, params))
}

fn segment_values(theta: &[f64], params: PhaseParams) -> PhaseOutcome {
    let n = theta.len();
    let baseline = numeric::pairwise_sum(&theta[..params.window]) / params.window as f64;
    let threshold = baseline - params.drop_deg;
    let Some(p2) = theta.iter().position(|&t| t < threshold) else {
        return PhaseOutcome::NoPhase {
            params,
            reason: format!("θ never falls below {threshold:.3}°"),
        };
    };
    if p2 + 1 >= n {
        return PhaseOutcome::NoPhase {
            params,
            reason: "phase 2 starts at the final layer".to_string(),
        };
    }
    let run = params.run.max(1);
    let flat = (p2 + 1..n.saturating_sub(run))
        .find(|&l| (theta[l + run] - theta[l]).abs() / (run as f64) < params.tolerance_deg);
    let (p3, method) = match flat {
        Some(l) => (l, Phase3Method::FlatRun),
        None => {
            let argmin = (p2 + 1..n)
                .min_by(|&a, &b| theta[a].total_cmp(&theta[b]).then(a.cmp(&b)))
                .expect("non-empty range");
            (argmin, Phase3Method::Argmin)
        }
    };
    PhaseOutcome::Segmented(PhaseSegmentation {
        p2_start: p2 + 1,
        p3_start: p3 + 1,
        p3_method: method,
        params,
    })
}
