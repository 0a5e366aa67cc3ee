//! Logit lens: read an intermediate activation as a next-token distribution
//! through the output unembedding, and compare the choice-token probability
//! gap with and without context.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actdump::{ActivationSet, ChoiceTokens, ConditionLabel, ContextKind, DumpError, TruthSide, UnembeddingBundle};
use crate::exec::Exec;
use crate::geometry::{fmt_opt, LayerCurve, Quantity};
use crate::stats::{self, StatsError};

/// Denominator guard for the ratio mode.
pub const EPS_DEN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LensError {
    #[error("activation has {found} dims, unembedding expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("layer {layer}: {source}")]
    Correlation { layer: usize, source: StatsError },
    #[error("lens has {lens} layers, other source has {other}")]
    LayerMismatch { lens: usize, other: usize },
    #[error(transparent)]
    Dump(#[from] DumpError),
}

pub type Result<T> = std::result::Result<T, LensError>;

/// How the with-context gap is normalized by the no-context gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensMode {
    /// `D_c / D_nc`
    #[default]
    Ratio,
    /// `D_c − D_nc`
    Difference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LensOptions {
    pub context: ContextKind,
    pub mode: LensMode,
    /// Which generation's activation is projected for each condition.
    pub side: TruthSide,
    /// Apply the bundle's final normalization (if any) before projecting.
    pub apply_final_norm: bool,
    pub exec: Exec,
}

impl Default for LensOptions {
    fn default() -> Self {
        Self {
            context: ContextKind::Relevant,
            mode: LensMode::Ratio,
            side: TruthSide::True,
            apply_final_norm: false,
            exec: Exec::default(),
        }
    }
}

/// Full-vocabulary logits `W · a` in f64.
pub fn logits(activation: &[f32], bundle: &UnembeddingBundle, apply_final_norm: bool) -> Result<Vec<f64>> {
    if activation.len() != bundle.hidden_dim() {
        return Err(LensError::DimensionMismatch { expected: bundle.hidden_dim(), found: activation.len() });
    }
    let x: Vec<f64> = match (apply_final_norm, bundle.final_norm()) {
        (true, Some(norm)) => norm.apply(activation),
        _ => activation.iter().map(|&v| f64::from(v)).collect(),
    };
    Ok((0..bundle.vocab_size())
        .map(|t| bundle.row(t).iter().zip(&x).map(|(&w, a)| f64::from(w) * a).sum())
        .collect())
}

/// `softmax(logits)[true] − softmax(logits)[false]` with max-logit subtraction.
pub fn prob_diff_from_logits(logits: &[f64], tokens: ChoiceTokens) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    ((logits[tokens.true_token] - max).exp() - (logits[tokens.false_token] - max).exp()) / z
}

/// P(true-choice token) − P(false-choice token) for one activation.
pub fn choice_prob_diff(activation: &[f32], bundle: &UnembeddingBundle, apply_final_norm: bool) -> Result<f64> {
    Ok(prob_diff_from_logits(&logits(activation, bundle, apply_final_norm)?, bundle.token_ids()))
}

/// Per-statement normalized probability differences for every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensCurve {
    pub context: ContextKind,
    pub mode: LensMode,
    pub side: TruthSide,
    /// `[layer][statement]`, `None` where the denominator guard excluded it.
    pub values: Vec<Vec<Option<f64>>>,
}

impl LensCurve {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn excluded_count(&self, layer: usize) -> usize {
        self.values[layer].iter().filter(|v| v.is_none()).count()
    }

    pub fn curve(&self) -> LayerCurve {
        LayerCurve::from_statement_values(Quantity::LensP, &self.values)
    }
}

/// `p = D_c / D_nc` (or `D_c − D_nc`) per statement and layer, where `D_x`
/// is the choice probability gap of the selected side's activation under
/// condition `x`.
pub fn normalized_p(set: &ActivationSet, bundle: &UnembeddingBundle, opts: &LensOptions) -> Result<LensCurve> {
    if set.hidden_dim() != bundle.hidden_dim() {
        return Err(LensError::DimensionMismatch { expected: bundle.hidden_dim(), found: set.hidden_dim() });
    }
    let row_nc = set.require_condition(ConditionLabel::new(opts.side, ContextKind::None))?;
    let row_c = set.require_condition(ConditionLabel::new(opts.side, opts.context))?;
    let (k_n, l_n) = (set.n_statements(), set.n_layers());
    let flat = opts.exec.try_map(k_n * l_n, |i| -> Result<Option<f64>> {
        let (l, k) = (i / k_n, i % k_n);
        let d_nc = choice_prob_diff(set.vector(row_nc, k, l), bundle, opts.apply_final_norm)?;
        let d_c = choice_prob_diff(set.vector(row_c, k, l), bundle, opts.apply_final_norm)?;
        Ok(match opts.mode {
            LensMode::Ratio => (d_nc.abs() >= EPS_DEN).then(|| d_c / d_nc),
            LensMode::Difference => Some(d_c - d_nc),
        })
    })?;
    let values = flat.chunks(k_n.max(1)).take(l_n).map(|c| c.to_vec()).collect();
    Ok(LensCurve { context: opts.context, mode: opts.mode, side: opts.side, values })
}

/// Pearson r between two per-statement value lists, over statements defined
/// in both. Needs at least three such statements.
pub fn correlate_layer(p: &[Option<f64>], other: &[Option<f64>]) -> std::result::Result<f64, StatsError> {
    if p.len() != other.len() {
        return Err(StatsError::LengthMismatch(p.len(), other.len()));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = p
        .iter()
        .zip(other)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .unzip();
    stats::pearson(&xs, &ys)
}

/// Per-layer r between the lens values and another `[layer][statement]` source.
pub fn correlate(lens: &LensCurve, other: &[Vec<Option<f64>>]) -> Result<Vec<f64>> {
    if lens.n_layers() != other.len() {
        return Err(LensError::LayerMismatch { lens: lens.n_layers(), other: other.len() });
    }
    lens.values
        .iter()
        .zip(other)
        .enumerate()
        .map(|(l, (p, o))| correlate_layer(p, o).map_err(|source| LensError::Correlation { layer: l + 1, source }))
        .collect()
}

/// CSV with columns `layer,mean_p,sem,n,excluded,r_theta,r_rm`. Correlations
/// that are undefined at a layer are left empty.
pub fn write_csv<W: std::io::Write>(
    lens: &LensCurve,
    r_theta: &[Option<f64>],
    r_rm: &[Option<f64>],
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "mean_p", "sem", "n", "excluded", "r_theta", "r_rm"])?;
    for (l, p) in lens.curve().points.iter().enumerate() {
        w.write_record([
            p.layer.to_string(),
            fmt_opt(p.mean),
            fmt_opt(p.sem),
            p.n_valid.to_string(),
            p.n_excluded.to_string(),
            fmt_opt(r_theta.get(l).copied().flatten()),
            fmt_opt(r_rm.get(l).copied().flatten()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
