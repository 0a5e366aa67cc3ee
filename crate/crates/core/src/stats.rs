//! Paired nonparametric comparisons between context conditions.
//!
//! Wilcoxon signed-rank policy: zero differences are dropped, tied absolute
//! differences get midranks, the exact null distribution is used for
//! `n_effective <= 25` and a tie-corrected normal approximation with a 0.5
//! continuity correction above that.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::actdump::{ActivationSet, ContextKind};
use crate::geometry::{self, CurveOptions, GeometryError, Quantity};

/// Largest effective sample size evaluated by exact enumeration.
pub const EXACT_MAX_N: usize = 25;
/// Minimum effective sample size accepted by the signed-rank test.
pub const MIN_PAIRS: usize = 5;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("all paired differences are zero")]
    AllZero,
    #[error("need at least {needed} non-zero differences, found {found}")]
    TooFewPairs { needed: usize, found: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("number of tests must be positive")]
    ZeroTests,
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("need at least {needed} points, found {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// `x` tends to exceed `y`.
    #[default]
    Greater,
    Less,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    pub w_plus: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
    pub alternative: Alternative,
}

/// Midranks (1-based) of `values`, ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon signed-rank test on `x − y`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let mut diffs = Vec::with_capacity(x.len());
    for (i, (a, b)) in x.iter().zip(y).enumerate() {
        let d = a - b;
        if !d.is_finite() {
            return Err(StatsError::NonFinite(i));
        }
        if d != 0.0 {
            diffs.push(d);
        }
    }
    if diffs.is_empty() {
        return Err(StatsError::AllZero);
    }
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(StatsError::TooFewPairs { needed: MIN_PAIRS, found: n });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    let (p_value, method) = if n <= EXACT_MAX_N {
        (exact_p(&ranks, w_plus, alternative), WilcoxonMethod::Exact)
    } else {
        (normal_p(&abs, &ranks, w_plus, alternative), WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonResult { n_effective: n, w_plus, p_value: p_value.clamp(0.0, 1.0), method, alternative })
}

/// Exact null distribution of W+ over all 2^n sign assignments. Midranks are
/// doubled so every rank is an integer, then the subset-sum counts are built
/// by dynamic programming.
fn exact_p(ranks: &[f64], w_plus: f64, alternative: Alternative) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let observed = (w_plus * 2.0).round() as usize;
    let n_assign = (1u64 << ranks.len()) as f64;
    let upper: u64 = counts[observed..].iter().sum();
    let lower: u64 = counts[..=observed].iter().sum();
    let p_greater = upper as f64 / n_assign;
    let p_less = lower as f64 / n_assign;
    match alternative {
        Alternative::Greater => p_greater,
        Alternative::Less => p_less,
        Alternative::TwoSided => (2.0 * p_greater.min(p_less)).min(1.0),
    }
}

fn std_normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn normal_p(abs: &[f64], ranks: &[f64], w_plus: f64, alternative: Alternative) -> f64 {
    let n = abs.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // Tie correction: sum over tie groups of (t³ − t) / 48.
    let mut sorted: Vec<f64> = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    debug_assert_eq!(ranks.len(), abs.len());
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let sd = var.sqrt();
    match alternative {
        Alternative::Greater => std_normal_sf((w_plus - mean - 0.5) / sd),
        Alternative::Less => 1.0 - std_normal_sf((w_plus - mean + 0.5) / sd),
        Alternative::TwoSided => {
            let z = ((w_plus - mean).abs() - 0.5).max(0.0) / sd;
            (2.0 * std_normal_sf(z)).min(1.0)
        }
    }
}

/// `alpha / n_tests`.
pub fn bonferroni(alpha: f64, n_tests: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidAlpha(alpha));
    }
    if n_tests == 0 {
        return Err(StatsError::ZeroTests);
    }
    Ok(alpha / n_tests as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub mean_difference: f64,
    pub n_pairs: usize,
    pub wilcoxon: WilcoxonResult,
    pub alpha: f64,
    pub n_tests: usize,
    pub significant_raw: bool,
    pub significant_bonferroni: bool,
}

/// Compare paired samples `a` and `b` (`a − b`) with a signed-rank test at
/// the raw and Bonferroni-corrected thresholds.
pub fn compare_paired(
    a: &[f64],
    b: &[f64],
    alpha: f64,
    n_tests: usize,
    alternative: Alternative,
) -> Result<ComparisonResult> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < MIN_PAIRS {
        return Err(StatsError::TooFewPairs { needed: MIN_PAIRS, found: a.len() });
    }
    let corrected = bonferroni(alpha, n_tests)?;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_difference = crate::numeric::pairwise_sum(&diffs) / diffs.len() as f64;
    let wilcoxon = match wilcoxon_signed_rank(a, b, alternative) {
        Ok(w) => w,
        // Identical samples: no evidence of a difference.
        Err(StatsError::AllZero) => WilcoxonResult {
            n_effective: 0,
            w_plus: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::Exact,
            alternative,
        },
        Err(e) => return Err(e),
    };
    let p = wilcoxon.p_value;
    Ok(ComparisonResult {
        mean_difference,
        n_pairs: a.len(),
        wilcoxon,
        alpha,
        n_tests,
        significant_raw: p < alpha,
        significant_bonferroni: p < corrected,
    })
}

/// Settings shared by condition comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub alpha: f64,
    pub n_tests: usize,
    pub alternative: Alternative,
    pub curve: CurveOptions,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { alpha: 0.05, n_tests: 1, alternative: Alternative::Greater, curve: CurveOptions::default() }
    }
}

/// Per-statement `quantity` under context `a` minus under context `b` at
/// `layer` (0-based), paired by statement. Statements invalid under either
/// condition are dropped from the pairing.
pub fn compare_conditions(
    set: &ActivationSet,
    quantity: Quantity,
    a: ContextKind,
    b: ContextKind,
    layer: usize,
    opts: &CompareOptions,
) -> Result<ComparisonResult> {
    let va = geometry::statement_values(set, quantity, &CurveOptions { context: a, ..opts.curve }, layer)?;
    let vb = geometry::statement_values(set, quantity, &CurveOptions { context: b, ..opts.curve }, layer)?;
    let (xa, xb): (Vec<f64>, Vec<f64>) = va
        .iter()
        .zip(&vb)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .unzip();
    compare_paired(&xa, &xb, opts.alpha, opts.n_tests, opts.alternative)
}

/// Which of θ and relative magnitude differ significantly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Both,
    Theta,
    Mag,
    None,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Both => "Both",
            Label::Theta => "Theta",
            Label::Mag => "Mag",
            Label::None => "None",
        })
    }
}

pub fn label_from(theta_significant: bool, mag_significant: bool) -> Label {
    match (theta_significant, mag_significant) {
        (true, true) => Label::Both,
        (true, false) => Label::Theta,
        (false, true) => Label::Mag,
        (false, false) => Label::None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Raw,
    Bonferroni,
}

/// Combine a θ comparison and a magnitude comparison into a label.
pub fn classify(theta: &ComparisonResult, mag: &ComparisonResult, threshold: Threshold) -> Label {
    let sig = |c: &ComparisonResult| match threshold {
        Threshold::Raw => c.significant_raw,
        Threshold::Bonferroni => c.significant_bonferroni,
    };
    label_from(sig(theta), sig(mag))
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewPoints { needed: 3, found: x.len() });
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(i % x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
