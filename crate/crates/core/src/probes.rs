//! Truth probes: classifiers from a layer's activation to the truth side of
//! the completion it produced.
//!
//! Four families are supported. Mass-mean uses raw activations; the other
//! three standardize features with training-set statistics first. Training
//! within one job is sequential and deterministic given the seed; jobs for
//! different layers run on [`Exec`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actdump::{ActivationSet, ConditionLabel, ContextKind, DumpError, TruthSide};
use crate::exec::Exec;
use crate::geometry::{LayerCurve, LayerPoint, Quantity};

pub const MIN_STATEMENTS: usize = 5;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("need at least {MIN_STATEMENTS} statements, found {0}")]
    TooFewStatements(usize),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("non-finite activation at row {row}, dim {dim}")]
    NonFinite { row: usize, dim: usize },
    #[error("split ratio must lie in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("row has {found} features, probe expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Dump(#[from] DumpError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProbeFamily {
    MassMean,
    LogisticRegression,
    LinearSvm,
    Mlp,
}

impl ProbeFamily {
    pub const ALL: [ProbeFamily; 4] =
        [ProbeFamily::MassMean, ProbeFamily::LogisticRegression, ProbeFamily::LinearSvm, ProbeFamily::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            ProbeFamily::MassMean => "mass_mean",
            ProbeFamily::LogisticRegression => "logistic_regression",
            ProbeFamily::LinearSvm => "linear_svm",
            ProbeFamily::Mlp => "mlp",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// Labelled rows, row-major. `true` labels the true-side activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<bool>,
}

impl ProbeData {
    pub fn new(dim: usize) -> Self {
        Self { dim, x: Vec::new(), y: Vec::new() }
    }

    pub fn push(&mut self, row: &[f64], label: bool) {
        assert_eq!(row.len(), self.dim, "row dimension");
        self.x.extend_from_slice(row);
        self.y.push(label);
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, rows: &[usize]) -> ProbeData {
        let mut out = ProbeData::new(self.dim);
        for &i in rows {
            out.push(self.row(i), self.y[i]);
        }
        out
    }

    fn check(&self) -> Result<()> {
        if let Some(i) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite { row: i / self.dim, dim: i % self.dim });
        }
        let n_true = self.y.iter().filter(|&&y| y).count();
        if n_true == 0 || n_true == self.len() {
            return Err(ProbeError::SingleClass);
        }
        Ok(())
    }
}

/// Fixed optimizer settings for every family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub logistic_lambda: f64,
    pub logistic_max_iter: usize,
    pub logistic_grad_tol: f64,
    pub svm_lambda: f64,
    pub svm_epochs: usize,
    pub mlp_width: usize,
    pub mlp_epochs: usize,
    pub mlp_batch: usize,
    pub mlp_learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            logistic_lambda: 1e-3,
            logistic_max_iter: 500,
            logistic_grad_tol: 1e-6,
            svm_lambda: 1e-3,
            svm_epochs: 1000,
            mlp_width: 256,
            mlp_epochs: 200,
            mlp_batch: 32,
            mlp_learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Per-feature affine map to zero mean and unit variance on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &ProbeData) -> Self {
        let n = data.len() as f64;
        let mut mean = vec![0.0; data.dim];
        for i in 0..data.len() {
            for (m, v) in mean.iter_mut().zip(data.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; data.dim];
        for i in 0..data.len() {
            for ((s, v), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn transform(&self, data: &ProbeData) -> ProbeData {
        let mut out = ProbeData::new(data.dim);
        for i in 0..data.len() {
            out.push(&self.apply(data.row(i)), data.y[i]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeParams {
    /// Predict true iff `w · standardize(x) + bias > 0`.
    Linear { weights: Vec<f64>, bias: f64, standardizer: Option<Standardizer> },
    Mlp {
        standardizer: Standardizer,
        /// `[hidden][input]`
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub family: ProbeFamily,
    /// 1-based layer, 0 when trained outside a layer sweep.
    pub layer: usize,
    pub params: ProbeParams,
    pub train_seed: u64,
}

impl ProbeModel {
    /// Mass-mean direction (difference of class means). `None` for other families.
    pub fn direction(&self) -> Option<&[f64]> {
        match (&self.family, &self.params) {
            (ProbeFamily::MassMean, ProbeParams::Linear { weights, .. }) => Some(weights),
            _ => None,
        }
    }

    /// Signed decision value; positive means "true".
    pub fn score(&self, row: &[f64]) -> f64 {
        match &self.params {
            ProbeParams::Linear { weights, bias, standardizer } => {
                let z = match standardizer {
                    Some(s) => s.apply(row),
                    None => row.to_vec(),
                };
                dot(weights, &z) + bias
            }
            ProbeParams::Mlp { standardizer, w1, b1, w2, b2 } => {
                let z = standardizer.apply(row);
                let d = z.len();
                let mut out = *b2;
                for (j, (b, w_out)) in b1.iter().zip(w2).enumerate() {
                    let h = dot(&w1[j * d..(j + 1) * d], &z) + b;
                    if h > 0.0 {
                        out += w_out * h;
                    }
                }
                out
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> bool {
        self.score(row) > 0.0
    }

    pub fn accuracy(&self, data: &ProbeData) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = (0..data.len()).filter(|&i| self.predict(data.row(i)) == data.y[i]).count();
        correct as f64 / data.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn train(family: ProbeFamily, data: &ProbeData, hyper: &ProbeHyper) -> Result<ProbeModel> {
    data.check()?;
    let params = match family {
        ProbeFamily::MassMean => train_mass_mean(data),
        ProbeFamily::LogisticRegression => train_logistic(data, hyper).0,
        ProbeFamily::LinearSvm => train_svm(data, hyper),
        ProbeFamily::Mlp => train_mlp(data, hyper),
    };
    Ok(ProbeModel { family, layer: 0, params, train_seed: hyper.seed })
}

/// Logistic regression plus the regularized training loss before the first
/// step and after every step.
pub fn train_logistic_traced(data: &ProbeData, hyper: &ProbeHyper) -> Result<(ProbeModel, Vec<f64>)> {
    data.check()?;
    let (params, losses) = train_logistic(data, hyper);
    Ok((ProbeModel { family: ProbeFamily::LogisticRegression, layer: 0, params, train_seed: hyper.seed }, losses))
}

/// Class means accumulated row by row in input order, divided by the count.
fn class_means(data: &ProbeData) -> (Vec<f64>, Vec<f64>) {
    let mut sum_t = vec![0.0; data.dim];
    let mut sum_f = vec![0.0; data.dim];
    let (mut n_t, mut n_f) = (0usize, 0usize);
    for i in 0..data.len() {
        let (acc, n) = if data.y[i] { (&mut sum_t, &mut n_t) } else { (&mut sum_f, &mut n_f) };
        for (a, v) in acc.iter_mut().zip(data.row(i)) {
            *a += v;
        }
        *n += 1;
    }
    sum_t.iter_mut().for_each(|v| *v /= n_t as f64);
    sum_f.iter_mut().for_each(|v| *v /= n_f as f64);
    (sum_t, sum_f)
}

fn train_mass_mean(data: &ProbeData) -> ProbeParams {
    let (mu_t, mu_f) = class_means(data);
    let weights: Vec<f64> = mu_t.iter().zip(&mu_f).map(|(t, f)| t - f).collect();
    let threshold = (dot(&weights, &mu_t) + dot(&weights, &mu_f)) / 2.0;
    ProbeParams::Linear { weights, bias: -threshold, standardizer: None }
}

fn sign(y: bool) -> f64 {
    if y {
        1.0
    } else {
        -1.0
    }
}

/// `log(1 + exp(-m))` without overflow.
fn softplus_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logistic_loss(data: &ProbeData, w: &[f64], b: f64, lambda: f64) -> f64 {
    let n = data.len() as f64;
    let data_loss: f64 = (0..data.len())
        .map(|i| softplus_neg(sign(data.y[i]) * (dot(w, data.row(i)) + b)))
        .sum::<f64>()
        / n;
    data_loss + 0.5 * lambda * dot(w, w)
}

/// Full-batch gradient descent with step `1/L`, where `L` bounds the
/// smoothness constant of the objective. This keeps the loss non-increasing.
fn train_logistic(data: &ProbeData, hyper: &ProbeHyper) -> (ProbeParams, Vec<f64>) {
    let standardizer = Standardizer::fit(data);
    let z = standardizer.transform(data);
    let n = z.len() as f64;
    let lambda = hyper.logistic_lambda;
    let mean_sq: f64 = (0..z.len()).map(|i| dot(z.row(i), z.row(i)) + 1.0).sum::<f64>() / n;
    let step = 1.0 / (0.25 * mean_sq + lambda);

    let mut w = vec![0.0; z.dim];
    let mut b = 0.0;
    let mut losses = vec![logistic_loss(&z, &w, b, lambda)];
    for _ in 0..hyper.logistic_max_iter {
        let mut gw: Vec<f64> = w.iter().map(|wi| lambda * wi).collect();
        let mut gb = 0.0;
        for i in 0..z.len() {
            let y = sign(z.y[i]);
            let row = z.row(i);
            // d/ds log(1 + exp(-y s)) = -y σ(-y s)
            let coef = -y * sigmoid(-y * (dot(&w, row) + b)) / n;
            for (g, x) in gw.iter_mut().zip(row) {
                *g += coef * x;
            }
            gb += coef;
        }
        let grad_norm = (dot(&gw, &gw) + gb * gb).sqrt();
        if grad_norm < hyper.logistic_grad_tol {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * g;
        }
        b -= step * gb;
        losses.push(logistic_loss(&z, &w, b, lambda));
    }
    (ProbeParams::Linear { weights: w, bias: b, standardizer: Some(standardizer) }, losses)
}

/// Hinge loss with L2 penalty by full-batch subgradient descent, step
/// `1/(λ t)`. The bias is carried as a constant feature.
fn train_svm(data: &ProbeData, hyper: &ProbeHyper) -> ProbeParams {
    let standardizer = Standardizer::fit(data);
    let z = standardizer.transform(data);
    let n = z.len() as f64;
    let lambda = hyper.svm_lambda;
    let dim = z.dim;
    // w[dim] is the bias weight on a constant 1 feature.
    let mut w = vec![0.0; dim + 1];
    for t in 1..=hyper.svm_epochs {
        let eta = 1.0 / (lambda * t as f64);
        let mut g: Vec<f64> = vec![0.0; dim + 1];
        for i in 0..z.len() {
            let y = sign(z.y[i]);
            let row = z.row(i);
            let margin = y * (dot(&w[..dim], row) + w[dim]);
            if margin < 1.0 {
                for (gj, x) in g.iter_mut().zip(row) {
                    *gj += y * x;
                }
                g[dim] += y;
            }
        }
        let shrink = 1.0 - eta * lambda;
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj = shrink * *wj + eta * gj / n;
        }
    }
    let bias = w[dim];
    w.truncate(dim);
    ProbeParams::Linear { weights: w, bias, standardizer: Some(standardizer) }
}

/// One hidden ReLU layer, logistic output, binary cross-entropy, Adam on
/// shuffled mini-batches.
fn train_mlp(data: &ProbeData, hyper: &ProbeHyper) -> ProbeParams {
    let standardizer = Standardizer::fit(data);
    let z = standardizer.transform(data);
    let (d, h) = (z.dim, hyper.mlp_width);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let he = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("valid sd");
    let out_init = Normal::new(0.0, (1.0 / h as f64).sqrt()).expect("valid sd");
    // parameter layout: w1 [h*d], b1 [h], w2 [h], b2 [1]
    let n_params = h * d + h + h + 1;
    let mut p = vec![0.0; n_params];
    for v in &mut p[..h * d] {
        *v = he.sample(&mut rng);
    }
    for v in &mut p[h * d + h..h * d + 2 * h] {
        *v = out_init.sample(&mut rng);
    }
    let (o_b1, o_w2, o_b2) = (h * d, h * d + h, h * d + 2 * h);

    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..z.len()).collect();
    let mut grad = vec![0.0; n_params];
    let mut hidden = vec![0.0; h];
    let batch = hyper.mlp_batch.max(1);

    for _ in 0..hyper.mlp_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let x = z.row(i);
                let mut out = p[o_b2];
                for j in 0..h {
                    let pre = dot(&p[j * d..(j + 1) * d], x) + p[o_b1 + j];
                    hidden[j] = pre.max(0.0);
                    out += p[o_w2 + j] * hidden[j];
                }
                let target = if z.y[i] { 1.0 } else { 0.0 };
                let delta = (sigmoid(out) - target) * scale;
                grad[o_b2] += delta;
                for j in 0..h {
                    if hidden[j] > 0.0 {
                        grad[o_w2 + j] += delta * hidden[j];
                        let dh = delta * p[o_w2 + j];
                        grad[o_b1 + j] += dh;
                        for (g, xk) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *g += dh * xk;
                        }
                    }
                }
            }
            step += 1;
            let bc1 = 1.0 - beta1.powi(step);
            let bc2 = 1.0 - beta2.powi(step);
            for k in 0..n_params {
                m[k] = beta1 * m[k] + (1.0 - beta1) * grad[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * grad[k] * grad[k];
                p[k] -= hyper.mlp_learning_rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            }
        }
    }
    let b2 = p[o_b2];
    let w2 = p[o_w2..o_b2].to_vec();
    let b1 = p[o_b1..o_w2].to_vec();
    p.truncate(h * d);
    ProbeParams::Mlp { standardizer, w1: p, b1, w2, b2 }
}

/// Train/test partition of statement (or row) indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, the first `round(ratio·n)` going to training.
/// Both halves are kept non-empty.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ProbeError::BadRatio(ratio));
    }
    if n < 2 {
        return Err(ProbeError::TooFewStatements(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(n_train);
    Ok(Split { train: idx, test })
}

/// Statement-level split: a statement's true and false rows always land on
/// the same side, so both classes appear in equal numbers on both sides.
pub fn split(set: &ActivationSet, ratio: f64, seed: u64) -> Result<Split> {
    if set.n_statements() < MIN_STATEMENTS {
        return Err(ProbeError::TooFewStatements(set.n_statements()));
    }
    split_indices(set.n_statements(), ratio, seed)
}

/// True-side and false-side activations of `statements` at `layer` (0-based)
/// under `context`.
pub fn layer_data(set: &ActivationSet, context: ContextKind, statements: &[usize], layer: usize) -> Result<ProbeData> {
    let ct = set.require_condition(ConditionLabel::new(TruthSide::True, context))?;
    let cf = set.require_condition(ConditionLabel::new(TruthSide::False, context))?;
    let mut data = ProbeData::new(set.hidden_dim());
    for &k in statements {
        for (c, label) in [(ct, true), (cf, false)] {
            let row: Vec<f64> = set.vector(c, k, layer).iter().map(|&v| f64::from(v)).collect();
            data.push(&row, label);
        }
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub ratio: f64,
    pub split_seed: u64,
    /// Condition the probe is trained and evaluated on.
    pub context: ContextKind,
    pub hyper: ProbeHyper,
    pub exec: Exec,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            split_seed: 0,
            context: ContextKind::None,
            hyper: ProbeHyper::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLayerResult {
    pub layer: usize,
    pub family: ProbeFamily,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub family: ProbeFamily,
    pub context: ContextKind,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub train_seed: u64,
    pub layers: Vec<ProbeLayerResult>,
}

impl ProbeReport {
    /// Test accuracy per layer, `n_valid` = number of test rows.
    pub fn curve(&self) -> LayerCurve {
        LayerCurve {
            quantity: Quantity::ProbeAccuracy,
            points: self
                .layers
                .iter()
                .map(|r| LayerPoint {
                    layer: r.layer,
                    mean: Some(r.test_accuracy),
                    sem: None,
                    n_valid: r.n_test,
                    n_excluded: 0,
                })
                .collect(),
        }
    }

    /// CSV with columns `layer,family,train_acc,test_acc,n_train,n_test`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "family", "train_acc", "test_acc", "n_train", "n_test"])?;
        for r in &self.layers {
            w.write_record([
                r.layer.to_string(),
                r.family.name().to_string(),
                r.train_accuracy.to_string(),
                r.test_accuracy.to_string(),
                r.n_train.to_string(),
                r.n_test.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Train one probe per layer and report train/test accuracy.
pub fn accuracy_curve(
    set: &ActivationSet,
    family: ProbeFamily,
    opts: &ProbeOptions,
) -> Result<(Vec<ProbeModel>, ProbeReport)> {
    let sp = split(set, opts.ratio, opts.split_seed)?;
    let results = opts.exec.try_map(set.n_layers(), |l| -> Result<(ProbeModel, ProbeLayerResult)> {
        let train_data = layer_data(set, opts.context, &sp.train, l)?;
        let test_data = layer_data(set, opts.context, &sp.test, l)?;
        let mut model = train(family, &train_data, &opts.hyper)?;
        model.layer = l + 1;
        let row = ProbeLayerResult {
            layer: l + 1,
            family,
            train_accuracy: model.accuracy(&train_data),
            test_accuracy: model.accuracy(&test_data),
            n_train: train_data.len(),
            n_test: test_data.len(),
        };
        Ok((model, row))
    })?;
    let (models, layers) = results.into_iter().unzip();
    Ok((
        models,
        ProbeReport {
            family,
            context: opts.context,
            split_ratio: opts.ratio,
            split_seed: opts.split_seed,
            train_seed: opts.hyper.seed,
            layers,
        },
    ))
}

/// Two Gaussian classes centred at `±separation/2 · e₀` with unit variance.
/// Shared by tests, benches and the acceptance suite.
pub fn gaussian_fixture(n_per_class: usize, dim: usize, separation: f64, seed: u64) -> ProbeData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = ProbeData::new(dim);
    for i in 0..2 * n_per_class {
        let label = i % 2 == 0;
        let mut row: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        row[0] += sign(label) * separation / 2.0;
        data.push(&row, label);
    }
    data
}

/// Same rows with labels permuted uniformly at random.
pub fn shuffle_labels(data: &ProbeData, seed: u64) -> ProbeData {
    let mut out = data.clone();
    out.y.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Random row split of loose labelled data.
pub fn split_rows(data: &ProbeData, ratio: f64, seed: u64) -> Result<(ProbeData, ProbeData)> {
    let sp = split_indices(data.len(), ratio, seed)?;
    Ok((data.subset(&sp.train), data.subset(&sp.test)))
}

#[doc(hidden)]
pub fn random_rows(n: usize, dim: usize, seed: u64) -> ProbeData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = ProbeData::new(dim);
    for i in 0..n {
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        data.push(&row, i % 2 == 0);
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actdump::ConditionLabel;
    use proptest::prelude::*;

    fn quick_hyper() -> ProbeHyper {
        ProbeHyper { mlp_width: 32, mlp_epochs: 40, svm_epochs: 300, ..ProbeHyper::default() }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_indices(10, 0.8, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        assert_eq!(split_indices(10, 0.8, 3).unwrap(), s);
        assert!(matches!(split_indices(10, 1.0, 0), Err(ProbeError::BadRatio(_))));
    }

    #[test]
    fn split_seed_sweep_disjoint_exhaustive() {
        for seed in 0..10 {
            let s = split_indices(100, 0.8, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
            assert_eq!(s.train.len(), 80);
        }
    }

    #[test]
    fn split_requires_five_statements() {
        let set = tiny_set(4, 1, 2, |_, _, _, _| 0.0);
        assert!(matches!(split(&set, 0.8, 0), Err(ProbeError::TooFewStatements(4))));
    }

    fn tiny_set(k: usize, l: usize, d: usize, f: impl Fn(usize, usize, usize, usize) -> f32) -> ActivationSet {
        let conds = ConditionLabel::BASE.to_vec();
        let mut tensor = Vec::new();
        for c in 0..conds.len() {
            for s in 0..k {
                for layer in 0..l {
                    for j in 0..d {
                        tensor.push(f(c, s, layer, j));
                    }
                }
            }
        }
        ActivationSet::with_all_ok("t", l, d, (0..k).map(|i| format!("s{i}")).collect(), conds, tensor).unwrap()
    }

    #[test]
    fn separable_gaussians_all_families() {
        let data = gaussian_fixture(100, 2, 10.0, 1);
        let (train_d, test_d) = split_rows(&data, 0.8, 2).unwrap();
        for family in ProbeFamily::ALL {
            let m = train(family, &train_d, &quick_hyper()).unwrap();
            assert!(m.accuracy(&test_d) >= 0.99, "{family:?}: {}", m.accuracy(&test_d));
        }
    }

    #[test]
    fn shuffled_labels_near_chance() {
        let data = shuffle_labels(&gaussian_fixture(500, 2, 10.0, 4), 5);
        let (train_d, test_d) = split_rows(&data, 0.8, 6).unwrap();
        assert_eq!(test_d.len(), 200);
        for family in [ProbeFamily::MassMean, ProbeFamily::LogisticRegression, ProbeFamily::LinearSvm] {
            let acc = train(family, &train_d, &quick_hyper()).unwrap().accuracy(&test_d);
            assert!((0.40..=0.60).contains(&acc), "{family:?}: {acc}");
        }
    }

    #[test]
    fn mass_mean_weights_are_mean_difference() {
        let data = gaussian_fixture(50, 5, 3.0, 9);
        let m = train(ProbeFamily::MassMean, &data, &ProbeHyper::default()).unwrap();
        let mut st = vec![0.0; 5];
        let mut sf = vec![0.0; 5];
        let (mut nt, mut nf) = (0.0, 0.0);
        for i in 0..data.len() {
            let (acc, n) = if data.y[i] { (&mut st, &mut nt) } else { (&mut sf, &mut nf) };
            for j in 0..5 {
                acc[j] += data.row(i)[j];
            }
            *n += 1.0;
        }
        let expected: Vec<f64> = (0..5).map(|j| st[j] / nt - sf[j] / nf).collect();
        assert_eq!(m.direction().unwrap(), expected.as_slice());
    }

    #[test]
    fn single_class_rejected() {
        let mut data = ProbeData::new(2);
        data.push(&[1.0, 2.0], true);
        data.push(&[2.0, 2.0], true);
        assert!(matches!(train(ProbeFamily::MassMean, &data, &ProbeHyper::default()), Err(ProbeError::SingleClass)));
        let mut bad = gaussian_fixture(3, 2, 1.0, 0);
        bad.x[3] = f64::NAN;
        assert!(matches!(
            train(ProbeFamily::LogisticRegression, &bad, &ProbeHyper::default()),
            Err(ProbeError::NonFinite { row: 1, dim: 1 })
        ));
    }

    #[test]
    fn logistic_loss_monotone() {
        let data = gaussian_fixture(60, 4, 1.5, 3);
        let (_, losses) = train_logistic_traced(&data, &ProbeHyper::default()).unwrap();
        assert!(losses.len() > 10);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = gaussian_fixture(40, 3, 2.0, 8);
        for family in ProbeFamily::ALL {
            let a = train(family, &data, &quick_hyper()).unwrap();
            let b = train(family, &data, &quick_hyper()).unwrap();
            assert_eq!(a, b, "{family:?}");
        }
    }

    #[test]
    fn planted_separability_only_in_middle_layers() {
        // Layers 3..=5 (0-based) separate true from false; the rest carry none.
        let set = tiny_set(60, 8, 4, |c, s, l, j| {
            let noise = (((c * 7919 + s * 104_729 + l * 1_299_709 + j * 15_485_863) % 1000) as f32) / 500.0 - 1.0;
            let is_true = c % 2 == 0;
            let signal = if (3..=5).contains(&l) && j == 0 {
                if is_true { 4.0 } else { -4.0 }
            } else {
                0.0
            };
            signal + noise
        });
        let opts = ProbeOptions { hyper: quick_hyper(), ..ProbeOptions::default() };
        let (_, report) = accuracy_curve(&set, ProbeFamily::MassMean, &opts).unwrap();
        for r in &report.layers {
            if (4..=6).contains(&r.layer) {
                assert!(r.test_accuracy >= 0.95, "{r:?}");
            } else {
                assert!(r.test_accuracy <= 0.75, "{r:?}");
            }
            assert_eq!(r.n_train + r.n_test, 120);
            assert_eq!(r.n_train, 96);
        }
        assert_eq!(report.curve().n_layers(), 8);
    }

    #[test]
    fn parallel_and_sequential_curves_match() {
        let set = tiny_set(20, 3, 3, |c, s, l, j| ((c * 13 + s * 7 + l * 3 + j) % 11) as f32 - 5.0);
        let seq = ProbeOptions { exec: Exec::Sequential, hyper: quick_hyper(), ..ProbeOptions::default() };
        let par = ProbeOptions { exec: Exec::Parallel, ..seq };
        for family in ProbeFamily::ALL {
            assert_eq!(
                accuracy_curve(&set, family, &seq).unwrap(),
                accuracy_curve(&set, family, &par).unwrap()
            );
        }
    }

    proptest! {
        #[test]
        fn mass_mean_translation_equivariant(
            seed in 0u64..1000,
            shift in prop::collection::vec(-50.0f64..50.0, 3),
        ) {
            let data = random_rows(20, 3, seed);
            let mut moved = data.clone();
            for i in 0..moved.len() {
                for j in 0..3 {
                    moved.x[i * 3 + j] += shift[j];
                }
            }
            let a = train(ProbeFamily::MassMean, &data, &ProbeHyper::default()).unwrap();
            let b = train(ProbeFamily::MassMean, &moved, &ProbeHyper::default()).unwrap();
            for (x, y) in a.direction().unwrap().iter().zip(b.direction().unwrap()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn mass_mean_predictions_invariant_to_rescaling(
            seed in 0u64..1000,
            exponent in -6i32..6,
        ) {
            // Powers of two rescale exactly in binary floating point.
            let alpha = 2f64.powi(exponent);
            let data = random_rows(30, 4, seed);
            let mut scaled = data.clone();
            scaled.x.iter_mut().for_each(|v| *v *= alpha);
            let a = train(ProbeFamily::MassMean, &data, &ProbeHyper::default()).unwrap();
            let b = train(ProbeFamily::MassMean, &scaled, &ProbeHyper::default()).unwrap();
            for i in 0..data.len() {
                prop_assert_eq!(a.predict(data.row(i)), b.predict(scaled.row(i)));
            }
        }
    }
}
