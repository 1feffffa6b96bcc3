//! Label-conditioned continuous dynamics: order-p linear-Gaussian
//! autoregressive models of the joint-angle vector.
//!
//! One [`LabelDynamics`] per discrete label serves three jobs: closed-loop
//! mean forecasting, per-step observation likelihood for the recursive
//! filter, and generative window classification. Fitting is pooled ridge
//! least squares over all trajectories of a label.
//!
//! History convention: wherever a `history` matrix is passed, rows are
//! time-ordered and the **last row is the most recent sample** `x_{t-1}`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::allen::Label;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("insufficient data: {rows} usable rows, need at least {needed}")]
    InsufficientData { rows: usize, needed: usize },
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("least-squares solve failed: {0}")]
    SolveFailed(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A `T x d` sequence of joint-angle samples with sampling period `dt`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    samples: DMatrix<f64>,
    dt: f64,
    label: Option<Label>,
}

impl Trajectory {
    pub fn new(samples: DMatrix<f64>, dt: f64) -> Result<Self, DynamicsError> {
        if samples.nrows() < 2 {
            return Err(DynamicsError::InvalidParameter(format!(
                "trajectory needs at least 2 samples, got {}",
                samples.nrows()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidParameter(
                "trajectory contains non-finite samples".into(),
            ));
        }
        Ok(Self {
            samples,
            dt,
            label: None,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, dt: f64) -> Result<Self, DynamicsError> {
        let t = rows.len();
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(DynamicsError::InvalidParameter(
                "ragged trajectory rows".into(),
            ));
        }
        let samples = DMatrix::from_fn(t, d, |i, j| rows[i][j]);
        Self::new(samples, dt)
    }

    pub fn with_label(mut self, label: impl Into<Label>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees T >= 2
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn label(&self) -> Option<&Label> {
        self.label.as_ref()
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.samples.row(t).transpose()
    }
}

/// Optional per-step context records, carried through signatures but not
/// consumed by any shipped model.
#[derive(Debug, Clone, Default)]
pub struct ContextStream {
    records: Vec<String>,
}

impl ContextStream {
    pub fn new(records: Vec<String>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Fitting knobs: model order, ridge strength, and the variance floor that
/// keeps likelihoods finite on noise-free data.
#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub order: usize,
    pub ridge: f64,
    pub sigma_floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            order: 2,
            ridge: 1e-6,
            sigma_floor: 1e-8,
        }
    }
}

/// Provenance recorded on a fitted model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitMeta {
    pub dataset_id: String,
    pub sample_count: usize,
}

/// An order-p linear-Gaussian autoregressor with intercept and diagonal
/// noise covariance:
///
/// `x_t ~ N(A_1 x_{t-1} + ... + A_p x_{t-p} + b, diag(sigma))`
#[derive(Debug, Clone)]
pub struct LabelDynamics {
    label: Label,
    coeffs: Vec<DMatrix<f64>>,
    offset: DVector<f64>,
    /// Per-coordinate noise variances, floored at the fit's `sigma_floor`.
    sigma: DVector<f64>,
    meta: FitMeta,
}

impl LabelDynamics {
    pub fn new(
        label: impl Into<Label>,
        coeffs: Vec<DMatrix<f64>>,
        offset: DVector<f64>,
        sigma: DVector<f64>,
    ) -> Result<Self, DynamicsError> {
        let d = offset.len();
        if coeffs.is_empty() {
            return Err(DynamicsError::InvalidParameter("order must be >= 1".into()));
        }
        for a in &coeffs {
            if a.nrows() != d || a.ncols() != d {
                return Err(DynamicsError::DimensionMismatch {
                    what: "coefficient matrix",
                    expected: d,
                    got: a.nrows().max(a.ncols()),
                });
            }
        }
        if sigma.len() != d {
            return Err(DynamicsError::DimensionMismatch {
                what: "noise variance vector",
                expected: d,
                got: sigma.len(),
            });
        }
        if sigma.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(DynamicsError::InvalidParameter(
                "noise variances must be positive and finite".into(),
            ));
        }
        Ok(Self {
            label: label.into(),
            coeffs,
            offset,
            sigma,
            meta: FitMeta::default(),
        })
    }

    pub fn label(&self) -> &Label {
        &self.label
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    /// Lag-k coefficient matrix `A_k` (1-based lag).
    pub fn coeff(&self, k: usize) -> &DMatrix<f64> {
        &self.coeffs[k - 1]
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn meta(&self) -> &FitMeta {
        &self.meta
    }

    pub fn with_meta(mut self, meta: FitMeta) -> Self {
        self.meta = meta;
        self
    }

    /// Conditional mean given the last `p` samples (time-ordered rows,
    /// last row most recent).
    pub fn predict_mean(&self, history: &DMatrix<f64>) -> Result<DVector<f64>, DynamicsError> {
        let p = self.order();
        if history.nrows() < p {
            return Err(DynamicsError::DimensionMismatch {
                what: "history rows",
                expected: p,
                got: history.nrows(),
            });
        }
        if history.ncols() != self.dim() {
            return Err(DynamicsError::DimensionMismatch {
                what: "history columns",
                expected: self.dim(),
                got: history.ncols(),
            });
        }
        let t = history.nrows();
        let mut mean = self.offset.clone();
        for k in 1..=p {
            let lagged = history.row(t - k).transpose();
            mean += &self.coeffs[k - 1] * lagged;
        }
        Ok(mean)
    }
}

fn check_same_dim(trajectories: &[Trajectory]) -> Result<usize, DynamicsError> {
    let d = trajectories
        .first()
        .ok_or_else(|| DynamicsError::InvalidParameter("no trajectories given".into()))?
        .dim();
    for t in trajectories {
        if t.dim() != d {
            return Err(DynamicsError::DimensionMismatch {
                what: "trajectory dimension",
                expected: d,
                got: t.dim(),
            });
        }
    }
    Ok(d)
}

/// Fit one label's dynamics by pooled ridge least squares.
///
/// Regression rows are all one-step targets `x_t` with full in-trajectory
/// lag history; the ridge penalty applies uniformly to all coefficients
/// including the intercept (at the default 1e-6 it only conditions the
/// solve). The noise covariance is the diagonal of the pooled empirical
/// residual variance, floored at `config.sigma_floor`.
pub fn fit_dynamics(
    label: impl Into<Label>,
    trajectories: &[Trajectory],
    config: &FitConfig,
) -> Result<LabelDynamics, DynamicsError> {
    let p = config.order;
    if p == 0 {
        return Err(DynamicsError::InvalidParameter("order must be >= 1".into()));
    }
    if !(config.ridge >= 0.0) {
        return Err(DynamicsError::InvalidParameter(format!(
            "ridge must be >= 0, got {}",
            config.ridge
        )));
    }
    let d = check_same_dim(trajectories)?;
    let m = p * d + 1;

    let usable: usize = trajectories
        .iter()
        .map(|t| t.len().saturating_sub(p))
        .sum();
    let needed = p * d + d + 1;
    if usable < needed {
        return Err(DynamicsError::InsufficientData {
            rows: usable,
            needed,
        });
    }

    // Normal equations on the pooled design: features are
    // [x_{t-1}, ..., x_{t-p}, 1].
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut cross = DMatrix::<f64>::zeros(m, d);
    let mut phi = DVector::<f64>::zeros(m);
    for traj in trajectories {
        let x = traj.samples();
        for t in p..x.nrows() {
            for k in 1..=p {
                for j in 0..d {
                    phi[(k - 1) * d + j] = x[(t - k, j)];
                }
            }
            phi[m - 1] = 1.0;
            gram.syger(1.0, &phi, &phi, 1.0);
            for j in 0..d {
                let y = x[(t, j)];
                for i in 0..m {
                    cross[(i, j)] += phi[i] * y;
                }
            }
        }
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..m {
        for j in (i + 1)..m {
            gram[(i, j)] = gram[(j, i)];
        }
    }

    let mut regularized = gram.clone();
    for i in 0..m {
        regularized[(i, i)] += config.ridge;
    }

    // Cholesky when the system is well posed; otherwise the minimum-norm
    // solution of the normal equations (still a least-squares minimizer).
    let weights = match regularized.clone().cholesky() {
        Some(chol) => chol.solve(&cross),
        None => {
            let pinv = regularized
                .svd(true, true)
                .pseudo_inverse(1e-12)
                .map_err(|e| DynamicsError::SolveFailed(e.to_string()))?;
            &pinv * &cross
        }
    };

    let coeffs: Vec<DMatrix<f64>> = (0..p)
        .map(|k| weights.rows(k * d, d).transpose())
        .collect();
    let offset = weights.row(m - 1).transpose();

    // Pooled residual variance per coordinate.
    let mut sq_sum = DVector::<f64>::zeros(d);
    let mut history = DMatrix::<f64>::zeros(p, d);
    for traj in trajectories {
        let x = traj.samples();
        for t in p..x.nrows() {
            for k in 0..p {
                for j in 0..d {
                    history[(k, j)] = x[(t - p + k, j)];
                }
            }
            let mut mean = offset.clone();
            for k in 1..=p {
                mean += &coeffs[k - 1] * history.row(p - k).transpose();
            }
            for j in 0..d {
                let r = x[(t, j)] - mean[j];
                sq_sum[j] += r * r;
            }
        }
    }
    let sigma = DVector::from_fn(d, |j, _| (sq_sum[j] / usable as f64).max(config.sigma_floor));

    LabelDynamics::new(label, coeffs, offset, sigma)
}

/// Log-density (nats) of `x_t` under the model's conditional Gaussian
/// given exactly `p` history rows.
pub fn step_log_likelihood(
    model: &LabelDynamics,
    history: &DMatrix<f64>,
    x_t: &DVector<f64>,
) -> Result<f64, DynamicsError> {
    if history.nrows() != model.order() {
        return Err(DynamicsError::DimensionMismatch {
            what: "history rows",
            expected: model.order(),
            got: history.nrows(),
        });
    }
    let mean = model.predict_mean(history)?;
    if x_t.len() != mean.len() {
        return Err(DynamicsError::DimensionMismatch {
            what: "observation dimension",
            expected: mean.len(),
            got: x_t.len(),
        });
    }
    let mut ll = 0.0;
    for j in 0..mean.len() {
        let var = model.sigma[j];
        let r = x_t[j] - mean[j];
        ll -= 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var);
    }
    Ok(ll)
}

/// Deterministic closed-loop mean rollout: each predicted step is fed back
/// as input for the next. Returns a `horizon x d` matrix.
pub fn forecast(
    model: &LabelDynamics,
    history: &DMatrix<f64>,
    horizon: usize,
) -> Result<DMatrix<f64>, DynamicsError> {
    let p = model.order();
    if history.nrows() < p {
        return Err(DynamicsError::DimensionMismatch {
            what: "history rows",
            expected: p,
            got: history.nrows(),
        });
    }
    if horizon == 0 {
        return Err(DynamicsError::InvalidParameter("horizon must be >= 1".into()));
    }
    let d = model.dim();
    let mut buffer = DMatrix::<f64>::zeros(p, d);
    for k in 0..p {
        buffer.set_row(k, &history.row(history.nrows() - p + k));
    }
    let mut out = DMatrix::<f64>::zeros(horizon, d);
    for step in 0..horizon {
        let mean = model.predict_mean(&buffer)?;
        out.set_row(step, &mean.transpose());
        // Shift the lag buffer up and append the prediction.
        for k in 0..p.saturating_sub(1) {
            let next = buffer.row(k + 1).into_owned();
            buffer.set_row(k, &next);
        }
        buffer.set_row(p - 1, &mean.transpose());
    }
    Ok(out)
}

/// Normalize `prior(l) * exp(score(l))` stably: the max finite score is
/// subtracted before exponentiation, and zero-prior labels stay exactly 0.
pub fn posterior_from_log_scores(prior: &[f64], scores: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    if prior.len() != scores.len() {
        return Err(DynamicsError::DimensionMismatch {
            what: "prior length",
            expected: scores.len(),
            got: prior.len(),
        });
    }
    if prior.iter().any(|&p| p < 0.0 || !p.is_finite()) || prior.iter().all(|&p| p == 0.0) {
        return Err(DynamicsError::InvalidParameter(
            "prior must be non-negative and not all zero".into(),
        ));
    }
    let max = prior
        .iter()
        .zip(scores)
        .filter(|(&p, _)| p > 0.0)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut post: Vec<f64> = prior
        .iter()
        .zip(scores)
        .map(|(&p, &s)| if p > 0.0 { p * (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = post.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(DynamicsError::InvalidParameter(
            "posterior normalizer vanished".into(),
        ));
    }
    for v in &mut post {
        *v /= total;
    }
    Ok(post)
}

/// Posterior over candidate labels for one observation window.
///
/// Every model is scored over the same steps `t = max_order..window_len`,
/// each using its own lag depth, so log-likelihood sums are comparable.
pub fn classify_window(
    models: &[LabelDynamics],
    window: &DMatrix<f64>,
    prior: &[f64],
) -> Result<Vec<f64>, DynamicsError> {
    if models.is_empty() {
        return Err(DynamicsError::InvalidParameter("no candidate models".into()));
    }
    if prior.len() != models.len() {
        return Err(DynamicsError::DimensionMismatch {
            what: "prior length",
            expected: models.len(),
            got: prior.len(),
        });
    }
    let max_order = models.iter().map(LabelDynamics::order).max().unwrap();
    if window.nrows() <= max_order {
        return Err(DynamicsError::InvalidParameter(format!(
            "window of {} samples cannot score order-{max_order} models",
            window.nrows()
        )));
    }
    let mut scores = vec![0.0; models.len()];
    for (i, model) in models.iter().enumerate() {
        if prior[i] == 0.0 {
            continue; // annihilated regardless of score
        }
        let p = model.order();
        let mut sum = 0.0;
        for t in max_order..window.nrows() {
            let history = window.rows(t - p, p).into_owned();
            let x_t = window.row(t).transpose();
            sum += step_log_likelihood(model, &history, &x_t)?;
        }
        scores[i] = sum;
    }
    posterior_from_log_scores(prior, &scores)
}

/// A bank of label-conditioned models acting as a generative classifier
/// over classes (several models may vote for one class).
#[derive(Debug, Clone)]
pub struct GenerativeClassifier {
    models: Vec<LabelDynamics>,
    model_class: Vec<Label>,
    classes: Vec<Label>,
    prior: Vec<f64>,
}

impl GenerativeClassifier {
    /// `classes[i]` is the class credited when model `i` explains the
    /// window best. The class order of first appearance fixes tie-breaks.
    pub fn new(models: Vec<LabelDynamics>, classes: Vec<Label>) -> Result<Self, DynamicsError> {
        if models.len() != classes.len() || models.is_empty() {
            return Err(DynamicsError::InvalidParameter(
                "need one class per model and at least one model".into(),
            ));
        }
        let prior = vec![1.0; models.len()];
        let mut unique = Vec::new();
        for c in &classes {
            if !unique.contains(c) {
                unique.push(c.clone());
            }
        }
        Ok(Self {
            models,
            model_class: classes,
            classes: unique,
            prior,
        })
    }

    pub fn with_prior(mut self, prior: Vec<f64>) -> Result<Self, DynamicsError> {
        if prior.len() != self.models.len() {
            return Err(DynamicsError::DimensionMismatch {
                what: "prior length",
                expected: self.models.len(),
                got: prior.len(),
            });
        }
        self.prior = prior;
        Ok(self)
    }

    pub fn classes(&self) -> &[Label] {
        &self.classes
    }

    pub fn max_order(&self) -> usize {
        self.models.iter().map(LabelDynamics::order).max().unwrap()
    }

    /// Class posterior for a window; probabilities follow `classes()` order.
    pub fn classify(&self, window: &DMatrix<f64>) -> Result<Vec<f64>, DynamicsError> {
        let model_post = classify_window(&self.models, window, &self.prior)?;
        let mut class_post = vec![0.0; self.classes.len()];
        for (i, p) in model_post.iter().enumerate() {
            let ci = self
                .classes
                .iter()
                .position(|c| c == &self.model_class[i])
                .unwrap();
            class_post[ci] += p;
        }
        Ok(class_post)
    }

    /// Most probable class, ties broken by class order.
    pub fn predict(&self, window: &DMatrix<f64>) -> Result<Label, DynamicsError> {
        let post = self.classify(window)?;
        let mut best = 0;
        for (i, &p) in post.iter().enumerate() {
            if p > post[best] {
                best = i;
            }
        }
        Ok(self.classes[best].clone())
    }
}

// --- model file format -----------------------------------------------------
//
//   label=l1 order=2 d=3 dataset=D-0 samples=900
//   A1: <d*d floats row-major>
//   A2: ...
//   b: <d floats>
//   Sigma: <d*d floats row-major, diagonal>
//
// Floats are written with Rust's shortest round-trip formatting, so parsed
// values are bit-identical to the written ones.

/// Serialize a model to the self-describing text format.
pub fn model_to_text(model: &LabelDynamics) -> String {
    let d = model.dim();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "label={} order={} d={} dataset={} samples={}",
        model.label(),
        model.order(),
        d,
        if model.meta.dataset_id.is_empty() {
            "-"
        } else {
            &model.meta.dataset_id
        },
        model.meta.sample_count
    );
    let fmt_row = |vals: &mut String, m: &DMatrix<f64>| {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                vals.push(' ');
                let _ = write!(vals, "{}", m[(i, j)]);
            }
        }
    };
    for k in 1..=model.order() {
        let mut line = format!("A{k}:");
        fmt_row(&mut line, model.coeff(k));
        out.push_str(&line);
        out.push('\n');
    }
    let mut line = String::from("b:");
    for j in 0..d {
        let _ = write!(line, " {}", model.offset()[j]);
    }
    out.push_str(&line);
    out.push('\n');
    let mut line = String::from("Sigma:");
    for i in 0..d {
        for j in 0..d {
            let v = if i == j { model.sigma()[i] } else { 0.0 };
            let _ = write!(line, " {v}");
        }
    }
    out.push_str(&line);
    out.push('\n');
    out
}

/// Parse a model from the text format.
pub fn parse_model(text: &str) -> Result<LabelDynamics, DynamicsError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('#')
    });
    let (line_no, header) = lines
        .next()
        .ok_or(DynamicsError::Parse {
            line: 0,
            msg: "empty model file".into(),
        })?;
    let mut label = None;
    let mut order = None;
    let mut d = None;
    let mut dataset = String::new();
    let mut samples = 0usize;
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("label", v)) => label = Some(Label::from(v)),
            Some(("order", v)) => {
                order = Some(v.parse::<usize>().map_err(|_| DynamicsError::Parse {
                    line: line_no + 1,
                    msg: format!("bad order `{v}`"),
                })?)
            }
            Some(("d", v)) => {
                d = Some(v.parse::<usize>().map_err(|_| DynamicsError::Parse {
                    line: line_no + 1,
                    msg: format!("bad dimension `{v}`"),
                })?)
            }
            Some(("dataset", v)) => dataset = if v == "-" { String::new() } else { v.into() },
            Some(("samples", v)) => samples = v.parse().unwrap_or(0),
            _ => {
                return Err(DynamicsError::Parse {
                    line: line_no + 1,
                    msg: format!("unrecognised header field `{field}`"),
                })
            }
        }
    }
    let (label, order, d) = match (label, order, d) {
        (Some(l), Some(p), Some(d)) => (l, p, d),
        _ => {
            return Err(DynamicsError::Parse {
                line: line_no + 1,
                msg: "header must set label=, order= and d=".into(),
            })
        }
    };

    let mut parse_values = |expected_tag: String, count: usize| -> Result<Vec<f64>, DynamicsError> {
        let (line_no, line) = lines.next().ok_or(DynamicsError::Parse {
            line: 0,
            msg: format!("missing `{expected_tag}` line"),
        })?;
        let (tag, rest) = line.split_once(':').ok_or(DynamicsError::Parse {
            line: line_no + 1,
            msg: "expected `tag: values`".into(),
        })?;
        if tag.trim() != expected_tag {
            return Err(DynamicsError::Parse {
                line: line_no + 1,
                msg: format!("expected `{expected_tag}`, found `{}`", tag.trim()),
            });
        }
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DynamicsError::Parse {
                line: line_no + 1,
                msg: e.to_string(),
            })?;
        if vals.len() != count {
            return Err(DynamicsError::Parse {
                line: line_no + 1,
                msg: format!("expected {count} values, got {}", vals.len()),
            });
        }
        Ok(vals)
    };

    let mut coeffs = Vec::with_capacity(order);
    for k in 1..=order {
        let vals = parse_values(format!("A{k}"), d * d)?;
        coeffs.push(DMatrix::from_fn(d, d, |i, j| vals[i * d + j]));
    }
    let b = parse_values("b".into(), d)?;
    let sig = parse_values("Sigma".into(), d * d)?;
    for i in 0..d {
        for j in 0..d {
            if i != j && sig[i * d + j] != 0.0 {
                return Err(DynamicsError::Parse {
                    line: 0,
                    msg: "Sigma must be diagonal".into(),
                });
            }
        }
    }
    let sigma = DVector::from_fn(d, |i, _| sig[i * d + i]);
    Ok(LabelDynamics::new(label, coeffs, DVector::from_vec(b), sigma)?.with_meta(FitMeta {
        dataset_id: dataset,
        sample_count: samples,
    }))
}

pub fn save_model(model: &LabelDynamics, path: impl AsRef<Path>) -> Result<(), DynamicsError> {
    Ok(fs::write(path, model_to_text(model))?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LabelDynamics, DynamicsError> {
    parse_model(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn constant_traj(c: &[f64], t: usize) -> Trajectory {
        Trajectory::from_rows(vec![c.to_vec(); t], 1.0).unwrap()
    }

    #[test]
    fn fit_constant_data_reproduces_constant() {
        let c = [0.3, -1.2, 2.5];
        let trajs = vec![constant_traj(&c, 30)];
        let cfg = FitConfig {
            order: 1,
            ridge: 0.0,
            sigma_floor: 1e-8,
        };
        let model = fit_dynamics("const", &trajs, &cfg).unwrap();
        let history = DMatrix::from_fn(1, 3, |_, j| c[j]);
        let mean = model.predict_mean(&history).unwrap();
        for j in 0..3 {
            assert!(approx(mean[j], c[j], 1e-9), "mean {mean:?}");
            assert_eq!(model.sigma()[j], 1e-8); // zero residual hits the floor
        }
    }

    fn simulate_ar1(a: &DMatrix<f64>, x0: &DVector<f64>, t: usize) -> Trajectory {
        let mut rows = Vec::with_capacity(t);
        let mut x = x0.clone();
        for _ in 0..t {
            rows.push(x.iter().copied().collect());
            x = a * x;
        }
        Trajectory::from_rows(rows, 1.0).unwrap()
    }

    #[test]
    fn fit_recovers_known_stable_dynamics() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[0.9, 0.05, 0.0, 0.0, 0.8, 0.1, 0.05, 0.0, 0.85],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let trajs: Vec<Trajectory> = (0..6)
            .map(|_| {
                let x0 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                simulate_ar1(&a, &x0, 40)
            })
            .collect();
        let cfg = FitConfig {
            order: 1,
            ridge: 0.0,
            sigma_floor: 1e-12,
        };
        let model = fit_dynamics("ar1", &trajs, &cfg).unwrap();

        // Held-out one-step predictions match A* x.
        let x0 = DVector::from_vec(vec![0.4, -0.7, 0.2]);
        let held_out = simulate_ar1(&a, &x0, 20);
        for t in 1..held_out.len() {
            let history = held_out.samples().rows(t - 1, 1).into_owned();
            let mean = model.predict_mean(&history).unwrap();
            let truth = held_out.row(t);
            for j in 0..3 {
                assert!(
                    approx(mean[j], truth[j], 1e-8),
                    "t={t} j={j}: {} vs {}",
                    mean[j],
                    truth[j]
                );
            }
        }
    }

    #[test]
    fn duplication_invariance_at_zero_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let traj = Trajectory::from_rows(rows, 1.0).unwrap();
        let cfg = FitConfig {
            order: 2,
            ridge: 0.0,
            sigma_floor: 1e-10,
        };
        let once = fit_dynamics("x", &[traj.clone()], &cfg).unwrap();
        let twice = fit_dynamics("x", &[traj.clone(), traj], &cfg).unwrap();
        for k in 1..=2 {
            for (a, b) in once.coeff(k).iter().zip(twice.coeff(k).iter()) {
                assert!(approx(*a, *b, 1e-12), "{a} vs {b}");
            }
        }
        for j in 0..3 {
            assert!(approx(once.offset()[j], twice.offset()[j], 1e-12));
        }
    }

    #[test]
    fn fit_matches_independent_dense_solver() {
        // Independent route: assemble the full design matrix and solve the
        // unregularized least-squares problem by SVD on the design itself.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let traj = Trajectory::from_rows(rows.clone(), 1.0).unwrap();
        let p = 2;
        let d = 2;
        let n = rows.len() - p;
        let m = p * d + 1;
        let mut design = DMatrix::<f64>::zeros(n, m);
        let mut target = DMatrix::<f64>::zeros(n, d);
        for t in p..rows.len() {
            for k in 1..=p {
                for j in 0..d {
                    design[(t - p, (k - 1) * d + j)] = rows[t - k][j];
                }
            }
            design[(t - p, m - 1)] = 1.0;
            for j in 0..d {
                target[(t - p, j)] = rows[t][j];
            }
        }
        let svd = design.svd(true, true);
        let oracle_weights = svd.solve(&target, 1e-12).unwrap();

        let cfg = FitConfig {
            order: p,
            ridge: 0.0,
            sigma_floor: 1e-12,
        };
        let model = fit_dynamics("x", &[traj], &cfg).unwrap();
        for k in 1..=p {
            for i in 0..d {
                for j in 0..d {
                    let expect = oracle_weights[((k - 1) * d + j, i)];
                    assert!(
                        approx(model.coeff(k)[(i, j)], expect, 1e-8),
                        "A{k}[{i},{j}]"
                    );
                }
            }
        }
        for j in 0..d {
            assert!(approx(model.offset()[j], oracle_weights[(m - 1, j)], 1e-8));
        }
    }

    #[test]
    fn insufficient_data_is_reported() {
        let traj = constant_traj(&[1.0, 2.0, 3.0], 4);
        let cfg = FitConfig {
            order: 3,
            ridge: 0.0,
            sigma_floor: 1e-8,
        };
        // 1 usable row < 3*3 + 3 + 1 = 13.
        assert!(matches!(
            fit_dynamics("x", &[traj], &cfg),
            Err(DynamicsError::InsufficientData { rows: 1, needed: 13 })
        ));
    }

    fn unit_model(sigma: &[f64]) -> LabelDynamics {
        let d = sigma.len();
        LabelDynamics::new(
            "m",
            vec![DMatrix::identity(d, d)],
            DVector::zeros(d),
            DVector::from_vec(sigma.to_vec()),
        )
        .unwrap()
    }

    #[test]
    fn log_likelihood_at_mean_is_normalizer() {
        let model = unit_model(&[0.5, 2.0, 1.0]);
        let history = DMatrix::from_row_slice(1, 3, &[0.1, -0.2, 0.3]);
        let x = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let ll = step_log_likelihood(&model, &history, &x).unwrap();
        let normalizer: f64 = -0.5
            * (0..3)
                .map(|j| (2.0 * std::f64::consts::PI * model.sigma()[j]).ln())
                .sum::<f64>();
        assert!(approx(ll, normalizer, 1e-12));

        // One standard deviation off in one coordinate: normalizer - 0.5.
        let mut x1 = x.clone();
        x1[1] += model.sigma()[1].sqrt();
        let ll1 = step_log_likelihood(&model, &history, &x1).unwrap();
        assert!(approx(ll1, normalizer - 0.5, 1e-12));
    }

    #[test]
    fn log_likelihood_matches_direct_density_oracle() {
        let model = LabelDynamics::new(
            "m",
            vec![DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.9])],
            DVector::from_vec(vec![0.3, -0.1]),
            DVector::from_vec(vec![0.7, 1.3]),
        )
        .unwrap();
        let history = DMatrix::from_row_slice(1, 2, &[0.4, -0.6]);
        let x = DVector::from_vec(vec![1.1, 0.2]);
        let ll = step_log_likelihood(&model, &history, &x).unwrap();

        // Direct diagonal-Gaussian evaluation.
        let mean = [
            0.5 * 0.4 + 0.1 * (-0.6) + 0.3,
            -0.2 * 0.4 + 0.9 * (-0.6) - 0.1,
        ];
        let mut expect = 0.0;
        for j in 0..2 {
            let var: f64 = model.sigma()[j];
            let z: f64 = x[j] - mean[j];
            expect += (-0.5 * z * z / var).exp().ln()
                - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        }
        assert!(approx(ll, expect, 1e-12));
    }

    #[test]
    fn log_likelihood_gradient_vanishes_at_mean() {
        let model = unit_model(&[0.5, 2.0]);
        let history = DMatrix::from_row_slice(1, 2, &[0.7, -0.4]);
        let mean = model.predict_mean(&history).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut plus = mean.clone();
            let mut minus = mean.clone();
            plus[j] += h;
            minus[j] -= h;
            let grad = (step_log_likelihood(&model, &history, &plus).unwrap()
                - step_log_likelihood(&model, &history, &minus).unwrap())
                / (2.0 * h);
            assert!(grad.abs() < 1e-6, "grad[{j}] = {grad}");
        }
    }

    #[test]
    fn forecast_identity_and_constant_dynamics() {
        let identity = unit_model(&[1.0, 1.0]);
        let history = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.7, -0.3]);
        let out = forecast(&identity, &history, 5).unwrap();
        for step in 0..5 {
            assert_eq!(out[(step, 0)], 0.7);
            assert_eq!(out[(step, 1)], -0.3);
        }

        let constant = LabelDynamics::new(
            "c",
            vec![DMatrix::zeros(2, 2)],
            DVector::from_vec(vec![1.5, -2.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        let out = forecast(&constant, &history, 4).unwrap();
        for step in 0..4 {
            assert_eq!(out[(step, 0)], 1.5);
            assert_eq!(out[(step, 1)], -2.0);
        }
    }

    #[test]
    fn classify_window_separates_distinct_dynamics() {
        // Two contractive AR(1) models pulling to different fixed points.
        let make = |target: f64| {
            LabelDynamics::new(
                format!("to{target}"),
                vec![DMatrix::from_row_slice(1, 1, &[0.5])],
                DVector::from_vec(vec![0.5 * target]),
                DVector::from_vec(vec![1e-4]),
            )
            .unwrap()
        };
        let a = make(2.0);
        let b = make(-2.0);
        // Window from model a's mean rollout.
        let mut rows = vec![vec![0.1]];
        for t in 1..12 {
            let prev = rows[t - 1][0];
            rows.push(vec![0.5 * prev + 1.0]);
        }
        let window = DMatrix::from_fn(rows.len(), 1, |i, _| rows[i][0]);
        let post = classify_window(&[a.clone(), b.clone()], &window, &[1.0, 1.0]).unwrap();
        assert!(post[0] > 0.99, "{post:?}");

        // Zero prior annihilates regardless of evidence.
        let post = classify_window(&[a.clone(), b.clone()], &window, &[1.0, 0.0]).unwrap();
        assert_eq!(post, vec![1.0, 0.0]);

        // Identical models split evenly.
        let post = classify_window(&[a.clone(), a], &window, &[1.0, 1.0]).unwrap();
        assert!(approx(post[0], 0.5, 1e-12) && approx(post[1], 0.5, 1e-12));
    }

    #[test]
    fn posterior_sums_to_one_and_shift_invariant() {
        let prior = [0.2, 0.5, 0.3];
        let scores = [-1200.0, -1195.0, -1201.5];
        let p1 = posterior_from_log_scores(&prior, &scores).unwrap();
        assert!(approx(p1.iter().sum::<f64>(), 1.0, 1e-12));
        let shifted: Vec<f64> = scores.iter().map(|s| s + 777.0).collect();
        let p2 = posterior_from_log_scores(&prior, &shifted).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!(approx(*a, *b, 1e-12));
        }
    }

    #[test]
    fn fitting_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trajs: Vec<Trajectory> = (0..3)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..30)
                    .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                Trajectory::from_rows(rows, 1.0).unwrap()
            })
            .collect();
        let cfg = FitConfig::default();
        let m1 = fit_dynamics("x", &trajs, &cfg).unwrap();
        let m2 = fit_dynamics("x", &trajs, &cfg).unwrap();
        assert_eq!(model_to_text(&m1), model_to_text(&m2));
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let traj = Trajectory::from_rows(rows, 1.0).unwrap();
        let model = fit_dynamics("l1", &[traj], &FitConfig::default())
            .unwrap()
            .with_meta(FitMeta {
                dataset_id: "D-0".into(),
                sample_count: 38,
            });
        let text = model_to_text(&model);
        let parsed = parse_model(&text).unwrap();
        assert_eq!(parsed.label(), model.label());
        assert_eq!(parsed.meta(), model.meta());
        for k in 1..=model.order() {
            for (a, b) in model.coeff(k).iter().zip(parsed.coeff(k).iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        for j in 0..model.dim() {
            assert_eq!(model.offset()[j].to_bits(), parsed.offset()[j].to_bits());
            assert_eq!(model.sigma()[j].to_bits(), parsed.sigma()[j].to_bits());
        }
        // And the re-serialization is byte-identical.
        assert_eq!(text, model_to_text(&parsed));
    }

    #[test]
    fn parse_rejects_malformed_models() {
        assert!(parse_model("").is_err());
        assert!(parse_model("label=x order=1 d=2\nA1: 1 0 0 1\nb: 0 0\n").is_err()); // no Sigma
        assert!(parse_model(
            "label=x order=1 d=2\nA1: 1 0 0 1\nb: 0 0\nSigma: 1 0.5 0 1\n"
        )
        .is_err()); // off-diagonal Sigma
        assert!(parse_model("label=x order=1 d=2\nA1: 1 0 0\nb: 0 0\nSigma: 1 0 0 1\n").is_err());
    }
}
