//! Evaluation protocols: PCC/RMSE trajectory forecasting metrics,
//! incremental-prefix and sliding-window classification, confusion
//! statistics, and wall-clock timing.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::allen::Label;
use crate::dynamics::{forecast, DynamicsError, GenerativeClassifier, LabelDynamics, Trajectory};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("correlation undefined for constant input")]
    UndefinedCorrelation,
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Sample Pearson correlation. Errors on constant input (of either
/// series), which callers are expected to count and exclude.
pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            a: pred.len(),
            b: truth.len(),
        });
    }
    if pred.len() < 2 {
        return Err(MetricsError::InvalidParameter(
            "correlation needs at least 2 points".into(),
        ));
    }
    let n = pred.len() as f64;
    let mean_p: f64 = pred.iter().sum::<f64>() / n;
    let mean_t: f64 = truth.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let dp = p - mean_p;
        let dt = t - mean_t;
        cov += dp * dt;
        var_p += dp * dp;
        var_t += dt * dt;
    }
    if var_p == 0.0 || var_t == 0.0 {
        return Err(MetricsError::UndefinedCorrelation);
    }
    Ok((cov / (var_p * var_t).sqrt()).clamp(-1.0, 1.0))
}

/// Root mean square error.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            a: pred.len(),
            b: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::InvalidParameter("empty series".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Sliding-window forecast evaluation parameters.
#[derive(Debug, Clone, Copy)]
pub struct MotionEvalParams {
    /// Observed window length before each forecast.
    pub window: usize,
    /// Forecast horizon.
    pub horizon: usize,
    pub stride: usize,
}

impl Default for MotionEvalParams {
    fn default() -> Self {
        Self {
            window: 100,
            horizon: 50,
            stride: 1,
        }
    }
}

/// Per-joint forecast quality for one label: mean/std over test
/// trajectories of the per-trajectory values pooled over window
/// positions. Standard deviations are population standard deviations.
#[derive(Debug, Clone)]
pub struct MotionEvalResult {
    pub pcc_mean: Vec<f64>,
    pub pcc_std: Vec<f64>,
    pub rmse_mean: Vec<f64>,
    pub rmse_std: Vec<f64>,
    pub trajectories: usize,
    /// Per joint: trajectories excluded from the PCC aggregate because the
    /// pooled ground truth was constant.
    pub pcc_excluded: Vec<usize>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Closed-loop forecast evaluation of one label's model over its test
/// trajectories: every window position produces a `horizon`-step rollout
/// compared against ground truth; predictions are pooled per trajectory
/// before computing per-joint PCC and RMSE.
pub fn evaluate_motion(
    model: &LabelDynamics,
    test: &[Trajectory],
    params: &MotionEvalParams,
) -> Result<MotionEvalResult, MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::InvalidParameter("empty test set".into()));
    }
    if params.stride == 0 || params.horizon == 0 || params.window < model.order() {
        return Err(MetricsError::InvalidParameter(
            "need stride >= 1, horizon >= 1, window >= model order".into(),
        ));
    }
    let d = model.dim();
    let mut pcc_per_traj: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut rmse_per_traj: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut excluded = vec![0usize; d];

    for traj in test {
        let x = traj.samples();
        let t_len = x.nrows();
        if t_len < params.window + params.horizon {
            return Err(MetricsError::InvalidParameter(format!(
                "trajectory of {t_len} samples is shorter than window + horizon = {}",
                params.window + params.horizon
            )));
        }
        let mut pooled_pred: Vec<Vec<f64>> = vec![Vec::new(); d];
        let mut pooled_truth: Vec<Vec<f64>> = vec![Vec::new(); d];
        let mut w = 0;
        while w + params.window + params.horizon <= t_len {
            let history = x.rows(w, params.window).into_owned();
            let pred = forecast(model, &history, params.horizon)?;
            for k in 0..params.horizon {
                for j in 0..d {
                    pooled_pred[j].push(pred[(k, j)]);
                    pooled_truth[j].push(x[(w + params.window + k, j)]);
                }
            }
            w += params.stride;
        }
        for j in 0..d {
            match pcc(&pooled_pred[j], &pooled_truth[j]) {
                Ok(r) => pcc_per_traj[j].push(r),
                Err(MetricsError::UndefinedCorrelation) => excluded[j] += 1,
                Err(e) => return Err(e),
            }
            rmse_per_traj[j].push(rmse(&pooled_pred[j], &pooled_truth[j])?);
        }
    }

    let mut result = MotionEvalResult {
        pcc_mean: Vec::with_capacity(d),
        pcc_std: Vec::with_capacity(d),
        rmse_mean: Vec::with_capacity(d),
        rmse_std: Vec::with_capacity(d),
        trajectories: test.len(),
        pcc_excluded: excluded,
    };
    for j in 0..d {
        let (pm, ps) = mean_std(&pcc_per_traj[j]);
        let (rm, rs) = mean_std(&rmse_per_traj[j]);
        result.pcc_mean.push(pm);
        result.pcc_std.push(ps);
        result.rmse_mean.push(rm);
        result.rmse_std.push(rs);
    }
    Ok(result)
}

/// On-line classification protocol.
#[derive(Debug, Clone, Copy)]
pub enum Protocol {
    /// Classify growing prefixes `X_{1:step}, X_{1:2 step}, ...`; the
    /// longest prefix's prediction feeds the confusion matrix.
    IncrementalPrefix { step: usize },
    /// Classify every window of `size` samples shifted by `stride` and
    /// take the majority label (ties resolved by class order).
    SlidingWindow { size: usize, stride: usize },
}

/// One labelled test series.
#[derive(Debug)]
pub struct ClassSample<'a> {
    pub truth: Label,
    pub series: &'a DMatrix<f64>,
}

/// Classification outcome: confusion counts (rows = true class, columns =
/// predicted), derived rates, and the accuracy-vs-prefix-length curve for
/// the incremental protocol.
#[derive(Debug, Clone)]
pub struct ClassEvalResult {
    pub classes: Vec<Label>,
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub macro_f1: f64,
    pub prefix_curve: Option<Vec<(usize, f64)>>,
    /// First prefix length from which the accuracy stays at its final
    /// value.
    pub plateau_onset: Option<usize>,
}

impl ClassEvalResult {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Modal value of `votes` (class indices); ties go to the smallest index.
pub fn majority_vote(votes: &[usize], n_classes: usize) -> usize {
    let mut counts = vec![0usize; n_classes];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn confusion_rates(
    classes: &[Label],
    confusion: &[Vec<usize>],
) -> (f64, Vec<f64>, Vec<f64>, f64) {
    let n = classes.len();
    let total: usize = confusion.iter().flatten().sum();
    let trace: usize = (0..n).map(|i| confusion[i][i]).sum();
    let accuracy = trace as f64 / total as f64;
    let mut precision = vec![0.0; n];
    let mut recall = vec![0.0; n];
    let mut f1_sum = 0.0;
    for i in 0..n {
        let tp = confusion[i][i] as f64;
        let pred_total: usize = (0..n).map(|r| confusion[r][i]).sum();
        let true_total: usize = confusion[i].iter().sum();
        precision[i] = if pred_total > 0 {
            tp / pred_total as f64
        } else {
            0.0
        };
        recall[i] = if true_total > 0 {
            tp / true_total as f64
        } else {
            0.0
        };
        f1_sum += if precision[i] + recall[i] > 0.0 {
            2.0 * precision[i] * recall[i] / (precision[i] + recall[i])
        } else {
            0.0
        };
    }
    (accuracy, precision, recall, f1_sum / n as f64)
}

/// Evaluate a classifier under one of the two on-line protocols.
pub fn evaluate_actions(
    classifier: &GenerativeClassifier,
    samples: &[ClassSample],
    protocol: &Protocol,
) -> Result<ClassEvalResult, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::InvalidParameter("empty test set".into()));
    }
    let classes = classifier.classes().to_vec();
    let n = classes.len();
    let class_index = |label: &Label| -> Result<usize, MetricsError> {
        classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| MetricsError::InvalidParameter(format!("unknown class `{label}`")))
    };

    let mut confusion = vec![vec![0usize; n]; n];
    let mut prefix_curve = None;
    let mut plateau_onset = None;

    match *protocol {
        Protocol::SlidingWindow { size, stride } => {
            if size <= classifier.max_order() || stride == 0 {
                return Err(MetricsError::InvalidParameter(
                    "window must exceed the model order and stride must be >= 1".into(),
                ));
            }
            for sample in samples {
                let t_len = sample.series.nrows();
                if t_len < size {
                    return Err(MetricsError::InvalidParameter(
                        "series shorter than the window".into(),
                    ));
                }
                let mut votes = Vec::new();
                let mut w = 0;
                while w + size <= t_len {
                    let window = sample.series.rows(w, size).into_owned();
                    let post = classifier.classify(&window)?;
                    let mut best = 0;
                    for (i, &p) in post.iter().enumerate() {
                        if p > post[best] {
                            best = i;
                        }
                    }
                    votes.push(best);
                    w += stride;
                }
                let pred = majority_vote(&votes, n);
                confusion[class_index(&sample.truth)?][pred] += 1;
            }
        }
        Protocol::IncrementalPrefix { step } => {
            if step == 0 {
                return Err(MetricsError::InvalidParameter("step must be >= 1".into()));
            }
            let t_len = samples[0].series.nrows();
            let lengths: Vec<usize> = (1..)
                .map(|k| k * step)
                .take_while(|&l| l <= t_len)
                .filter(|&l| l > classifier.max_order())
                .collect();
            if lengths.is_empty() {
                return Err(MetricsError::InvalidParameter(
                    "no usable prefix lengths".into(),
                ));
            }
            let mut correct_at = vec![0usize; lengths.len()];
            for sample in samples {
                if sample.series.nrows() < *lengths.last().unwrap() {
                    return Err(MetricsError::InvalidParameter(
                        "series shorter than the longest prefix".into(),
                    ));
                }
                let truth = class_index(&sample.truth)?;
                let mut final_pred = 0;
                for (li, &len) in lengths.iter().enumerate() {
                    let prefix = sample.series.rows(0, len).into_owned();
                    let post = classifier.classify(&prefix)?;
                    let mut best = 0;
                    for (i, &p) in post.iter().enumerate() {
                        if p > post[best] {
                            best = i;
                        }
                    }
                    if best == truth {
                        correct_at[li] += 1;
                    }
                    final_pred = best;
                }
                confusion[truth][final_pred] += 1;
            }
            let curve: Vec<(usize, f64)> = lengths
                .iter()
                .zip(&correct_at)
                .map(|(&l, &c)| (l, c as f64 / samples.len() as f64))
                .collect();
            let final_acc = curve.last().unwrap().1;
            let mut onset = curve.last().unwrap().0;
            for (l, acc) in curve.iter().rev() {
                if (acc - final_acc).abs() < 1e-12 {
                    onset = *l;
                } else {
                    break;
                }
            }
            plateau_onset = Some(onset);
            prefix_curve = Some(curve);
        }
    }

    let (accuracy, precision, recall, macro_f1) = confusion_rates(&classes, &confusion);
    Ok(ClassEvalResult {
        classes,
        confusion,
        accuracy,
        precision,
        recall,
        macro_f1,
        prefix_curve,
        plateau_onset,
    })
}

/// Wall-clock timing of `op` on a monotonic clock: 3 unmeasured warm-up
/// runs, then `reps` measured repetitions.
#[derive(Debug, Clone, Copy)]
pub struct Timing {
    pub mean: f64,
    pub std: f64,
    pub reps: usize,
}

pub fn benchmark<F: FnMut()>(reps: usize, mut op: F) -> Result<Timing, MetricsError> {
    if reps < 10 {
        return Err(MetricsError::InvalidParameter(
            "need at least 10 repetitions".into(),
        ));
    }
    for _ in 0..3 {
        op();
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        op();
        times.push(start.elapsed().as_secs_f64());
    }
    let (mean, std) = mean_std(&times);
    Ok(Timing { mean, std, reps })
}

// --- report CSVs -------------------------------------------------------

/// Per-label motion table: per-joint PCC avg/std and RMSE avg/std.
pub fn motion_results_to_csv(rows: &[(Label, MotionEvalResult)]) -> String {
    let d = rows.first().map(|(_, r)| r.pcc_mean.len()).unwrap_or(0);
    let mut out = String::from("label");
    for part in ["pcc_avg", "pcc_std", "rmse_avg", "rmse_std"] {
        for j in 1..=d {
            let _ = write!(out, ",{part}_q{j}");
        }
    }
    out.push_str(",trajectories,pcc_excluded\n");
    for (label, r) in rows {
        let _ = write!(out, "{label}");
        for vals in [&r.pcc_mean, &r.pcc_std, &r.rmse_mean, &r.rmse_std] {
            for v in vals.iter() {
                let _ = write!(out, ",{v:.4}");
            }
        }
        let _ = writeln!(
            out,
            ",{},{}",
            r.trajectories,
            r.pcc_excluded.iter().sum::<usize>()
        );
    }
    out
}

/// Per-classifier accuracy table.
pub fn accuracy_results_to_csv(rows: &[(String, f64)]) -> String {
    let mut out = String::from("model,accuracy\n");
    for (name, acc) in rows {
        let _ = writeln!(out, "{name},{acc:.4}");
    }
    out
}

/// Confusion matrix with precision/recall/F1 footer rows.
pub fn confusion_to_csv(result: &ClassEvalResult) -> String {
    let mut out = String::from("true\\pred");
    for c in &result.classes {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (i, row) in result.confusion.iter().enumerate() {
        let _ = write!(out, "{}", result.classes[i]);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    let _ = write!(out, "precision");
    for p in &result.precision {
        let _ = write!(out, ",{p:.4}");
    }
    out.push('\n');
    let _ = write!(out, "recall");
    for r in &result.recall {
        let _ = write!(out, ",{r:.4}");
    }
    out.push('\n');
    let _ = writeln!(out, "macro_f1,{:.4}", result.macro_f1);
    let _ = writeln!(out, "accuracy,{:.4}", result.accuracy);
    out
}

/// `prefix_len,accuracy` curve for external plotting.
pub fn prefix_curve_to_csv(result: &ClassEvalResult) -> String {
    let mut out = String::from("prefix_len,accuracy\n");
    if let Some(curve) = &result.prefix_curve {
        for (len, acc) in curve {
            let _ = writeln!(out, "{len},{acc:.4}");
        }
    }
    out
}
