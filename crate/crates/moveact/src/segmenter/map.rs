//! Exact single-chain MAP segmentation by semi-Markov dynamic programming.
//!
//! The objective is the one-chain restriction of the joint model: per-step
//! label-conditioned likelihoods, initial/transition factors, explicit
//! duration masses, and the pairwise plausibility of each consecutive
//! segment pair. Complexity is `O(T * L^2 + T * L * d_max)` after the
//! per-label likelihood prefix sums.

use nalgebra::DMatrix;

use crate::allen::{ActionInterval, AllenRelation, CompositionTable, Label};
use crate::dynamics::{step_log_likelihood, LabelDynamics, Trajectory};

use super::{SegmentModel, SegmenterError};

/// A complete decomposition of a stream into labelled intervals, with its
/// log score under the joint objective.
#[derive(Debug, Clone)]
pub struct MapSegmentation {
    pub intervals: Vec<ActionInterval>,
    pub log_score: f64,
}

/// Log-likelihood table `ll[(l, t)]` for 0-based step `t`, with the same
/// warm-up convention as the on-line filter: steps with fewer than
/// `max_order` preceding samples score 0 for every label.
pub(crate) fn log_likelihood_table(
    stream: &Trajectory,
    models: &[LabelDynamics],
) -> Result<DMatrix<f64>, SegmenterError> {
    let t_len = stream.len();
    let n = models.len();
    let max_order = models.iter().map(LabelDynamics::order).max().unwrap_or(1);
    let mut ll = DMatrix::zeros(n, t_len);
    for (l, model) in models.iter().enumerate() {
        let p = model.order();
        for t in max_order..t_len {
            let hist = stream.samples().rows(t - p, p).into_owned();
            let x_t = stream.row(t);
            ll[(l, t)] = step_log_likelihood(model, &hist, &x_t)?;
        }
    }
    Ok(ll)
}

fn ln_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Exact maximizer of the one-chain joint objective.
///
/// Requires every duration support to start at 2 or more so the result is
/// expressible as valid intervals. Consecutive segments of a contiguous
/// chain relate by `before`, which is the relation scored against `table`.
pub fn map_segmentation(
    stream: &Trajectory,
    seg: &SegmentModel,
    models: &[LabelDynamics],
    table: &CompositionTable,
) -> Result<MapSegmentation, SegmenterError> {
    let n = seg.n_labels();
    if models.len() != n {
        return Err(SegmenterError::DimensionMismatch {
            what: "dynamics models",
            expected: n,
            got: models.len(),
        });
    }
    for l in 0..n {
        if seg.duration(l).d_min() < 2 {
            return Err(SegmenterError::InvalidModel(format!(
                "MAP segmentation needs d_min >= 2 (label `{}` has d_min {})",
                seg.labels()[l],
                seg.duration(l).d_min()
            )));
        }
    }
    let t_len = stream.len();
    let ll = log_likelihood_table(stream, models)?;

    // Prefix sums: sums[(l, t)] = sum of ll over steps 0..t.
    let mut sums = DMatrix::<f64>::zeros(n, t_len + 1);
    for l in 0..n {
        for t in 0..t_len {
            sums[(l, t + 1)] = sums[(l, t)] + ll[(l, t)];
        }
    }
    // 1-based inclusive span sum.
    let seg_ll = |l: usize, s: usize, e: usize| -> f64 { sums[(l, e)] - sums[(l, s - 1)] };

    // Pairwise link factors between consecutive labels.
    let mut link = DMatrix::from_element(n, n, f64::NEG_INFINITY);
    for prev in 0..n {
        for next in 0..n {
            let trans = seg.transition()[(prev, next)];
            let psi = table.relation_weight(
                &seg.labels()[prev],
                &seg.labels()[next],
                AllenRelation::Before,
            );
            link[(prev, next)] = ln_or_neg_inf(trans) + ln_or_neg_inf(psi);
        }
    }

    // value[(l, e)]: best log score of a complete segmentation of 1..=e
    // ending in a label-l segment. `incoming` caches the best predecessor
    // term per boundary.
    let mut value = DMatrix::from_element(n, t_len + 1, f64::NEG_INFINITY);
    let mut best_dur = DMatrix::from_element(n, t_len + 1, 0usize);
    let mut best_prev: DMatrix<i64> = DMatrix::from_element(n, t_len + 1, -1);
    let mut incoming = DMatrix::from_element(n, t_len + 1, f64::NEG_INFINITY);
    let mut incoming_arg: DMatrix<i64> = DMatrix::from_element(n, t_len + 1, -1);

    for e in 1..=t_len {
        for l in 0..n {
            let dist = seg.duration(l);
            let mut best = f64::NEG_INFINITY;
            let (mut arg_d, mut arg_prev) = (0usize, -1i64);
            let d_hi = dist.d_max().min(e);
            for d in dist.d_min()..=d_hi {
                let pmf = dist.pmf(d);
                if pmf == 0.0 {
                    continue;
                }
                let s = e - d + 1;
                let base = seg_ll(l, s, e) + pmf.ln();
                let (cand, prev) = if s == 1 {
                    (base + ln_or_neg_inf(seg.initial()[l]), -1i64)
                } else {
                    (base + incoming[(l, s - 1)], incoming_arg[(l, s - 1)])
                };
                if cand > best {
                    best = cand;
                    arg_d = d;
                    arg_prev = prev;
                }
            }
            value[(l, e)] = best;
            best_dur[(l, e)] = arg_d;
            best_prev[(l, e)] = arg_prev;
        }
        // Best link into each successor label across boundary e -> e+1.
        for next in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = -1i64;
            for prev in 0..n {
                let cand = value[(prev, e)] + link[(prev, next)];
                if cand > best {
                    best = cand;
                    arg = prev as i64;
                }
            }
            incoming[(next, e)] = best;
            incoming_arg[(next, e)] = arg;
        }
    }

    let mut final_label = 0;
    for l in 1..n {
        if value[(l, t_len)] > value[(final_label, t_len)] {
            final_label = l;
        }
    }
    if !value[(final_label, t_len)].is_finite() {
        return Err(SegmenterError::Infeasible);
    }

    // Backtrack.
    let mut intervals = Vec::new();
    let mut e = t_len;
    let mut l = final_label;
    loop {
        let d = best_dur[(l, e)];
        let s = e - d + 1;
        intervals.push(ActionInterval::new(seg.labels()[l].clone(), s, e)?);
        let prev = best_prev[(l, e)];
        if prev < 0 {
            break;
        }
        l = prev as usize;
        e = s - 1;
    }
    intervals.reverse();
    Ok(MapSegmentation {
        intervals,
        log_score: value[(final_label, t_len)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allen::{CompositionTable, DefaultPolicy, TableMode};
    use crate::segmenter::DurationDist;
    use nalgebra::{dmatrix, DVector};

    fn constant_model(label: &str, c: f64, var: f64) -> LabelDynamics {
        LabelDynamics::new(
            label,
            vec![DMatrix::zeros(1, 1)],
            DVector::from_vec(vec![c]),
            DVector::from_vec(vec![var]),
        )
        .unwrap()
    }

    fn all_table() -> CompositionTable {
        CompositionTable::new(TableMode::Hard, DefaultPolicy::AllAdmissible)
    }

    #[test]
    fn pure_segment_with_forbidden_self_transition_stays_single() {
        let seg = SegmentModel::new(
            vec!["a".into(), "b".into()],
            dmatrix![0.0, 1.0; 1.0, 0.0],
            vec![
                DurationDist::geometric(0.2, 2, 20).unwrap(),
                DurationDist::geometric(0.2, 2, 20).unwrap(),
            ],
            DVector::from_vec(vec![0.5, 0.5]),
        )
        .unwrap();
        let models = vec![constant_model("a", 0.0, 1e-3), constant_model("b", 2.0, 1e-3)];
        let stream = Trajectory::from_rows(vec![vec![0.0]; 10], 1.0).unwrap();
        let map = map_segmentation(&stream, &seg, &models, &all_table()).unwrap();
        assert_eq!(map.intervals.len(), 1);
        assert_eq!(map.intervals[0].label(), &Label::from("a"));
        assert_eq!(map.intervals[0].start(), 1);
        assert_eq!(map.intervals[0].end(), 10);
    }

    #[test]
    fn forbidding_every_consecutive_pair_is_infeasible() {
        let seg = SegmentModel::new(
            vec!["a".into(), "b".into()],
            dmatrix![0.5, 0.5; 0.5, 0.5],
            vec![
                DurationDist::geometric(0.5, 2, 5).unwrap(),
                DurationDist::geometric(0.5, 2, 5).unwrap(),
            ],
            DVector::from_vec(vec![0.5, 0.5]),
        )
        .unwrap();
        let models = vec![constant_model("a", 0.0, 1e-2), constant_model("b", 1.0, 1e-2)];
        // T = 12 > d_max = 5 forces at least two segments; the table
        // forbids every consecutive pair.
        let stream = Trajectory::from_rows(vec![vec![0.0]; 12], 1.0).unwrap();
        let none = CompositionTable::new(TableMode::Hard, DefaultPolicy::NoneAdmissible);
        assert!(matches!(
            map_segmentation(&stream, &seg, &models, &none),
            Err(SegmenterError::Infeasible)
        ));
    }

    #[test]
    fn rejects_duration_support_below_two() {
        let seg = SegmentModel::new(
            vec!["a".into()],
            dmatrix![1.0],
            vec![DurationDist::geometric(0.5, 1, 5).unwrap()],
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let models = vec![constant_model("a", 0.0, 1e-2)];
        let stream = Trajectory::from_rows(vec![vec![0.0]; 6], 1.0).unwrap();
        assert!(matches!(
            map_segmentation(&stream, &seg, &models, &all_table()),
            Err(SegmenterError::InvalidModel(_))
        ));
    }
}
