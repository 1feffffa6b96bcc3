//! Brute-force enumeration oracles for the joint objective.
//!
//! Both functions enumerate every admissible structure explicitly and are
//! guarded to tiny instances (`T <= 12`, at most 3 labels). They share no
//! recursion with the filter or the dynamic program, so they serve as
//! independent references: [`brute_force_map`] enumerates complete
//! segmentations, [`brute_force_posterior`] enumerates, per prefix, every
//! closed-segment sequence followed by an open segment, which is exactly
//! the event space of the recursive filter's (label, elapsed) belief.

use nalgebra::DMatrix;

use crate::allen::{AllenRelation, CompositionTable};
use crate::dynamics::{LabelDynamics, Trajectory};

use super::map::{log_likelihood_table, MapSegmentation};
use super::{SegmentModel, SegmenterError};
use crate::allen::ActionInterval;

const GUARD_T: usize = 12;
const GUARD_LABELS: usize = 3;

fn check_guard(stream: &Trajectory, seg: &SegmentModel) -> Result<(), SegmenterError> {
    if stream.len() > GUARD_T || seg.n_labels() > GUARD_LABELS {
        return Err(SegmenterError::InstanceTooLarge {
            t: stream.len(),
            labels: seg.n_labels(),
        });
    }
    Ok(())
}

fn ln_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

struct Tables {
    /// ll[(l, t)] + ln gate[t][l], 0-based steps.
    step: DMatrix<f64>,
    /// ln transition + ln psi(before) between consecutive labels.
    link: DMatrix<f64>,
    ln_init: Vec<f64>,
    /// pmf per label, index d - 1.
    pmf: Vec<Vec<f64>>,
    /// survival P(d >= tau) per label via direct summation, index tau - 1.
    survival: Vec<Vec<f64>>,
}

fn build_tables(
    stream: &Trajectory,
    seg: &SegmentModel,
    models: &[LabelDynamics],
    table: &CompositionTable,
    step_factors: Option<&DMatrix<f64>>,
) -> Result<Tables, SegmenterError> {
    let n = seg.n_labels();
    let t_len = stream.len();
    if models.len() != n {
        return Err(SegmenterError::DimensionMismatch {
            what: "dynamics models",
            expected: n,
            got: models.len(),
        });
    }
    let ll = log_likelihood_table(stream, models)?;
    let mut step = DMatrix::zeros(n, t_len);
    for l in 0..n {
        for t in 0..t_len {
            let gate = step_factors.map_or(1.0, |g| g[(t, l)]);
            step[(l, t)] = ll[(l, t)] + ln_or_neg_inf(gate);
        }
    }
    let mut link = DMatrix::from_element(n, n, f64::NEG_INFINITY);
    for prev in 0..n {
        for next in 0..n {
            link[(prev, next)] = ln_or_neg_inf(seg.transition()[(prev, next)])
                + ln_or_neg_inf(table.relation_weight(
                    &seg.labels()[prev],
                    &seg.labels()[next],
                    AllenRelation::Before,
                ));
        }
    }
    let ln_init = (0..n).map(|l| ln_or_neg_inf(seg.initial()[l])).collect();
    let d_cap = seg.d_max_overall();
    let mut pmf = Vec::with_capacity(n);
    let mut survival = Vec::with_capacity(n);
    for l in 0..n {
        let p: Vec<f64> = (1..=d_cap).map(|d| seg.duration(l).pmf(d)).collect();
        // Direct summation, independent of the precomputed hazards.
        let s: Vec<f64> = (1..=d_cap)
            .map(|tau| p[tau - 1..].iter().sum())
            .collect();
        pmf.push(p);
        survival.push(s);
    }
    Ok(Tables {
        step,
        link,
        ln_init,
        pmf,
        survival,
    })
}

impl Tables {
    fn n(&self) -> usize {
        self.ln_init.len()
    }

    fn span_ll(&self, l: usize, start: usize, end: usize) -> f64 {
        (start..=end).map(|t| self.step[(l, t - 1)]).sum()
    }

    /// Enumerate complete closed-segment sequences covering `1..=cover`
    /// (possibly zero segments when `cover == 0`), invoking `sink` with
    /// the last label (if any) and the accumulated log weight.
    fn for_each_closed(&self, cover: usize, sink: &mut dyn FnMut(Option<usize>, f64)) {
        fn rec(
            tables: &Tables,
            start: usize,
            cover: usize,
            prev: Option<usize>,
            logw: f64,
            sink: &mut dyn FnMut(Option<usize>, f64),
        ) {
            if start > cover {
                sink(prev, logw);
                return;
            }
            if logw == f64::NEG_INFINITY {
                return;
            }
            for l in 0..tables.n() {
                let enter = match prev {
                    None => tables.ln_init[l],
                    Some(p) => tables.link[(p, l)],
                };
                if enter == f64::NEG_INFINITY {
                    continue;
                }
                for d in 1..=tables.pmf[l].len() {
                    let end = start + d - 1;
                    if end > cover {
                        break;
                    }
                    let mass = tables.pmf[l][d - 1];
                    if mass == 0.0 {
                        continue;
                    }
                    let w = logw + enter + mass.ln() + tables.span_ll(l, start, end);
                    rec(tables, end + 1, cover, Some(l), w, sink);
                }
            }
        }
        rec(self, 1, cover, None, 0.0, sink);
    }
}

/// Enumerate every complete segmentation and return the argmax, scored by
/// the same objective as `map_segmentation` (no step factors).
pub fn brute_force_map(
    stream: &Trajectory,
    seg: &SegmentModel,
    models: &[LabelDynamics],
    table: &CompositionTable,
) -> Result<MapSegmentation, SegmenterError> {
    check_guard(stream, seg)?;
    let tables = build_tables(stream, seg, models, table, None)?;
    let t_len = stream.len();

    // Re-enumerate with explicit segment tracking for the argmax.
    let mut best: Option<(f64, Vec<(usize, usize, usize)>)> = None;
    fn rec(
        tables: &Tables,
        start: usize,
        cover: usize,
        prev: Option<usize>,
        logw: f64,
        segs: &mut Vec<(usize, usize, usize)>,
        best: &mut Option<(f64, Vec<(usize, usize, usize)>)>,
    ) {
        if start > cover {
            if best.as_ref().map_or(true, |(b, _)| logw > *b) {
                *best = Some((logw, segs.clone()));
            }
            return;
        }
        if logw == f64::NEG_INFINITY {
            return;
        }
        for l in 0..tables.n() {
            let enter = match prev {
                None => tables.ln_init[l],
                Some(p) => tables.link[(p, l)],
            };
            if enter == f64::NEG_INFINITY {
                continue;
            }
            for d in 1..=tables.pmf[l].len() {
                let end = start + d - 1;
                if end > cover {
                    break;
                }
                let mass = tables.pmf[l][d - 1];
                if mass == 0.0 {
                    continue;
                }
                let w = logw + enter + mass.ln() + tables.span_ll(l, start, end);
                segs.push((l, start, end));
                rec(tables, end + 1, cover, Some(l), w, segs, best);
                segs.pop();
            }
        }
    }
    rec(&tables, 1, t_len, None, 0.0, &mut Vec::new(), &mut best);

    let (log_score, segs) = best.filter(|(w, _)| w.is_finite()).ok_or(SegmenterError::Infeasible)?;
    let intervals = segs
        .into_iter()
        .map(|(l, s, e)| ActionInterval::new(seg.labels()[l].clone(), s, e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MapSegmentation {
        intervals,
        log_score,
    })
}

/// Exact per-step filtering marginals `p(label at t | x_{1:t})` by
/// enumerating, for every prefix, all closed-sequence-plus-open-segment
/// structures. `step_factors` (row `t - 1`, column label) are the fixed
/// per-step gate factors; `None` means ungated.
pub fn brute_force_posterior(
    stream: &Trajectory,
    seg: &SegmentModel,
    models: &[LabelDynamics],
    table: &CompositionTable,
    step_factors: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>, SegmenterError> {
    check_guard(stream, seg)?;
    let tables = build_tables(stream, seg, models, table, step_factors)?;
    let t_len = stream.len();
    let n = seg.n_labels();

    let mut marginals = DMatrix::zeros(t_len, n);
    for t in 1..=t_len {
        // Log-sum-exp accumulation per open label.
        let mut max_log = vec![f64::NEG_INFINITY; n];
        let mut weights: Vec<Vec<f64>> = vec![Vec::new(); n];
        for tau in 1..=t.min(tables.pmf[0].len().max(tables.survival[0].len())) {
            let cover = t - tau;
            let open_start = cover + 1;
            tables.for_each_closed(cover, &mut |prev, logw| {
                if logw == f64::NEG_INFINITY {
                    return;
                }
                for l in 0..n {
                    if tau > tables.survival[l].len() {
                        continue;
                    }
                    let surv = tables.survival[l][tau - 1];
                    if surv == 0.0 {
                        continue;
                    }
                    let enter = match prev {
                        None => tables.ln_init[l],
                        Some(p) => tables.link[(p, l)],
                    };
                    if enter == f64::NEG_INFINITY {
                        continue;
                    }
                    let w = logw + enter + surv.ln() + tables.span_ll(l, open_start, t);
                    if w.is_finite() {
                        max_log[l] = max_log[l].max(w);
                        weights[l].push(w);
                    }
                }
            });
        }
        let overall_max = max_log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if overall_max == f64::NEG_INFINITY {
            return Err(SegmenterError::DegenerateBelief { t });
        }
        let mut total = 0.0;
        let mut row = vec![0.0; n];
        for l in 0..n {
            let mass: f64 = weights[l].iter().map(|w| (w - overall_max).exp()).sum();
            row[l] = mass;
            total += mass;
        }
        for l in 0..n {
            marginals[(t - 1, l)] = row[l] / total;
        }
    }
    Ok(marginals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allen::{DefaultPolicy, Label, TableMode};
    use crate::segmenter::map::map_segmentation;
    use crate::segmenter::{
        run_online, DurationDist, FilterConfig, FixedFactorGate, UnitGate,
    };
    use nalgebra::{dmatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

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

    fn random_instance(
        seed: u64,
        n: usize,
        t_len: usize,
    ) -> (SegmentModel, Vec<LabelDynamics>, Trajectory) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = ["a", "b", "c"];
        let labels: Vec<Label> = names[..n].iter().map(|s| Label::from(*s)).collect();
        let mut transition = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut row: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v /= sum;
            }
            // Force exact row sums.
            let correction: f64 = 1.0 - row.iter().sum::<f64>();
            row[n - 1] += correction;
            for (j, v) in row.iter().enumerate() {
                transition[(i, j)] = *v;
            }
        }
        let durations: Vec<DurationDist> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    DurationDist::geometric(rng.random_range(0.2..0.9), 2, 5).unwrap()
                } else {
                    DurationDist::discretized_gaussian(
                        rng.random_range(2.0..5.0),
                        rng.random_range(0.5..2.0),
                        2,
                        5,
                    )
                    .unwrap()
                }
            })
            .collect();
        let mut init: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let sum: f64 = init.iter().sum();
        for v in &mut init {
            *v /= sum;
        }
        let corr: f64 = 1.0 - init.iter().sum::<f64>();
        init[n - 1] += corr;
        let seg = SegmentModel::new(labels, transition, durations, DVector::from_vec(init)).unwrap();

        let models: Vec<LabelDynamics> = (0..n)
            .map(|l| constant_model(names[l], l as f64 * 0.8, rng.random_range(0.05..0.4)))
            .collect();
        let rows: Vec<Vec<f64>> = (0..t_len)
            .map(|_| vec![rng.random_range(-0.5..2.0)])
            .collect();
        let stream = Trajectory::from_rows(rows, 1.0).unwrap();
        (seg, models, stream)
    }

    #[test]
    fn guard_rejects_large_instances() {
        let (seg, models, _) = random_instance(0, 2, 8);
        let long = Trajectory::from_rows(vec![vec![0.0]; 13], 1.0).unwrap();
        assert!(matches!(
            brute_force_map(&long, &seg, &models, &all_table()),
            Err(SegmenterError::InstanceTooLarge { t: 13, .. })
        ));
    }

    #[test]
    fn posterior_rows_are_normalized() {
        let (seg, models, stream) = random_instance(4, 3, 9);
        let post = brute_force_posterior(&stream, &seg, &models, &all_table(), None).unwrap();
        for t in 0..stream.len() {
            let sum: f64 = post.row(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "t={t}: {sum}");
        }
    }

    #[test]
    fn map_matches_brute_force_on_small_instances() {
        for seed in 0..8 {
            let (seg, models, stream) = random_instance(100 + seed, 2, 8);
            let dp = map_segmentation(&stream, &seg, &models, &all_table()).unwrap();
            let bf = brute_force_map(&stream, &seg, &models, &all_table()).unwrap();
            assert!(
                (dp.log_score - bf.log_score).abs() < 1e-9,
                "seed {seed}: {} vs {}",
                dp.log_score,
                bf.log_score
            );
        }
    }

    #[test]
    fn filter_matches_brute_force_posterior() {
        for seed in 0..10 {
            let (seg, models, stream) = random_instance(200 + seed, 3, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let factors: Vec<Vec<f64>> = (0..stream.len())
                .map(|_| (0..3).map(|_| rng.random_range(0.2..1.0)).collect())
                .collect();
            let gate_matrix =
                DMatrix::from_fn(stream.len(), 3, |t, l| factors[t][l]);
            let gate = FixedFactorGate {
                factors: factors.clone(),
            };
            let timeline = run_online(
                &stream,
                &seg,
                &models,
                &gate,
                &FilterConfig {
                    store_forecasts: false,
                    horizon: 1,
                    ..FilterConfig::default()
                },
                None,
            )
            .unwrap();
            let post =
                brute_force_posterior(&stream, &seg, &models, &all_table(), Some(&gate_matrix))
                    .unwrap();
            for t in 0..stream.len() {
                for l in 0..3 {
                    let got = timeline.steps[t].marginal[l];
                    let want = post[(t, l)];
                    assert!(
                        (got - want).abs() < 1e-9,
                        "seed {seed} t={} l={l}: {got} vs {want}",
                        t + 1
                    );
                }
            }
        }
    }

    #[test]
    fn single_label_duration_split_matches_hand_scoring() {
        // One label, T = 5, durations 2..=5: tilings are [5], [2,3], [3,2].
        let seg = SegmentModel::new(
            vec!["a".into()],
            dmatrix![1.0],
            vec![DurationDist::discretized_gaussian(3.0, 1.2, 2, 5).unwrap()],
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let models = vec![constant_model("a", 0.0, 0.25)];
        let rows: Vec<Vec<f64>> = vec![
            vec![0.1],
            vec![-0.2],
            vec![0.05],
            vec![0.3],
            vec![-0.1],
        ];
        let stream = Trajectory::from_rows(rows.clone(), 1.0).unwrap();
        let bf = brute_force_map(&stream, &seg, &models, &all_table()).unwrap();

        // Hand scoring: likelihood term is identical across tilings (same
        // per-step model), so only the duration masses differ.
        let dist = seg.duration(0);
        let ll: f64 = (2..=5)
            .map(|t| {
                let hist = DMatrix::from_row_slice(1, 1, &rows[t - 2]);
                let x = DVector::from_vec(rows[t - 1].clone());
                crate::dynamics::step_log_likelihood(&models[0], &hist, &x).unwrap()
            })
            .sum();
        let candidates = [
            (vec![5usize], dist.pmf(5).ln()),
            (vec![2, 3], dist.pmf(2).ln() + dist.pmf(3).ln()),
            (vec![3, 2], dist.pmf(3).ln() + dist.pmf(2).ln()),
        ];
        let scored: Vec<(Vec<usize>, f64)> = candidates
            .iter()
            .map(|(d, w)| (d.clone(), w + ll))
            .collect();
        let best_score = scored.iter().map(|(_, w)| *w).fold(f64::NEG_INFINITY, f64::max);
        assert!((bf.log_score - best_score).abs() < 1e-9);
        // [2,3] and [3,2] tie exactly; accept any argmax candidate.
        let durations: Vec<usize> = bf.intervals.iter().map(|iv| iv.duration()).collect();
        assert!(scored
            .iter()
            .any(|(d, w)| *d == durations && (w - best_score).abs() < 1e-9));

        // And the dynamic program agrees.
        let dp = map_segmentation(&stream, &seg, &models, &all_table()).unwrap();
        assert!((dp.log_score - bf.log_score).abs() < 1e-9);
    }

    #[test]
    fn filter_matches_posterior_with_unit_gate() {
        let (seg, models, stream) = random_instance(321, 2, 10);
        let timeline = run_online(
            &stream,
            &seg,
            &models,
            &UnitGate,
            &FilterConfig {
                store_forecasts: false,
                horizon: 1,
                ..FilterConfig::default()
            },
            None,
        )
        .unwrap();
        let post = brute_force_posterior(&stream, &seg, &models, &all_table(), None).unwrap();
        for t in 0..stream.len() {
            for l in 0..2 {
                assert!((timeline.steps[t].marginal[l] - post[(t, l)]).abs() < 1e-9);
            }
        }
    }
}
