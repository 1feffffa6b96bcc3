// Temporary probe: classification protocols and the gated demo sequence.

use moveact::allen::Label;
use moveact::dynamics::{fit_dynamics, FitConfig, GenerativeClassifier};
use moveact::metrics::{evaluate_actions, ClassSample, Protocol};
use moveact::segmenter::{run_online, FilterConfig, TableGate};
use moveact::simgen::{
    endpoint_continuity_table, forward_kinematics, generate_dataset, inverse_kinematics,
    min_jerk_profile, reach_labels, reach_segment_model, sample_target_grid, sequence_seed,
    ArmModel, Dataset, DatasetSpec, ReachLabel, StartPoint, VolumeId, WorkspaceSpec,
};
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn train_models(data: &Dataset, order: usize) -> Vec<moveact::dynamics::LabelDynamics> {
    data.label_sets
        .iter()
        .map(|set| {
            let n = set.trajectories.len();
            let split = n * 9 / 10;
            fit_dynamics(
                set.reach.label(),
                &set.trajectories[..split],
                &FitConfig {
                    order,
                    ..FitConfig::default()
                },
            )
            .unwrap()
        })
        .collect()
}

fn classifier_for(
    models: &[moveact::dynamics::LabelDynamics],
    reaches: &[ReachLabel],
    from: Option<VolumeId>,
) -> (GenerativeClassifier, Vec<usize>) {
    let mut selected = Vec::new();
    let mut classes = Vec::new();
    let mut indices = Vec::new();
    for (i, r) in reaches.iter().enumerate() {
        let matches = match from {
            None => r.from == StartPoint::InitialPose,
            Some(v) => r.source_volume() == Some(v),
        };
        if matches {
            selected.push(models[i].clone());
            classes.push(r.class());
            indices.push(i);
        }
    }
    (GenerativeClassifier::new(selected, classes).unwrap(), indices)
}

fn main() {
    let ws = WorkspaceSpec::default();
    let arm = ArmModel::default();
    let spec = DatasetSpec {
        n_per_label: 30,
        samples_per_traj: 251,
        master_seed: 7,
        ..DatasetSpec::default()
    };
    let clean = generate_dataset(&spec, &ws, &arm).unwrap();
    let n10 = clean.with_noise(0.10, spec.master_seed).unwrap();
    let n30 = clean.with_noise(0.30, spec.master_seed).unwrap();
    let pooled = Dataset::pooled(&[&clean, &n10, &n30]).unwrap();
    let reaches = reach_labels();

    for (name, data) in [("D-0", &clean), ("D-0-10-30", &pooled)] {
        let models = train_models(data, 2);
        for (task, from) in [
            ("I->ABC", None),
            ("A->BC", Some(VolumeId::A)),
            ("B->AC", Some(VolumeId::B)),
            ("C->AB", Some(VolumeId::C)),
        ] {
            let (clf, indices) = classifier_for(&models, &reaches, from);
            let mut sample_data = Vec::new();
            for &i in &indices {
                let set = &data.label_sets[i];
                let n = set.trajectories.len();
                let split = n * 9 / 10;
                for traj in &set.trajectories[split..] {
                    sample_data.push((set.reach.class(), traj.samples().clone()));
                }
            }
            let samples: Vec<ClassSample> = sample_data
                .iter()
                .map(|(truth, series)| ClassSample {
                    truth: truth.clone(),
                    series,
                })
                .collect();
            let sw = evaluate_actions(
                &clf,
                &samples,
                &Protocol::SlidingWindow { size: 10, stride: 1 },
            )
            .unwrap();
            let ip = evaluate_actions(&clf, &samples, &Protocol::IncrementalPrefix { step: 10 })
                .unwrap();
            println!(
                "{name} {task}: sliding acc {:.3}, prefix acc {:.3}, plateau {:?}",
                sw.accuracy, ip.accuracy, ip.plateau_onset
            );
        }
    }

    // End-to-end demo: 15-movement sequences with the continuity gate.
    let models = train_models(&clean, 2);
    let seg = reach_segment_model(251, 2.0, 20).unwrap();
    let table = endpoint_continuity_table();
    let grids: Vec<Vec<Vector3<f64>>> = VolumeId::ALL
        .iter()
        .map(|v| sample_target_grid(&ws.cube(*v)))
        .collect();

    let mut total_correct = 0usize;
    let n_seqs = 5;
    for seq in 0..n_seqs {
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(99, seq));
        let mut prev: Option<VolumeId> = None;
        let mut pose = ws.initial_pose;
        let mut stream_rows: Vec<Vec<f64>> = Vec::new();
        let mut truth: Vec<VolumeId> = Vec::new();
        for _ in 0..15 {
            let choices: Vec<VolumeId> = VolumeId::ALL
                .iter()
                .copied()
                .filter(|v| Some(*v) != prev)
                .collect();
            let target_vol = choices[rng.random_range(0..choices.len())];
            let point = grids[target_vol.index()][rng.random_range(0..1000)];
            let q1 = inverse_kinematics(&arm, &point, &pose).unwrap();
            let profile = min_jerk_profile(pose.as_slice(), q1.as_slice(), 251).unwrap();
            for t in 0..251 {
                stream_rows.push((0..3).map(|j| profile[(t, j)]).collect());
            }
            truth.push(target_vol);
            pose = q1;
            prev = Some(target_vol);
        }
        let stream = moveact::dynamics::Trajectory::from_rows(stream_rows, spec.dt).unwrap();
        let timeline = run_online(
            &stream,
            &seg,
            &models,
            &TableGate::new(table.clone()),
            &FilterConfig {
                store_forecasts: false,
                ..FilterConfig::default()
            },
            None,
        )
        .unwrap();
        // Per movement: majority vote over per-step MAP labels mapped to class.
        let mut correct = 0;
        for k in 0..15 {
            let mut votes = [0usize; 3];
            for t in k * 251..(k + 1) * 251 {
                let idx = timeline.steps[t].map_label_idx;
                votes[reaches[idx].to.index()] += 1;
            }
            let best = (0..3).max_by_key(|&i| votes[i]).unwrap();
            let share = votes[best] as f64 / 251.0;
            let ok = best == truth[k].index();
            if ok {
                correct += 1;
            }
            if seq == 0 {
                println!(
                    "  movement {k}: pred {} share {share:.2} truth {} {}",
                    VolumeId::ALL[best].name(),
                    truth[k].name(),
                    if ok { "" } else { "WRONG" }
                );
            }
        }
        // Gate-zero consistency.
        let mut gate_violations = 0;
        for step in &timeline.steps {
            for l in 0..9 {
                if step.gate[l] == 0.0 && step.marginal[l] != 0.0 {
                    gate_violations += 1;
                }
            }
        }
        println!("seq {seq}: correct {correct}/15, gate violations {gate_violations}");
        total_correct += correct;
    }
    println!(
        "demo mean correct: {:.2}/15",
        total_correct as f64 / n_seqs as f64
    );

    // Check endpoint of each movement feeds the next correctly.
    let q = inverse_kinematics(&arm, &grids[0][0], &ws.initial_pose).unwrap();
    println!("sanity FK: {:?}", forward_kinematics(&arm, &q));
    let _ = Label::from("x");
}
