//! Labelled reaching-motion data generation.
//!
//! Three named target cubes and an initial pose define nine reach labels:
//! `l1..l3` start at the initial pose and end in volume A, B, or C;
//! `l4..l9` are the pairwise volume-to-volume reaches, starting from the
//! end pose of a reach into their source volume (endpoint continuity).
//! Each trajectory is a minimum-jerk joint profile between two
//! inverse-kinematics solutions; target points come from a uniform 5 mm
//! grid of cell centers inside each cube, 1000 points per cube.
//!
//! Noise regimes perturb each sample with uniform additive noise whose
//! per-joint amplitude is a fraction of that joint's range over the clean
//! trajectory. All randomness is split per (purpose, label, trajectory)
//! into independent ChaCha streams, so generation is reproducible
//! byte-for-byte regardless of evaluation order.

pub mod arm;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::allen::{AllenRelation, CompositionTable, DefaultPolicy, Label, TableMode};
use crate::dynamics::{DynamicsError, Trajectory};
use crate::segmenter::{DurationDist, SegmentModel, SegmenterError};

pub use arm::{
    forward_kinematics, inverse_kinematics, inverse_kinematics_with, min_jerk_profile, ArmModel,
    IkConfig,
};

#[derive(Debug, Error)]
pub enum SimgenError {
    #[error("IK did not converge for target {target:?} (residual {residual:.2e}{})",
        label.as_ref().map(|l| format!(", label {l}")).unwrap_or_default())]
    IkNoConvergence {
        target: [f64; 3],
        residual: f64,
        label: Option<Label>,
    },
    #[error("target {target:?} at distance {distance:.3} m is outside the reachable annulus")]
    UnreachableTarget { target: [f64; 3], distance: f64 },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Segmenter(#[from] SegmenterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The three named target volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VolumeId {
    A,
    B,
    C,
}

impl VolumeId {
    pub const ALL: [VolumeId; 3] = [VolumeId::A, VolumeId::B, VolumeId::C];

    pub fn name(self) -> &'static str {
        match self {
            VolumeId::A => "A",
            VolumeId::B => "B",
            VolumeId::C => "C",
        }
    }

    pub fn index(self) -> usize {
        match self {
            VolumeId::A => 0,
            VolumeId::B => 1,
            VolumeId::C => 2,
        }
    }

    /// Class label used by the reach classifiers, e.g. `reach-a`.
    pub fn class_label(self) -> Label {
        Label::from(format!("reach-{}", self.name().to_lowercase()))
    }
}

/// Where a reach starts: the joint-space initial pose or a target volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StartPoint {
    InitialPose,
    Volume(VolumeId),
}

/// One of the nine reach labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReachLabel {
    /// 1-based index; the text label is `l<index>`.
    pub index: usize,
    pub from: StartPoint,
    pub to: VolumeId,
}

impl ReachLabel {
    pub fn label(&self) -> Label {
        Label::from(format!("l{}", self.index))
    }

    pub fn source_volume(&self) -> Option<VolumeId> {
        match self.from {
            StartPoint::InitialPose => None,
            StartPoint::Volume(v) => Some(v),
        }
    }

    /// The classification target: the destination volume's class label.
    pub fn class(&self) -> Label {
        self.to.class_label()
    }
}

/// The nine labels in order: `l1..l3` from the initial pose into A, B, C;
/// `l4..l9` the six ordered volume pairs.
pub fn reach_labels() -> Vec<ReachLabel> {
    use StartPoint::*;
    use VolumeId::*;
    vec![
        ReachLabel { index: 1, from: InitialPose, to: A },
        ReachLabel { index: 2, from: InitialPose, to: B },
        ReachLabel { index: 3, from: InitialPose, to: C },
        ReachLabel { index: 4, from: Volume(A), to: B },
        ReachLabel { index: 5, from: Volume(A), to: C },
        ReachLabel { index: 6, from: Volume(B), to: A },
        ReachLabel { index: 7, from: Volume(B), to: C },
        ReachLabel { index: 8, from: Volume(C), to: A },
        ReachLabel { index: 9, from: Volume(C), to: B },
    ]
}

/// An axis-aligned cube of target points.
#[derive(Debug, Clone, Copy)]
pub struct Cube {
    pub center: Vector3<f64>,
    pub side: f64,
    pub resolution: f64,
}

impl Cube {
    /// Whether `point` lies inside the cube expanded by `slack` per axis.
    pub fn contains(&self, point: &Vector3<f64>, slack: f64) -> bool {
        (0..3).all(|i| (point[i] - self.center[i]).abs() <= self.side / 2.0 + slack)
    }
}

/// Margin kept between any grid point and the reachable-annulus limits.
pub const REACH_MARGIN: f64 = 0.02;

/// Target volumes, grid resolution, and the joint-space initial pose.
#[derive(Debug, Clone)]
pub struct WorkspaceSpec {
    pub centers: [Vector3<f64>; 3],
    pub cube_side: f64,
    pub grid_resolution: f64,
    pub initial_pose: Vector3<f64>,
}

impl Default for WorkspaceSpec {
    fn default() -> Self {
        Self {
            centers: [
                Vector3::new(0.20, -0.30, 0.15),
                Vector3::new(0.40, -0.10, 0.20),
                Vector3::new(0.15, 0.05, 0.10),
            ],
            cube_side: 0.05,
            grid_resolution: 0.005,
            initial_pose: Vector3::zeros(),
        }
    }
}

impl WorkspaceSpec {
    pub fn cube(&self, volume: VolumeId) -> Cube {
        Cube {
            center: self.centers[volume.index()],
            side: self.cube_side,
            resolution: self.grid_resolution,
        }
    }

    /// Every grid point must stay inside the arm's reachable annulus with
    /// [`REACH_MARGIN`] to spare.
    pub fn validate(&self, arm: &ArmModel) -> Result<(), SimgenError> {
        let half_diag = (self.cube_side / 2.0) * 3f64.sqrt();
        for volume in VolumeId::ALL {
            let center_dist = self.centers[volume.index()].norm();
            let far = center_dist + half_diag;
            let near = center_dist - half_diag;
            if far > arm.max_reach() - REACH_MARGIN {
                return Err(SimgenError::InvalidSpec(format!(
                    "volume {} extends to {far:.3} m, beyond reach {:.3} m",
                    volume.name(),
                    arm.max_reach() - REACH_MARGIN
                )));
            }
            if near < arm.min_reach() + REACH_MARGIN {
                return Err(SimgenError::InvalidSpec(format!(
                    "volume {} comes within {near:.3} m, inside the inner annulus",
                    volume.name()
                )));
            }
        }
        Ok(())
    }
}

/// All cell-center grid points of a cube in x-major order (x slowest).
/// A 0.05 m cube at 0.005 m resolution yields 10^3 = 1000 points.
pub fn sample_target_grid(cube: &Cube) -> Vec<Vector3<f64>> {
    if cube.side == 0.0 {
        return vec![cube.center];
    }
    let n = (cube.side / cube.resolution).round() as usize;
    let offset = |i: usize| -cube.side / 2.0 + cube.resolution * (i as f64 + 0.5);
    let mut points = Vec::with_capacity(n * n * n);
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                points.push(Vector3::new(
                    cube.center.x + offset(ix),
                    cube.center.y + offset(iy),
                    cube.center.z + offset(iz),
                ));
            }
        }
    }
    points
}

/// Generation parameters for one dataset family.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub n_per_label: usize,
    pub samples_per_traj: usize,
    pub noise_levels: Vec<f64>,
    pub master_seed: u64,
    /// Sampling period recorded on generated trajectories (seconds).
    pub dt: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_per_label: 1000,
            samples_per_traj: 251,
            noise_levels: vec![0.0, 0.10, 0.30, 0.50],
            master_seed: 0,
            dt: 0.004,
        }
    }
}

/// All trajectories of one label at one noise level.
#[derive(Debug, Clone)]
pub struct LabelSet {
    pub reach: ReachLabel,
    pub trajectories: Vec<Trajectory>,
}

/// One generated dataset: nine label sets at a single noise level.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub label_sets: Vec<LabelSet>,
    pub noise_level: f64,
    pub master_seed: u64,
}

impl Dataset {
    pub fn label_set(&self, label: &Label) -> Option<&LabelSet> {
        self.label_sets.iter().find(|s| s.reach.label() == *label)
    }

    /// Total trajectory count across labels.
    pub fn len(&self) -> usize {
        self.label_sets.iter().map(|s| s.trajectories.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A noisy copy of this dataset; level 0 reproduces it exactly.
    pub fn with_noise(&self, level: f64, master_seed: u64) -> Result<Dataset, SimgenError> {
        let mut label_sets = Vec::with_capacity(self.label_sets.len());
        for set in &self.label_sets {
            let mut trajectories = Vec::with_capacity(set.trajectories.len());
            for (i, traj) in set.trajectories.iter().enumerate() {
                let seed = derive_seed(master_seed, STREAM_NOISE, set.reach.index as u64, i as u64);
                trajectories.push(inject_noise(traj, level, seed)?);
            }
            label_sets.push(LabelSet {
                reach: set.reach,
                trajectories,
            });
        }
        Ok(Dataset {
            label_sets,
            noise_level: level,
            master_seed: self.master_seed,
        })
    }

    /// Pool several datasets label-wise (e.g. the 0/10/30 noise regimes).
    pub fn pooled(parts: &[&Dataset]) -> Result<Dataset, SimgenError> {
        let first = parts
            .first()
            .ok_or_else(|| SimgenError::InvalidSpec("nothing to pool".into()))?;
        let mut label_sets: Vec<LabelSet> = first
            .label_sets
            .iter()
            .map(|s| LabelSet {
                reach: s.reach,
                trajectories: s.trajectories.clone(),
            })
            .collect();
        for part in &parts[1..] {
            if part.label_sets.len() != label_sets.len() {
                return Err(SimgenError::InvalidSpec(
                    "pooled datasets must share the label set".into(),
                ));
            }
            for (dst, src) in label_sets.iter_mut().zip(&part.label_sets) {
                dst.trajectories.extend(src.trajectories.iter().cloned());
            }
        }
        Ok(Dataset {
            label_sets,
            noise_level: f64::NAN, // mixed
            master_seed: first.master_seed,
        })
    }
}

const STREAM_PAIRING: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SEQUENCE: u64 = 3;

/// Mix a master seed with a purpose tag and two indices into an
/// independent per-stream seed (splitmix64 finalizer).
pub fn derive_seed(master: u64, purpose: u64, a: u64, b: u64) -> u64 {
    let mut z = master
        .wrapping_add(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the demo's target-sequence sampler.
pub fn sequence_seed(master: u64, sequence_index: u64) -> u64 {
    derive_seed(master, STREAM_SEQUENCE, sequence_index, 0)
}

/// Generate the noise-free dataset: `n_per_label` minimum-jerk
/// trajectories for each of the nine labels.
///
/// Labels from the initial pose use grid point `i` for trajectory `i`;
/// volume-to-volume labels draw a (source, destination) grid-point pair
/// from a per-(label, trajectory) seeded stream. Source poses are solved
/// from the initial pose, exactly like the end pose of a reach into that
/// volume, which gives endpoint continuity; destination poses warm-start
/// from the source pose.
pub fn generate_dataset(
    spec: &DatasetSpec,
    workspace: &WorkspaceSpec,
    arm: &ArmModel,
) -> Result<Dataset, SimgenError> {
    workspace.validate(arm)?;
    let grids: Vec<Vec<Vector3<f64>>> = VolumeId::ALL
        .iter()
        .map(|v| sample_target_grid(&workspace.cube(*v)))
        .collect();
    for grid in &grids {
        if spec.n_per_label > grid.len() {
            return Err(SimgenError::InvalidSpec(format!(
                "n_per_label {} exceeds the {} grid points per cube",
                spec.n_per_label,
                grid.len()
            )));
        }
    }

    // Source poses are reused across trajectories; IK is deterministic
    // given (target, warm start), so caching cannot change results.
    let mut source_pose_cache: HashMap<(usize, usize), Vector3<f64>> = HashMap::new();
    let initial = workspace.initial_pose;

    let mut label_sets = Vec::with_capacity(9);
    for reach in reach_labels() {
        let mut trajectories = Vec::with_capacity(spec.n_per_label);
        for i in 0..spec.n_per_label {
            let with_label = |e: SimgenError| match e {
                SimgenError::IkNoConvergence {
                    target, residual, ..
                } => SimgenError::IkNoConvergence {
                    target,
                    residual,
                    label: Some(reach.label()),
                },
                other => other,
            };
            let (q0, q1) = match reach.from {
                StartPoint::InitialPose => {
                    let target = grids[reach.to.index()][i];
                    let q1 = inverse_kinematics(arm, &target, &initial).map_err(with_label)?;
                    (initial, q1)
                }
                StartPoint::Volume(src) => {
                    let seed =
                        derive_seed(spec.master_seed, STREAM_PAIRING, reach.index as u64, i as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let src_idx = rng.random_range(0..grids[src.index()].len());
                    let dst_idx = rng.random_range(0..grids[reach.to.index()].len());
                    let q0 = match source_pose_cache.get(&(src.index(), src_idx)) {
                        Some(q) => *q,
                        None => {
                            let q = inverse_kinematics(arm, &grids[src.index()][src_idx], &initial)
                                .map_err(with_label)?;
                            source_pose_cache.insert((src.index(), src_idx), q);
                            q
                        }
                    };
                    let q1 = inverse_kinematics(arm, &grids[reach.to.index()][dst_idx], &q0)
                        .map_err(with_label)?;
                    (q0, q1)
                }
            };
            let profile = min_jerk_profile(q0.as_slice(), q1.as_slice(), spec.samples_per_traj)?;
            trajectories
                .push(Trajectory::new(profile, spec.dt)?.with_label(reach.label()));
        }
        label_sets.push(LabelSet {
            reach,
            trajectories,
        });
    }
    Ok(Dataset {
        label_sets,
        noise_level: 0.0,
        master_seed: spec.master_seed,
    })
}

/// Uniform additive noise: per joint, the amplitude is `level` times that
/// joint's range over the clean trajectory, and every sample gets an
/// independent draw from `U(-a, a)`. Deterministic given `seed`.
pub fn inject_noise(traj: &Trajectory, level: f64, seed: u64) -> Result<Trajectory, SimgenError> {
    if !(0.0..1.0).contains(&level) {
        return Err(SimgenError::InvalidSpec(format!(
            "noise level must be in [0, 1), got {level}"
        )));
    }
    if level == 0.0 {
        return Ok(traj.clone());
    }
    let x = traj.samples();
    let (t_len, d) = x.shape();
    let mut amplitude = vec![0.0; d];
    for j in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in 0..t_len {
            lo = lo.min(x[(t, j)]);
            hi = hi.max(x[(t, j)]);
        }
        amplitude[j] = level * (hi - lo);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = x.clone();
    for t in 0..t_len {
        for j in 0..d {
            if amplitude[j] > 0.0 {
                noisy[(t, j)] += rng.random_range(-amplitude[j]..amplitude[j]);
            }
        }
    }
    let mut out = Trajectory::new(noisy, traj.dt())?;
    if let Some(label) = traj.label() {
        out = out.with_label(label.clone());
    }
    Ok(out)
}

/// Hard composition table encoding endpoint continuity: `(l', l)` admits
/// `before` exactly when the source volume of `l` is the destination of
/// `l'`. Absent pairs (including anything returning to the initial pose)
/// are inadmissible.
pub fn endpoint_continuity_table() -> CompositionTable {
    let mut table = CompositionTable::new(TableMode::Hard, DefaultPolicy::NoneAdmissible);
    let labels = reach_labels();
    for prev in &labels {
        for next in &labels {
            if next.source_volume() == Some(prev.to) {
                table.allow(prev.label(), next.label(), AllenRelation::Before);
            }
        }
    }
    table
}

/// Semi-Markov chain over the nine reach labels for sequences of
/// fixed-length movements: initial mass on the from-initial-pose labels,
/// transitions uniform over the successors that keep endpoint continuity
/// (the destination never repeats as the next destination), and a tight
/// duration prior around the nominal movement length.
pub fn reach_segment_model(
    nominal_len: usize,
    sigma: f64,
    slack: usize,
) -> Result<SegmentModel, SegmenterError> {
    let reaches = reach_labels();
    let n = reaches.len();
    let labels: Vec<Label> = reaches.iter().map(ReachLabel::label).collect();
    let mut transition = DMatrix::zeros(n, n);
    for (i, prev) in reaches.iter().enumerate() {
        let successors: Vec<usize> = reaches
            .iter()
            .enumerate()
            .filter(|(_, next)| next.source_volume() == Some(prev.to) && next.to != prev.to)
            .map(|(j, _)| j)
            .collect();
        for &j in &successors {
            transition[(i, j)] = 1.0 / successors.len() as f64;
        }
    }
    let initial = nalgebra::DVector::from_fn(n, |i, _| if i < 3 { 1.0 / 3.0 } else { 0.0 });
    let d_min = nominal_len.saturating_sub(slack).max(2);
    let d_max = nominal_len + slack;
    let durations: Vec<DurationDist> = (0..n)
        .map(|_| DurationDist::discretized_gaussian(nominal_len as f64, sigma, d_min, d_max))
        .collect::<Result<_, _>>()?;
    SegmentModel::new(labels, transition, durations, initial)
}

// --- dataset files -----------------------------------------------------
//
// One CSV per (label, noise level): `<label>_noise<pct>.csv` with header
// `traj_id,t,q1,q2,q3`, radians at 7 decimal digits, plus a metadata
// sidecar `metadata.txt` of `key=value` lines.

/// File stem for a (label, noise level) pair, e.g. `l4_noise10`.
pub fn dataset_file_stem(label: &Label, level: f64) -> String {
    format!("{label}_noise{}", (level * 100.0).round() as u32)
}

/// Write one dataset (single noise level) into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<(), SimgenError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for set in &dataset.label_sets {
        let mut out = String::from("traj_id,t,q1,q2,q3\n");
        for (i, traj) in set.trajectories.iter().enumerate() {
            let x = traj.samples();
            for t in 0..x.nrows() {
                let _ = writeln!(
                    out,
                    "{i},{},{:.7},{:.7},{:.7}",
                    t + 1,
                    x[(t, 0)],
                    x[(t, 1)],
                    x[(t, 2)]
                );
            }
        }
        let stem = dataset_file_stem(&set.reach.label(), dataset.noise_level);
        fs::write(dir.join(format!("{stem}.csv")), out)?;
    }
    Ok(())
}

/// Write the metadata sidecar describing how a dataset directory was
/// produced.
pub fn write_metadata(
    spec: &DatasetSpec,
    workspace: &WorkspaceSpec,
    arm: &ArmModel,
    dir: impl AsRef<Path>,
) -> Result<(), SimgenError> {
    let mut out = String::new();
    let _ = writeln!(out, "seed={}", spec.master_seed);
    let _ = writeln!(out, "n_per_label={}", spec.n_per_label);
    let _ = writeln!(out, "samples_per_traj={}", spec.samples_per_traj);
    let levels: Vec<String> = spec.noise_levels.iter().map(|l| l.to_string()).collect();
    let _ = writeln!(out, "noise_levels={}", levels.join(","));
    let _ = writeln!(
        out,
        "noise_interpretation=uniform additive, amplitude = level * per-joint range of the clean trajectory"
    );
    let _ = writeln!(out, "dt={}", spec.dt);
    let _ = writeln!(out, "arm_upper_arm={}", arm.upper_arm);
    let _ = writeln!(out, "arm_forearm={}", arm.forearm);
    let _ = writeln!(out, "cube_side={}", workspace.cube_side);
    let _ = writeln!(out, "grid_resolution={}", workspace.grid_resolution);
    for v in VolumeId::ALL {
        let c = workspace.centers[v.index()];
        let _ = writeln!(out, "center_{}={},{},{}", v.name(), c.x, c.y, c.z);
    }
    let _ = writeln!(
        out,
        "initial_pose={},{},{}",
        workspace.initial_pose.x, workspace.initial_pose.y, workspace.initial_pose.z
    );
    Ok(fs::write(dir.as_ref().join("metadata.txt"), out)?)
}

/// Read one `<label>_noise<pct>.csv` back into trajectories.
pub fn read_trajectories_csv(
    path: impl AsRef<Path>,
    label: &Label,
    dt: f64,
) -> Result<Vec<Trajectory>, SimgenError> {
    let text = fs::read_to_string(path)?;
    let mut by_id: Vec<Vec<Vec<f64>>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if !line.starts_with("traj_id,") {
                return Err(SimgenError::Parse {
                    line: 1,
                    msg: format!("unexpected header `{line}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(SimgenError::Parse {
                line: idx + 1,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let id: usize = fields[0].parse().map_err(|_| SimgenError::Parse {
            line: idx + 1,
            msg: format!("bad traj_id `{}`", fields[0]),
        })?;
        let mut row = Vec::with_capacity(3);
        for f in &fields[2..5] {
            row.push(f.parse::<f64>().map_err(|_| SimgenError::Parse {
                line: idx + 1,
                msg: format!("bad value `{f}`"),
            })?);
        }
        if by_id.len() <= id {
            by_id.resize(id + 1, Vec::new());
        }
        by_id[id].push(row);
    }
    by_id
        .into_iter()
        .map(|rows| Ok(Trajectory::from_rows(rows, dt)?.with_label(label.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_1000_points_with_expected_bounds() {
        let ws = WorkspaceSpec::default();
        let points = sample_target_grid(&ws.cube(VolumeId::A));
        assert_eq!(points.len(), 1000);
        for p in &points {
            for i in 0..3 {
                assert!((p[i] - ws.centers[0][i]).abs() <= 0.0225 + 1e-12);
            }
        }
        let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
        let min_x = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max_x = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((min_x - 0.1775).abs() < 1e-12);
        assert!((max_x - 0.2225).abs() < 1e-12);
        // x-major ordering: x is the slowest axis.
        assert!((points[0].x - points[99].x).abs() < 1e-12);
        assert!(points[100].x > points[99].x);
    }

    #[test]
    fn degenerate_cube_collapses_to_center() {
        let cube = Cube {
            center: Vector3::new(0.2, -0.3, 0.15),
            side: 0.0,
            resolution: 0.005,
        };
        let points = sample_target_grid(&cube);
        assert_eq!(points.len(), 1);
        assert_eq!(points[0], cube.center);
    }

    #[test]
    fn default_workspace_is_reachable() {
        WorkspaceSpec::default().validate(&ArmModel::default()).unwrap();
    }

    #[test]
    fn labels_have_expected_structure() {
        let labels = reach_labels();
        assert_eq!(labels.len(), 9);
        assert_eq!(labels[0].label(), Label::from("l1"));
        assert_eq!(labels[3].from, StartPoint::Volume(VolumeId::A));
        assert_eq!(labels[3].to, VolumeId::B);
        assert_eq!(labels[8].label(), Label::from("l9"));
        assert_eq!(labels[8].class(), Label::from("reach-b"));
        // No label keeps its destination as its source.
        for l in &labels {
            assert_ne!(l.source_volume(), Some(l.to));
        }
    }

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_per_label: 3,
            samples_per_traj: 61,
            noise_levels: vec![0.0, 0.10],
            master_seed: seed,
            dt: 0.004,
        }
    }

    #[test]
    fn generated_endpoints_land_in_their_cubes() {
        let ws = WorkspaceSpec::default();
        let arm = ArmModel::default();
        let data = generate_dataset(&small_spec(7), &ws, &arm).unwrap();
        assert_eq!(data.len(), 27);
        for set in &data.label_sets {
            for traj in &set.trajectories {
                let x = traj.samples();
                let last = Vector3::new(
                    x[(x.nrows() - 1, 0)],
                    x[(x.nrows() - 1, 1)],
                    x[(x.nrows() - 1, 2)],
                );
                let wrist = forward_kinematics(&arm, &last);
                assert!(
                    ws.cube(set.reach.to).contains(&wrist, 2e-6),
                    "{} endpoint {wrist:?}",
                    set.reach.label()
                );
                // Endpoint continuity: first sample inside the source volume.
                if let Some(src) = set.reach.source_volume() {
                    let first = Vector3::new(x[(0, 0)], x[(0, 1)], x[(0, 2)]);
                    let wrist0 = forward_kinematics(&arm, &first);
                    assert!(ws.cube(src).contains(&wrist0, 2e-6));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let ws = WorkspaceSpec::default();
        let arm = ArmModel::default();
        let a = generate_dataset(&small_spec(42), &ws, &arm).unwrap();
        let b = generate_dataset(&small_spec(42), &ws, &arm).unwrap();
        for (sa, sb) in a.label_sets.iter().zip(&b.label_sets) {
            for (ta, tb) in sa.trajectories.iter().zip(&sb.trajectories) {
                assert_eq!(ta.samples(), tb.samples());
            }
        }
        let c = generate_dataset(&small_spec(43), &ws, &arm).unwrap();
        // Different seed changes the volume-to-volume pairings.
        let same = a.label_sets[3].trajectories[0].samples()
            == c.label_sets[3].trajectories[0].samples();
        assert!(!same);
    }

    #[test]
    fn noise_level_zero_is_identity() {
        let ws = WorkspaceSpec::default();
        let arm = ArmModel::default();
        let data = generate_dataset(&small_spec(1), &ws, &arm).unwrap();
        let noisy = data.with_noise(0.0, 99).unwrap();
        for (sa, sb) in data.label_sets.iter().zip(&noisy.label_sets) {
            for (ta, tb) in sa.trajectories.iter().zip(&sb.trajectories) {
                assert_eq!(ta.samples(), tb.samples());
            }
        }
    }

    #[test]
    fn noise_respects_amplitude_bounds() {
        let ws = WorkspaceSpec::default();
        let arm = ArmModel::default();
        let data = generate_dataset(&small_spec(2), &ws, &arm).unwrap();
        let level = 0.10;
        let noisy = data.with_noise(level, data.master_seed).unwrap();
        for (sa, sb) in data.label_sets.iter().zip(&noisy.label_sets) {
            for (ta, tb) in sa.trajectories.iter().zip(&sb.trajectories) {
                let xa = ta.samples();
                let xb = tb.samples();
                for j in 0..3 {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for t in 0..xa.nrows() {
                        lo = lo.min(xa[(t, j)]);
                        hi = hi.max(xa[(t, j)]);
                    }
                    let amp = level * (hi - lo);
                    for t in 0..xa.nrows() {
                        assert!((xb[(t, j)] - xa[(t, j)]).abs() <= amp);
                    }
                }
            }
        }
    }

    #[test]
    fn noise_variance_matches_uniform_moment() {
        // Variance of U(-a, a) is a^2 / 3; check over 1e5 draws at 2%.
        let rows: Vec<Vec<f64>> = (0..100_000)
            .map(|t| vec![(t % 2) as f64]) // range exactly 1
            .collect();
        let traj = Trajectory::from_rows(rows, 1.0).unwrap();
        let level = 0.25;
        let noisy = inject_noise(&traj, level, 1234).unwrap();
        let a = level * 1.0;
        let diffs: Vec<f64> = (0..traj.len())
            .map(|t| noisy.samples()[(t, 0)] - traj.samples()[(t, 0)])
            .collect();
        let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var: f64 =
            diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64;
        let expect = a * a / 3.0;
        assert!(
            (var - expect).abs() <= 0.02 * expect,
            "var {var} vs {expect}"
        );
    }

    #[test]
    fn pooled_dataset_triples_counts() {
        let ws = WorkspaceSpec::default();
        let arm = ArmModel::default();
        let clean = generate_dataset(&small_spec(3), &ws, &arm).unwrap();
        let n10 = clean.with_noise(0.10, clean.master_seed).unwrap();
        let n30 = clean.with_noise(0.30, clean.master_seed).unwrap();
        let pooled = Dataset::pooled(&[&clean, &n10, &n30]).unwrap();
        for (p, c) in pooled.label_sets.iter().zip(&clean.label_sets) {
            assert_eq!(p.trajectories.len(), 3 * c.trajectories.len());
        }
    }

    #[test]
    fn endpoint_continuity_table_structure() {
        let table = endpoint_continuity_table();
        // l1 (I->A) may be followed by l4 (A->B) and l5 (A->C) only.
        let before = AllenRelation::Before;
        assert_eq!(table.relation_weight(&"l1".into(), &"l4".into(), before), 1.0);
        assert_eq!(table.relation_weight(&"l1".into(), &"l5".into(), before), 1.0);
        assert_eq!(table.relation_weight(&"l1".into(), &"l6".into(), before), 0.0);
        assert_eq!(table.relation_weight(&"l1".into(), &"l2".into(), before), 0.0);
        // Nothing may return to an initial-pose label.
        for i in 1..=9 {
            for j in 1..=3 {
                assert_eq!(
                    table.relation_weight(
                        &format!("l{i}").into(),
                        &format!("l{j}").into(),
                        before
                    ),
                    0.0
                );
            }
        }
    }

    #[test]
    fn reach_chain_model_is_valid() {
        let seg = reach_segment_model(251, 2.0, 20).unwrap();
        assert_eq!(seg.n_labels(), 9);
        // l4 = A->B must be followed by B->A or B->C.
        let from = seg.label_index(&"l4".into()).unwrap();
        let l6 = seg.label_index(&"l6".into()).unwrap();
        let l7 = seg.label_index(&"l7".into()).unwrap();
        assert_eq!(seg.transition()[(from, l6)], 0.5);
        assert_eq!(seg.transition()[(from, l7)], 0.5);
        assert_eq!(seg.duration(0).d_min(), 231);
        assert_eq!(seg.duration(0).d_max(), 271);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let ws = WorkspaceSpec::default();
        let arm = ArmModel::default();
        let spec = small_spec(4);
        let data = generate_dataset(&spec, &ws, &arm).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        write_metadata(&spec, &ws, &arm, dir.path()).unwrap();

        let label = Label::from("l1");
        let path = dir.path().join("l1_noise0.csv");
        let trajs = read_trajectories_csv(&path, &label, spec.dt).unwrap();
        assert_eq!(trajs.len(), 3);
        assert_eq!(trajs[0].len(), 61);
        // Values survive the 7-decimal format.
        let orig = data.label_sets[0].trajectories[0].samples();
        let read = trajs[0].samples();
        for t in 0..orig.nrows() {
            for j in 0..3 {
                assert!((orig[(t, j)] - read[(t, j)]).abs() <= 5e-8);
            }
        }
        assert!(dir.path().join("metadata.txt").exists());
        // Deterministic bytes for identical flags.
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&data, dir2.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join("l4_noise0.csv")).unwrap(),
            fs::read(dir2.path().join("l4_noise0.csv")).unwrap()
        );
    }
}
