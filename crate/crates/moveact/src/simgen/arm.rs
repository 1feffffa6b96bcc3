//! Kinematic 3-DOF arm: forward kinematics, damped-least-squares inverse
//! kinematics, and minimum-jerk joint profiles.
//!
//! Joint convention: `q1` is shoulder azimuth about +z, `q2` shoulder
//! elevation, `q3` elbow flexion; the zero pose is a straight arm along
//! +x, so `FK(0,0,0) = (L1 + L2, 0, 0)`.

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};

use super::SimgenError;

/// Link lengths in metres. The defaults place all shipped workspace
/// targets comfortably inside the reachable annulus.
#[derive(Debug, Clone, Copy)]
pub struct ArmModel {
    pub upper_arm: f64,
    pub forearm: f64,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self {
            upper_arm: 0.30,
            forearm: 0.25,
        }
    }
}

impl ArmModel {
    pub fn max_reach(&self) -> f64 {
        self.upper_arm + self.forearm
    }

    pub fn min_reach(&self) -> f64 {
        (self.upper_arm - self.forearm).abs()
    }

    fn frames(&self, q: &Vector3<f64>) -> (Rotation3<f64>, Rotation3<f64>, Vector3<f64>) {
        let shoulder = Rotation3::from_axis_angle(&Vector3::z_axis(), q[0])
            * Rotation3::from_axis_angle(&Vector3::y_axis(), -q[1]);
        let elbow_rot = shoulder * Rotation3::from_axis_angle(&Vector3::y_axis(), -q[2]);
        let elbow = shoulder * Vector3::new(self.upper_arm, 0.0, 0.0);
        (shoulder, elbow_rot, elbow)
    }

    /// Elbow position (useful for plotting and for the Jacobian).
    pub fn elbow_position(&self, q: &Vector3<f64>) -> Vector3<f64> {
        self.frames(q).2
    }
}

/// Wrist position of the arm at joint configuration `q`.
pub fn forward_kinematics(arm: &ArmModel, q: &Vector3<f64>) -> Vector3<f64> {
    let (_, elbow_rot, elbow) = arm.frames(q);
    elbow + elbow_rot * Vector3::new(arm.forearm, 0.0, 0.0)
}

/// Position Jacobian of the wrist, columns per joint.
///
/// Each revolute column is `axis x (wrist - joint_origin)`; the q2/q3 axes
/// are the body -y axis carried through the preceding rotations.
pub fn position_jacobian(arm: &ArmModel, q: &Vector3<f64>) -> Matrix3<f64> {
    let (shoulder, _, elbow) = arm.frames(q);
    let wrist = forward_kinematics(arm, q);
    let axis1 = Vector3::z();
    let axis2 = Rotation3::from_axis_angle(&Vector3::z_axis(), q[0]) * Vector3::new(0.0, -1.0, 0.0);
    let axis3 = shoulder * Vector3::new(0.0, -1.0, 0.0);
    let col1 = axis1.cross(&wrist);
    let col2 = axis2.cross(&wrist);
    let col3 = axis3.cross(&(wrist - elbow));
    Matrix3::from_columns(&[col1, col2, col3])
}

/// Damped-least-squares solver parameters.
#[derive(Debug, Clone, Copy)]
pub struct IkConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub damping: f64,
    /// Per-joint step cap in radians per iteration.
    pub step_cap: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 500,
            damping: 1e-3,
            step_cap: 0.2,
        }
    }
}

/// Joint configuration whose wrist reaches `target`, iterating damped
/// least squares from `q_init`. The arm is redundant in orientation, so
/// the returned configuration depends on the warm start.
pub fn inverse_kinematics(
    arm: &ArmModel,
    target: &Vector3<f64>,
    q_init: &Vector3<f64>,
) -> Result<Vector3<f64>, SimgenError> {
    inverse_kinematics_with(arm, target, q_init, &IkConfig::default())
}

pub fn inverse_kinematics_with(
    arm: &ArmModel,
    target: &Vector3<f64>,
    q_init: &Vector3<f64>,
    config: &IkConfig,
) -> Result<Vector3<f64>, SimgenError> {
    let distance = target.norm();
    if distance > arm.max_reach() || distance < arm.min_reach() {
        return Err(SimgenError::UnreachableTarget {
            target: [target.x, target.y, target.z],
            distance,
        });
    }
    let mut q = *q_init;
    let lambda_sq = config.damping * config.damping;
    for _ in 0..config.max_iterations {
        let residual = target - forward_kinematics(arm, &q);
        if residual.norm() <= config.tolerance {
            return Ok(q);
        }
        let jac = position_jacobian(arm, &q);
        let jjt = &jac * jac.transpose() + Matrix3::identity() * lambda_sq;
        let y = jjt
            .lu()
            .solve(&residual)
            .ok_or_else(|| SimgenError::InvalidSpec("singular DLS system".into()))?;
        let mut step = jac.transpose() * y;
        for i in 0..3 {
            step[i] = step[i].clamp(-config.step_cap, config.step_cap);
        }
        q += step;
    }
    let residual = (target - forward_kinematics(arm, &q)).norm();
    Err(SimgenError::IkNoConvergence {
        target: [target.x, target.y, target.z],
        residual,
        label: None,
    })
}

/// Quintic minimum-jerk interpolation from `q0` to `q1` over `samples`
/// steps: `s(tau) = 10 tau^3 - 15 tau^4 + 6 tau^5`, exact endpoints, zero
/// velocity and acceleration at both ends.
pub fn min_jerk_profile(
    q0: &[f64],
    q1: &[f64],
    samples: usize,
) -> Result<DMatrix<f64>, SimgenError> {
    if samples < 2 {
        return Err(SimgenError::InvalidSpec(format!(
            "minimum-jerk profile needs at least 2 samples, got {samples}"
        )));
    }
    if q0.len() != q1.len() {
        return Err(SimgenError::InvalidSpec(
            "endpoint dimension mismatch".into(),
        ));
    }
    let d = q0.len();
    let mut out = DMatrix::zeros(samples, d);
    for t in 0..samples {
        let tau = t as f64 / (samples - 1) as f64;
        let s = tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau);
        for j in 0..d {
            // Convex form keeps both endpoints exact in floating point.
            out[(t, j)] = q0[j] * (1.0 - s) + q1[j] * s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Isometry3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_pose_points_along_x() {
        let arm = ArmModel::default();
        let wrist = forward_kinematics(&arm, &Vector3::zeros());
        assert!((wrist - Vector3::new(0.55, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn pure_azimuth_rotation() {
        let arm = ArmModel::default();
        let wrist = forward_kinematics(
            &arm,
            &Vector3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0),
        );
        assert!((wrist - Vector3::new(0.0, 0.55, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn fk_matches_homogeneous_transform_oracle() {
        // Independent route: compose isometries for each link.
        let arm = ArmModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let q = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-2.5..2.5),
            );
            let t1 = Isometry3::rotation(Vector3::z() * q[0]);
            let t2 = Isometry3::rotation(Vector3::y() * (-q[1]));
            let link1 = Isometry3::translation(arm.upper_arm, 0.0, 0.0);
            let t3 = Isometry3::rotation(Vector3::y() * (-q[2]));
            let link2 = Isometry3::translation(arm.forearm, 0.0, 0.0);
            let oracle = (t1 * t2 * link1 * t3 * link2).translation.vector;
            let wrist = forward_kinematics(&arm, &q);
            assert!((wrist - oracle).norm() < 1e-12, "q={q:?}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let arm = ArmModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-7;
        for _ in 0..20 {
            let q = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.2..1.2),
                rng.random_range(-2.0..2.0),
            );
            let jac = position_jacobian(&arm, &q);
            for i in 0..3 {
                let mut qp = q;
                let mut qm = q;
                qp[i] += h;
                qm[i] -= h;
                let col = (forward_kinematics(&arm, &qp) - forward_kinematics(&arm, &qm))
                    / (2.0 * h);
                for r in 0..3 {
                    assert!(
                        approx(jac[(r, i)], col[r], 1e-6),
                        "J[{r},{i}]: {} vs {}",
                        jac[(r, i)],
                        col[r]
                    );
                }
            }
        }
    }

    #[test]
    fn ik_already_solved_target() {
        let arm = ArmModel::default();
        let target = Vector3::new(arm.max_reach(), 0.0, 0.0);
        let q = inverse_kinematics(&arm, &target, &Vector3::zeros()).unwrap();
        assert!((forward_kinematics(&arm, &q) - target).norm() <= 1e-6);
        assert!(q.norm() < 1e-3);
    }

    #[test]
    fn ik_round_trips_through_fk() {
        let arm = ArmModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..40 {
            let q_star = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.8..1.8),
            );
            let target = forward_kinematics(&arm, &q_star);
            if target.norm() >= arm.max_reach() - 0.01 || target.norm() <= arm.min_reach() + 0.01 {
                continue;
            }
            let q = inverse_kinematics(&arm, &target, &Vector3::zeros()).unwrap();
            let residual = (forward_kinematics(&arm, &q) - target).norm();
            assert!(residual <= 1e-6, "residual {residual}");
        }
    }

    #[test]
    fn ik_rejects_unreachable_targets() {
        let arm = ArmModel::default();
        let target = Vector3::new(arm.max_reach() + 0.1, 0.0, 0.0);
        assert!(matches!(
            inverse_kinematics(&arm, &target, &Vector3::zeros()),
            Err(SimgenError::UnreachableTarget { .. })
        ));
    }

    #[test]
    fn min_jerk_endpoints_and_midpoint() {
        let q0 = [0.1, -0.4, 1.2];
        let q1 = [0.9, 0.6, -0.3];
        let profile = min_jerk_profile(&q0, &q1, 251).unwrap();
        for j in 0..3 {
            assert_eq!(profile[(0, j)], q0[j]);
            assert_eq!(profile[(250, j)], q1[j]);
            // tau = 0.5 at the middle sample: s = 0.5 by quintic symmetry.
            assert!(approx(profile[(125, j)], 0.5 * (q0[j] + q1[j]), 1e-12));
        }
    }

    #[test]
    fn min_jerk_boundary_velocities_vanish() {
        let q0 = [0.0];
        let q1 = [1.0];
        let t_len = 251;
        let profile = min_jerk_profile(&q0, &q1, t_len).unwrap();
        let dtau = 1.0 / (t_len - 1) as f64;
        let v_start = (profile[(1, 0)] - profile[(0, 0)]) / dtau;
        let v_end = (profile[(t_len - 1, 0)] - profile[(t_len - 2, 0)]) / dtau;
        // Per unit tau, scaled by the move magnitude.
        assert!(v_start.abs() <= 1e-3);
        assert!(v_end.abs() <= 1e-3);
    }

    #[test]
    fn min_jerk_is_monotone_in_s() {
        let profile = min_jerk_profile(&[0.0], &[1.0], 1001).unwrap();
        for t in 1..1001 {
            assert!(profile[(t, 0)] >= profile[(t - 1, 0)]);
        }
    }
}
