//! Rectified linear flows in Euclidean space and on SE(3): interpolants,
//! constant target velocities, Euler steps, inference schedules and the
//! flow-matching loss.
//!
//! On SE(3) the translation follows a straight line and the rotation follows
//! the geodesic `r_t = r0·Exp(t·Log(r0ᵀ·r1))`. Both target velocities are
//! expressed in the body frame of the moving pose, which is what makes a
//! sampler driven by an invariant network equivariant.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape, Result};
use crate::lie::{
    geodesic_interp, nearest_rotation, sample_gaussian_translation, sample_uniform_rotation, so3_exp, so3_log,
    AxisAngle, Pose, RandomStream,
};

/// Ratio between the first and the last step of an exponential schedule.
pub const EXP_SCHEDULE_RATIO: f64 = 4.0;

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("flow time {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `t·a1 + (1 − t)·a0`.
pub fn euclid_flow_point(a0: &[f64], a1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dims(a0, a1)?;
    check_t(t)?;
    Ok(a0.iter().zip(a1).map(|(x0, x1)| t * x1 + (1.0 - t) * x0).collect())
}

/// `a1 − a0`, the same for every t.
pub fn euclid_target(a0: &[f64], a1: &[f64]) -> Result<Vec<f64>> {
    check_dims(a0, a1)?;
    Ok(a0.iter().zip(a1).map(|(x0, x1)| x1 - x0).collect())
}

pub fn euler_step_euclid(a: &[f64], v: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_dims(a, v)?;
    Ok(a.iter().zip(v).map(|(x, u)| x + u * dt).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EuclidFlowSample {
    pub t: f64,
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub a_t: Vec<f64>,
    pub u: Vec<f64>,
}

impl EuclidFlowSample {
    pub fn new(a0: Vec<f64>, a1: Vec<f64>, t: f64) -> Result<Self> {
        let a_t = euclid_flow_point(&a0, &a1, t)?;
        let u = euclid_target(&a0, &a1)?;
        Ok(EuclidFlowSample { t, a0, a1, a_t, u })
    }
}

/// Translation lerp plus rotation geodesic.
pub fn se3_flow_point(t0: &Pose, t1: &Pose, t: f64) -> Result<Pose> {
    check_t(t)?;
    let r = geodesic_interp(&t0.r, &t1.r, t)?;
    Ok(Pose::new(r, t0.p * (1.0 - t) + t1.p * t))
}

/// Body-frame target velocities `(v_p, v_r)` at time `t ∈ [0, 1)`.
///
/// `v_r = Log(r0ᵀ·r1)` and `v_p = r_tᵀ·(p1 − p0)`. Both equal the
/// remaining displacement divided by `1 − t`, written without the division.
pub fn se3_target(t0: &Pose, t1: &Pose, t: f64) -> Result<(Vector3<f64>, AxisAngle)> {
    check_t(t)?;
    if t >= 1.0 {
        return Err(invalid("se3_target is undefined at t = 1"));
    }
    let v_r = so3_log(&(t0.r.transpose() * t1.r))?;
    let r_t = t0.r * so3_exp(&v_r.scaled(t))?;
    let v_p = r_t.transpose().rotate(&(t1.p - t0.p));
    Ok((v_p, v_r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Se3FlowSample {
    pub t: f64,
    pub t0: Pose,
    pub t1: Pose,
    pub t_t: Pose,
    pub v_p_target: Vector3<f64>,
    pub v_r_target: AxisAngle,
}

impl Se3FlowSample {
    pub fn new(t0: Pose, t1: Pose, t: f64) -> Result<Self> {
        let t_t = se3_flow_point(&t0, &t1, t)?;
        let (v_p_target, v_r_target) = se3_target(&t0, &t1, t)?;
        Ok(Se3FlowSample { t, t0, t1, t_t, v_p_target, v_r_target })
    }
}

/// `p ← p + r·v_p·dt`, `r ← r·Exp(dt·v_r)`, then re-projection onto SO(3).
pub fn euler_step_se3(pose: &Pose, v_p: &Vector3<f64>, v_r: &AxisAngle, dt: f64) -> Result<Pose> {
    if !(dt > 0.0) {
        return Err(invalid(format!("euler step needs dt > 0, got {dt}")));
    }
    let p = pose.p + pose.r.rotate(v_p) * dt;
    if v_r.vector().iter().all(|&x| x == 0.0) {
        // nothing composed, nothing to re-project
        return Ok(Pose::new(pose.r, p));
    }
    let r = pose.r * so3_exp(&v_r.scaled(dt))?;
    Ok(Pose::new(nearest_rotation(r.matrix())?, p))
}

/// Like [`euler_step_se3`] but adds `v_p` in the world frame.
///
/// Not equivariant; kept as a negative control for equivariance checks.
pub fn euler_step_se3_world_frame(pose: &Pose, v_p: &Vector3<f64>, v_r: &AxisAngle, dt: f64) -> Result<Pose> {
    let stepped = euler_step_se3(pose, &Vector3::zeros(), v_r, dt)?;
    Ok(Pose::new(stepped.r, pose.p + v_p * dt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    #[serde(alias = "exp")]
    Exponential,
}

impl std::str::FromStr for ScheduleKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "exp" | "exponential" => Ok(ScheduleKind::Exponential),
            _ => Err(invalid(format!("unknown schedule '{s}' (linear | exp)"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Exponential => "exp",
        })
    }
}

/// Strictly increasing timesteps from exactly 0 to exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub timesteps: Vec<f64>,
    pub kind: ScheduleKind,
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    /// `(t_k, t_{k+1} − t_k)` per interval.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.timesteps.windows(2).map(|w| (w[0], w[1] - w[0]))
    }
}

pub fn make_schedule(k: usize, kind: ScheduleKind) -> Result<Schedule> {
    make_schedule_with_ratio(k, kind, EXP_SCHEDULE_RATIO)
}

/// Exponential spacing uses `t_k = (γ^k − 1)/(γ^K − 1)` with
/// `γ = ratio^(−1/(K−1))`, so the first step is `ratio` times the last.
pub fn make_schedule_with_ratio(k: usize, kind: ScheduleKind, ratio: f64) -> Result<Schedule> {
    if k == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    let timesteps = match kind {
        ScheduleKind::Linear => (0..=k).map(|i| i as f64 / k as f64).collect(),
        ScheduleKind::Exponential if k == 1 => vec![0.0, 1.0],
        ScheduleKind::Exponential => {
            if !(ratio > 1.0) || !ratio.is_finite() {
                return Err(invalid(format!("exponential schedule ratio must exceed 1, got {ratio}")));
            }
            let gamma = ratio.powf(-1.0 / (k - 1) as f64);
            let denom = gamma.powi(k as i32) - 1.0;
            let mut ts: Vec<f64> = (0..=k).map(|i| (gamma.powi(i as i32) - 1.0) / denom).collect();
            ts[k] = 1.0;
            ts
        }
    };
    Ok(Schedule { timesteps, kind })
}

/// `Σ_tokens ‖v̂_p − v_p‖² + ‖v̂_r − v_r‖²`, averaged over the leading batch axis.
pub fn cfm_loss(tape: &mut Tape, pred_vp: Var, pred_vr: Var, target_vp: Var, target_vr: Var) -> Result<Var> {
    let s = tape.shape(pred_vp).to_vec();
    for v in [pred_vr, target_vp, target_vr] {
        if tape.shape(v) != s.as_slice() {
            return Err(shape(format!("cfm_loss shape mismatch: {s:?} vs {:?}", tape.shape(v))));
        }
    }
    if s.is_empty() {
        return Err(shape("cfm_loss needs a batch axis"));
    }
    let dp = tape.sub(pred_vp, target_vp)?;
    let dp = tape.square(dp)?;
    let lp = tape.sum(dp)?;
    let dr = tape.sub(pred_vr, target_vr)?;
    let dr = tape.square(dr)?;
    let lr = tape.sum(dr)?;
    let total = tape.add(lp, lr)?;
    tape.scale(total, 1.0 / s[0] as f64)
}

/// Loss on packed `[.., 6]` tensors (`v_p` first, `v_r` last).
pub fn cfm_loss_packed(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let last = tape.shape(pred).len().checked_sub(1).ok_or_else(|| shape("cfm_loss on a scalar"))?;
    let p = tape.split(pred, last, &[3, 3])?;
    let t = tape.split(target, last, &[3, 3])?;
    cfm_loss(tape, p[0], p[1], t[0], t[1])
}

/// Haar-uniform rotation and Gaussian translation.
pub fn sample_prior_pose(rng: &mut RandomStream, translation_scale: f64) -> Result<Pose> {
    let r = sample_uniform_rotation(rng);
    let p = sample_gaussian_translation(rng, translation_scale)?;
    Ok(Pose::new(r, p))
}
