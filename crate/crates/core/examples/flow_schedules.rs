//! SE(3) rectified flow: interpolants, constant targets, one-step closure and
//! the linear and exponential inference schedules.

use actionflow::flow::{euler_step_se3, make_schedule, ScheduleKind, Se3FlowSample};
use actionflow::lie::{sample_uniform_rotation, stream, Pose};
use nalgebra::Vector3;

fn main() -> actionflow::Result<()> {
    let mut rng = stream(1);
    let t0 = Pose::new(sample_uniform_rotation(&mut rng), Vector3::new(0.0, 0.0, 0.0));
    let t1 = Pose::new(sample_uniform_rotation(&mut rng), Vector3::new(1.0, -2.0, 0.5));
    for t in [0.0, 0.3, 0.9] {
        let s = Se3FlowSample::new(t0, t1, t)?;
        let end = euler_step_se3(&s.t_t, &s.v_p_target, &s.v_r_target, 1.0 - t)?;
        println!(
            "t={t:.1}: |v_p|={:.4} |v_r|={:.4}; one step of dt=1−t misses T1 by {:.1e} / {:.1e} rad",
            s.v_p_target.norm(),
            s.v_r_target.angle(),
            (end.p - t1.p).norm(),
            end.r.angle_to(&t1.r)
        );
    }
    for kind in [ScheduleKind::Linear, ScheduleKind::Exponential] {
        let s = make_schedule(5, kind)?;
        let steps: Vec<String> = s.intervals().map(|(_, dt)| format!("{dt:.3}")).collect();
        println!("{kind:6} K=5 steps: {}", steps.join(" "));
    }
    Ok(())
}
