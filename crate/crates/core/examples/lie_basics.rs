//! Exp/Log, composition and geodesic interpolation on SO(3) and SE(3).

use actionflow::lie::{
    geodesic_interp, pose_compose, pose_inverse, sample_uniform_rotation, so3_exp, so3_log, stream, AxisAngle, Pose,
};
use nalgebra::Vector3;

fn main() -> actionflow::Result<()> {
    let w = AxisAngle::new(0.3, -1.2, 0.5);
    let r = so3_exp(&w)?;
    println!("exp({:?}) has angle {:.6}", w.vector().as_slice(), r.angle());
    println!("log(exp(w)) = {:?}", so3_log(&r)?.vector().as_slice());

    let mut rng = stream(0);
    let a = sample_uniform_rotation(&mut rng);
    let b = sample_uniform_rotation(&mut rng);
    for t in [0.0, 0.25, 0.5, 1.0] {
        let m = geodesic_interp(&a, &b, t)?;
        println!("t={t:.2}: angle from a {:.4}, to b {:.4}", a.angle_to(&m), m.angle_to(&b));
    }

    let x = Pose::new(a, Vector3::new(1.0, 2.0, 3.0));
    let y = Pose::new(b, Vector3::new(-1.0, 0.5, 0.0));
    let z = pose_compose(&pose_inverse(&x), &pose_compose(&x, &y));
    println!("x⁻¹·(x·y) vs y: translation {:.2e}, rotation {:.2e}", (z.p - y.p).norm(), z.r.angle_to(&y.r));
    println!("12-value layout: {:?}", x.to_array());
    Ok(())
}
