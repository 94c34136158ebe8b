//! # SO(3) / SE(3)
//!
//! Exact rotation and rigid-transform operations in `f64`.
//!
//! Rotations are stored as 3×3 matrices. The tangent space of SO(3) is
//! represented by axis-angle 3-vectors ([`AxisAngle`]) whose direction is the
//! rotation axis and whose norm is the angle in radians.
//!
//! ## Numerical conditioning
//!
//! | Region            | Exp                         | Log                               |
//! |-------------------|-----------------------------|-----------------------------------|
//! | θ < 1e-8          | 2nd-order Taylor of coeffs  | skew part with θ/sin θ ≈ 1 + θ²/6 |
//! | generic           | Rodrigues                   | skew part scaled by θ / sin θ     |
//! | \|π − θ\| < 1e-6  | Rodrigues                   | axis from the symmetric part      |

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

/// Seeded random stream used for every stochastic draw in the crate.
pub type RandomStream = rand_chacha::ChaCha8Rng;

/// Tolerance used when validating externally supplied rotation matrices.
pub const ROTATION_INPUT_TOL: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;
const NEAR_PI: f64 = 1e-6;

/// Builds a [`RandomStream`] from a 64-bit seed.
pub fn stream(seed: u64) -> RandomStream {
    use rand::SeedableRng;
    RandomStream::seed_from_u64(seed)
}

/// Derives an independent child stream from a root seed and a stream index.
pub fn substream(seed: u64, index: u64) -> RandomStream {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    stream(z ^ (z >> 31))
}

/// A rotation matrix in SO(3).
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.0;
        write!(
            f,
            "Rotation([[{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}]])",
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)]
        )
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates `m` against the SO(3) invariants (orthonormal, det = +1)
    /// within [`ROTATION_INPUT_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        check_rotation(&m, ROTATION_INPUT_TOL)?;
        Ok(Rotation(m))
    }

    /// Row-major 9-element constructor.
    pub fn from_row_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(invalid(format!("rotation needs 9 values, got {}", v.len())));
        }
        Self::from_matrix(Matrix3::from_row_slice(v))
    }

    /// Rotation about the z axis by `angle` radians.
    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let s = vee_skew(&self.0).norm();
        let c = 0.5 * (self.0.trace() - 1.0);
        s.atan2(c)
    }

    /// Geodesic distance `‖Log(selfᵀ·other)‖` in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        Rotation(self.0.transpose() * other.0).angle()
    }

    /// Row-major entries.
    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

fn check_rotation(m: &Matrix3<f64>, tol: f64) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(invalid("rotation matrix has non-finite entries"));
    }
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    if err > tol {
        return Err(invalid(format!("matrix is not orthonormal (max |mᵀm − I| = {err:e})")));
    }
    let det = m.determinant();
    if (det - 1.0).abs() > tol {
        return Err(invalid(format!("rotation determinant is {det}, expected 1")));
    }
    Ok(())
}

/// Axis-angle tangent vector of SO(3): direction is the axis, norm the angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        AxisAngle(Vector3::zeros())
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn scaled(&self, s: f64) -> Self {
        AxisAngle(self.0 * s)
    }
}

/// A rigid transform `(r, p)` in SE(3), acting on points as `x ↦ r·x + p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Rotation,
    pub p: Vector3<f64>,
}

impl Pose {
    pub fn new(r: Rotation, p: Vector3<f64>) -> Self {
        Pose { r, p }
    }

    pub fn identity() -> Self {
        Pose { r: Rotation::identity(), p: Vector3::zeros() }
    }

    pub fn from_translation(p: Vector3<f64>) -> Self {
        Pose { r: Rotation::identity(), p }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r.rotate(x) + self.p
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        pose_compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        pose_inverse(self)
    }

    /// The 12-value wire layout: 9 rotation entries row-major, then translation.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        out[..9].copy_from_slice(&self.r.to_row_array());
        out[9] = self.p.x;
        out[10] = self.p.y;
        out[11] = self.p.z;
        out
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(invalid(format!("pose needs 12 values, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("pose has non-finite values"));
        }
        Ok(Pose { r: Rotation::from_row_slice(&v[..9])?, p: Vector3::new(v[9], v[10], v[11]) })
    }

    /// 96 bytes: the 12-value layout as little-endian `f64`.
    pub fn to_le_bytes(&self) -> [u8; 96] {
        let mut out = [0u8; 96];
        for (chunk, x) in out.chunks_exact_mut(8).zip(self.to_array()) {
            chunk.copy_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 96 {
            return Err(Error::Format(format!("pose needs 96 bytes, got {}", bytes.len())));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_slice(&vals)
    }
}

/// Skew-symmetric matrix `[w]×`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// `vee((m − mᵀ)/2)`, equal to `sin θ · axis` for a rotation.
fn vee_skew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Exponential map: axis-angle → rotation (Rodrigues).
pub fn so3_exp(w: &AxisAngle) -> Result<Rotation> {
    let w = &w.0;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(invalid("so3_exp: non-finite axis-angle"));
    }
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / theta2)
    };
    let k = hat(w);
    Ok(Rotation(Matrix3::identity() + k * a + k * k * b))
}

/// Logarithm map: rotation → axis-angle with norm in `[0, π]`.
pub fn so3_log(r: &Rotation) -> Result<AxisAngle> {
    let m = &r.0;
    check_rotation(m, ROTATION_INPUT_TOL)?;
    let skew = vee_skew(m);
    let s = skew.norm();
    let c = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    let theta = s.atan2(c);

    if theta < SMALL_ANGLE.sqrt() {
        // θ / sin θ ≈ 1 + θ²/6
        return Ok(AxisAngle(skew * (1.0 + s * s / 6.0)));
    }
    if PI - theta < NEAR_PI {
        // symmetric part: (m + mᵀ)/2 = c·I + (1 − c)·aaᵀ
        let sym = (m + m.transpose()) * 0.5;
        let aat = (sym - Matrix3::identity() * c) / (1.0 - c);
        let diag = aat.diagonal();
        let i = diag.imax();
        let ai = diag[i].max(0.0).sqrt();
        let mut axis = Vector3::new(aat[(i, 0)], aat[(i, 1)], aat[(i, 2)]) / ai;
        axis[i] = ai;
        axis.normalize_mut();
        // the skew part is sin θ·axis; pick its dominant component to fix the sign
        let j = skew.iamax();
        if skew[j] * axis[j] < 0.0 {
            axis = -axis;
        }
        return Ok(AxisAngle(axis * theta));
    }
    Ok(AxisAngle(skew * (theta / s)))
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    Pose { r: a.r * b.r, p: a.r.rotate(&b.p) + a.p }
}

pub fn pose_inverse(a: &Pose) -> Pose {
    let rt = a.r.transpose();
    Pose { r: rt, p: -rt.rotate(&a.p) }
}

/// Geodesic `r0·Exp(t·Log(r0⁻¹·r1))`.
pub fn geodesic_interp(r0: &Rotation, r1: &Rotation, t: f64) -> Result<Rotation> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(*r0);
    }
    let delta = so3_log(&(r0.transpose() * *r1))?;
    let step = so3_exp(&delta.scaled(t))?;
    Ok(*r0 * step)
}

/// Haar-uniform rotation from a normalized 4-vector of standard normals.
pub fn sample_uniform_rotation(rng: &mut RandomStream) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            let [w, x, y, z] = q.map(|v| v / n);
            return Rotation(quat_to_matrix(w, x, y, z));
        }
    }
}

fn quat_to_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn sample_gaussian_translation(rng: &mut RandomStream, scale: f64) -> Result<Vector3<f64>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(invalid(format!("translation scale must be positive, got {scale}")));
    }
    let v: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) * scale);
    Ok(Vector3::from(v))
}

/// Orthogonal polar factor of `m`, i.e. the closest rotation in Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Rotation> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("nearest_rotation: non-finite matrix".into()));
    }
    if m.determinant() <= 0.0 {
        return Err(Error::Numerical("nearest_rotation: determinant is not positive".into()));
    }
    let svd = m.svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= 1e-12 * sv.max() {
        return Err(Error::Numerical("nearest_rotation: singular matrix".into()));
    }
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    Ok(Rotation(r))
}
