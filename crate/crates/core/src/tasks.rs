//! Synthetic datasets, metrics and the JSON-lines dataset format.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::se3_flow_point;
use crate::ipa::{Token, TokenKind, TokenSet};
use crate::lie::{pose_compose, so3_exp, stream, AxisAngle, Pose, Rotation};

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 4.0;
pub const EIGHT_GAUSSIANS_STD: f64 = 0.1;

/// Observation feature of the agent token in reach scenes.
pub const REACH_AGENT_FEATURE: [f64; 2] = [1.0, 0.0];
/// Observation feature of the object token in reach scenes.
pub const REACH_OBJECT_FEATURE: [f64; 2] = [0.0, 1.0];

/// An observation and the expert action poses that answer it.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    /// Observation tokens only.
    pub observation: TokenSet,
    pub actions: Vec<Pose>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    EightGaussians,
    TwoMoons,
    Se3Reach,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eight-gaussians" => Ok(TaskKind::EightGaussians),
            "two-moons" => Ok(TaskKind::TwoMoons),
            "se3-reach" => Ok(TaskKind::Se3Reach),
            _ => Err(invalid(format!("unknown task '{s}'"))),
        }
    }
}

/// Scene sampling for the reach task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReachSpec {
    /// Lower corner of the object translation box.
    pub translation_min: [f64; 3],
    /// Upper corner of the object translation box.
    pub translation_max: [f64; 3],
    /// Range of the object's rotation about z, radians.
    pub yaw_range: [f64; 2],
    /// Grasp pose in the object frame, 12-value pose layout.
    pub grasp_offset: [f64; 12],
    /// Action poses per demonstration.
    pub n_actions: usize,
}

impl Default for ReachSpec {
    fn default() -> Self {
        // quarter turn about y; together with |yaw| ≤ π/2 the agent-to-grasp
        // rotation stays at most 120°, away from the ambiguous half turn
        let grasp = Pose::new(
            so3_exp(&AxisAngle::new(0.0, PI / 2.0, 0.0)).expect("finite"),
            Vector3::new(0.0, 0.0, 0.1),
        );
        ReachSpec {
            translation_min: [0.3, -0.3, 0.0],
            translation_max: [0.7, 0.3, 0.2],
            yaw_range: [-PI / 2.0, PI / 2.0],
            grasp_offset: grasp.to_array(),
            n_actions: 8,
        }
    }
}

impl ReachSpec {
    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.translation_min[i] <= self.translation_max[i]) {
                return Err(invalid(format!("translation range {i} is not ordered")));
            }
        }
        if !(self.yaw_range[0] <= self.yaw_range[1]) {
            return Err(invalid("yaw range is not ordered"));
        }
        if self.n_actions == 0 {
            return Err(invalid("n_actions must be positive"));
        }
        Pose::from_slice(&self.grasp_offset)?;
        Ok(())
    }

    pub fn grasp(&self) -> Result<Pose> {
        Pose::from_slice(&self.grasp_offset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_demos: usize,
    pub seed: u64,
    /// Std of Gaussian noise on expert actions (reach) or points (two-moons).
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub reach: ReachSpec,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_demos == 0 {
            return Err(invalid("n_demos must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(invalid("noise must be non-negative"));
        }
        if self.kind == TaskKind::EightGaussians && self.n_demos < 8 {
            return Err(invalid("eight-gaussians needs at least 8 points"));
        }
        self.reach.validate()
    }
}

/// Centers of the eight modes, at angles `2πk/8` on the radius-4 circle.
pub fn eight_gaussian_modes() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 8.0;
            [EIGHT_GAUSSIANS_RADIUS * a.cos(), EIGHT_GAUSSIANS_RADIUS * a.sin()]
        })
        .collect()
}

/// `n` points, point `i` drawn from mode `i mod 8`.
pub fn gen_eight_gaussians(n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    if n < 8 {
        return Err(invalid("eight-gaussians needs n ≥ 8"));
    }
    let modes = eight_gaussian_modes();
    let mut rng = stream(seed);
    Ok((0..n)
        .map(|i| {
            let c = modes[i % 8];
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            [c[0] + EIGHT_GAUSSIANS_STD * dx, c[1] + EIGHT_GAUSSIANS_STD * dy]
        })
        .collect())
}

/// Two interleaved half circles with Gaussian jitter.
pub fn gen_two_moons(n: usize, seed: u64, noise: f64) -> Result<Vec<[f64; 2]>> {
    if n == 0 || !(noise >= 0.0) {
        return Err(invalid("two-moons needs n ≥ 1 and noise ≥ 0"));
    }
    let mut rng = stream(seed);
    Ok((0..n)
        .map(|i| {
            let a = rng.random_range(0.0..PI);
            let (x, y) = if i % 2 == 0 { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            [x + noise * dx, y + noise * dy]
        })
        .collect())
}

/// Expert actions: `n` poses along the straight SE(3) path from the agent
/// to `object ∘ grasp`, ending exactly on it.
pub fn reach_expert(agent: &Pose, object: &Pose, grasp: &Pose, n: usize) -> Result<Vec<Pose>> {
    let target = pose_compose(object, grasp);
    (1..=n)
        .map(|k| {
            if k == n {
                Ok(target)
            } else {
                se3_flow_point(agent, &target, k as f64 / n as f64)
            }
        })
        .collect()
}

/// Observation of a reach scene: agent token then object token.
pub fn reach_observation(agent: &Pose, object: &Pose) -> TokenSet {
    TokenSet::new(vec![
        Token::observation(*agent, REACH_AGENT_FEATURE.to_vec()),
        Token::observation(*object, REACH_OBJECT_FEATURE.to_vec()),
    ])
}

/// Reach scenes with the agent at the identity pose.
pub fn gen_se3_reach(spec: &TaskSpec) -> Result<Vec<Demonstration>> {
    spec.validate()?;
    let r = &spec.reach;
    let grasp = r.grasp()?;
    let mut rng = stream(spec.seed);
    let draw = |lo: f64, hi: f64, rng: &mut crate::lie::RandomStream| if lo < hi { rng.random_range(lo..hi) } else { lo };
    (0..spec.n_demos)
        .map(|_| {
            let p = Vector3::new(
                draw(r.translation_min[0], r.translation_max[0], &mut rng),
                draw(r.translation_min[1], r.translation_max[1], &mut rng),
                draw(r.translation_min[2], r.translation_max[2], &mut rng),
            );
            let yaw = draw(r.yaw_range[0], r.yaw_range[1], &mut rng);
            let object = Pose::new(Rotation::about_z(yaw), p);
            let agent = Pose::identity();
            let mut actions = reach_expert(&agent, &object, &grasp, r.n_actions)?;
            if spec.noise > 0.0 {
                for a in &mut actions {
                    let n: [f64; 6] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                    let w = AxisAngle::new(n[3], n[4], n[5]).scaled(spec.noise);
                    *a = Pose::new(a.r * so3_exp(&w)?, a.p + Vector3::new(n[0], n[1], n[2]) * spec.noise);
                }
            }
            Ok(Demonstration { observation: reach_observation(&agent, &object), actions })
        })
        .collect()
}

/// `(‖p_pred − p_target‖, geodesic angle in degrees)`.
pub fn pose_error(pred: &Pose, target: &Pose) -> (f64, f64) {
    ((pred.p - target.p).norm(), pred.r.angle_to(&target.r).to_degrees())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    /// Modes with at least one sample within the radius.
    pub covered: usize,
    /// Fraction of samples within the radius of their nearest mode.
    pub fraction: f64,
}

pub fn mode_coverage(samples: &[[f64; 2]], modes: &[[f64; 2]], radius: f64) -> Result<Coverage> {
    if !(radius > 0.0) {
        return Err(invalid("coverage radius must be positive"));
    }
    if modes.is_empty() {
        return Err(invalid("no modes given"));
    }
    let mut hit = vec![false; modes.len()];
    let mut inside = 0usize;
    for s in samples {
        let (best, d2) = modes
            .iter()
            .enumerate()
            .map(|(i, m)| (i, (s[0] - m[0]).powi(2) + (s[1] - m[1]).powi(2)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        if d2.sqrt() <= radius {
            inside += 1;
            hit[best] = true;
        }
    }
    let fraction = if samples.is_empty() { 0.0 } else { inside as f64 / samples.len() as f64 };
    Ok(Coverage { covered: hit.iter().filter(|&&h| h).count(), fraction })
}

// ---- JSON lines ---------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRecord {
    pose: Vec<f64>,
    feat: Vec<f64>,
    kind: TokenKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    obs: Vec<TokenRecord>,
    #[serde(default)]
    actions: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointsRecord {
    points: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Scene(SceneRecord),
    Points(PointsRecord),
}

/// Contents of a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Scenes(Vec<Demonstration>),
    Points(Vec<Vec<f64>>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Scenes(s) => s.len(),
            Dataset::Points(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn scene_line(d: &Demonstration) -> Result<String> {
    let rec = SceneRecord {
        obs: d
            .observation
            .tokens
            .iter()
            .map(|t| TokenRecord { pose: t.pose.to_array().to_vec(), feat: t.feature.clone(), kind: t.kind })
            .collect(),
        actions: d.actions.iter().map(|a| a.to_array().to_vec()).collect(),
    };
    Ok(serde_json::to_string(&rec)?)
}

/// One scene per line.
pub fn write_scenes<W: Write>(mut w: W, scenes: &[Demonstration]) -> Result<()> {
    for s in scenes {
        writeln!(w, "{}", scene_line(s)?)?;
    }
    Ok(())
}

/// One point per line, as `{"points": [[x, y]]}`.
pub fn write_points<W: Write>(mut w: W, points: &[Vec<f64>]) -> Result<()> {
    for p in points {
        let rec = PointsRecord { points: vec![p.clone()] };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn write_dataset<W: Write>(w: W, data: &Dataset) -> Result<()> {
    match data {
        Dataset::Scenes(s) => write_scenes(w, s),
        Dataset::Points(p) => write_points(w, p),
    }
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut scenes = Vec::new();
    let mut points = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format(format!("line {}: {msg}", i + 1));
        match serde_json::from_str::<Line>(&line).map_err(|e| bad(e.to_string()))? {
            Line::Scene(rec) => {
                let tokens = rec
                    .obs
                    .into_iter()
                    .map(|t| Ok(Token { pose: Pose::from_slice(&t.pose)?, feature: t.feat, kind: t.kind }))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| bad(e.to_string()))?;
                let actions = rec
                    .actions
                    .iter()
                    .map(|a| Pose::from_slice(a))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| bad(e.to_string()))?;
                scenes.push(Demonstration { observation: TokenSet::new(tokens), actions });
            }
            Line::Points(rec) => points.extend(rec.points),
        }
    }
    match (scenes.is_empty(), points.is_empty()) {
        (false, true) => Ok(Dataset::Scenes(scenes)),
        (true, false) => Ok(Dataset::Points(points)),
        (true, true) => Err(Error::Format("empty dataset".into())),
        (false, false) => Err(Error::Format("dataset mixes scenes and points".into())),
    }
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}

pub fn save_dataset(path: &std::path::Path, data: &Dataset) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut w, data)?;
    w.flush()?;
    Ok(())
}

/// Generates the dataset described by `spec`.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let pts = |v: Vec<[f64; 2]>| Dataset::Points(v.into_iter().map(|p| p.to_vec()).collect());
    Ok(match spec.kind {
        TaskKind::EightGaussians => pts(gen_eight_gaussians(spec.n_demos, spec.seed)?),
        TaskKind::TwoMoons => pts(gen_two_moons(spec.n_demos, spec.seed, spec.noise)?),
        TaskKind::Se3Reach => Dataset::Scenes(gen_se3_reach(spec)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::sample_uniform_rotation;

    fn reach_spec(n: usize, seed: u64) -> TaskSpec {
        TaskSpec { kind: TaskKind::Se3Reach, n_demos: n, seed, noise: 0.0, reach: ReachSpec::default() }
    }

    #[test]
    fn eight_gaussians_construction() {
        assert_eq!(gen_eight_gaussians(64, 3).unwrap(), gen_eight_gaussians(64, 3).unwrap());
        assert!(gen_eight_gaussians(7, 0).is_err());
        let modes = eight_gaussian_modes();
        for (k, m) in modes.iter().enumerate() {
            let a = 2.0 * PI * k as f64 / 8.0;
            assert!((m[0] - 4.0 * a.cos()).abs() < 1e-15 && (m[1] - 4.0 * a.sin()).abs() < 1e-15);
        }
        let pts = gen_eight_gaussians(8000, 1).unwrap();
        for k in 0..8 {
            let mine: Vec<_> = pts.iter().skip(k).step_by(8).collect();
            let n = mine.len() as f64;
            let mx = mine.iter().map(|p| p[0]).sum::<f64>() / n;
            let sx = (mine.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((0.08..=0.12).contains(&sx), "mode {k} std {sx}");
        }
    }

    #[test]
    fn coverage_examples() {
        let modes = eight_gaussian_modes();
        let c = mode_coverage(&modes, &modes, 0.3).unwrap();
        assert_eq!(c, Coverage { covered: 8, fraction: 1.0 });
        let one = vec![modes[3]; 10];
        assert_eq!(mode_coverage(&one, &modes, 0.3).unwrap().covered, 1);
        let data = gen_eight_gaussians(8000, 2).unwrap();
        // P(‖N(0, 0.01 I)‖ > 0.3) = exp(−4.5) ≈ 0.011
        let c = mode_coverage(&data, &modes, 0.3).unwrap();
        assert!(c.fraction >= 0.98 && c.covered == 8, "{c:?}");
        assert!(mode_coverage(&data, &modes, 0.0).is_err());
    }

    #[test]
    fn two_moons_shape() {
        let pts = gen_two_moons(200, 4, 0.05).unwrap();
        assert_eq!(pts.len(), 200);
        assert!(pts.iter().all(|p| p[0] > -1.5 && p[0] < 2.5 && p[1] > -1.0 && p[1] < 1.5));
    }

    #[test]
    fn reach_single_action_is_grasp_target() {
        let mut spec = reach_spec(5, 7);
        spec.reach.n_actions = 1;
        let grasp = spec.reach.grasp().unwrap();
        for d in gen_se3_reach(&spec).unwrap() {
            let object = d.observation.tokens[1].pose;
            assert_eq!(d.actions, vec![pose_compose(&object, &grasp)]);
            assert_eq!(d.observation.tokens[0].pose, Pose::identity());
        }
    }

    #[test]
    fn reach_expert_is_equivariant() {
        let spec = reach_spec(10, 8);
        let grasp = spec.reach.grasp().unwrap();
        let mut rng = stream(9);
        for d in gen_se3_reach(&spec).unwrap() {
            let delta = Pose::new(sample_uniform_rotation(&mut rng), Vector3::new(1.0, -2.0, 0.5));
            let agent = pose_compose(&delta, &d.observation.tokens[0].pose);
            let object = pose_compose(&delta, &d.observation.tokens[1].pose);
            let moved = reach_expert(&agent, &object, &grasp, spec.reach.n_actions).unwrap();
            for (a, b) in moved.iter().zip(&d.actions) {
                let want = pose_compose(&delta, b);
                assert!((a.p - want.p).norm() < 1e-12);
                assert!(a.r.angle_to(&want.r) < 1e-10);
            }
        }
    }

    #[test]
    fn pose_error_examples() {
        let a = Pose::new(Rotation::about_z(0.4), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(pose_error(&a, &a), (0.0, 0.0));
        let b = Pose::new(Rotation::about_z(0.4 + PI / 2.0), a.p);
        let (t, r) = pose_error(&a, &b);
        assert!(t == 0.0 && (r - 90.0).abs() < 1e-12);
        let c = Pose::new(Rotation::about_z(-1.0), Vector3::new(0.0, 1.0, 0.0));
        let (t1, r1) = pose_error(&a, &c);
        let (t2, r2) = pose_error(&c, &a);
        assert!((t1 - t2).abs() < 1e-15 && (r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn reach_validation() {
        let mut spec = reach_spec(1, 0);
        spec.reach.translation_min[1] = 1.0;
        assert!(gen_se3_reach(&spec).is_err());
        let mut spec = reach_spec(0, 0);
        assert!(gen_se3_reach(&spec).is_err());
        spec.n_demos = 1;
        spec.reach.n_actions = 0;
        assert!(gen_se3_reach(&spec).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut spec = reach_spec(6, 10);
        spec.noise = 0.01;
        let scenes = gen_se3_reach(&spec).unwrap();
        let mut buf = Vec::new();
        write_scenes(&mut buf, &scenes).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 6);
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, Dataset::Scenes(scenes.clone()));
        let mut again = Vec::new();
        write_dataset(&mut again, &back).unwrap();
        assert_eq!(buf, again);

        let pts: Vec<Vec<f64>> = gen_eight_gaussians(16, 0).unwrap().iter().map(|p| p.to_vec()).collect();
        let mut buf = Vec::new();
        write_points(&mut buf, &pts).unwrap();
        assert_eq!(read_dataset(&buf[..]).unwrap(), Dataset::Points(pts));

        assert!(read_dataset(&b"{\"obs\":[],\"extra\":1}\n"[..]).is_err());
        assert!(read_dataset(&b""[..]).is_err());
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = generate(&reach_spec(4, 3)).unwrap();
        let b = generate(&reach_spec(4, 3)).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_dataset(&mut x, &a).unwrap();
        write_dataset(&mut y, &b).unwrap();
        assert_eq!(x, y);
    }
}
