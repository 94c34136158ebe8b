//! The flow policy: training on demonstrations, action generation by Euler
//! integration in each action's own frame, equivariance checks and evaluation.
//!
//! Prior poses are drawn in the frame of the anchor observation token, so a
//! rigid transform of the scene moves the prior with it. Before every network
//! call the token set is passed through [`adaptation_normalize`] with the same
//! anchor.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, shape, Error, Result};
use crate::flow::{
    cfm_loss_packed, euclid_flow_point, euclid_target, euler_step_se3, euler_step_se3_world_frame, make_schedule,
    sample_prior_pose, Schedule, ScheduleKind, Se3FlowSample,
};
use crate::ipa::{adaptation_normalize, velocities, IpaConfig, InvariantTransformer, ModelConfig, Token, TokenSet};
use crate::lie::{pose_compose, stream, substream, Pose, RandomStream};
use crate::net::{Adam, ParamStore};
use crate::tasks::{pose_error, Demonstration};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub ipa: IpaConfig,
    pub obs_feature_dim: usize,
    /// Learned action feature vectors, i.e. the longest action sequence.
    pub n_actions: usize,
    pub adaptation_scale: f64,
    /// Std of the Gaussian prior translation, in anchor-frame units.
    pub prior_translation_scale: f64,
    /// Which observation token anchors the adaptation frame and the prior.
    pub anchor_index: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            ipa: IpaConfig::default(),
            obs_feature_dim: 2,
            n_actions: 16,
            adaptation_scale: 10.0,
            prior_translation_scale: 1.0,
            anchor_index: 0,
        }
    }
}

impl PolicyConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { ipa: self.ipa.clone(), obs_feature_dim: self.obs_feature_dim, n_actions: self.n_actions }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if !(self.adaptation_scale > 0.0) || !(self.prior_translation_scale > 0.0) {
            return Err(invalid("adaptation_scale and prior_translation_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine-anneal the step size down to this value over the run; constant when absent.
    pub final_learning_rate: Option<f64>,
    /// Training times on the grid `{0, 1/K, …, (K−1)/K}`; continuous `[0, 1)` when absent.
    pub k_train: Option<usize>,
    pub seed: u64,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            final_learning_rate: None,
            k_train: None,
            seed: 0,
            policy: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Step size for update `step` of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        match self.final_learning_rate {
            None => self.learning_rate,
            Some(end) => {
                let phase = std::f64::consts::PI * step as f64 / total.max(1) as f64;
                end + 0.5 * (self.learning_rate - end) * (1.0 + phase.cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.k_train == Some(0) {
            return Err(invalid("epochs, batch_size and k_train must be positive"));
        }
        let finite = |x: f64| x >= 0.0 && x.is_finite();
        if !finite(self.learning_rate) || !self.final_learning_rate.is_none_or(finite) {
            return Err(invalid("learning_rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// All learnable parameters together with the architecture that reads them.
#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub store: ParamStore,
    pub model: InvariantTransformer,
}

impl Policy {
    /// Random initialization with a zero vector head.
    pub fn new(config: &PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed);
        let model = InvariantTransformer::new(&mut store, &config.model_config(), &mut rng)?;
        Ok(Policy { config: config.clone(), store, model })
    }

    /// Architecture from `config`, parameters from `named` (checked by name and shape).
    pub fn from_tensors(config: &PolicyConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut policy = Policy::new(config, 0)?;
        policy.store.load(named)?;
        Ok(policy)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Gives the zero head random weights, for untrained-but-nonzero fields.
    pub fn randomize_head(&mut self, seed: u64) {
        self.model.randomize_head(&mut self.store, &mut stream(seed));
    }

    pub fn anchor(&self, observation: &TokenSet) -> Result<Pose> {
        observation.observation_pose(self.config.anchor_index)
    }

    /// `n` prior poses placed in the anchor frame of `observation`.
    pub fn sample_initial_poses(&self, observation: &TokenSet, n: usize, rng: &mut RandomStream) -> Result<Vec<Pose>> {
        let anchor = self.anchor(observation)?;
        (0..n)
            .map(|_| Ok(pose_compose(&anchor, &sample_prior_pose(rng, self.config.prior_translation_scale)?)))
            .collect()
    }

    /// Normalized token set for one network call.
    fn network_input(&self, observation: &TokenSet, actions: &[Pose]) -> Result<TokenSet> {
        let anchor = self.anchor(observation)?;
        adaptation_normalize(&observation.with_actions(actions), &anchor, self.config.adaptation_scale)
    }

    /// Predicted body-frame velocities `[batch, n_actions, 6]` on a fresh tape.
    pub fn predict(&self, observations: &[&TokenSet], actions: &[Vec<Pose>], ts: &[f64]) -> Result<Tensor> {
        let sets = observations
            .iter()
            .zip(actions)
            .map(|(o, a)| self.network_input(o, a))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let out = self.model.forward(&mut tape, &p, &sets, ts)?;
        Ok(tape.value(out).clone())
    }
}

// ---- training -------------------------------------------------------------------

/// Network inputs and regression targets for one training batch.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub sets: Vec<TokenSet>,
    pub ts: Vec<f64>,
    /// `[batch, n_actions, 6]`, `v_p` then `v_r`.
    pub targets: Tensor,
}

fn draw_time(rng: &mut RandomStream, k_train: Option<usize>) -> f64 {
    match k_train {
        Some(k) => rng.random_range(0..k) as f64 / k as f64,
        None => rng.random_range(0.0..1.0),
    }
}

/// One shared `t` per demonstration and an independent prior pose per action token.
pub fn build_batch(
    policy: &Policy,
    demos: &[&Demonstration],
    rng: &mut RandomStream,
    k_train: Option<usize>,
) -> Result<FlowBatch> {
    let first = demos.first().ok_or_else(|| invalid("empty training batch"))?;
    let n = first.actions.len();
    let mut sets = Vec::with_capacity(demos.len());
    let mut ts = Vec::with_capacity(demos.len());
    let mut targets = Vec::with_capacity(demos.len() * n * 6);
    for d in demos {
        if d.actions.len() != n || d.actions.is_empty() {
            return Err(shape("demonstrations in a batch need the same non-zero action count"));
        }
        let t = draw_time(rng, k_train);
        let init = policy.sample_initial_poses(&d.observation, n, rng)?;
        let mut poses = Vec::with_capacity(n);
        for (t0, t1) in init.iter().zip(&d.actions) {
            let s = Se3FlowSample::new(*t0, *t1, t)?;
            targets.extend(s.v_p_target.iter().chain(s.v_r_target.vector().iter()));
            poses.push(s.t_t);
        }
        sets.push(policy.network_input(&d.observation, &poses)?);
        ts.push(t);
    }
    Ok(FlowBatch { sets, ts, targets: Tensor::new(vec![demos.len(), n, 6], targets)? })
}

fn check_loss(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what}: loss is {loss}")))
    }
}

/// Loss of the current weights on `batch`, without updating them.
pub fn batch_loss(policy: &Policy, batch: &FlowBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let p = policy.store.bind(&mut tape, false);
    let pred = policy.model.forward(&mut tape, &p, &batch.sets, &batch.ts)?;
    let target = tape.constant(batch.targets.clone());
    let loss = cfm_loss_packed(&mut tape, pred, target)?;
    Ok(tape.value(loss).item())
}

fn gradient_step<F>(policy: &mut Policy, adam: &mut Adam, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Policy, &crate::net::Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = policy.store.bind(&mut tape, true);
    let loss = loss_fn(&mut tape, policy, &p)?;
    let value = tape.value(loss).item();
    check_loss(value, "training step")?;
    let grads = tape.backward(loss)?;
    let grads = p.gradients(&tape, &grads);
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient for parameter '{}'",
            policy.store.iter().nth(bad).map(|(n, _)| n).unwrap_or("?")
        )));
    }
    adam.step(&mut policy.store, &grads)?;
    Ok(value)
}

/// One Adam update on the flow-matching loss; returns the pre-update loss.
pub fn train_step(
    policy: &mut Policy,
    adam: &mut Adam,
    demos: &[&Demonstration],
    rng: &mut RandomStream,
    k_train: Option<usize>,
) -> Result<f64> {
    let batch = build_batch(policy, demos, rng, k_train)?;
    gradient_step(policy, adam, |tape, policy, p| {
        let pred = policy.model.forward(tape, p, &batch.sets, &batch.ts)?;
        let target = tape.constant(batch.targets.clone());
        cfm_loss_packed(tape, pred, target)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Shuffled mini-batch epochs over `demos`. `on_step` sees every record as it is produced.
pub fn train<F: FnMut(&LossRecord)>(
    policy: &mut Policy,
    demos: &[Demonstration],
    config: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    if demos.is_empty() {
        return Err(invalid("no demonstrations to train on"));
    }
    let mut rng = stream(config.seed);
    let mut adam = Adam::new(&policy.store, config.learning_rate);
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    let total = config.epochs * demos.len().div_ceil(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            adam.learning_rate = config.learning_rate_at(step, total);
            let batch: Vec<&Demonstration> = chunk.iter().map(|&i| &demos[i]).collect();
            let loss = train_step(policy, &mut adam, &batch, &mut rng, config.k_train)
                .map_err(|e| annotate(e, epoch, step))?;
            let rec = LossRecord { epoch, step, loss };
            on_step(&rec);
            log.push(rec);
            step += 1;
        }
    }
    Ok(log)
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, step {step}: {m}")),
        other => other,
    }
}

// ---- generation ---------------------------------------------------------------

/// How predicted translation velocities are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRule {
    /// `p ← p + r·v_p·dt`, the equivariant update.
    BodyFrame,
    /// `p ← p + v_p·dt`; breaks equivariance, used as a negative control.
    WorldFrame,
}

/// Integrates the learned field from `initial` poses for a batch of scenes
/// sharing one token layout. Returns final world-frame poses per scene.
pub fn generate_batch(
    policy: &Policy,
    observations: &[&TokenSet],
    initial: &[Vec<Pose>],
    schedule: &Schedule,
    rule: StepRule,
) -> Result<Vec<Vec<Pose>>> {
    if observations.len() != initial.len() || observations.is_empty() {
        return Err(invalid("need one initial pose list per observation"));
    }
    let mut poses: Vec<Vec<Pose>> = initial.to_vec();
    for (t, dt) in schedule.intervals() {
        let ts = vec![t; observations.len()];
        let out = policy.predict(observations, &poses, &ts)?;
        let vel = velocities(&out);
        let mut it = vel.iter();
        for scene in poses.iter_mut() {
            for pose in scene.iter_mut() {
                let v = it.next().ok_or_else(|| shape("velocity count mismatch"))?;
                *pose = match rule {
                    StepRule::BodyFrame => euler_step_se3(pose, &v.translation, &v.rotation, dt)?,
                    StepRule::WorldFrame => euler_step_se3_world_frame(pose, &v.translation, &v.rotation, dt)?,
                };
            }
        }
    }
    Ok(poses)
}

/// Action poses for one observation from injected initial poses.
pub fn generate_actions(
    policy: &Policy,
    observation: &TokenSet,
    steps: usize,
    kind: ScheduleKind,
    initial: &[Pose],
) -> Result<Vec<Pose>> {
    let schedule = make_schedule(steps, kind)?;
    Ok(generate_batch(policy, &[observation], &[initial.to_vec()], &schedule, StepRule::BodyFrame)?.remove(0))
}

/// Action poses for one observation with `n` prior draws from `seed`.
pub fn generate_actions_seeded(
    policy: &Policy,
    observation: &TokenSet,
    n: usize,
    steps: usize,
    kind: ScheduleKind,
    seed: u64,
) -> Result<Vec<Pose>> {
    let init = policy.sample_initial_poses(observation, n, &mut stream(seed))?;
    generate_actions(policy, observation, steps, kind, &init)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EquivarianceReport {
    pub max_translation: f64,
    /// Radians.
    pub max_rotation: f64,
}

impl EquivarianceReport {
    pub fn max(&self) -> f64 {
        self.max_translation.max(self.max_rotation)
    }

    fn merge(&mut self, other: &EquivarianceReport) {
        self.max_translation = self.max_translation.max(other.max_translation);
        self.max_rotation = self.max_rotation.max(other.max_rotation);
    }
}

/// Runs generation on each `(observation, Δ)` case twice: on the original
/// scene and on the Δ-transformed scene with Δ-transformed initial poses, and
/// compares `Δ·(first)` against the second.
pub fn check_equivariance_many(
    policy: &Policy,
    cases: &[(TokenSet, Pose)],
    n_actions: usize,
    seed: u64,
    schedule: &Schedule,
    rule: StepRule,
) -> Result<EquivarianceReport> {
    if cases.is_empty() {
        return Ok(EquivarianceReport::default());
    }
    let mut init = Vec::with_capacity(cases.len());
    for (i, (obs, _)) in cases.iter().enumerate() {
        init.push(policy.sample_initial_poses(obs, n_actions, &mut substream(seed, i as u64))?);
    }
    let moved_obs: Vec<TokenSet> = cases.iter().map(|(o, d)| o.transformed(d)).collect();
    let moved_init: Vec<Vec<Pose>> = cases
        .iter()
        .zip(&init)
        .map(|((_, d), ps)| ps.iter().map(|p| pose_compose(d, p)).collect())
        .collect();
    let base_obs: Vec<&TokenSet> = cases.iter().map(|(o, _)| o).collect();
    let moved_refs: Vec<&TokenSet> = moved_obs.iter().collect();
    let base = generate_batch(policy, &base_obs, &init, schedule, rule)?;
    let moved = generate_batch(policy, &moved_refs, &moved_init, schedule, rule)?;
    let mut report = EquivarianceReport::default();
    for (((_, d), b), m) in cases.iter().zip(&base).zip(&moved) {
        for (pb, pm) in b.iter().zip(m) {
            let want = pose_compose(d, pb);
            report.merge(&EquivarianceReport {
                max_translation: (want.p - pm.p).norm(),
                max_rotation: want.r.angle_to(&pm.r),
            });
        }
    }
    Ok(report)
}

pub fn check_equivariance(
    policy: &Policy,
    observation: &TokenSet,
    delta: &Pose,
    n_actions: usize,
    seed: u64,
    steps: usize,
    kind: ScheduleKind,
) -> Result<EquivarianceReport> {
    let schedule = make_schedule(steps, kind)?;
    check_equivariance_many(
        policy,
        &[(observation.clone(), *delta)],
        n_actions,
        seed,
        &schedule,
        StepRule::BodyFrame,
    )
}

// ---- evaluation -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SceneError {
    /// Mean translation error over the action sequence.
    pub translation: f64,
    /// Mean geodesic error over the action sequence, degrees.
    pub rotation_deg: f64,
    /// Errors of the last action alone.
    pub final_translation: f64,
    pub final_rotation_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mean_translation: f64,
    pub max_translation: f64,
    pub mean_rotation_deg: f64,
    pub max_rotation_deg: f64,
    pub mean_final_translation: f64,
    pub mean_final_rotation_deg: f64,
    pub per_scene: Vec<SceneError>,
}

impl Metrics {
    fn from_scenes(per_scene: Vec<SceneError>) -> Self {
        let n = per_scene.len().max(1) as f64;
        Metrics {
            mean_translation: per_scene.iter().map(|s| s.translation).sum::<f64>() / n,
            max_translation: per_scene.iter().map(|s| s.translation).fold(0.0, f64::max),
            mean_rotation_deg: per_scene.iter().map(|s| s.rotation_deg).sum::<f64>() / n,
            max_rotation_deg: per_scene.iter().map(|s| s.rotation_deg).fold(0.0, f64::max),
            mean_final_translation: per_scene.iter().map(|s| s.final_translation).sum::<f64>() / n,
            mean_final_rotation_deg: per_scene.iter().map(|s| s.final_rotation_deg).sum::<f64>() / n,
            per_scene,
        }
    }
}

/// Initial poses for scene `i` of an evaluation with `seed`.
pub fn evaluation_initial_poses(policy: &Policy, demo: &Demonstration, seed: u64, i: usize) -> Result<Vec<Pose>> {
    policy.sample_initial_poses(&demo.observation, demo.actions.len(), &mut substream(seed, i as u64))
}

/// Generates actions for every test scene (batched by token layout) and
/// compares them with the expert actions.
pub fn evaluate_with_initial(
    policy: &Policy,
    demos: &[Demonstration],
    initial: &[Vec<Pose>],
    schedule: &Schedule,
) -> Result<(Metrics, Vec<Vec<Pose>>)> {
    if demos.len() != initial.len() {
        return Err(invalid("need one initial pose list per scene"));
    }
    let mut generated: Vec<Option<Vec<Pose>>> = vec![None; demos.len()];
    // group scenes with identical layout so they share network calls
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for (i, d) in demos.iter().enumerate() {
        let key = (d.observation.num_observations(), d.actions.len());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    for (_, idx) in &groups {
        for chunk in idx.chunks(64) {
            let obs: Vec<&TokenSet> = chunk.iter().map(|&i| &demos[i].observation).collect();
            let init: Vec<Vec<Pose>> = chunk.iter().map(|&i| initial[i].clone()).collect();
            let out = generate_batch(policy, &obs, &init, schedule, StepRule::BodyFrame)?;
            for (&i, g) in chunk.iter().zip(out) {
                generated[i] = Some(g);
            }
        }
    }
    let generated: Vec<Vec<Pose>> = generated.into_iter().map(|g| g.expect("every scene generated")).collect();
    let per_scene = demos
        .iter()
        .zip(&generated)
        .map(|(d, g)| {
            let n = d.actions.len() as f64;
            let errors: Vec<(f64, f64)> = g.iter().zip(&d.actions).map(|(a, b)| pose_error(a, b)).collect();
            let (last_t, last_r) = errors.last().copied().unwrap_or((0.0, 0.0));
            SceneError {
                translation: errors.iter().map(|e| e.0).sum::<f64>() / n,
                rotation_deg: errors.iter().map(|e| e.1).sum::<f64>() / n,
                final_translation: last_t,
                final_rotation_deg: last_r,
            }
        })
        .collect();
    Ok((Metrics::from_scenes(per_scene), generated))
}

pub fn evaluate(policy: &Policy, demos: &[Demonstration], steps: usize, kind: ScheduleKind, seed: u64) -> Result<Metrics> {
    let schedule = make_schedule(steps, kind)?;
    let initial = demos
        .iter()
        .enumerate()
        .map(|(i, d)| evaluation_initial_poses(policy, d, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_with_initial(policy, demos, &initial, &schedule)?.0)
}

// ---- Euclidean flow with the same network ----------------------------------------

/// Flow matching on points in `R^dim` (`dim ≤ 3`) with the invariant
/// transformer: every pose is the identity, the current point enters as the
/// feature of one observation token and the velocity is read from the first
/// `dim` translation outputs of a single action token.
#[derive(Clone, Debug)]
pub struct EuclidPolicy {
    pub policy: Policy,
    pub dim: usize,
}

impl EuclidPolicy {
    pub fn new(ipa: &IpaConfig, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(invalid("euclidean flow supports 1 to 3 dimensions"));
        }
        let config = PolicyConfig { ipa: ipa.clone(), obs_feature_dim: dim, n_actions: 1, ..PolicyConfig::default() };
        Ok(EuclidPolicy { policy: Policy::new(&config, seed)?, dim })
    }

    /// Wraps a policy whose configuration matches the Euclidean layout.
    pub fn from_policy(policy: Policy, dim: usize) -> Result<Self> {
        if dim == 0 || dim > 3 || policy.config.obs_feature_dim != dim || policy.config.n_actions != 1 {
            return Err(invalid("policy configuration does not describe a euclidean flow model"));
        }
        Ok(EuclidPolicy { policy, dim })
    }

    /// Shuffled mini-batch epochs over `data`, with the step size schedule of `config`.
    /// Only the optimization fields of `config` are read.
    pub fn train<F: FnMut(&LossRecord)>(
        &mut self,
        data: &[Vec<f64>],
        config: &TrainConfig,
        mut on_step: F,
    ) -> Result<Vec<LossRecord>> {
        config.validate()?;
        if data.is_empty() {
            return Err(invalid("no points to train on"));
        }
        let mut rng = stream(config.seed);
        let mut adam = Adam::new(&self.policy.store, config.learning_rate);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let total = config.epochs * data.len().div_ceil(config.batch_size);
        let mut log = Vec::with_capacity(total);
        let mut step = 0;
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                adam.learning_rate = config.learning_rate_at(step, total);
                let batch: Vec<&[f64]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
                let loss = self.train_step(&mut adam, &batch, &mut rng, config.k_train).map_err(|e| annotate(e, epoch, step))?;
                let rec = LossRecord { epoch, step, loss };
                on_step(&rec);
                log.push(rec);
                step += 1;
            }
        }
        Ok(log)
    }

    fn token_sets(&self, points: &[Vec<f64>]) -> Vec<TokenSet> {
        points
            .iter()
            .map(|a| TokenSet::new(vec![Token::observation(Pose::identity(), a.clone()), Token::action(Pose::identity())]))
            .collect()
    }

    fn velocity(&self, tape: &mut Tape, p: &crate::net::Bound, points: &[Vec<f64>], ts: &[f64]) -> Result<Var> {
        let sets = self.token_sets(points);
        let out = self.policy.model.forward(tape, p, &sets, ts)?;
        tape.narrow(out, 2, 0, self.dim)
    }

    /// Predicted velocities at `points` and times `ts`.
    pub fn predict(&self, points: &[Vec<f64>], ts: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.policy.store.bind(&mut tape, false);
        let v = self.velocity(&mut tape, &p, points, ts)?;
        Ok(tape.value(v).data().chunks(self.dim).map(<[f64]>::to_vec).collect())
    }

    /// One Adam step on `Σ‖v̂ − (a1 − a0)‖²` averaged over the batch.
    pub fn train_step(
        &mut self,
        adam: &mut Adam,
        data: &[&[f64]],
        rng: &mut RandomStream,
        k_train: Option<usize>,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(invalid("empty training batch"));
        }
        let dim = self.dim;
        let mut points = Vec::with_capacity(data.len());
        let mut ts = Vec::with_capacity(data.len());
        let mut targets = Vec::with_capacity(data.len() * dim);
        for a1 in data {
            if a1.len() != dim {
                return Err(shape(format!("point has {} coordinates, expected {dim}", a1.len())));
            }
            let t = draw_time(rng, k_train);
            let a0: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            points.push(euclid_flow_point(&a0, a1, t)?);
            targets.extend(euclid_target(&a0, a1)?);
            ts.push(t);
        }
        let targets = Tensor::new(vec![data.len(), 1, dim], targets)?;
        let this = &*self;
        let mut tape = Tape::new();
        let p = this.policy.store.bind(&mut tape, true);
        let v = this.velocity(&mut tape, &p, &points, &ts)?;
        let target = tape.constant(targets);
        let d = tape.sub(v, target)?;
        let sq = tape.square(d)?;
        let total = tape.sum(sq)?;
        let loss = tape.scale(total, 1.0 / data.len() as f64)?;
        let value = tape.value(loss).item();
        check_loss(value, "euclidean training step")?;
        let grads = tape.backward(loss)?;
        let grads = p.gradients(&tape, &grads);
        adam.step(&mut self.policy.store, &grads)?;
        Ok(value)
    }

    /// Euler integration of `n` prior draws over `schedule`.
    pub fn sample(&self, n: usize, schedule: &Schedule, rng: &mut RandomStream) -> Result<Vec<Vec<f64>>> {
        let mut points: Vec<Vec<f64>> = (0..n).map(|_| (0..self.dim).map(|_| StandardNormal.sample(rng)).collect()).collect();
        for (t, dt) in schedule.intervals() {
            let v = self.predict(&points, &vec![t; n])?;
            for (a, u) in points.iter_mut().zip(&v) {
                for (x, y) in a.iter_mut().zip(u) {
                    *x += y * dt;
                }
            }
        }
        Ok(points)
    }
}

/// Random rigid transform with Haar rotation and translation uniform in `[−spread, spread]³`.
pub fn random_transform(rng: &mut RandomStream, spread: f64) -> Pose {
    let r = crate::lie::sample_uniform_rotation(rng);
    let p = Vector3::new(
        rng.random_range(-spread..=spread),
        rng.random_range(-spread..=spread),
        rng.random_range(-spread..=spread),
    );
    Pose::new(r, p)
}

#[cfg(test)]
mod tests;
