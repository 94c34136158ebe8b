//! Command-line surface: dataset generation, training, sampling, checks and
//! benchmarks, plus the binary checkpoint format they share.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
//! configuration error.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{make_schedule, ScheduleKind};
use crate::ipa::{Frames, IpaConfig, IpaLayer, InvariantTransformer, ModelConfig, Token, TokenSet};
use crate::lie::{stream, Pose};
use crate::net::{EncoderBlock, LayerNormParams, LinearLayer, MultiHeadAttention, ParamStore, TimeEmbedding};
use crate::policy::{
    check_equivariance_many, evaluate, evaluate_with_initial, evaluation_initial_poses, generate_batch,
    random_transform, train, EuclidPolicy, Policy, PolicyConfig, StepRule, TrainConfig,
};
use crate::tasks::{
    eight_gaussian_modes, generate, load_dataset, mode_coverage, save_dataset, write_points, write_scenes, Dataset,
    Demonstration, ReachSpec, TaskKind, TaskSpec, EIGHT_GAUSSIANS_STD,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header of every CSV the commands write.
pub const LOSS_CSV_HEADER: &str = "epoch,step,loss";
pub const BENCH_CSV_HEADER: &str = "steps,schedule,metric,latency";

/// Floats in text outputs carry 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

// ---- checkpoint ---------------------------------------------------------------

/// Model description stored in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub policy: PolicyConfig,
    /// Point dimension of a Euclidean flow model; absent for pose policies.
    #[serde(default)]
    pub euclid_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(buf: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in 32 bits")))?;
    buf.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy, euclid_dim: Option<usize>) -> Self {
        Checkpoint {
            config: CheckpointConfig { policy: policy.config.clone(), euclid_dim },
            tensors: policy.named_tensors(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_string(&self.config)?;
        put_u32(&mut buf, json.len())?;
        buf.extend_from_slice(json.as_bytes());
        put_u32(&mut buf, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut buf, name.len())?;
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut buf, d)?;
            }
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let config: CheckpointConfig =
            serde_json::from_str(&r.string()?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = n.and_then(|n| n.checked_mul(8)).ok_or_else(|| Error::Format("tensor too large".into()))?;
            let data = r.take(bytes)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn into_model(self) -> Result<Model> {
        let policy = Policy::from_tensors(&self.config.policy, self.tensors)?;
        Ok(match self.config.euclid_dim {
            None => Model::Poses(policy),
            Some(dim) => Model::Points(EuclidPolicy::from_policy(policy, dim)?),
        })
    }
}

/// What a checkpoint holds.
#[derive(Clone, Debug)]
pub enum Model {
    Poses(Policy),
    Points(EuclidPolicy),
}

impl Model {
    pub fn policy(&self) -> &Policy {
        match self {
            Model::Poses(p) => p,
            Model::Points(e) => &e.policy,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            Model::Poses(p) => Checkpoint::from_policy(p, None),
            Model::Points(e) => Checkpoint::from_policy(&e.policy, Some(e.dim)),
        }
    }
}

// ---- run configuration --------------------------------------------------------

fn default_schedule() -> ScheduleKind {
    ScheduleKind::Linear
}

/// Configuration document read by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    /// Task that produced the training data, kept for the record and usable by `gen-data`.
    #[serde(default)]
    pub task: Option<TaskSpec>,
    /// Schedule and step counts evaluated on the training data after training.
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub steps: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { train: TrainConfig::default(), task: None, schedule: default_schedule(), steps: Vec::new() }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(t) = &self.task {
            t.validate()?;
        }
        if self.steps.contains(&0) {
            return Err(Error::Config("steps must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }
}

// ---- errors and exit codes ----------------------------------------------------

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(error: Error) -> CliError {
    CliError { code: 2, error }
}

fn runtime(error: Error) -> CliError {
    CliError { code: 1, error }
}

// ---- flags --------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "actionflow", version, about = "SE(3) flow-matching policies at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train a policy and write a checkpoint plus loss.csv next to it.
    Train(TrainArgs),
    /// Generate action sequences (or points) from a checkpoint.
    Sample(SampleArgs),
    /// Compare generation on transformed scenes with transformed generation.
    CheckEquivariance(CheckEquivarianceArgs),
    /// Finite-difference gradient checks over every layer type and the full model.
    GradCheck(GradCheckArgs),
    /// Task metric and latency for a list of step counts.
    BenchSteps(BenchStepsArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Noise std on reach actions or two-moons points.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Actions per reach demonstration.
    #[arg(long)]
    pub n_actions: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; loss.csv is written in the same directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds initialization and training; overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scenes to act in (pose checkpoints).
    #[arg(long, conflicts_with = "scene")]
    pub data: Option<PathBuf>,
    /// One scene as an inline JSON line.
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value = "linear")]
    pub schedule: ScheduleKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples for point checkpoints.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
}

#[derive(Args, Debug, Clone)]
pub struct CheckEquivarianceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 100])]
    pub steps: Vec<usize>,
    #[arg(long, default_value = "linear")]
    pub schedule: ScheduleKind,
}

#[derive(Args, Debug, Clone)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct BenchStepsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scenes for pose checkpoints; unused for point checkpoints.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 5, 10, 20, 100])]
    pub steps: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "linear")]
    pub schedule: Vec<ScheduleKind>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of samples for point checkpoints.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Sample(a) => cmd_sample(&a, out),
        Command::CheckEquivariance(a) => cmd_check_equivariance(&a, out),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
        Command::BenchSteps(a) => cmd_bench_steps(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code
        }
    }
}

fn io(e: std::io::Error) -> CliError {
    runtime(e.into())
}

fn load_model(path: &Path) -> CliResult<Model> {
    Checkpoint::load(path).and_then(Checkpoint::into_model).map_err(runtime)
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).map_err(usage)
}

fn create(path: &Path) -> CliResult<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path).map(std::io::BufWriter::new).map_err(io)
}

// ---- commands -----------------------------------------------------------------

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> CliResult<i32> {
    let mut reach = ReachSpec::default();
    if let Some(n) = a.n_actions {
        reach.n_actions = n;
    }
    let spec = TaskSpec { kind: a.task, n_demos: a.n, seed: a.seed, noise: a.noise, reach };
    let data = generate(&spec).map_err(usage)?;
    save_dataset(&a.out, &data).map_err(runtime)?;
    writeln!(out, "wrote {} {} to {}", data.len(), if matches!(data, Dataset::Points(_)) { "points" } else { "scenes" }, a.out.display())
        .map_err(io)?;
    Ok(0)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<i32> {
    let mut run = RunConfig::load(&a.config).map_err(usage)?;
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    let data = load_data(&a.data)?;
    let csv_path = a.out.parent().unwrap_or(Path::new("")).join("loss.csv");
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    let mut log = |r: &crate::policy::LossRecord| {
        let _ = writeln!(csv, "{},{},{}", r.epoch, r.step, fmt_f64(r.loss));
    };
    let started = Instant::now();
    let init_seed = run.train.seed;
    let (model, result) = match &data {
        Dataset::Scenes(demos) => {
            let mut policy = Policy::new(&run.train.policy, init_seed).map_err(usage)?;
            let r = train(&mut policy, demos, &run.train, &mut log);
            (Model::Poses(policy), r)
        }
        Dataset::Points(points) => {
            let dim = points[0].len();
            let mut e = EuclidPolicy::new(&run.train.policy.ipa, dim, init_seed).map_err(usage)?;
            let r = e.train(points, &run.train, &mut log);
            (Model::Points(e), r)
        }
    };
    std::fs::write(&csv_path, &csv).map_err(io)?;
    let records = result.map_err(|e| match e {
        Error::Numerical(_) => runtime(e),
        Error::InvalidArgument(_) | Error::Config(_) | Error::Shape(_) => usage(e),
        other => runtime(other),
    })?;
    model.checkpoint().save(&a.out).map_err(runtime)?;
    let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    writeln!(
        out,
        "trained {} steps in {:.1}s, final loss {}; checkpoint {}, curve {}",
        records.len(),
        started.elapsed().as_secs_f64(),
        fmt_f64(last),
        a.out.display(),
        csv_path.display()
    )
    .map_err(io)?;
    for &k in &run.steps {
        let line = match (&model, &data) {
            (Model::Poses(p), Dataset::Scenes(demos)) => {
                let m = evaluate(p, demos, k, run.schedule, run.train.seed).map_err(runtime)?;
                format!("translation {} rotation_deg {}", fmt_f64(m.mean_translation), fmt_f64(m.mean_rotation_deg))
            }
            (Model::Points(e), _) => {
                let frac = point_metric(e, k, run.schedule, 1000, run.train.seed).map_err(runtime)?;
                format!("within_3sigma {}", fmt_f64(frac))
            }
            _ => unreachable!("model kind follows the data kind"),
        };
        writeln!(out, "train-set K={k} {}: {line}", run.schedule).map_err(io)?;
    }
    Ok(0)
}

/// Fraction of `n` samples within three standard deviations of an eight-gaussians mode.
pub fn point_metric(model: &EuclidPolicy, steps: usize, kind: ScheduleKind, n: usize, seed: u64) -> Result<f64> {
    let samples = model.sample(n, &make_schedule(steps, kind)?, &mut stream(seed))?;
    let pts: Vec<[f64; 2]> = samples.iter().map(|s| [s[0], s.get(1).copied().unwrap_or(0.0)]).collect();
    Ok(mode_coverage(&pts, &eight_gaussian_modes(), 3.0 * EIGHT_GAUSSIANS_STD)?.fraction)
}

fn parse_scene(line: &str) -> Result<Demonstration> {
    match crate::tasks::read_dataset(line.as_bytes())? {
        Dataset::Scenes(mut s) if s.len() == 1 => Ok(s.remove(0)),
        _ => Err(Error::Format("--scene must hold exactly one scene".into())),
    }
}

pub fn cmd_sample(a: &SampleArgs, out: &mut dyn Write) -> CliResult<i32> {
    let model = load_model(&a.ckpt)?;
    let schedule = make_schedule(a.steps, a.schedule).map_err(usage)?;
    match model {
        Model::Points(e) => {
            let start = Instant::now();
            let pts = e.sample(a.n, &schedule, &mut stream(a.seed)).map_err(runtime)?;
            let secs = start.elapsed().as_secs_f64();
            let mut w = create(&a.out)?;
            write_points(&mut w, &pts).map_err(runtime)?;
            w.flush().map_err(io)?;
            writeln!(out, "sampled {} points with K={} {}; latency {} s per point", pts.len(), a.steps, a.schedule, fmt_f64(secs / a.n.max(1) as f64))
                .map_err(io)?;
        }
        Model::Poses(policy) => {
            let scenes = match (&a.data, &a.scene) {
                (Some(p), None) => match load_data(p)? {
                    Dataset::Scenes(s) => s,
                    Dataset::Points(_) => return Err(usage(Error::Config("pose checkpoints need scene data".into()))),
                },
                (None, Some(line)) => vec![parse_scene(line).map_err(usage)?],
                _ => return Err(usage(Error::Config("pass exactly one of --data or --scene".into()))),
            };
            let mut generated = Vec::with_capacity(scenes.len());
            let mut total = 0.0;
            for (i, scene) in scenes.iter().enumerate() {
                let mut scene = scene.clone();
                if scene.actions.is_empty() {
                    scene.actions = vec![Pose::identity(); policy.config.n_actions];
                }
                let init = evaluation_initial_poses(&policy, &scene, a.seed, i).map_err(runtime)?;
                let start = Instant::now();
                let acts = generate_batch(&policy, &[&scene.observation], &[init], &schedule, StepRule::BodyFrame)
                    .map_err(runtime)?;
                total += start.elapsed().as_secs_f64();
                generated.push(Demonstration { observation: scene.observation, actions: acts.into_iter().next().unwrap() });
            }
            let mut w = create(&a.out)?;
            write_scenes(&mut w, &generated).map_err(runtime)?;
            w.flush().map_err(io)?;
            writeln!(
                out,
                "sampled {} sequences with K={} {}; mean latency {} s per sequence",
                generated.len(),
                a.steps,
                a.schedule,
                fmt_f64(total / generated.len().max(1) as f64)
            )
            .map_err(io)?;
        }
    }
    Ok(0)
}

/// A scene for `policy` with random observation poses and features.
pub fn random_scene(policy: &Policy, rng: &mut crate::lie::RandomStream) -> TokenSet {
    let n_obs = (policy.config.anchor_index + 1).max(2);
    let dim = policy.config.obs_feature_dim;
    let tokens = (0..n_obs)
        .map(|_| {
            let pose = random_transform(rng, 1.0);
            let feat = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            Token::observation(pose, feat)
        })
        .collect();
    TokenSet::new(tokens)
}

pub fn cmd_check_equivariance(a: &CheckEquivarianceArgs, out: &mut dyn Write) -> CliResult<i32> {
    if a.trials == 0 {
        return Err(usage(Error::Config("--trials must be positive".into())));
    }
    if !(a.tol > 0.0) || a.steps.is_empty() {
        return Err(usage(Error::Config("--tol must be positive and --steps non-empty".into())));
    }
    let model = load_model(&a.ckpt)?;
    let policy = model.policy();
    let mut rng = stream(a.seed);
    let cases: Vec<(TokenSet, Pose)> =
        (0..a.trials).map(|_| (random_scene(policy, &mut rng), random_transform(&mut rng, 5.0))).collect();
    let mut worst = 0.0f64;
    for &k in &a.steps {
        let schedule = make_schedule(k, a.schedule).map_err(usage)?;
        let r = check_equivariance_many(policy, &cases, policy.config.n_actions, a.seed, &schedule, StepRule::BodyFrame)
            .map_err(runtime)?;
        writeln!(
            out,
            "K={k} {}: max translation deviation {}, max rotation deviation {} rad",
            a.schedule,
            fmt_f64(r.max_translation),
            fmt_f64(r.max_rotation)
        )
        .map_err(io)?;
        worst = worst.max(r.max());
    }
    let pass = worst < a.tol;
    writeln!(out, "{} (max deviation {} vs tol {})", if pass { "PASS" } else { "FAIL" }, fmt_f64(worst), fmt_f64(a.tol))
        .map_err(io)?;
    Ok(if pass { 0 } else { 1 })
}

fn squared_tanh_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let y = tape.tanh(y)?;
    let y = tape.square(y)?;
    tape.sum(y)
}

fn random_tensor(rng: &mut crate::lie::RandomStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("non-empty shape")
}

/// Perturbs every parameter so zero-initialized tensors (biases, heads) are probed away from zero.
fn jitter(store: &mut ParamStore, rng: &mut crate::lie::RandomStream) {
    for x in store.tensors_mut().flatten() {
        *x += rng.random_range(-0.3..0.3);
    }
}

fn check_with_input<F>(store: &ParamStore, x: &Tensor, opts: &GradCheckOptions, body: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &crate::net::Bound, Var) -> Result<Var>,
{
    let mut all = store.tensors().to_vec();
    all.push(x.clone());
    grad_check(
        |tape, vars| {
            let bound = store.bind_from(&vars[..vars.len() - 1])?;
            let y = body(tape, &bound, vars[vars.len() - 1])?;
            squared_tanh_sum(tape, y)
        },
        &all,
        opts,
    )
}

/// Gradient checks over every layer type and a small assembled model.
pub fn grad_check_suite(opts: &GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = stream(opts.seed);
    let mut reports = Vec::new();
    let ipa = IpaConfig { width: 8, n_head: 2, c: 4, n_query_points: 2, n_point_values: 2, n_ipa_layers: 1, ffn_hidden: 12 };

    let mut store = ParamStore::new();
    let lin = LinearLayer::new(&mut store, "linear", 6, 5, &mut rng);
    jitter(&mut store, &mut rng);
    let x = random_tensor(&mut rng, &[2, 3, 6]);
    reports.push(("linear".into(), check_with_input(&store, &x, opts, |t, p, x| lin.forward(t, p, x))?));

    let mut store = ParamStore::new();
    let ln = LayerNormParams::new(&mut store, "layernorm", 6);
    jitter(&mut store, &mut rng);
    let x = random_tensor(&mut rng, &[2, 3, 6]);
    reports.push(("layernorm".into(), check_with_input(&store, &x, opts, |t, p, x| ln.forward(t, p, x))?));

    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attention", 8, 2, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = random_tensor(&mut rng, &[2, 3, 8]);
    reports.push(("attention".into(), check_with_input(&store, &x, opts, |t, p, x| mha.forward(t, p, x))?));

    let mut store = ParamStore::new();
    let enc = EncoderBlock::new(&mut store, "encoder", 8, 2, 12, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = random_tensor(&mut rng, &[2, 3, 8]);
    reports.push(("encoder".into(), check_with_input(&store, &x, opts, |t, p, x| enc.forward(t, p, x))?));

    let mut store = ParamStore::new();
    let emb = TimeEmbedding::new(&mut store, "time", 8, 6, &mut rng)?;
    jitter(&mut store, &mut rng);
    let ts = [0.1, 0.55, 0.9];
    let r = grad_check(
        |tape, vars| {
            let bound = store.bind_from(vars)?;
            let y = emb.forward(tape, &bound, &ts)?;
            squared_tanh_sum(tape, y)
        },
        store.tensors(),
        opts,
    )?;
    reports.push(("time_embedding".into(), r));

    let mut store = ParamStore::new();
    let layer = IpaLayer::new(&mut store, "ipa", &ipa, &mut rng)?;
    jitter(&mut store, &mut rng);
    let poses: Vec<Pose> = (0..4).map(|_| random_transform(&mut rng, 1.0)).collect();
    let x = random_tensor(&mut rng, &[1, 4, ipa.width]);
    let r = check_with_input(&store, &x, opts, |t, p, x| {
        let frames = Frames::new(t, &[poses.clone()])?;
        layer.forward(t, p, x, &frames)
    })?;
    reports.push(("ipa_layer".into(), r));

    let cfg = ModelConfig { ipa, obs_feature_dim: 2, n_actions: 2 };
    let mut store = ParamStore::new();
    let model = InvariantTransformer::new(&mut store, &cfg, &mut rng)?;
    jitter(&mut store, &mut rng);
    let sets: Vec<TokenSet> = (0..2)
        .map(|_| {
            let mut tokens: Vec<Token> = (0..2)
                .map(|_| {
                    let f = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    Token::observation(random_transform(&mut rng, 1.0), f)
                })
                .collect();
            tokens.extend((0..2).map(|_| Token::action(random_transform(&mut rng, 1.0))));
            TokenSet::new(tokens)
        })
        .collect();
    let r = grad_check(
        |tape, vars| {
            let bound = store.bind_from(vars)?;
            let y = model.forward(tape, &bound, &sets, &[0.2, 0.7])?;
            squared_tanh_sum(tape, y)
        },
        store.tensors(),
        opts,
    )?;
    reports.push(("model".into(), r));
    Ok(reports)
}

pub fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> CliResult<i32> {
    if !(a.tol > 0.0) {
        return Err(usage(Error::Config("--tol must be positive".into())));
    }
    let opts = GradCheckOptions { tol: a.tol, seed: a.seed, ..GradCheckOptions::default() };
    let reports = grad_check_suite(&opts).map_err(runtime)?;
    let mut all = true;
    let mut probes = 0;
    for (name, r) in &reports {
        let pass = r.max_rel_error < a.tol;
        all &= pass;
        probes += r.probes;
        writeln!(out, "{name:16} probes {:6}  max rel error {}  {}", r.probes, fmt_f64(r.max_rel_error), if pass { "ok" } else { "FAIL" })
            .map_err(io)?;
    }
    writeln!(out, "{} ({probes} probes)", if all { "PASS" } else { "FAIL" }).map_err(io)?;
    Ok(if all { 0 } else { 1 })
}

/// One row of the step benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub steps: usize,
    pub schedule: ScheduleKind,
    /// Mean translation error for pose models, fraction within 3σ of a mode for point models.
    pub metric: f64,
    /// Mean wall-clock seconds per generated sequence.
    pub latency: f64,
}

pub fn bench_steps(model: &Model, data: Option<&[Demonstration]>, steps: &[usize], kinds: &[ScheduleKind], seed: u64, n: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        for &k in steps {
            let start = Instant::now();
            let (metric, count) = match model {
                Model::Points(e) => (point_metric(e, k, kind, n, seed)?, n),
                Model::Poses(p) => {
                    let demos = data.ok_or_else(|| Error::Config("pose checkpoints need --data".into()))?;
                    let init = demos
                        .iter()
                        .enumerate()
                        .map(|(i, d)| evaluation_initial_poses(p, d, seed, i))
                        .collect::<Result<Vec<_>>>()?;
                    let (m, _) = evaluate_with_initial(p, demos, &init, &make_schedule(k, kind)?)?;
                    (m.mean_translation, demos.len())
                }
            };
            let latency = start.elapsed().as_secs_f64() / count.max(1) as f64;
            rows.push(BenchRow { steps: k, schedule: kind, metric, latency });
        }
    }
    Ok(rows)
}

pub fn cmd_bench_steps(a: &BenchStepsArgs, out: &mut dyn Write) -> CliResult<i32> {
    if a.steps.is_empty() || a.steps.contains(&0) || a.schedule.is_empty() {
        return Err(usage(Error::Config("--steps must list positive counts and --schedule at least one kind".into())));
    }
    let model = load_model(&a.ckpt)?;
    let data = match (&model, &a.data) {
        (Model::Poses(_), Some(p)) => match load_data(p)? {
            Dataset::Scenes(s) => Some(s),
            Dataset::Points(_) => return Err(usage(Error::Config("pose checkpoints need scene data".into()))),
        },
        (Model::Poses(_), None) => return Err(usage(Error::Config("pose checkpoints need --data".into()))),
        (Model::Points(_), _) => None,
    };
    let rows = bench_steps(&model, data.as_deref(), &a.steps, &a.schedule, a.seed, a.n).map_err(runtime)?;
    let mut csv = String::from(BENCH_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.steps, r.schedule, fmt_f64(r.metric), fmt_f64(r.latency));
    }
    std::fs::write(&a.out, &csv).map_err(io)?;
    out.write_all(csv.as_bytes()).map_err(io)?;
    Ok(0)
}

/// Entry point of the binary.
pub fn main() -> std::process::ExitCode {
    let code = run(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::ExitCode::from(code as u8)
}

