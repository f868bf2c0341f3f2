//! Command-line surface: data generation, training, sampling, task
//! solving, evaluation, and the scheduling ablation.
//!
//! Every run writes a `manifest.json` into its output directory capturing
//! the fully resolved configuration plus SHA-256 hashes of all file
//! inputs, so any result can be re-derived from the manifest alone.

use crate::composite::{
    build_mixture_schedule, make_item, mixed_train_step, CompositeError, CompositeNet, SourceKind,
    Variant, DEFAULT_SOURCE_WEIGHTS,
};
use crate::diffusion::{
    sample_ddim, sample_em, train, DiffusionError, NoiseNet, NoisePredictor, NormStats, NetArch,
    Schedule, TrainConfig,
};
use crate::evalmetrics::{
    apd_poses, d_nn_poses, fid, pose_to_joints, position_error, precision_recall, MetricError,
    MetricReport,
};
use crate::kinematics::{
    forward_kinematics, Camera, KinematicTree, PoseParams, ShapeParams,
};
use crate::numerics::{AdamState, NumericsError, Rng};
use crate::prior::{optimize, InverseProblem, PriorConfig, PriorError, SchedulePolicy};
use crate::synthdata::{generate_splits, sample_gt_sequence, Dataset, MixtureSpec, Split, SynthError};
use crate::tasks::{
    run_multi_hypothesis, CompletionProblem, Fit2dProblem, IkProblem, MaskSpec,
    MotionDenoiseProblem, Robustifier, TaskError, DEFAULT_GM_SIGMA,
};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "DPSRKIT_SEED";

/// Config errors exit 2, numeric failures exit 3.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::NonFiniteLoss { .. } | DiffusionError::NonFiniteState(_) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CompositeError> for CliError {
    fn from(e: CompositeError) -> Self {
        match e {
            CompositeError::NonFiniteLoss(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PriorError> for CliError {
    fn from(e: PriorError) -> Self {
        match e {
            PriorError::NonFiniteNet | PriorError::NonFiniteLoss { .. } => {
                CliError::Numeric(e.to_string())
            }
            PriorError::Diffusion(inner) => inner.into(),
            // task losses fail mid-run for numeric reasons (e.g. a point
            // behind the camera during fitting)
            PriorError::Task(inner) => CliError::Numeric(inner.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Numerics(_) | SynthError::ImprobableObservation => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Numerics(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// argument tree
// ---------------------------------------------------------------------------

#[derive(Parser, Debug, Serialize)]
#[command(
    name = "dpsrkit",
    version,
    about = "Diffusion pose prior toolkit",
    after_help = "Precedence: command-line flags override config defaults; \
                  --seed overrides the DPSRKIT_SEED environment variable."
)]
pub struct Cli {
    /// Worker threads for hypothesis parallelism (1 = reproducibility
    /// reference; results are deterministic at any value).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Seed; falls back to $DPSRKIT_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum PartArg {
    Whole,
    Body,
    Hand,
    Face,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Base,
    Fused,
    Mixed,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Fused => Variant::Fused,
            VariantArg::Mixed => Variant::Mixed,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerArg {
    Em,
    Ddim,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum HideArg {
    Body,
    LeftHand,
    RightHand,
    Face,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum AblateTask {
    Complete,
    Ik,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate train/val/test datasets from a mixture spec.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Mixture spec JSON; omitted = built-in default figure spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        n_train: usize,
        #[arg(long, default_value_t = 512)]
        n_val: usize,
        #[arg(long, default_value_t = 512)]
        n_test: usize,
    },
    /// Train a noise-prediction net on a dataset (whole or one part), or a
    /// composite prior when --variant is given.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which block of the pose vector to train on (ignored with
        /// --variant). The hand net trains on the left-hand block.
        #[arg(long, value_enum, default_value_t = PartArg::Whole)]
        part: PartArg,
        /// Composite mode: assemble part checkpoints and train the fused
        /// module (base = no fused training).
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, requires = "variant")]
        body: Option<PathBuf>,
        #[arg(long, requires = "variant")]
        hand: Option<PathBuf>,
        #[arg(long, requires = "variant")]
        face: Option<PathBuf>,
        #[arg(long, default_value_t = 20_000)]
        iters: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 64)]
        time_embed: usize,
    },
    /// Draw unconditional samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, value_enum, default_value_t = SamplerArg::Em)]
        sampler: SamplerArg,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        start_t: f64,
    },
    /// Pose completion: hide one part of a test pose and recover it.
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = HideArg::LeftHand)]
        hide: HideArg,
        #[arg(long, default_value_t = 10)]
        hypotheses: usize,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0.15)]
        t_max: f64,
        #[arg(long, default_value_t = 0.05)]
        t_min: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Inverse kinematics from a subset of observed 3D joints.
    Ik {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated observed joint indices.
        #[arg(long, default_value = "4,9,10,14,18,19", value_delimiter = ',')]
        joints: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        hypotheses: usize,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0.15)]
        t_max: f64,
        #[arg(long, default_value_t = 0.05)]
        t_min: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Fit pose, global transform, and shape to 2D keypoints.
    Fit2d {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 1000.0)]
        focal: f64,
        #[arg(long, default_value_t = 4.0)]
        distance: f64,
        /// Keypoint noise std in pixels.
        #[arg(long, default_value_t = 0.0)]
        noise_px: f64,
        /// Use the plain squared penalty instead of Geman-McClure.
        #[arg(long, default_value_t = false)]
        squared: bool,
        #[arg(long, default_value_t = 10)]
        hypotheses: usize,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0.12)]
        t_max: f64,
        #[arg(long, default_value_t = 0.08)]
        t_min: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Denoise a synthetic motion sequence observed as noisy 3D joints.
    DenoiseMotion {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mixture spec JSON for sequence generation; omitted = default.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
        #[arg(long, default_value_t = 0.04)]
        noise_std: f64,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0.2)]
        t_max: f64,
        #[arg(long, default_value_t = 0.05)]
        t_min: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Sample from a checkpoint and score against a held-out dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train dataset for the nearest-neighbor distance (optional).
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, value_enum, default_value_t = SamplerArg::Em)]
        sampler: SamplerArg,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        start_t: f64,
    },
    /// Compare the four timestep policies on one task.
    AblateSchedule {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = AblateTask::Complete)]
        task: AblateTask,
        /// Number of independent problem instances (test rows 0..seeds).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 10)]
        hypotheses: usize,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = 0.15)]
        t_max: f64,
        #[arg(long, default_value_t = 0.05)]
        t_min: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Manifest {
    command: serde_json::Value,
    seed: u64,
    jobs: usize,
    /// SHA-256 of every file input.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_manifest(
    out_dir: &Path,
    command: &Command,
    seed: u64,
    jobs: usize,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<(), CliError> {
    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = Manifest {
        command: serde_json::to_value(command).expect("command serializes"),
        seed,
        jobs,
        inputs: hashes,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoint polymorphism
// ---------------------------------------------------------------------------

enum AnyNet {
    Single(NoiseNet),
    Composite(CompositeNet),
}

impl AnyNet {
    fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)?;
        match bytes.get(..4) {
            Some(b"DPSR") => Ok(AnyNet::Single(NoiseNet::from_bytes(&bytes)?)),
            Some(b"DPSC") => Ok(AnyNet::Composite(CompositeNet::from_bytes(&bytes)?)),
            _ => Err(CliError::Config(format!(
                "{}: not a recognized checkpoint",
                path.display()
            ))),
        }
    }

    fn predictor(&self) -> &(dyn NoisePredictor + Sync) {
        match self {
            AnyNet::Single(n) => n,
            AnyNet::Composite(c) => c,
        }
    }

    fn schedule(&self) -> Schedule {
        match self {
            AnyNet::Single(n) => n.schedule,
            AnyNet::Composite(c) => c.schedule,
        }
    }

    fn stats(&self) -> &NormStats {
        self.predictor().stats()
    }
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

/// Process entry point: parse `std::env::args()` and run.
pub fn run_cli() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    dispatch(&args)
}

/// Testable entry point; returns the process exit code.
pub fn dispatch(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let seed = resolve_seed(cli.seed);
    let jobs = cli.jobs.max(1);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return 2;
        }
    };
    match pool.install(|| run_command(&cli.command, seed, jobs)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Flag wins over the environment; the environment wins over the default.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var(SEED_ENV)
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
    })
    .unwrap_or(0)
}

fn load_spec(path: &Option<PathBuf>) -> Result<MixtureSpec, CliError> {
    let spec = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<MixtureSpec>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => crate::synthdata::default_spec(),
    };
    spec.validate()?;
    Ok(spec)
}

fn figure_split_for(dim: usize) -> Result<(KinematicTree, crate::kinematics::PartSplit), CliError> {
    let tree = KinematicTree::default_figure();
    let split = tree.part_split();
    if split.total() != dim {
        return Err(CliError::Config(format!(
            "pose dim {dim} does not match the default figure ({})",
            split.total()
        )));
    }
    Ok((tree, split))
}

fn stats_restricted(stats: &NormStats, range: &Range<usize>) -> NormStats {
    NormStats {
        mean: stats.mean[range.clone()].to_vec(),
        std: stats.std[range.clone()].to_vec(),
    }
}

fn run_command(cmd: &Command, seed: u64, jobs: usize) -> Result<(), CliError> {
    match cmd {
        Command::GenData {
            out,
            spec,
            n_train,
            n_val,
            n_test,
        } => {
            std::fs::create_dir_all(out)?;
            let spec_value = load_spec(spec)?;
            let (train_ds, val_ds, test_ds) =
                generate_splits(&spec_value, *n_train, *n_val, *n_test, seed)?;
            std::fs::write(
                out.join("spec.json"),
                serde_json::to_string_pretty(&spec_value).expect("spec serializes"),
            )?;
            train_ds.save(&out.join("train.dpsd"))?;
            val_ds.save(&out.join("val.dpsd"))?;
            test_ds.save(&out.join("test.dpsd"))?;
            let inputs: Vec<&Path> = spec.iter().map(|p| p.as_path()).collect();
            write_manifest(
                out,
                cmd,
                seed,
                jobs,
                &inputs,
                &["spec.json", "train.dpsd", "val.dpsd", "test.dpsd"],
            )
        }
        Command::Train {
            data,
            out,
            part,
            variant,
            body,
            hand,
            face,
            iters,
            batch,
            lr,
            hidden,
            blocks,
            time_embed,
        } => {
            std::fs::create_dir_all(out)?;
            let ds = Dataset::load(data)?;
            if ds.is_empty() {
                return Err(CliError::Config("training dataset is empty".into()));
            }
            let cols = ds.columns_normalized();
            let dim = cols.nrows();
            let cfg = TrainConfig {
                batch_size: *batch,
                iters: *iters,
                lr: *lr,
                seed,
                ..TrainConfig::default()
            };
            let mut inputs: Vec<&Path> = vec![data.as_path()];
            let ckpt_name;
            match variant {
                None => {
                    let range = match part {
                        PartArg::Whole => 0..dim,
                        _ => {
                            let (_, split) = figure_split_for(dim)?;
                            match part {
                                PartArg::Body => split.body,
                                PartArg::Hand => split.left_hand,
                                PartArg::Face => split.face,
                                PartArg::Whole => unreachable!(),
                            }
                        }
                    };
                    let block = cols.slice(ndarray::s![range.clone(), ..]).to_owned();
                    let arch = NetArch::square(range.len(), *hidden, *blocks, *time_embed);
                    let mut net = NoiseNet::new(
                        arch,
                        Schedule::default(),
                        stats_restricted(&ds.stats, &range),
                        seed,
                    );
                    if *iters > 0 {
                        train(&mut net, &block, &cfg)?;
                    }
                    ckpt_name = "model.dpsr";
                    net.save(&out.join(ckpt_name))?;
                }
                Some(v) => {
                    let (body, hand, face) = match (body, hand, face) {
                        (Some(b), Some(h), Some(f)) => (b, h, f),
                        _ => {
                            return Err(CliError::Config(
                                "--variant needs --body, --hand, and --face checkpoints".into(),
                            ))
                        }
                    };
                    inputs.extend([body.as_path(), hand.as_path(), face.as_path()]);
                    let (_, split) = figure_split_for(dim)?;
                    let body_net = NoiseNet::load(body)?;
                    let hand_net = NoiseNet::load(hand)?;
                    let face_net = NoiseNet::load(face)?;
                    let mut cnet = CompositeNet::new(
                        split,
                        body_net,
                        hand_net,
                        face_net,
                        (*v).into(),
                        ds.stats.clone(),
                        seed,
                    )?;
                    if cnet.variant != Variant::Base && *iters > 0 {
                        train_composite(&mut cnet, &cols, &cfg)?;
                    }
                    ckpt_name = "model.dpsc";
                    cnet.save(&out.join(ckpt_name))?;
                }
            }
            write_manifest(out, cmd, seed, jobs, &inputs, &[ckpt_name])
        }
        Command::Sample {
            ckpt,
            out,
            n,
            sampler,
            steps,
            start_t,
        } => {
            std::fs::create_dir_all(out)?;
            if *n == 0 || *steps == 0 {
                return Err(CliError::Config("--n and --steps must be positive".into()));
            }
            let net = AnyNet::load(ckpt)?;
            let schedule = net.schedule();
            let mut rng = Rng::new(seed);
            let samples = match sampler {
                SamplerArg::Em => sample_em(net.predictor(), &schedule, *steps, *n, &mut rng)?,
                SamplerArg::Ddim => {
                    sample_ddim(net.predictor(), &schedule, *steps, *start_t, *n, &mut rng)?
                }
            };
            let ds = Dataset {
                data: samples.t().to_owned(),
                split: Split::Test,
                spec_hash: sha256_file(ckpt)?,
                stats: net.stats().clone(),
            };
            ds.save(&out.join("samples.dpsd"))?;
            write_manifest(out, cmd, seed, jobs, &[ckpt.as_path()], &["samples.dpsd"])
        }
        Command::Complete {
            ckpt,
            data,
            out,
            index,
            hide,
            hypotheses,
            iters,
            t_max,
            t_min,
            lambda,
            lr,
        } => {
            std::fs::create_dir_all(out)?;
            let net = AnyNet::load(ckpt)?;
            let ds = Dataset::load(data)?;
            let gt = dataset_row(&ds, *index)?;
            let dim = gt.len();
            check_net_dim(&net, dim)?;
            let (tree, split) = figure_split_for(dim)?;
            let hidden = match hide {
                HideArg::Body => split.body.clone(),
                HideArg::LeftHand => split.left_hand.clone(),
                HideArg::RightHand => split.right_hand.clone(),
                HideArg::Face => split.face.clone(),
            };
            let stats = net.stats().clone();
            let y = stats.normalize_vec(&gt);
            let mask = MaskSpec::from_range_hidden(dim, hidden);
            let problem = CompletionProblem::new(mask, y)?;
            let policy = SchedulePolicy::truncated(*t_max, *t_min, *iters);
            let cfg = PriorConfig {
                lambda_reg: *lambda,
                lr: *lr,
                iters: *iters,
                seed,
                ..PriorConfig::default()
            };
            let gt_joints = pose_to_joints(&tree, &gt)?;
            let set = run_multi_hypothesis(
                &problem,
                net.predictor(),
                &net.schedule(),
                &policy,
                &cfg,
                *hypotheses,
                &Rng::new(seed),
                |r| problem.init(r),
                Some(|vars: &[f64]| {
                    joint_error(&tree, &stats.denormalize_vec(vars), &gt_joints)
                }),
                Some(|vars: &[f64]| {
                    pose_to_joints(&tree, &stats.denormalize_vec(vars))
                        .expect("solution pose has valid joints")
                }),
            )?;
            write_hypothesis_outputs(out, &set)?;
            write_manifest(
                out,
                cmd,
                seed,
                jobs,
                &[ckpt.as_path(), data.as_path()],
                &["hypotheses.csv", "result.json"],
            )
        }
        Command::Ik {
            ckpt,
            data,
            out,
            index,
            joints,
            hypotheses,
            iters,
            t_max,
            t_min,
            lambda,
            lr,
        } => {
            std::fs::create_dir_all(out)?;
            let net = AnyNet::load(ckpt)?;
            let ds = Dataset::load(data)?;
            let gt = dataset_row(&ds, *index)?;
            check_net_dim(&net, gt.len())?;
            let (tree, _) = figure_split_for(gt.len())?;
            let nj = tree.num_joints();
            let mut mask = vec![false; nj];
            for &j in joints {
                if j >= nj {
                    return Err(TaskError::UnknownJoint(j).into());
                }
                mask[j] = true;
            }
            let stats = net.stats().clone();
            let gt_joints = pose_to_joints(&tree, &gt)?;
            // solve in normalized space against raw-space joint targets
            let problem = IkProblem::new(tree.clone(), stats.clone(), gt_joints.clone(), mask)?;
            let policy = SchedulePolicy::truncated(*t_max, *t_min, *iters);
            let cfg = PriorConfig {
                lambda_reg: *lambda,
                lr: *lr,
                iters: *iters,
                seed,
                ..PriorConfig::default()
            };
            let set = run_multi_hypothesis(
                &problem,
                net.predictor(),
                &net.schedule(),
                &policy,
                &cfg,
                *hypotheses,
                &Rng::new(seed),
                |r| problem.init(r),
                Some(|vars: &[f64]| {
                    joint_error(&tree, &stats.denormalize_vec(vars), &gt_joints)
                }),
                Some(|vars: &[f64]| {
                    pose_to_joints(&tree, &stats.denormalize_vec(vars))
                        .expect("solution pose has valid joints")
                }),
            )?;
            write_hypothesis_outputs(out, &set)?;
            write_manifest(
                out,
                cmd,
                seed,
                jobs,
                &[ckpt.as_path(), data.as_path()],
                &["hypotheses.csv", "result.json"],
            )
        }
        Command::Fit2d {
            ckpt,
            data,
            out,
            index,
            focal,
            distance,
            noise_px,
            squared,
            hypotheses,
            iters,
            t_max,
            t_min,
            lambda,
            lr,
        } => {
            std::fs::create_dir_all(out)?;
            let net = AnyNet::load(ckpt)?;
            let ds = Dataset::load(data)?;
            let gt = dataset_row(&ds, *index)?;
            check_net_dim(&net, gt.len())?;
            let (tree, _) = figure_split_for(gt.len())?;
            let camera = Camera::looking_at_origin(*focal, *focal / 2.0, *focal / 2.0, *distance);
            let gt_joints = pose_to_joints(&tree, &gt)?;
            let mut keypoints =
                crate::kinematics::project_perspective(&camera, &gt_joints)
                    .map_err(|e| CliError::Numeric(e.to_string()))?;
            let mut rng = Rng::new(seed ^ 0x2D0B5);
            if *noise_px > 0.0 {
                keypoints.mapv_inplace(|v| v + noise_px * rng.normal());
            }
            let robust = if *squared {
                Robustifier::Squared
            } else {
                Robustifier::GemanMcclure {
                    sigma: DEFAULT_GM_SIGMA,
                }
            };
            let stats = net.stats().clone();
            let problem = Fit2dProblem::new(
                tree.clone(),
                stats.clone(),
                camera,
                keypoints,
                vec![1.0; tree.num_joints()],
                robust,
            )?;
            let policy = SchedulePolicy::truncated(*t_max, *t_min, *iters);
            let cfg = PriorConfig {
                lambda_reg: *lambda,
                lr: *lr,
                iters: *iters,
                seed,
                ..PriorConfig::default()
            };
            let pose_dim = tree.pose_dim();
            let set = run_multi_hypothesis(
                &problem,
                net.predictor(),
                &net.schedule(),
                &policy,
                &cfg,
                *hypotheses,
                &Rng::new(seed),
                |r| problem.init(r),
                Some(|vars: &[f64]| {
                    fit2d_joints(&tree, &stats, vars, pose_dim)
                        .map(|j| {
                            position_error(&j, &gt_joints, true).unwrap_or(f64::INFINITY)
                        })
                        .unwrap_or(f64::INFINITY)
                }),
                Some(|vars: &[f64]| {
                    fit2d_joints(&tree, &stats, vars, pose_dim)
                        .expect("solution pose has valid joints")
                }),
            )?;
            write_hypothesis_outputs(out, &set)?;
            write_manifest(
                out,
                cmd,
                seed,
                jobs,
                &[ckpt.as_path(), data.as_path()],
                &["hypotheses.csv", "result.json"],
            )
        }
        Command::DenoiseMotion {
            ckpt,
            out,
            spec,
            frames,
            rate,
            noise_std,
            iters,
            t_max,
            t_min,
            lambda,
            lr,
        } => {
            std::fs::create_dir_all(out)?;
            if *frames < 2 {
                return Err(CliError::Config("--frames must be at least 2".into()));
            }
            let net = AnyNet::load(ckpt)?;
            let spec_value = load_spec(spec)?;
            check_net_dim(&net, spec_value.dim)?;
            let (tree, _) = figure_split_for(spec_value.dim)?;
            let mut rng = Rng::new(seed);
            let gt_poses = sample_gt_sequence(&spec_value, *frames, *rate, &mut rng);
            let gt_joints: Vec<Array2<f64>> = gt_poses
                .iter()
                .map(|p| pose_to_joints(&tree, p))
                .collect::<Result<_, _>>()?;
            let observed: Vec<Array2<f64>> = gt_joints
                .iter()
                .map(|j| j.mapv(|v| v + noise_std * rng.normal()))
                .collect();
            let stats = net.stats().clone();
            let problem = MotionDenoiseProblem::new(
                tree.clone(),
                stats.clone(),
                observed.clone(),
                vec![true; tree.num_joints()],
            )?;
            let policy = SchedulePolicy::truncated(*t_max, *t_min, *iters);
            let cfg = PriorConfig {
                lambda_reg: *lambda,
                lr: *lr,
                iters: *iters,
                seed,
                ..PriorConfig::default()
            };
            // initialize poses from the noisy observations is impossible
            // (observations are joints); start from the prior mean with
            // zero globals
            let init = vec![0.0; problem.var_dim()];
            let result = optimize(
                &problem,
                net.predictor(),
                &net.schedule(),
                &policy,
                &cfg,
                &init,
                &mut rng.split(999),
            )?;
            let noisy_error = sequence_error(&observed, &gt_joints);
            let solved = motion_solution_joints(&tree, &stats, &problem, &result.vars)?;
            let denoised_error = sequence_error(&solved, &gt_joints);
            #[derive(Serialize)]
            struct MotionReport {
                frames: usize,
                noise_std: f64,
                noisy_error: f64,
                denoised_error: f64,
                final_loss: f64,
            }
            let report = MotionReport {
                frames: *frames,
                noise_std: *noise_std,
                noisy_error,
                denoised_error,
                final_loss: result.final_loss,
            };
            std::fs::write(
                out.join("result.json"),
                serde_json::to_string_pretty(&report).expect("report serializes"),
            )?;
            std::fs::write(
                out.join("trace.csv"),
                crate::prior::trace_to_csv(&result.trace),
            )?;
            let mut inputs: Vec<&Path> = vec![ckpt.as_path()];
            if let Some(p) = spec {
                inputs.push(p.as_path());
            }
            write_manifest(out, cmd, seed, jobs, &inputs, &["result.json", "trace.csv"])
        }
        Command::Eval {
            ckpt,
            data,
            out,
            train_data,
            n,
            sampler,
            steps,
            start_t,
        } => {
            std::fs::create_dir_all(out)?;
            let net = AnyNet::load(ckpt)?;
            let ds = Dataset::load(data)?;
            check_net_dim(&net, ds.data.ncols())?;
            let (tree, _) = figure_split_for(ds.data.ncols())?;
            let mut rng = Rng::new(seed);
            let schedule = net.schedule();
            let samples = match sampler {
                SamplerArg::Em => sample_em(net.predictor(), &schedule, *steps, *n, &mut rng)?,
                SamplerArg::Ddim => {
                    sample_ddim(net.predictor(), &schedule, *steps, *start_t, *n, &mut rng)?
                }
            };
            let sample_rows: Vec<Vec<f64>> =
                (0..*n).map(|j| samples.column(j).to_vec()).collect();
            let real_rows: Vec<Vec<f64>> = (0..ds.len())
                .map(|i| ds.data.row(i).to_vec())
                .collect();
            // distribution metrics on normalized pose vectors
            let stats = &ds.stats;
            let to_norm_matrix = |rows: &[Vec<f64>]| {
                Array2::from_shape_fn((rows.len(), stats.mean.len()), |(i, j)| {
                    (rows[i][j] - stats.mean[j]) / stats.std[j]
                })
            };
            let gen_m = to_norm_matrix(&sample_rows);
            let real_m = to_norm_matrix(&real_rows);
            let mut report = MetricReport {
                apd: Some(apd_poses(&sample_rows, &tree)?),
                fid: Some(fid(&gen_m, &real_m)?),
                sample_count: *n,
                ..MetricReport::default()
            };
            let (p, r) = precision_recall(&gen_m, &real_m, 3)?;
            report.precision = Some(p);
            report.recall = Some(r);
            let mut inputs: Vec<&Path> = vec![ckpt.as_path(), data.as_path()];
            if let Some(tp) = train_data {
                let train_ds = Dataset::load(tp)?;
                let train_rows: Vec<Vec<f64>> = (0..train_ds.len())
                    .map(|i| train_ds.data.row(i).to_vec())
                    .collect();
                report.d_nn = Some(d_nn_poses(&sample_rows, &train_rows, &tree)?);
                inputs.push(tp.as_path());
            }
            std::fs::write(out.join("report.json"), report.to_json())?;
            std::fs::write(
                out.join("report.csv"),
                format!("{}\n{}\n", MetricReport::csv_header(), report.to_csv_row()),
            )?;
            write_manifest(out, cmd, seed, jobs, &inputs, &["report.json", "report.csv"])
        }
        Command::AblateSchedule {
            ckpt,
            data,
            out,
            task,
            seeds,
            hypotheses,
            iters,
            t_max,
            t_min,
            lambda,
            lr,
        } => {
            std::fs::create_dir_all(out)?;
            if *seeds == 0 {
                return Err(CliError::Config("--seeds must be positive".into()));
            }
            let net = AnyNet::load(ckpt)?;
            let ds = Dataset::load(data)?;
            if ds.len() < *seeds {
                return Err(CliError::Config(format!(
                    "dataset has {} rows, need {}",
                    ds.len(),
                    seeds
                )));
            }
            let dim = ds.data.ncols();
            check_net_dim(&net, dim)?;
            let (tree, split) = figure_split_for(dim)?;
            let stats = net.stats().clone();
            let policies: [(&str, SchedulePolicy); 4] = [
                ("random", SchedulePolicy::random(*t_max, *t_min, *iters)),
                (
                    "fixed",
                    SchedulePolicy::fixed(0.5 * (*t_max + *t_min), *iters),
                ),
                ("uniform", SchedulePolicy::uniform(*iters)),
                ("truncated", SchedulePolicy::truncated(*t_max, *t_min, *iters)),
            ];
            let cfg = PriorConfig {
                lambda_reg: *lambda,
                lr: *lr,
                iters: *iters,
                seed,
                ..PriorConfig::default()
            };
            let mut csv = String::from("policy,min_error,mean_error,std_error,apd\n");
            for (name, policy) in &policies {
                let mut mins = Vec::new();
                let mut means = Vec::new();
                let mut stds = Vec::new();
                let mut apds = Vec::new();
                for problem_idx in 0..*seeds {
                    let gt = dataset_row(&ds, problem_idx)?;
                    let gt_joints = pose_to_joints(&tree, &gt)?;
                    let root = Rng::new(seed ^ (problem_idx as u64).wrapping_mul(0x9E3779B9));
                    let set = match task {
                        AblateTask::Complete => {
                            let y = stats.normalize_vec(&gt);
                            let mask =
                                MaskSpec::from_range_hidden(dim, split.left_hand.clone());
                            let problem = CompletionProblem::new(mask, y)?;
                            run_multi_hypothesis(
                                &problem,
                                net.predictor(),
                                &net.schedule(),
                                policy,
                                &cfg,
                                *hypotheses,
                                &root,
                                |r| problem.init(r),
                                Some(|vars: &[f64]| {
                                    joint_error(&tree, &stats.denormalize_vec(vars), &gt_joints)
                                }),
                                Some(|vars: &[f64]| {
                                    pose_to_joints(&tree, &stats.denormalize_vec(vars))
                                        .expect("solution pose has valid joints")
                                }),
                            )?
                        }
                        AblateTask::Ik => {
                            let mut mask = vec![false; tree.num_joints()];
                            for &j in &[4usize, 9, 10, 14, 18, 19] {
                                mask[j] = true;
                            }
                            let problem = IkProblem::new(
                                tree.clone(),
                                stats.clone(),
                                gt_joints.clone(),
                                mask,
                            )?;
                            run_multi_hypothesis(
                                &problem,
                                net.predictor(),
                                &net.schedule(),
                                policy,
                                &cfg,
                                *hypotheses,
                                &root,
                                |r| problem.init(r),
                                Some(|vars: &[f64]| {
                                    joint_error(&tree, &stats.denormalize_vec(vars), &gt_joints)
                                }),
                                Some(|vars: &[f64]| {
                                    pose_to_joints(&tree, &stats.denormalize_vec(vars))
                                        .expect("solution pose has valid joints")
                                }),
                            )?
                        }
                    };
                    mins.push(set.min_error.unwrap_or(f64::NAN));
                    means.push(set.mean_error.unwrap_or(f64::NAN));
                    stds.push(set.std_error.unwrap_or(f64::NAN));
                    apds.push(set.apd.unwrap_or(0.0));
                }
                let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    name,
                    avg(&mins),
                    avg(&means),
                    avg(&stds),
                    avg(&apds)
                ));
            }
            std::fs::write(out.join("ablation.csv"), &csv)?;
            write_manifest(
                out,
                cmd,
                seed,
                jobs,
                &[ckpt.as_path(), data.as_path()],
                &["ablation.csv"],
            )
        }
    }
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

fn dataset_row(ds: &Dataset, index: usize) -> Result<Vec<f64>, CliError> {
    if index >= ds.len() {
        return Err(CliError::Config(format!(
            "--index {index} out of range ({} rows)",
            ds.len()
        )));
    }
    Ok(ds.data.row(index).to_vec())
}

fn check_net_dim(net: &AnyNet, dim: usize) -> Result<(), CliError> {
    let nd = net.predictor().dim();
    if nd != dim {
        return Err(CliError::Config(format!(
            "checkpoint dim {nd} does not match data dim {dim}"
        )));
    }
    Ok(())
}

/// Mean joint distance of a raw-space pose against ground-truth joints.
fn joint_error(tree: &KinematicTree, pose_raw: &[f64], gt_joints: &Array2<f64>) -> f64 {
    pose_to_joints(tree, pose_raw)
        .map(|j| position_error(&j, gt_joints, false).unwrap_or(f64::INFINITY))
        .unwrap_or(f64::INFINITY)
}

/// FK joints of a fit2d solution including its solved global transform.
fn fit2d_joints(
    tree: &KinematicTree,
    stats: &NormStats,
    vars: &[f64],
    pose_dim: usize,
) -> Result<Array2<f64>, CliError> {
    let raw = stats.denormalize_vec(&vars[..pose_dim]);
    let mut params = PoseParams::from_pose_vector(tree, &raw)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    params.global_orient = [vars[pose_dim], vars[pose_dim + 1], vars[pose_dim + 2]];
    params.global_trans = [vars[pose_dim + 3], vars[pose_dim + 4], vars[pose_dim + 5]];
    let mut shape = ShapeParams::zero(tree);
    shape
        .beta
        .copy_from_slice(&vars[pose_dim + 6..pose_dim + 6 + tree.num_joints()]);
    forward_kinematics(tree, &params, &shape).map_err(|e| CliError::Numeric(e.to_string()))
}

/// Per-frame FK joints of a motion solution with its solved globals.
fn motion_solution_joints(
    tree: &KinematicTree,
    stats: &NormStats,
    problem: &MotionDenoiseProblem,
    vars: &[f64],
) -> Result<Vec<Array2<f64>>, CliError> {
    let d = tree.pose_dim();
    let frames = problem.frames();
    let goff = frames * d;
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let raw = stats.denormalize_vec(&vars[f * d..(f + 1) * d]);
        let mut params = PoseParams::from_pose_vector(tree, &raw)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let g = &vars[goff + f * 6..goff + (f + 1) * 6];
        params.global_orient = [g[0], g[1], g[2]];
        params.global_trans = [g[3], g[4], g[5]];
        out.push(
            forward_kinematics(tree, &params, &ShapeParams::zero(tree))
                .map_err(|e| CliError::Numeric(e.to_string()))?,
        );
    }
    Ok(out)
}

/// Mean over frames of the mean joint distance.
fn sequence_error(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| position_error(x, y, false).unwrap_or(f64::INFINITY))
        .sum();
    total / a.len() as f64
}

fn write_hypothesis_outputs(
    out: &Path,
    set: &crate::tasks::HypothesisSet,
) -> Result<(), CliError> {
    std::fs::write(out.join("hypotheses.csv"), set.to_csv())?;
    std::fs::write(
        out.join("result.json"),
        serde_json::to_string_pretty(set).expect("hypothesis set serializes"),
    )?;
    Ok(())
}

/// Fused-module training loop. The fused variant trains on whole vectors
/// only; the mixed variant draws from the five-source mixture with random
/// part masking (inside `mixed_train_step`).
pub fn train_composite(
    cnet: &mut CompositeNet,
    cols_normalized: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, CliError> {
    let n = cols_normalized.ncols();
    if n == 0 {
        return Err(CliError::Config("empty composite training set".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut adam = AdamState::new(cnet.fused.params.len(), cfg.lr);
    let schedule = build_mixture_schedule(&DEFAULT_SOURCE_WEIGHTS)?;
    let mixed = cnet.variant == Variant::Mixed;
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let items: Vec<_> = (0..cfg.batch_size)
            .map(|_| {
                let j = (rng.next_u64() % n as u64) as usize;
                let pose: Vec<f64> = cols_normalized.column(j).to_vec();
                let kind = if mixed {
                    schedule.draw(&mut rng)
                } else {
                    SourceKind::Whole
                };
                make_item(kind, &pose, &cnet.split, &mut rng)
            })
            .collect();
        losses.push(mixed_train_step(cnet, &items, cfg, &mut rng, &mut adam, iter)?);
    }
    Ok(losses)
}
