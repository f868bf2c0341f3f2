//! Concrete inverse problems — completion, inverse kinematics, 2D keypoint
//! fitting, motion denoising — plus the multi-hypothesis driver.

use crate::diffusion::{NoisePredictor, NormStats, Schedule};
use crate::kinematics::{fk_on_tape, Camera, FkInputs, KinematicTree};
use crate::numerics::{GradTape, NodeId, Rng};
use crate::prior::{optimize, InverseProblem, OptimResult, PriorConfig, SchedulePolicy};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("mask/measurement mismatch: {0}")]
    MaskMismatch(String),
    #[error("joint index {0} out of range")]
    UnknownJoint(usize),
    #[error("no observed joints")]
    EmptyObservation,
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("confidence weights must be nonnegative")]
    NegativeConfidence,
    #[error(transparent)]
    Kinematics(#[from] crate::kinematics::KinematicsError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

/// Per-pose-dimension observation mask. An all-false mask is legal and
/// turns completion into pure prior sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSpec {
    pub dims: Vec<bool>,
}

impl MaskSpec {
    pub fn all(dim: usize) -> Self {
        MaskSpec {
            dims: vec![true; dim],
        }
    }

    pub fn none(dim: usize) -> Self {
        MaskSpec {
            dims: vec![false; dim],
        }
    }

    pub fn from_range_hidden(dim: usize, hidden: Range<usize>) -> Self {
        MaskSpec {
            dims: (0..dim).map(|i| !hidden.contains(&i)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Robustifier {
    Squared,
    /// Bounded penalty sigma^2 r^2 / (sigma^2 + r^2); sigma in pixels.
    GemanMcclure { sigma: f64 },
}

pub const DEFAULT_GM_SIGMA: f64 = 100.0;
pub const DEFAULT_FOCAL: f64 = 1000.0;
pub const DEFAULT_W_BETA: f64 = 1e-3;
pub const DEFAULT_W_TEMP: f64 = 0.5;

/// Default optimization schedules per task.
pub fn default_policy_completion(n: usize) -> SchedulePolicy {
    SchedulePolicy::truncated(0.15, 0.05, n)
}

pub fn default_policy_ik(n: usize) -> SchedulePolicy {
    SchedulePolicy::truncated(0.15, 0.05, n)
}

pub fn default_policy_fit2d(n: usize) -> SchedulePolicy {
    SchedulePolicy::truncated(0.12, 0.08, n)
}

pub fn default_policy_motion(n: usize) -> SchedulePolicy {
    SchedulePolicy::truncated(0.2, 0.05, n)
}

// ---------------------------------------------------------------------------
// completion
// ---------------------------------------------------------------------------

/// Observe a subset of pose dimensions (normalized space) and recover the
/// rest. Variables: the whole normalized pose vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionProblem {
    pub mask: MaskSpec,
    /// Full-length vector; only entries with mask true are read.
    pub y: Vec<f64>,
}

impl CompletionProblem {
    pub fn new(mask: MaskSpec, y: Vec<f64>) -> Result<Self, TaskError> {
        if mask.dims.len() != y.len() {
            return Err(TaskError::MaskMismatch(format!(
                "mask {} vs y {}",
                mask.dims.len(),
                y.len()
            )));
        }
        Ok(CompletionProblem { mask, y })
    }

    /// Observed dims start at their measured values, the rest from N(0, I)
    /// in normalized space.
    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        self.y
            .iter()
            .zip(&self.mask.dims)
            .map(|(y, &m)| if m { *y } else { rng.normal() })
            .collect()
    }
}

pub fn completion_loss(x0: &[f64], mask: &MaskSpec, y: &[f64]) -> Result<f64, TaskError> {
    if mask.dims.len() != x0.len() || y.len() != x0.len() {
        return Err(TaskError::MaskMismatch(format!(
            "x0 {} mask {} y {}",
            x0.len(),
            mask.dims.len(),
            y.len()
        )));
    }
    Ok(x0
        .iter()
        .zip(y)
        .zip(&mask.dims)
        .map(|((x, y), &m)| if m { (x - y) * (x - y) } else { 0.0 })
        .sum())
}

impl InverseProblem for CompletionProblem {
    fn var_dim(&self) -> usize {
        self.y.len()
    }

    fn task_loss_grad(&self, vars: &[f64]) -> anyhow::Result<(f64, Vec<f64>)> {
        let loss = completion_loss(vars, &self.mask, &self.y)?;
        let grad = vars
            .iter()
            .zip(&self.y)
            .zip(&self.mask.dims)
            .map(|((x, y), &m)| if m { 2.0 * (x - y) } else { 0.0 })
            .collect();
        Ok((loss, grad))
    }

    fn prior_slices(&self) -> Vec<Range<usize>> {
        vec![0..self.y.len()]
    }
}

// ---------------------------------------------------------------------------
// shared tape plumbing for FK-based losses
// ---------------------------------------------------------------------------

/// Denormalize a (d, 1) tape node into raw pose space.
fn denorm_on_tape(tape: &mut GradTape, x: NodeId, stats: &NormStats) -> NodeId {
    let d = stats.mean.len();
    let std_c = tape.constant(Array2::from_shape_fn((d, 1), |(i, _)| stats.std[i]));
    let mean_c = tape.constant(Array2::from_shape_fn((d, 1), |(i, _)| stats.mean[i]));
    let scaled = tape.mul_elem(x, std_c);
    tape.add(scaled, mean_c)
}

/// FK joints of a normalized pose slice plus explicit global/beta nodes.
fn joints_from_pose_node(
    tape: &mut GradTape,
    tree: &KinematicTree,
    pose_norm: NodeId,
    stats: &NormStats,
    global_orient: NodeId,
    global_trans: NodeId,
    beta: NodeId,
) -> Result<NodeId, TaskError> {
    let raw = denorm_on_tape(tape, pose_norm, stats);
    let na = 3 * tree.num_joints();
    let joint_aa = tape.slice_rows(raw, 0, na);
    let expression = tape.slice_rows(raw, na, tree.n_expression);
    let inputs = FkInputs {
        joint_aa,
        beta,
        expression,
        global_orient,
        global_trans,
    };
    let (joints, _) = fk_on_tape(tape, tree, &inputs)?;
    Ok(joints)
}

fn joint_mask_matrix(mask: &[bool]) -> Array2<f64> {
    Array2::from_shape_fn((3, mask.len()), |(_, j)| if mask[j] { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// inverse kinematics
// ---------------------------------------------------------------------------

/// Fit a pose whose FK joints match observed 3D joint positions on the
/// known-joint set. Variables: the normalized pose vector; the global
/// transform is held at identity (observations live in the figure frame).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IkProblem {
    #[serde(skip, default = "KinematicTree::default_figure")]
    pub tree: KinematicTree,
    pub stats: NormStats,
    /// (3, J) observed joint positions.
    pub observed: Array2<f64>,
    pub joint_mask: Vec<bool>,
}

impl IkProblem {
    pub fn new(
        tree: KinematicTree,
        stats: NormStats,
        observed: Array2<f64>,
        joint_mask: Vec<bool>,
    ) -> Result<Self, TaskError> {
        let nj = tree.num_joints();
        if observed.dim() != (3, nj) || joint_mask.len() != nj {
            return Err(TaskError::MaskMismatch(format!(
                "observed {:?}, mask {}, joints {}",
                observed.shape(),
                joint_mask.len(),
                nj
            )));
        }
        if !joint_mask.iter().any(|m| *m) {
            return Err(TaskError::EmptyObservation);
        }
        Ok(IkProblem {
            tree,
            stats,
            observed,
            joint_mask,
        })
    }

    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        rng.gaussian_sample(self.tree.pose_dim())
    }
}

pub fn ik_loss(problem: &IkProblem, pose_norm: &[f64]) -> anyhow::Result<f64> {
    Ok(problem.task_loss_grad(pose_norm)?.0)
}

impl InverseProblem for IkProblem {
    fn var_dim(&self) -> usize {
        self.tree.pose_dim()
    }

    fn task_loss_grad(&self, vars: &[f64]) -> anyhow::Result<(f64, Vec<f64>)> {
        let mut tape = GradTape::new();
        let x = tape.vec_leaf(vars, true);
        let zero3 = tape.vec_leaf(&[0.0; 3], false);
        let beta = tape.vec_leaf(&vec![0.0; self.tree.num_joints()], false);
        let joints =
            joints_from_pose_node(&mut tape, &self.tree, x, &self.stats, zero3, zero3, beta)?;
        let obs = tape.constant(self.observed.clone());
        let diff = tape.sub(joints, obs);
        let mask = tape.constant(joint_mask_matrix(&self.joint_mask));
        let masked = tape.mul_elem(diff, mask);
        let loss = tape.sum_sq(masked);
        let val = tape.scalar(loss);
        let grads = tape.backward(loss);
        let g = grads
            .get(x)
            .map(|m| m.column(0).to_vec())
            .unwrap_or_else(|| vec![0.0; vars.len()]);
        Ok((val, g))
    }

    fn prior_slices(&self) -> Vec<Range<usize>> {
        vec![0..self.tree.pose_dim()]
    }
}

// ---------------------------------------------------------------------------
// 2D keypoint fitting
// ---------------------------------------------------------------------------

/// Fit pose, global transform, and bone shape to 2D keypoints through a
/// fixed camera. Variable layout: [pose_norm | global_orient | global_trans
/// | beta]; only the pose block is prior-regularized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fit2dProblem {
    #[serde(skip, default = "KinematicTree::default_figure")]
    pub tree: KinematicTree,
    pub stats: NormStats,
    pub camera: Camera,
    /// (2, J) detected keypoints.
    pub keypoints: Array2<f64>,
    pub confidence: Vec<f64>,
    pub robustifier: Robustifier,
    pub w_beta: f64,
}

impl Fit2dProblem {
    pub fn new(
        tree: KinematicTree,
        stats: NormStats,
        camera: Camera,
        keypoints: Array2<f64>,
        confidence: Vec<f64>,
        robustifier: Robustifier,
    ) -> Result<Self, TaskError> {
        let nj = tree.num_joints();
        if keypoints.dim() != (2, nj) || confidence.len() != nj {
            return Err(TaskError::MaskMismatch(format!(
                "keypoints {:?}, confidence {}, joints {}",
                keypoints.shape(),
                confidence.len(),
                nj
            )));
        }
        if confidence.iter().any(|c| *c < 0.0) {
            return Err(TaskError::NegativeConfidence);
        }
        if let Robustifier::GemanMcclure { sigma } = robustifier {
            assert!(sigma > 0.0, "GM scale must be positive");
        }
        Ok(Fit2dProblem {
            tree,
            stats,
            camera,
            keypoints,
            confidence,
            robustifier,
            w_beta: DEFAULT_W_BETA,
        })
    }

    pub fn pose_range(&self) -> Range<usize> {
        0..self.tree.pose_dim()
    }

    pub fn orient_range(&self) -> Range<usize> {
        let d = self.tree.pose_dim();
        d..d + 3
    }

    pub fn trans_range(&self) -> Range<usize> {
        let d = self.tree.pose_dim();
        d + 3..d + 6
    }

    pub fn beta_range(&self) -> Range<usize> {
        let d = self.tree.pose_dim();
        d + 6..d + 6 + self.tree.num_joints()
    }

    /// Pose from N(0,I) in normalized space, auxiliaries at zero.
    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut v = rng.gaussian_sample(self.tree.pose_dim());
        v.extend(std::iter::repeat(0.0).take(6 + self.tree.num_joints()));
        v
    }
}

pub fn fit2d_loss(problem: &Fit2dProblem, vars: &[f64]) -> anyhow::Result<f64> {
    Ok(problem.task_loss_grad(vars)?.0)
}

impl InverseProblem for Fit2dProblem {
    fn var_dim(&self) -> usize {
        self.tree.pose_dim() + 6 + self.tree.num_joints()
    }

    fn task_loss_grad(&self, vars: &[f64]) -> anyhow::Result<(f64, Vec<f64>)> {
        let d = self.tree.pose_dim();
        let mut tape = GradTape::new();
        let all = tape.vec_leaf(vars, true);
        let pose = tape.slice_rows(all, 0, d);
        let orient = tape.slice_rows(all, d, 3);
        let trans = tape.slice_rows(all, d + 3, 3);
        let beta = tape.slice_rows(all, d + 6, self.tree.num_joints());
        let joints =
            joints_from_pose_node(&mut tape, &self.tree, pose, &self.stats, orient, trans, beta)?;
        let projected = crate::kinematics::project_on_tape(&mut tape, &self.camera, joints)?;
        let kp = tape.constant(self.keypoints.clone());
        let diff = tape.sub(projected, kp);
        let r2 = tape.col_sum_sq(diff); // (1, J) squared pixel residuals
        let robust = match self.robustifier {
            Robustifier::Squared => r2,
            Robustifier::GemanMcclure { sigma } => tape.geman_mcclure(r2, sigma * sigma),
        };
        let w = Array2::from_shape_fn((1, self.confidence.len()), |(_, j)| self.confidence[j]);
        let data = tape.weighted_sum(robust, w);
        let beta_pen = tape.sum_sq(beta);
        let beta_term = tape.scale(beta_pen, self.w_beta);
        let loss = tape.add(data, beta_term);
        let val = tape.scalar(loss);
        let grads = tape.backward(loss);
        let g = grads
            .get(all)
            .map(|m| m.column(0).to_vec())
            .unwrap_or_else(|| vec![0.0; vars.len()]);
        Ok((val, g))
    }

    fn prior_slices(&self) -> Vec<Range<usize>> {
        vec![self.pose_range()]
    }
}

// ---------------------------------------------------------------------------
// motion denoising
// ---------------------------------------------------------------------------

/// Refine a noisy joint-position sequence. Variables: per-frame normalized
/// poses followed by per-frame global transforms (orient, trans); shape is
/// held at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionDenoiseProblem {
    #[serde(skip, default = "KinematicTree::default_figure")]
    pub tree: KinematicTree,
    pub stats: NormStats,
    /// One (3, J) observation per frame.
    pub observed: Vec<Array2<f64>>,
    pub joint_mask: Vec<bool>,
    pub w_temp: f64,
}

impl MotionDenoiseProblem {
    pub fn new(
        tree: KinematicTree,
        stats: NormStats,
        observed: Vec<Array2<f64>>,
        joint_mask: Vec<bool>,
    ) -> Result<Self, TaskError> {
        if observed.len() < 2 {
            return Err(TaskError::TooFewFrames(observed.len()));
        }
        let nj = tree.num_joints();
        if joint_mask.len() != nj || observed.iter().any(|o| o.dim() != (3, nj)) {
            return Err(TaskError::MaskMismatch("observation shapes".into()));
        }
        Ok(MotionDenoiseProblem {
            tree,
            stats,
            observed,
            joint_mask,
            w_temp: DEFAULT_W_TEMP,
        })
    }

    pub fn frames(&self) -> usize {
        self.observed.len()
    }

    pub fn frame_pose_range(&self, f: usize) -> Range<usize> {
        let d = self.tree.pose_dim();
        f * d..(f + 1) * d
    }

    fn globals_offset(&self) -> usize {
        self.frames() * self.tree.pose_dim()
    }

    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut v = rng.gaussian_sample(self.frames() * self.tree.pose_dim());
        v.extend(std::iter::repeat(0.0).take(self.frames() * 6));
        v
    }

    /// Pack known per-frame poses (normalized) with zero globals, for
    /// truth-initialized runs and loss checks.
    pub fn pack_vars(&self, poses_norm: &[Vec<f64>]) -> Vec<f64> {
        assert_eq!(poses_norm.len(), self.frames());
        let mut v: Vec<f64> = poses_norm.iter().flatten().cloned().collect();
        v.extend(std::iter::repeat(0.0).take(self.frames() * 6));
        v
    }
}

pub fn motion_denoise_loss(problem: &MotionDenoiseProblem, vars: &[f64]) -> anyhow::Result<f64> {
    Ok(problem.task_loss_grad(vars)?.0)
}

/// Observation and temporal terms separately (for reporting).
pub fn motion_loss_terms(
    problem: &MotionDenoiseProblem,
    vars: &[f64],
) -> anyhow::Result<(f64, f64)> {
    let full = problem.task_loss_grad(vars)?.0;
    let mut zero_temp = problem.clone();
    zero_temp.w_temp = 0.0;
    let obs = zero_temp.task_loss_grad(vars)?.0;
    Ok((obs, (full - obs) / problem.w_temp.max(1e-300)))
}

impl InverseProblem for MotionDenoiseProblem {
    fn var_dim(&self) -> usize {
        self.frames() * (self.tree.pose_dim() + 6)
    }

    fn task_loss_grad(&self, vars: &[f64]) -> anyhow::Result<(f64, Vec<f64>)> {
        let d = self.tree.pose_dim();
        let frames = self.frames();
        let goff = self.globals_offset();
        let mut tape = GradTape::new();
        let all = tape.vec_leaf(vars, true);
        let beta = tape.vec_leaf(&vec![0.0; self.tree.num_joints()], false);
        let mask = tape.constant(joint_mask_matrix(&self.joint_mask));
        let mut joints_per_frame = Vec::with_capacity(frames);
        let mut loss: Option<NodeId> = None;
        for f in 0..frames {
            let pose = tape.slice_rows(all, f * d, d);
            let orient = tape.slice_rows(all, goff + f * 6, 3);
            let trans = tape.slice_rows(all, goff + f * 6 + 3, 3);
            let joints = joints_from_pose_node(
                &mut tape,
                &self.tree,
                pose,
                &self.stats,
                orient,
                trans,
                beta,
            )?;
            let obs = tape.constant(self.observed[f].clone());
            let diff = tape.sub(joints, obs);
            let masked = tape.mul_elem(diff, mask);
            let term = tape.sum_sq(masked);
            loss = Some(match loss {
                Some(l) => tape.add(l, term),
                None => term,
            });
            joints_per_frame.push(joints);
        }
        if self.w_temp > 0.0 {
            for f in 1..frames {
                let diff = tape.sub(joints_per_frame[f], joints_per_frame[f - 1]);
                let term = tape.sum_sq(diff);
                let term = tape.scale(term, self.w_temp);
                let l = loss.take().unwrap();
                loss = Some(tape.add(l, term));
            }
        }
        let loss = loss.unwrap();
        let val = tape.scalar(loss);
        let grads = tape.backward(loss);
        let g = grads
            .get(all)
            .map(|m| m.column(0).to_vec())
            .unwrap_or_else(|| vec![0.0; vars.len()]);
        Ok((val, g))
    }

    fn prior_slices(&self) -> Vec<Range<usize>> {
        (0..self.frames()).map(|f| self.frame_pose_range(f)).collect()
    }
}

// ---------------------------------------------------------------------------
// multi-hypothesis driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hypothesis {
    pub seed_index: usize,
    pub vars: Vec<f64>,
    pub final_loss: f64,
    /// Error vs ground truth when supplied.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Hypothesis>,
    pub min_error: Option<f64>,
    pub mean_error: Option<f64>,
    pub std_error: Option<f64>,
    pub apd: Option<f64>,
}

impl HypothesisSet {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed_index,final_loss,error\n");
        for h in &self.hypotheses {
            out.push_str(&format!(
                "{},{},{}\n",
                h.seed_index,
                h.final_loss,
                h.error.map(|e| e.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

/// Run S independent optimizations from per-hypothesis rng streams.
/// `error_fn` scores a solution against ground truth (FK-joint space by
/// convention); `joints_fn` extracts a joint cloud for the APD statistic.
#[allow(clippy::too_many_arguments)]
pub fn run_multi_hypothesis<P, I, E, J>(
    problem: &P,
    net: &(dyn NoisePredictor + Sync),
    s: &Schedule,
    policy: &SchedulePolicy,
    cfg: &PriorConfig,
    count: usize,
    rng: &Rng,
    init_fn: I,
    error_fn: Option<E>,
    joints_fn: Option<J>,
) -> Result<HypothesisSet, crate::prior::PriorError>
where
    P: InverseProblem + Sync,
    I: Fn(&mut Rng) -> Vec<f64> + Sync,
    E: Fn(&[f64]) -> f64 + Sync,
    J: Fn(&[f64]) -> Array2<f64> + Sync,
{
    assert!(count >= 1, "need at least one hypothesis");
    let results: Vec<Result<OptimResult, crate::prior::PriorError>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng.split(i as u64 + 1);
            let init = init_fn(&mut stream);
            optimize(problem, net, s, policy, cfg, &init, &mut stream)
        })
        .collect();
    let mut hypotheses = Vec::with_capacity(count);
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        let error = error_fn.as_ref().map(|f| f(&r.vars));
        hypotheses.push(Hypothesis {
            seed_index: i,
            vars: r.vars,
            final_loss: r.final_loss,
            error,
        });
    }
    let errors: Vec<f64> = hypotheses.iter().filter_map(|h| h.error).collect();
    let (min_error, mean_error, std_error) = if errors.is_empty() {
        (None, None, None)
    } else {
        let min = errors.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let var =
            errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / errors.len() as f64;
        (Some(min), Some(mean), Some(var.sqrt()))
    };
    let apd = match (&joints_fn, hypotheses.len()) {
        (Some(jf), n) if n >= 2 => {
            let clouds: Vec<Array2<f64>> = hypotheses.iter().map(|h| jf(&h.vars)).collect();
            crate::evalmetrics::apd_joints(&clouds).ok()
        }
        _ => None,
    };
    Ok(HypothesisSet {
        hypotheses,
        min_error,
        mean_error,
        std_error,
        apd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::GaussianOptimalPredictor;
    use crate::kinematics::{forward_kinematics, PoseParams, ShapeParams};
    use crate::numerics::finite_diff_grad;

    fn tree() -> KinematicTree {
        KinematicTree::default_figure()
    }

    fn identity_stats(d: usize) -> NormStats {
        NormStats::identity(d)
    }

    fn fd_check<P: InverseProblem>(problem: &P, vars: &[f64], tol: f64) {
        let (_, analytic) = problem.task_loss_grad(vars).unwrap();
        let fd = finite_diff_grad(
            |x| problem.task_loss_grad(x).unwrap().0,
            vars,
            1e-5,
        )
        .unwrap();
        // components tiny relative to the gradient's scale sit below what
        // central differences can resolve, so floor the denominator there
        let gmax = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let floor = (1e-3 * gmax).max(1e-6);
        for i in 0..vars.len() {
            let denom = analytic[i].abs().max(fd[i].abs()).max(floor);
            let rel = (analytic[i] - fd[i]).abs() / denom;
            assert!(
                rel < tol,
                "dim {i}: analytic {} fd {} rel {rel}",
                analytic[i],
                fd[i]
            );
        }
    }

    #[test]
    fn completion_loss_cases() {
        let y = vec![0.1, -0.2, 0.3];
        let full = MaskSpec::all(3);
        assert_eq!(completion_loss(&y, &full, &y).unwrap(), 0.0);
        let none = MaskSpec::none(3);
        assert_eq!(completion_loss(&[9.0, 9.0, 9.0], &none, &y).unwrap(), 0.0);
        let half = MaskSpec {
            dims: vec![true, false, false],
        };
        let l = completion_loss(&[0.6, 0.0, 0.0], &half, &y).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn completion_gradient_matches_fd() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let dim = 5;
            let y: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let mask = MaskSpec {
                dims: (0..dim).map(|_| rng.uniform() < 0.6).collect(),
            };
            let problem = CompletionProblem::new(mask, y).unwrap();
            let vars: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            fd_check(&problem, &vars, 1e-6);
        }
    }

    #[test]
    fn completion_full_mask_recovers_measurement() {
        let mut rng = Rng::new(2);
        let y: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let problem = CompletionProblem::new(MaskSpec::all(4), y.clone()).unwrap();
        let net = GaussianOptimalPredictor {
            mu: vec![0.0; 4],
            s2: 1.0,
            schedule: Schedule::default(),
            stats: identity_stats(4),
        };
        let cfg = PriorConfig {
            lambda_reg: 0.0,
            iters: 2000,
            ..PriorConfig::default()
        };
        let policy = SchedulePolicy::truncated(0.15, 0.05, 2000);
        let res = optimize(
            &problem,
            &net,
            &Schedule::default(),
            &policy,
            &cfg,
            &vec![0.0; 4],
            &mut rng,
        )
        .unwrap();
        for i in 0..4 {
            assert!((res.vars[i] - y[i]).abs() < 1e-6);
        }
    }

    fn small_pose(rng: &mut Rng, scale: f64) -> Vec<f64> {
        (0..63).map(|_| scale * rng.normal()).collect()
    }

    #[test]
    fn ik_zero_at_truth() {
        let t = tree();
        let mut rng = Rng::new(3);
        let pose = small_pose(&mut rng, 0.2);
        let params = PoseParams::from_pose_vector(&t, &pose).unwrap();
        let joints = forward_kinematics(&t, &params, &ShapeParams::zero(&t)).unwrap();
        let problem = IkProblem::new(
            t.clone(),
            identity_stats(63),
            joints,
            vec![true; t.num_joints()],
        )
        .unwrap();
        let loss = ik_loss(&problem, &pose).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn ik_gradient_matches_fd() {
        let t = tree();
        let mut rng = Rng::new(4);
        // realistic stats so the denormalization path is exercised
        let stats = NormStats {
            mean: (0..63).map(|_| 0.1 * rng.normal()).collect(),
            std: (0..63).map(|_| 0.5 + rng.uniform()).collect(),
        };
        for case in 0..20 {
            let observed = Array2::from_shape_fn((3, t.num_joints()), |_| 0.5 * rng.normal());
            let mask: Vec<bool> = (0..t.num_joints()).map(|_| rng.uniform() < 0.7).collect();
            let mask = if mask.iter().any(|m| *m) {
                mask
            } else {
                vec![true; t.num_joints()]
            };
            let problem = IkProblem::new(t.clone(), stats.clone(), observed, mask).unwrap();
            let vars = small_pose(&mut rng, 0.3);
            fd_check(&problem, &vars, 1e-5);
            let _ = case;
        }
    }

    #[test]
    fn ik_rejects_bad_shapes() {
        let t = tree();
        let bad = Array2::<f64>::zeros((3, 2));
        assert!(IkProblem::new(t.clone(), identity_stats(63), bad, vec![true; 2]).is_err());
        let obs = Array2::<f64>::zeros((3, t.num_joints()));
        assert!(matches!(
            IkProblem::new(t.clone(), identity_stats(63), obs, vec![false; t.num_joints()]),
            Err(TaskError::EmptyObservation)
        ));
    }

    #[test]
    fn ik_fingertip_recovery() {
        let t = tree();
        let mut rng = Rng::new(5);
        let gt_pose = small_pose(&mut rng, 0.2);
        let params = PoseParams::from_pose_vector(&t, &gt_pose).unwrap();
        let joints = forward_kinematics(&t, &params, &ShapeParams::zero(&t)).unwrap();
        // observe only chain ends: head, fingertips, hips, jaw
        let ends = [4usize, 9, 10, 14, 18, 19];
        let mut mask = vec![false; t.num_joints()];
        for &e in &ends {
            mask[e] = true;
        }
        let problem = IkProblem::new(t.clone(), identity_stats(63), joints.clone(), mask).unwrap();
        let net = GaussianOptimalPredictor {
            mu: vec![0.0; 63],
            s2: 1.0,
            schedule: Schedule::default(),
            stats: identity_stats(63),
        };
        let cfg = PriorConfig {
            lambda_reg: 0.0,
            iters: 6000,
            lr: 0.01,
            ..PriorConfig::default()
        };
        let policy = SchedulePolicy::truncated(0.15, 0.05, 6000);
        // init near the truth: end effectors alone cannot resolve every
        // intermediate angle globally, only locally
        let init: Vec<f64> = gt_pose.iter().map(|v| v + 0.1 * rng.normal()).collect();
        let res = optimize(
            &problem,
            &net,
            &Schedule::default(),
            &policy,
            &cfg,
            &init,
            &mut rng,
        )
        .unwrap();
        let fit_params = PoseParams::from_pose_vector(&t, &res.vars).unwrap();
        let fit_joints = forward_kinematics(&t, &fit_params, &ShapeParams::zero(&t)).unwrap();
        for &e in &ends {
            let mut d2 = 0.0;
            for r in 0..3 {
                let d = fit_joints[[r, e]] - joints[[r, e]];
                d2 += d * d;
            }
            assert!(d2.sqrt() < 1e-3, "end {e} residual {}", d2.sqrt());
        }
    }

    fn default_camera() -> Camera {
        Camera::looking_at_origin(DEFAULT_FOCAL, 500.0, 500.0, 4.0)
    }

    #[test]
    fn fit2d_gm_limits_and_zero_confidence() {
        let t = tree();
        let mut rng = Rng::new(6);
        let gt_pose = small_pose(&mut rng, 0.2);
        let params = PoseParams::from_pose_vector(&t, &gt_pose).unwrap();
        let joints = forward_kinematics(&t, &params, &ShapeParams::zero(&t)).unwrap();
        let cam = default_camera();
        let kp = crate::kinematics::project_perspective(&cam, &joints).unwrap();
        let problem = Fit2dProblem::new(
            t.clone(),
            identity_stats(63),
            cam,
            kp,
            vec![1.0; t.num_joints()],
            Robustifier::GemanMcclure {
                sigma: DEFAULT_GM_SIGMA,
            },
        )
        .unwrap();
        // truth => zero reprojection residual => zero data loss
        let mut vars = gt_pose.clone();
        vars.extend(std::iter::repeat(0.0).take(6 + t.num_joints()));
        let loss = fit2d_loss(&problem, &vars).unwrap();
        assert!(loss < 1e-18, "loss {loss}");
        // zero confidence kills even huge residuals
        let mut zero_conf = problem.clone();
        zero_conf.confidence = vec![0.0; t.num_joints()];
        let far = {
            let mut v = small_pose(&mut rng, 0.5);
            v.extend(std::iter::repeat(0.0).take(6 + t.num_joints()));
            v
        };
        assert!(fit2d_loss(&zero_conf, &far).unwrap() < 1e-18);
        // GM saturates at sigma^2 per joint
        let r: f64 = 1e6;
        let gm = DEFAULT_GM_SIGMA * DEFAULT_GM_SIGMA * r * r
            / (DEFAULT_GM_SIGMA * DEFAULT_GM_SIGMA + r * r);
        assert!((gm - DEFAULT_GM_SIGMA * DEFAULT_GM_SIGMA).abs() < 1.0);
    }

    #[test]
    fn fit2d_gradient_matches_fd() {
        let t = tree();
        let mut rng = Rng::new(7);
        let stats = NormStats {
            mean: (0..63).map(|_| 0.05 * rng.normal()).collect(),
            std: (0..63).map(|_| 0.5 + 0.5 * rng.uniform()).collect(),
        };
        let cam = default_camera();
        for _ in 0..20 {
            let kp = Array2::from_shape_fn((2, t.num_joints()), |_| {
                500.0 + 100.0 * rng.normal()
            });
            let conf: Vec<f64> = (0..t.num_joints()).map(|_| rng.uniform()).collect();
            let problem = Fit2dProblem::new(
                t.clone(),
                stats.clone(),
                cam.clone(),
                kp,
                conf,
                Robustifier::GemanMcclure {
                    sigma: DEFAULT_GM_SIGMA,
                },
            )
            .unwrap();
            let mut vars = small_pose(&mut rng, 0.2);
            vars.extend((0..6 + t.num_joints()).map(|_| 0.05 * rng.normal()));
            fd_check(&problem, &vars, 1e-5);
        }
    }

    #[test]
    fn motion_loss_cases() {
        let t = tree();
        let mut rng = Rng::new(8);
        // clean observations, truth init: L_obs = 0, L_temp = frame energy
        let poses: Vec<Vec<f64>> = (0..4).map(|_| small_pose(&mut rng, 0.2)).collect();
        let joints: Vec<Array2<f64>> = poses
            .iter()
            .map(|p| {
                let params = PoseParams::from_pose_vector(&t, p).unwrap();
                forward_kinematics(&t, &params, &ShapeParams::zero(&t)).unwrap()
            })
            .collect();
        let problem = MotionDenoiseProblem::new(
            t.clone(),
            identity_stats(63),
            joints.clone(),
            vec![true; t.num_joints()],
        )
        .unwrap();
        let vars = problem.pack_vars(&poses);
        let (obs, temp) = motion_loss_terms(&problem, &vars).unwrap();
        assert!(obs < 1e-18, "obs {obs}");
        let mut expect = 0.0;
        for f in 1..4 {
            for (a, b) in joints[f].iter().zip(joints[f - 1].iter()) {
                expect += (a - b) * (a - b);
            }
        }
        assert!((temp - expect).abs() < 1e-9, "temp {temp} vs {expect}");
        // constant sequence: zero temporal energy
        let const_poses = vec![poses[0].clone(); 4];
        let const_joints = vec![joints[0].clone(); 4];
        let const_problem = MotionDenoiseProblem::new(
            t.clone(),
            identity_stats(63),
            const_joints,
            vec![true; t.num_joints()],
        )
        .unwrap();
        let cv = const_problem.pack_vars(&const_poses);
        let (_, ct) = motion_loss_terms(&const_problem, &cv).unwrap();
        assert!(ct < 1e-18);
        // too few frames rejected
        assert!(matches!(
            MotionDenoiseProblem::new(
                t.clone(),
                identity_stats(63),
                vec![joints[0].clone()],
                vec![true; t.num_joints()]
            ),
            Err(TaskError::TooFewFrames(1))
        ));
    }

    #[test]
    fn motion_gradient_matches_fd() {
        let t = tree();
        let mut rng = Rng::new(9);
        let stats = NormStats {
            mean: (0..63).map(|_| 0.05 * rng.normal()).collect(),
            std: (0..63).map(|_| 0.6 + 0.4 * rng.uniform()).collect(),
        };
        for _ in 0..5 {
            let observed: Vec<Array2<f64>> = (0..3)
                .map(|_| Array2::from_shape_fn((3, t.num_joints()), |_| 0.4 * rng.normal()))
                .collect();
            let problem = MotionDenoiseProblem::new(
                t.clone(),
                stats.clone(),
                observed,
                vec![true; t.num_joints()],
            )
            .unwrap();
            let mut vars: Vec<f64> = (0..3 * 63).map(|_| 0.2 * rng.normal()).collect();
            vars.extend((0..3 * 6).map(|_| 0.05 * rng.normal()));
            fd_check(&problem, &vars, 1e-5);
        }
    }

    #[test]
    fn multi_hypothesis_stats() {
        let mut rng = Rng::new(10);
        let y: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let problem = CompletionProblem::new(
            MaskSpec {
                dims: vec![true, true, false, false],
            },
            y.clone(),
        )
        .unwrap();
        let net = GaussianOptimalPredictor {
            mu: vec![0.0; 4],
            s2: 1.0,
            schedule: Schedule::default(),
            stats: identity_stats(4),
        };
        let cfg = PriorConfig {
            iters: 50,
            ..PriorConfig::default()
        };
        let policy = SchedulePolicy::truncated(0.15, 0.05, 50);
        let gt = y.clone();
        let err = move |vars: &[f64]| -> f64 {
            vars.iter()
                .zip(&gt)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let joints = |vars: &[f64]| {
            Array2::from_shape_fn((3, 4), |(r, c)| if r == 0 { vars[c] } else { 0.0 })
        };
        let root = Rng::new(77);
        let single = run_multi_hypothesis(
            &problem,
            &net,
            &Schedule::default(),
            &policy,
            &cfg,
            1,
            &root,
            |r| problem.init(r),
            Some(err.clone()),
            Some(joints),
        )
        .unwrap();
        assert_eq!(single.min_error, single.mean_error);
        assert_eq!(single.std_error, Some(0.0));
        assert!(single.apd.is_none());
        let ten = run_multi_hypothesis(
            &problem,
            &net,
            &Schedule::default(),
            &policy,
            &cfg,
            10,
            &root,
            |r| problem.init(r),
            Some(err),
            Some(joints),
        )
        .unwrap();
        assert!(ten.min_error.unwrap() <= ten.mean_error.unwrap());
        assert!(ten.apd.unwrap() > 0.0);
        // deterministic under the same root stream
        let again = run_multi_hypothesis(
            &problem,
            &net,
            &Schedule::default(),
            &policy,
            &cfg,
            10,
            &root,
            |r| problem.init(r),
            None::<fn(&[f64]) -> f64>,
            None::<fn(&[f64]) -> Array2<f64>>,
        )
        .unwrap();
        for (a, b) in ten.hypotheses.iter().zip(&again.hypotheses) {
            assert_eq!(a.vars, b.vars);
        }
        let csv = ten.to_csv();
        assert_eq!(csv.trim().lines().count(), 11);
    }

    #[test]
    fn problem_serialization_roundtrip() {
        let problem = CompletionProblem::new(MaskSpec::all(3), vec![0.1, 0.2, 0.3]).unwrap();
        let json = serde_json::to_string(&problem).unwrap();
        let back: CompletionProblem = serde_json::from_str(&json).unwrap();
        assert_eq!(back.y, problem.y);
        let t = tree();
        let ik = IkProblem::new(
            t.clone(),
            identity_stats(63),
            Array2::zeros((3, t.num_joints())),
            vec![true; t.num_joints()],
        )
        .unwrap();
        let json = serde_json::to_string(&ik).unwrap();
        let back: IkProblem = serde_json::from_str(&json).unwrap();
        assert_eq!(back.joint_mask, ik.joint_mask);
    }
}
