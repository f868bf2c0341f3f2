//! Test-time optimization with a one-step-denoiser regularizer: timestep
//! scheduling strategies, the regularizer loss with its analytic gradient,
//! and the generic optimization loop shared by all inverse problems.

use crate::diffusion::{NoisePredictor, Schedule};
use crate::numerics::{AdamState, Rng};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("schedule policy invariant violated: {0}")]
    BadPolicy(String),
    #[error("iteration {iter} out of range (N = {n})")]
    IterOutOfRange { iter: usize, n: usize },
    #[error("non-finite network output in regularizer")]
    NonFiniteNet,
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("prior slice {start}..{end} does not match network dim {dim}")]
    SliceDimMismatch { start: usize, end: usize, dim: usize },
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error("task: {0}")]
    Task(#[from] anyhow::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Truncated,
    Uniform,
    Fixed,
    Random,
}

/// How diffusion times are assigned to optimization iterations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SchedulePolicy {
    pub mode: ScheduleMode,
    pub t_max: f64,
    pub t_min: f64,
    pub n: usize,
}

/// Lowest diffusion time the uniform strategy descends to.
pub const T_FLOOR: f64 = 1e-3;

impl SchedulePolicy {
    pub fn truncated(t_max: f64, t_min: f64, n: usize) -> Self {
        SchedulePolicy {
            mode: ScheduleMode::Truncated,
            t_max,
            t_min,
            n,
        }
    }

    /// Linear descent over the full time range, i.e. truncation disabled.
    pub fn uniform(n: usize) -> Self {
        SchedulePolicy {
            mode: ScheduleMode::Uniform,
            t_max: 1.0,
            t_min: T_FLOOR,
            n,
        }
    }

    pub fn fixed(t: f64, n: usize) -> Self {
        SchedulePolicy {
            mode: ScheduleMode::Fixed,
            t_max: t,
            t_min: t,
            n,
        }
    }

    pub fn random(t_max: f64, t_min: f64, n: usize) -> Self {
        SchedulePolicy {
            mode: ScheduleMode::Random,
            t_max,
            t_min,
            n,
        }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        let bad = |m: String| Err(PriorError::BadPolicy(m));
        if !(self.t_min > 0.0 && self.t_max <= 1.0 && self.t_max >= self.t_min) {
            return bad(format!(
                "need 1 >= t_max >= t_min > 0, got [{}, {}]",
                self.t_max, self.t_min
            ));
        }
        if self.n < 1 {
            return bad("need n >= 1".into());
        }
        if self.mode == ScheduleMode::Fixed && self.t_max != self.t_min {
            return bad("fixed mode requires t_max == t_min".into());
        }
        Ok(())
    }
}

/// Diffusion time for one iteration of the optimization loop.
pub fn schedule_timestep(
    policy: &SchedulePolicy,
    iter: usize,
    rng: &mut Rng,
) -> Result<f64, PriorError> {
    policy.validate()?;
    if iter >= policy.n {
        return Err(PriorError::IterOutOfRange { iter, n: policy.n });
    }
    Ok(match policy.mode {
        ScheduleMode::Truncated | ScheduleMode::Uniform => {
            if policy.n == 1 {
                policy.t_max
            } else {
                policy.t_max
                    - (policy.t_max - policy.t_min) * iter as f64 / (policy.n - 1) as f64
            }
        }
        ScheduleMode::Fixed => policy.t_max,
        ScheduleMode::Random => rng.uniform_in(policy.t_min, policy.t_max),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Overall regularizer strength multiplying the denoiser loss.
    pub lambda_reg: f64,
    /// Per-t loss weight; constant by default with strength in lambda_reg.
    pub w_t: f64,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            lambda_reg: 1.0,
            w_t: 1.0,
            lr: 0.05,
            iters: 500,
            seed: 0,
        }
    }
}

/// Regularizer evaluation with the noise draw supplied by the caller.
/// Returns (loss, grad); the gradient treats the denoised estimate as a
/// constant, so it reduces to 2 w_t (x0 - x0_hat) = 2 w_t (sigma/alpha)
/// (eps_hat - eps) without differentiating through the network.
pub fn denoiser_loss_and_grad_with_eps<P: NoisePredictor + ?Sized>(
    net: &P,
    s: &Schedule,
    x0: &[f64],
    t: f64,
    eps: &[f64],
    w_t: f64,
) -> Result<(f64, Vec<f64>), PriorError> {
    let d = x0.len();
    let (a, sg) = s.eval(t)?;
    if t == 0.0 {
        return Err(PriorError::Diffusion(
            crate::diffusion::DiffusionError::ZeroTimeDenoise,
        ));
    }
    let mut xt = Array2::<f64>::zeros((d, 1));
    for i in 0..d {
        xt[[i, 0]] = a * x0[i] + sg * eps[i];
    }
    let eps_hat = net.predict(&xt, &[t]);
    if eps_hat.iter().any(|v| !v.is_finite()) {
        return Err(PriorError::NonFiniteNet);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    for i in 0..d {
        let x0_hat = (xt[[i, 0]] - sg * eps_hat[[i, 0]]) / a;
        let r = x0[i] - x0_hat;
        loss += w_t * r * r;
        grad[i] = 2.0 * w_t * r;
    }
    Ok((loss, grad))
}

/// Regularizer with a fresh noise draw, as used inside the optimizer.
pub fn denoiser_loss_and_grad<P: NoisePredictor + ?Sized>(
    net: &P,
    s: &Schedule,
    x0: &[f64],
    t: f64,
    rng: &mut Rng,
    w_t: f64,
) -> Result<(f64, Vec<f64>), PriorError> {
    let eps = rng.gaussian_sample(x0.len());
    denoiser_loss_and_grad_with_eps(net, s, x0, t, &eps, w_t)
}

/// An inverse problem the optimizer can descend on: a differentiable data
/// term over a flat variable vector, plus which sub-ranges of that vector
/// are normalized pose blocks the prior applies to.
pub trait InverseProblem {
    fn var_dim(&self) -> usize;
    /// Data loss and its gradient with respect to the full variable vector.
    fn task_loss_grad(&self, vars: &[f64]) -> anyhow::Result<(f64, Vec<f64>)>;
    /// Ranges of `vars` holding normalized pose vectors; each must match
    /// the prior network's input dimension. Auxiliary variables (shape,
    /// camera, global transform) live outside these ranges and are
    /// optimized but unregularized.
    fn prior_slices(&self) -> Vec<Range<usize>>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub t: f64,
    pub task_loss: f64,
    pub prior_loss: f64,
    pub total_loss: f64,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iter,t,task_loss,prior_loss,total_loss\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter, r.t, r.task_loss, r.prior_loss, r.total_loss
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub vars: Vec<f64>,
    pub final_loss: f64,
    pub trace: Vec<TraceRow>,
}

/// Alternating schedule-and-step loop: each iteration draws the scheduled
/// diffusion time, evaluates the data term plus the regularizer on every
/// pose block, and takes one Adam step on all variables.
pub fn optimize<P: NoisePredictor + ?Sized>(
    problem: &dyn InverseProblem,
    net: &P,
    s: &Schedule,
    policy: &SchedulePolicy,
    cfg: &PriorConfig,
    init: &[f64],
    rng: &mut Rng,
) -> Result<OptimResult, PriorError> {
    policy.validate()?;
    assert_eq!(init.len(), problem.var_dim(), "init dimension mismatch");
    let slices = problem.prior_slices();
    for r in &slices {
        if r.end > init.len() || r.len() != net.dim() {
            return Err(PriorError::SliceDimMismatch {
                start: r.start,
                end: r.end,
                dim: net.dim(),
            });
        }
    }
    let mut vars = init.to_vec();
    let mut adam = AdamState::new(vars.len(), cfg.lr);
    let mut trace = Vec::with_capacity(policy.n);
    let mut total = f64::NAN;
    for iter in 0..policy.n {
        let t = schedule_timestep(policy, iter, rng)?;
        let (task_loss, mut grad) = problem.task_loss_grad(&vars)?;
        let mut prior_loss = 0.0;
        if cfg.lambda_reg > 0.0 {
            for r in &slices {
                let block = &vars[r.clone()];
                let (l, g) = denoiser_loss_and_grad(net, s, block, t, rng, cfg.w_t)?;
                prior_loss += l;
                for (k, gi) in g.into_iter().enumerate() {
                    grad[r.start + k] += cfg.lambda_reg * gi;
                }
            }
        }
        total = task_loss + cfg.lambda_reg * prior_loss;
        if !total.is_finite() {
            return Err(PriorError::NonFiniteLoss(iter));
        }
        adam.step(&mut vars, &grad).expect("grad length fixed");
        trace.push(TraceRow {
            iter,
            t,
            task_loss,
            prior_loss,
            total_loss: total,
        });
    }
    Ok(OptimResult {
        vars,
        final_loss: total,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{GaussianOptimalPredictor, NormStats};

    #[test]
    fn truncated_schedule_endpoints_and_interior() {
        let p = SchedulePolicy::truncated(0.15, 0.05, 10);
        let mut rng = Rng::new(0);
        assert_eq!(schedule_timestep(&p, 0, &mut rng).unwrap(), 0.15);
        assert_eq!(schedule_timestep(&p, 9, &mut rng).unwrap(), 0.05);
        let t4 = schedule_timestep(&p, 4, &mut rng).unwrap();
        assert!((t4 - (0.15 - 0.1 * 4.0 / 9.0)).abs() < 1e-15);
        // single-iteration schedule returns the upper bound
        let p1 = SchedulePolicy::truncated(0.2, 0.05, 1);
        assert_eq!(schedule_timestep(&p1, 0, &mut rng).unwrap(), 0.2);
    }

    #[test]
    fn policy_invariants_enforced() {
        let mut rng = Rng::new(0);
        assert!(schedule_timestep(&SchedulePolicy::truncated(0.1, 0.2, 5), 0, &mut rng).is_err());
        assert!(schedule_timestep(&SchedulePolicy::truncated(1.2, 0.1, 5), 0, &mut rng).is_err());
        assert!(schedule_timestep(&SchedulePolicy::truncated(0.5, 0.0, 5), 0, &mut rng).is_err());
        assert!(schedule_timestep(&SchedulePolicy::truncated(0.5, 0.1, 0), 0, &mut rng).is_err());
        assert!(schedule_timestep(&SchedulePolicy::truncated(0.5, 0.1, 5), 5, &mut rng).is_err());
        let mut bad_fixed = SchedulePolicy::fixed(0.3, 5);
        bad_fixed.t_min = 0.2;
        assert!(schedule_timestep(&bad_fixed, 0, &mut rng).is_err());
    }

    #[test]
    fn uniform_is_full_range_truncated() {
        let u = SchedulePolicy::uniform(7);
        let t = SchedulePolicy::truncated(1.0, T_FLOOR, 7);
        let mut rng = Rng::new(0);
        for i in 0..7 {
            assert_eq!(
                schedule_timestep(&u, i, &mut rng).unwrap(),
                schedule_timestep(&t, i, &mut rng).unwrap()
            );
        }
    }

    #[test]
    fn fixed_and_random_modes() {
        let mut rng = Rng::new(3);
        let f = SchedulePolicy::fixed(0.3, 5);
        for i in 0..5 {
            assert_eq!(schedule_timestep(&f, i, &mut rng).unwrap(), 0.3);
        }
        let r = SchedulePolicy::random(0.2, 0.05, 200);
        for i in 0..200 {
            let t = schedule_timestep(&r, i, &mut rng).unwrap();
            assert!((0.05..=0.2).contains(&t), "t {t} out of range");
        }
    }

    fn gaussian_oracle(d: usize) -> GaussianOptimalPredictor {
        GaussianOptimalPredictor {
            mu: vec![0.0; d],
            s2: 1.0,
            schedule: Schedule::default(),
            stats: NormStats::identity(d),
        }
    }

    #[test]
    fn grad_is_scaled_noise_residual() {
        // the analytic gradient must equal 2 w (sigma/alpha)(eps_hat - eps)
        // exactly, not just directionally
        let s = Schedule::default();
        let net = gaussian_oracle(4);
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let x0: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let eps: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let t = rng.uniform_in(0.05, 0.95);
            let w = 0.7;
            let (_, grad) =
                denoiser_loss_and_grad_with_eps(&net, &s, &x0, t, &eps, w).unwrap();
            let (a, sg) = s.eval(t).unwrap();
            let mut xt = Array2::<f64>::zeros((4, 1));
            for i in 0..4 {
                xt[[i, 0]] = a * x0[i] + sg * eps[i];
            }
            let eps_hat = net.predict(&xt, &[t]);
            for i in 0..4 {
                let expect = 2.0 * w * (sg / a) * (eps_hat[[i, 0]] - eps[i]);
                assert!(
                    (grad[i] - expect).abs() < 1e-12,
                    "grad {} vs {}",
                    grad[i],
                    expect
                );
            }
        }
    }

    #[test]
    fn grad_cosine_with_noise_residual_is_one() {
        let s = Schedule::default();
        let net = gaussian_oracle(6);
        let mut rng = Rng::new(4);
        let x0: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let eps: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let t = 0.3;
        let (_, grad) = denoiser_loss_and_grad_with_eps(&net, &s, &x0, t, &eps, 1.0).unwrap();
        let (a, sg) = s.eval(t).unwrap();
        let mut xt = Array2::<f64>::zeros((6, 1));
        for i in 0..6 {
            xt[[i, 0]] = a * x0[i] + sg * eps[i];
        }
        let eps_hat = net.predict(&xt, &[t]);
        let resid: Vec<f64> = (0..6).map(|i| eps_hat[[i, 0]] - eps[i]).collect();
        let dot: f64 = grad.iter().zip(&resid).map(|(g, r)| g * r).sum();
        let ng: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let nr: f64 = resid.iter().map(|r| r * r).sum::<f64>().sqrt();
        assert!(dot / (ng * nr) > 1.0 - 1e-9);
    }

    #[test]
    fn perfect_predictor_zeroes_loss_and_grad() {
        struct Echo {
            schedule: Schedule,
            x0: Vec<f64>,
            stats: NormStats,
        }
        impl NoisePredictor for Echo {
            fn dim(&self) -> usize {
                self.x0.len()
            }
            fn predict(&self, x: &Array2<f64>, ts: &[f64]) -> Array2<f64> {
                // invert the perturbation to return the exact noise
                let (a, sg) = self.schedule.eval(ts[0]).unwrap();
                Array2::from_shape_fn(x.raw_dim(), |(i, j)| {
                    (x[[i, j]] - a * self.x0[i]) / sg
                })
            }
            fn stats(&self) -> &NormStats {
                &self.stats
            }
        }
        let s = Schedule::default();
        let x0 = vec![0.2, -0.5, 1.1];
        let eps = vec![0.4, 0.9, -0.3];
        let echo = Echo {
            schedule: s,
            x0: x0.clone(),
            stats: NormStats::identity(3),
        };
        let (loss, grad) =
            denoiser_loss_and_grad_with_eps(&echo, &s, &x0, 0.4, &eps, 1.0).unwrap();
        assert!(loss.abs() < 1e-24);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    struct Quadratic {
        target: Vec<f64>,
    }

    impl InverseProblem for Quadratic {
        fn var_dim(&self) -> usize {
            self.target.len()
        }
        fn task_loss_grad(&self, vars: &[f64]) -> anyhow::Result<(f64, Vec<f64>)> {
            let mut loss = 0.0;
            let mut grad = vec![0.0; vars.len()];
            for i in 0..vars.len() {
                let r = vars[i] - self.target[i];
                loss += r * r;
                grad[i] = 2.0 * r;
            }
            Ok((loss, grad))
        }
        fn prior_slices(&self) -> Vec<Range<usize>> {
            vec![0..self.target.len()]
        }
    }

    #[test]
    fn unregularized_optimize_reaches_target() {
        let problem = Quadratic {
            target: vec![0.7, -0.3],
        };
        let net = gaussian_oracle(2);
        let cfg = PriorConfig {
            lambda_reg: 0.0,
            iters: 800,
            ..PriorConfig::default()
        };
        let policy = SchedulePolicy::truncated(0.15, 0.05, 800);
        let mut rng = Rng::new(1);
        let res = optimize(
            &problem,
            &net,
            &Schedule::default(),
            &policy,
            &cfg,
            &[0.0, 0.0],
            &mut rng,
        )
        .unwrap();
        for i in 0..2 {
            assert!((res.vars[i] - problem.target[i]).abs() < 1e-6);
        }
        assert_eq!(res.trace.len(), 800);
    }

    #[test]
    fn unregularized_optimize_matches_reference_adam() {
        let problem = Quadratic {
            target: vec![1.0, 2.0, -1.0],
        };
        let net = gaussian_oracle(3);
        let cfg = PriorConfig {
            lambda_reg: 0.0,
            iters: 50,
            ..PriorConfig::default()
        };
        let policy = SchedulePolicy::truncated(0.15, 0.05, 50);
        let mut rng = Rng::new(1);
        let res = optimize(
            &problem,
            &net,
            &Schedule::default(),
            &policy,
            &cfg,
            &[0.0; 3],
            &mut rng,
        )
        .unwrap();
        // plain Adam descent on the task loss alone
        let mut vars = vec![0.0; 3];
        let mut adam = AdamState::new(3, cfg.lr);
        for _ in 0..50 {
            let (_, g) = problem.task_loss_grad(&vars).unwrap();
            adam.step(&mut vars, &g).unwrap();
        }
        assert_eq!(res.vars, vars);
    }

    #[test]
    fn pure_prior_run_stays_near_start() {
        // zero data term, Gaussian oracle prior, start at the mode: the
        // regularizer must not push the iterate far away
        struct NoData;
        impl InverseProblem for NoData {
            fn var_dim(&self) -> usize {
                4
            }
            fn task_loss_grad(&self, vars: &[f64]) -> anyhow::Result<(f64, Vec<f64>)> {
                Ok((0.0, vec![0.0; vars.len()]))
            }
            fn prior_slices(&self) -> Vec<Range<usize>> {
                vec![0..4]
            }
        }
        // sharp prior, comparable to a trained model around a mode
        let net = GaussianOptimalPredictor {
            mu: vec![0.0; 4],
            s2: 0.1,
            schedule: Schedule::default(),
            stats: NormStats::identity(4),
        };
        // modest step size: a pure-prior run has no data term damping the
        // stochastic regularizer gradient
        let cfg = PriorConfig {
            iters: 100,
            lr: 0.01,
            ..PriorConfig::default()
        };
        let policy = SchedulePolicy::truncated(0.15, 0.05, 100);
        let mut rng = Rng::new(5);
        let init = vec![0.1, -0.1, 0.2, 0.0];
        let res = optimize(
            &NoData,
            &net,
            &Schedule::default(),
            &policy,
            &cfg,
            &init,
            &mut rng,
        )
        .unwrap();
        let drift: f64 = res
            .vars
            .iter()
            .zip(&init)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(drift < 0.5, "drift {drift}");
    }

    #[test]
    fn slice_dim_mismatch_rejected() {
        struct BadSlices;
        impl InverseProblem for BadSlices {
            fn var_dim(&self) -> usize {
                4
            }
            fn task_loss_grad(&self, _v: &[f64]) -> anyhow::Result<(f64, Vec<f64>)> {
                Ok((0.0, vec![0.0; 4]))
            }
            fn prior_slices(&self) -> Vec<Range<usize>> {
                vec![0..3] // network dim is 2
            }
        }
        let net = gaussian_oracle(2);
        let cfg = PriorConfig::default();
        let policy = SchedulePolicy::truncated(0.15, 0.05, 5);
        let mut rng = Rng::new(0);
        let err = optimize(
            &BadSlices,
            &net,
            &Schedule::default(),
            &policy,
            &cfg,
            &[0.0; 4],
            &mut rng,
        );
        assert!(matches!(err, Err(PriorError::SliceDimMismatch { .. })));
    }

    #[test]
    fn trace_csv_shape() {
        let trace = vec![
            TraceRow {
                iter: 0,
                t: 0.15,
                task_loss: 1.0,
                prior_loss: 0.5,
                total_loss: 1.5,
            },
            TraceRow {
                iter: 1,
                t: 0.14,
                task_loss: 0.9,
                prior_loss: 0.4,
                total_loss: 1.3,
            },
        ];
        let csv = trace_to_csv(&trace);
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "iter,t,task_loss,prior_loss,total_loss");
        assert!(lines[1].starts_with("0,0.15,"));
    }
}
