use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the per-step variances are laid out over `[1, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

/// Diffusion noise schedule: per-step variances, cumulative products, and the
/// DDIM stochasticity parameter. Immutable after construction.
///
/// `alphas_cum` is indexed by timestep with `alphas_cum[0] = 1`, so
/// `alpha_bar(t)` is valid for `0 <= t <= T`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
    eta: f64,
}

/// Builds a noise schedule. `kind: Linear` interpolates beta evenly from
/// `beta_start` to `beta_end` over `T` steps (inclusive endpoints).
pub fn make_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Config(format!("T must be >= 1, got {t_max}")));
    }
    if !(beta_start > 0.0) || !beta_start.is_finite() {
        return Err(Error::Config(format!("beta_start must be in (0,1), got {beta_start}")));
    }
    if !(beta_end < 1.0) || !beta_end.is_finite() {
        return Err(Error::Config(format!("beta_end must be in (0,1), got {beta_end}")));
    }
    if beta_start > beta_end {
        return Err(Error::Config(format!(
            "beta_start must be <= beta_end, got {beta_start} > {beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule> {
        if betas.is_empty() {
            return Err(Error::Config("betas must be non-empty".into()));
        }
        for (i, b) in betas.iter().enumerate() {
            if !(*b > 0.0 && *b < 1.0) {
                return Err(Error::Config(format!("betas[{i}] must be in (0,1), got {b}")));
            }
        }
        let mut alphas_cum = Vec::with_capacity(betas.len() + 1);
        alphas_cum.push(1.0);
        for b in &betas {
            let prev = *alphas_cum.last().unwrap();
            alphas_cum.push(prev * (1.0 - b));
        }
        Ok(NoiseSchedule { t_max: betas.len(), betas, alphas_cum, eta: 0.0 })
    }

    pub fn with_eta(mut self, eta: f64) -> Result<NoiseSchedule> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::Config(format!("eta must be >= 0, got {eta}")));
        }
        self.eta = eta;
        Ok(self)
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    /// Cumulative product of `(1 - beta)` up to and including `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cum[t]
    }

    /// DDIM stochastic scale for the step `t -> t_prev`:
    /// `eta * sqrt((1-abar_prev)/(1-abar_t)) * sqrt(1 - abar_t/abar_prev)`.
    /// Zero whenever `eta = 0`.
    pub fn sigma(&self, t: usize, t_prev: usize) -> Result<f64> {
        self.sigma_with_eta(t, t_prev, self.eta)
    }

    /// Same as [`sigma`](Self::sigma) with an explicit eta (used by quality boosting).
    pub fn sigma_with_eta(&self, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
        if t < 1 || t > self.t_max {
            return Err(Error::Contract(format!("sigma: t={t} outside [1, {}]", self.t_max)));
        }
        if t_prev >= t {
            return Err(Error::Contract(format!("sigma: t_prev={t_prev} must be < t={t}")));
        }
        if eta == 0.0 {
            return Ok(0.0);
        }
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        let ratio = (1.0 - ab_prev) / (1.0 - ab_t);
        Ok(eta * ratio.sqrt() * (1.0 - ab_t / ab_prev).sqrt())
    }

    /// Forward diffusion marginal: `x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Tensor {
        let ab = self.alpha_bar(t);
        let mut out = x0.scaled(ab.sqrt());
        out.add_scaled(eps, (1.0 - ab).sqrt());
        out
    }
}

/// Inference-time subset of the training timesteps, largest step first, with
/// the editing and boosting subsets split out.
#[derive(Debug, Clone)]
pub struct TimestepPlan {
    steps: Vec<usize>,
    t_edit: usize,
    t_boost: usize,
}

impl TimestepPlan {
    /// Uniform-stride respacing: `n_steps` steps `{stride, 2*stride, ...}` with
    /// `stride = floor(T / n_steps)`, returned largest first. Injection covers
    /// the steps with `t >= t_edit`, boosting those with `t < t_boost`.
    pub fn respaced(t_max: usize, n_steps: usize, t_edit: usize, t_boost: usize) -> Result<TimestepPlan> {
        if n_steps < 1 || n_steps > t_max {
            return Err(Error::Config(format!(
                "inference_steps must be in [1, T={t_max}], got {n_steps}"
            )));
        }
        if !(t_boost < t_edit && t_edit <= t_max) {
            return Err(Error::Config(format!(
                "need t_boost < t_edit <= T, got t_boost={t_boost}, t_edit={t_edit}, T={t_max}"
            )));
        }
        let stride = t_max / n_steps;
        let steps: Vec<usize> = (1..=n_steps).rev().map(|i| i * stride).collect();
        Ok(TimestepPlan { steps, t_edit, t_boost })
    }

    /// Timesteps in execution order (strictly decreasing).
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn t_edit(&self) -> usize {
        self.t_edit
    }

    pub fn t_boost(&self) -> usize {
        self.t_boost
    }

    pub fn inject_steps(&self) -> Vec<usize> {
        self.steps.iter().copied().filter(|&t| t >= self.t_edit).collect()
    }

    pub fn boost_steps(&self) -> Vec<usize> {
        self.steps.iter().copied().filter(|&t| t < self.t_boost).collect()
    }

    /// Consecutive `(t, t_prev)` pairs in execution order; the final pair ends at 0.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.steps.len());
        for i in 0..self.steps.len() {
            let t = self.steps[i];
            let t_prev = if i + 1 < self.steps.len() { self.steps[i + 1] } else { 0 };
            out.push((t, t_prev));
        }
        out
    }

    /// Same pairs in inversion order (ascending), as `(t_from, t_to)` with `t_from < t_to`.
    pub fn inversion_pairs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self.pairs().into_iter().map(|(t, p)| (p, t)).collect();
        out.reverse();
        out
    }
}
