//! Deterministic DDIM stepping, exact inversion, the asymmetric step, and the
//! full injected generative loop with editing, denoising, and boosting
//! intervals.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::calibration::{latent_calibration_step_from, CalibrationIntermediates};
use crate::denoiser::{Denoiser, DenoiserOutput, DenoiserParams};
use crate::error::{Error, Result};
use crate::hspace::{masked_blend, InjectionConfig};
use crate::schedule::{NoiseSchedule, TimestepPlan};
use crate::tensor::Tensor;

/// The evolving latent with its timestep.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub x: Tensor,
    pub t: usize,
}

fn predict_x0_at(alpha_bar: f64, x_t: &Tensor, eps: &Tensor) -> Tensor {
    let s = (1.0 - alpha_bar).sqrt();
    let r = alpha_bar.sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| (x - s * e) / r)
        .collect();
    Tensor::from_vec(x_t.shape(), data)
}

/// Predicted x0: `(x_t - sqrt(1-abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0(sched: &NoiseSchedule, x_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
    if t < 1 || t > sched.t_max() {
        return Err(Error::Contract(format!("predict_x0: t={t} outside [1, {}]", sched.t_max())));
    }
    if x_t.shape() != eps.shape() {
        return Err(Error::Contract(format!(
            "predict_x0: shape {:?} vs {:?}",
            x_t.shape(),
            eps.shape()
        )));
    }
    Ok(predict_x0_at(sched.alpha_bar(t), x_t, eps))
}

/// Direction term: `sqrt(1 - abar_prev - sigma^2) * eps`.
pub fn direction_to_xt(sched: &NoiseSchedule, eps: &Tensor, t_prev: usize, sigma: f64) -> Result<Tensor> {
    let ab_prev = sched.alpha_bar(t_prev);
    let rad = 1.0 - ab_prev - sigma * sigma;
    if rad < -1e-12 {
        return Err(Error::Config(format!(
            "direction_to_xt: negative radicand {rad} (sigma {sigma} too large for schedule)"
        )));
    }
    Ok(eps.scaled(rad.max(0.0).sqrt()))
}

/// One reverse update `t -> t_prev`:
/// `x_prev = sqrt(abar_prev) P + sqrt(1-abar_prev-sigma^2) eps + sigma z`.
/// `noise` must be supplied exactly when `sigma > 0`.
pub fn ddim_step(
    sched: &NoiseSchedule,
    state: &LatentState,
    eps: &Tensor,
    t_prev: usize,
    sigma: f64,
    noise: Option<&Tensor>,
) -> Result<LatentState> {
    if t_prev >= state.t {
        return Err(Error::Contract(format!(
            "ddim_step: t_prev={t_prev} must be < t={}",
            state.t
        )));
    }
    match (sigma > 0.0, noise) {
        (true, None) => {
            return Err(Error::Contract("ddim_step: sigma > 0 requires noise".into()));
        }
        (false, Some(_)) => {
            return Err(Error::Contract("ddim_step: noise supplied with sigma = 0".into()));
        }
        _ => {}
    }
    let p = predict_x0(sched, &state.x, eps, state.t)?;
    let dir = direction_to_xt(sched, eps, t_prev, sigma)?;
    let ab_prev = sched.alpha_bar(t_prev);
    let mut x = p.scaled(ab_prev.sqrt());
    x.add_scaled(&dir, 1.0);
    if let Some(z) = noise {
        if z.shape() != state.x.shape() {
            return Err(Error::Contract("ddim_step: noise shape mismatch".into()));
        }
        x.add_scaled(z, sigma);
    }
    Ok(LatentState { x, t: t_prev })
}

/// Algebraic inverse of the deterministic step for a fixed epsilon:
/// maps `x_{t_prev}` back to `x_t`.
pub fn ddim_step_inverse(
    sched: &NoiseSchedule,
    x_prev: &Tensor,
    eps: &Tensor,
    t_prev: usize,
    t: usize,
) -> Result<LatentState> {
    if t_prev >= t {
        return Err(Error::Contract(format!(
            "ddim_step_inverse: t_prev={t_prev} must be < t={t}"
        )));
    }
    let p = predict_x0_at(sched.alpha_bar(t_prev), x_prev, eps);
    let ab = sched.alpha_bar(t);
    let mut x = p.scaled(ab.sqrt());
    x.add_scaled(eps, (1.0 - ab).sqrt());
    Ok(LatentState { x, t })
}

/// Deterministic inversion of a clean image along the plan, largest step last.
/// The per-step epsilon is evaluated at the currently available state with its
/// own timestep (clamped to 1), the standard one-step approximation.
/// Requires `eta = 0`.
pub fn ddim_invert(
    model: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    x0: &Tensor,
) -> Result<LatentState> {
    if sched.eta() != 0.0 {
        return Err(Error::Contract(format!(
            "ddim_invert requires eta = 0, schedule has eta = {}",
            sched.eta()
        )));
    }
    let mut x = x0.clone();
    for (s, t) in plan.inversion_pairs() {
        let eps = model.forward(params, &x, s.max(1))?.eps;
        x = ddim_step_inverse(sched, &x, &eps, s, t)?.x;
    }
    Ok(LatentState { x, t: plan.steps()[0] })
}

/// Plain deterministic reverse process from `x_T` down to the clean image,
/// calling `on_step` with each state and forward output before stepping.
pub fn reverse_collect(
    model: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    start: &LatentState,
    mut on_step: impl FnMut(usize, &DenoiserOutput),
) -> Result<Tensor> {
    if start.t != plan.steps()[0] {
        return Err(Error::Contract(format!(
            "reverse: state at t={}, plan starts at t={}",
            start.t,
            plan.steps()[0]
        )));
    }
    let mut state = start.clone();
    for (t, t_prev) in plan.pairs() {
        let out = model.forward(params, &state.x, t)?;
        on_step(t, &out);
        state = ddim_step(sched, &state, &out.eps, t_prev, 0.0, None)?;
    }
    Ok(state.x)
}

/// Plain deterministic reconstruction.
pub fn reverse(
    model: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    start: &LatentState,
) -> Result<Tensor> {
    reverse_collect(model, params, sched, plan, start, |_, _| {})
}

/// Asymmetric step: the predicted-x0 term uses the injected epsilon, the
/// direction term the plain one. Deterministic (editing-interval form).
pub fn asyrp_step(
    model: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    state: &LatentState,
    h_new: &Tensor,
    t_prev: usize,
) -> Result<LatentState> {
    if t_prev >= state.t {
        return Err(Error::Contract(format!(
            "asyrp_step: t_prev={t_prev} must be < t={}",
            state.t
        )));
    }
    let injected = model.forward_injected(params, &state.x, state.t, h_new)?;
    let plain = model.forward(params, &state.x, state.t)?;
    let p = predict_x0(sched, &state.x, &injected.eps, state.t)?;
    let dir = direction_to_xt(sched, &plain.eps, t_prev, 0.0)?;
    let mut x = p.scaled(sched.alpha_bar(t_prev).sqrt());
    x.add_scaled(&dir, 1.0);
    Ok(LatentState { x, t: t_prev })
}

/// Per-timestep bottleneck features recorded from the content image's plain
/// reconstruction, keyed by the plan's injection steps.
#[derive(Debug, Clone)]
pub struct ContentTrace {
    entries: BTreeMap<usize, Tensor>,
}

impl ContentTrace {
    pub fn new(entries: BTreeMap<usize, Tensor>) -> Self {
        ContentTrace { entries }
    }

    /// Runs the plain reconstruction of the content latent once, recording
    /// the bottleneck at every injection step. Also returns the
    /// reconstruction.
    pub fn capture(
        model: &Denoiser,
        params: &DenoiserParams,
        sched: &NoiseSchedule,
        plan: &TimestepPlan,
        content_start: &LatentState,
    ) -> Result<(ContentTrace, Tensor)> {
        let inject: Vec<usize> = plan.inject_steps();
        let mut entries = BTreeMap::new();
        let x0 = reverse_collect(model, params, sched, plan, content_start, |t, out| {
            if inject.contains(&t) {
                entries.insert(t, out.h.clone());
            }
        })?;
        Ok((ContentTrace { entries }, x0))
    }

    pub fn get(&self, t: usize) -> Option<&Tensor> {
        self.entries.get(&t)
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// Checks the keys match the plan's injection steps exactly.
    pub fn validate_for(&self, plan: &TimestepPlan) -> Result<()> {
        let want = plan.inject_steps();
        for t in &want {
            if !self.entries.contains_key(t) {
                return Err(Error::Contract(format!("content trace missing feature at t={t}")));
            }
        }
        if self.entries.len() != want.len() {
            let extra: Vec<usize> = self
                .entries
                .keys()
                .copied()
                .filter(|t| !want.contains(t))
                .collect();
            return Err(Error::Contract(format!(
                "content trace has features at non-injection steps {extra:?}"
            )));
        }
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"HJTR");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (t, tensor) in &self.entries {
            buf.extend_from_slice(&(*t as u32).to_le_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for d in tensor.shape() {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in tensor.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<ContentTrace> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let fail = |msg: &str| Error::Contract(format!("{}: {msg}", path.display()));
        if bytes.len() < 12 || &bytes[0..4] != b"HJTR" {
            return Err(fail("not a content trace file"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != 1 {
            return Err(fail("unsupported content trace version"));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut off = 12usize;
        let take_u32 = |off: &mut usize| -> Result<usize> {
            if *off + 4 > bytes.len() {
                return Err(Error::Contract(format!("{}: truncated trace", path.display())));
            }
            let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap()) as usize;
            *off += 4;
            Ok(v)
        };
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let t = take_u32(&mut off)?;
            let ndim = take_u32(&mut off)?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(take_u32(&mut off)?);
            }
            let n: usize = shape.iter().product();
            if off + 4 * n > bytes.len() {
                return Err(fail("truncated trace payload"));
            }
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                data.push(f32::from_le_bytes(bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap()) as f64);
            }
            off += 4 * n;
            entries.insert(t, Tensor::from_vec(&shape, data));
        }
        if off != bytes.len() {
            return Err(fail("trailing bytes after trace payload"));
        }
        Ok(ContentTrace { entries })
    }
}

/// Which interval a generation step executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Inject,
    Denoise,
    Boost,
}

impl Branch {
    pub fn name(&self) -> &'static str {
        match self {
            Branch::Inject => "inject",
            Branch::Denoise => "denoise",
            Branch::Boost => "boost",
        }
    }
}

/// Per-step record of an injected generation run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub branch: Branch,
    pub h_norm: f64,
    pub h_blend_norm: f64,
    pub dx_norm: f64,
    /// Captured bottleneck and blend, present when feature keeping is on.
    pub features: Option<(Tensor, Tensor)>,
    /// Calibration intermediates, present when feature keeping is on.
    pub calibration: Option<CalibrationIntermediates>,
}

/// Trace of one generation run; enable `keep_features` to retain the per-step
/// tensors for the locality and identity checks.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub keep_features: bool,
    pub steps: Vec<StepRecord>,
}

impl RunTrace {
    pub fn keeping_features() -> Self {
        RunTrace { keep_features: true, steps: Vec::new() }
    }
}

/// Full injected generative loop (feature-map mask, gamma per step, latent
/// calibration, quality boosting).
///
/// Per executed step exactly one branch runs: injection plus calibration for
/// `t >= t_edit`, the plain deterministic update for `t_boost <= t < t_edit`,
/// and the stochastic boosted update for `t < t_boost` (when boosting is on;
/// otherwise those steps are plain too).
pub fn generate(
    model: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    start: &LatentState,
    content: &ContentTrace,
    cfg: &InjectionConfig,
    rng: &mut ChaCha8Rng,
    mut trace: Option<&mut RunTrace>,
) -> Result<Tensor> {
    cfg.validate(sched.t_max())?;
    if start.t != plan.steps()[0] {
        return Err(Error::Contract(format!(
            "generate: state at t={}, plan starts at t={}",
            start.t,
            plan.steps()[0]
        )));
    }
    if plan.t_edit() != cfg.t_edit || plan.t_boost() != cfg.t_boost {
        return Err(Error::Contract(format!(
            "generate: plan intervals (t_edit={}, t_boost={}) disagree with config ({}, {})",
            plan.t_edit(),
            plan.t_boost(),
            cfg.t_edit,
            cfg.t_boost
        )));
    }
    content.validate_for(plan)?;
    let n_inject = plan.inject_steps().len();
    let mut inject_idx = 0usize;
    let mut state = start.clone();

    for (t, t_prev) in plan.pairs() {
        if t >= cfg.t_edit {
            let out = model.forward(params, &state.x, t)?;
            let h_content = content
                .get(t)
                .ok_or_else(|| Error::Contract(format!("content trace missing feature at t={t}")))?;
            let gamma = cfg.gamma_for(inject_idx, n_inject)?;
            let h_blend = masked_blend(&out.h, h_content, &cfg.mask, gamma, cfg.blend_kind)?;
            let h_norm = out.h.norm();
            let h_blend_norm = h_blend.norm();
            let h_kept = trace.as_ref().and_then(|tr| {
                if tr.keep_features {
                    Some((out.h.clone(), h_blend.clone()))
                } else {
                    None
                }
            });
            let (next, inter) = latent_calibration_step_from(
                model, params, sched, &state, t_prev, &h_blend, cfg, out,
            )?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.steps.push(StepRecord {
                    t,
                    t_prev,
                    branch: Branch::Inject,
                    h_norm,
                    h_blend_norm,
                    dx_norm: inter.d_x.norm(),
                    features: h_kept,
                    calibration: if tr.keep_features { Some(inter) } else { None },
                });
            }
            state = next;
            inject_idx += 1;
        } else if !cfg.boost || t >= cfg.t_boost {
            let out = model.forward(params, &state.x, t)?;
            let h_norm = out.h.norm();
            state = ddim_step(sched, &state, &out.eps, t_prev, 0.0, None)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.steps.push(StepRecord {
                    t,
                    t_prev,
                    branch: Branch::Denoise,
                    h_norm,
                    h_blend_norm: h_norm,
                    dx_norm: 0.0,
                    features: None,
                    calibration: None,
                });
            }
        } else {
            let out = model.forward(params, &state.x, t)?;
            let h_norm = out.h.norm();
            // The terminal step has alpha_bar(0) = 1, so sigma vanishes and
            // no noise is drawn there.
            let sigma = sched.sigma_with_eta(t, t_prev, 1.0)?;
            let noise = if sigma > 0.0 {
                let mut z = Tensor::zeros(state.x.shape());
                for v in z.data_mut() {
                    *v = rng.sample(StandardNormal);
                }
                if cfg.boost_sigma_squared {
                    z.scale(sigma);
                }
                Some(z)
            } else {
                None
            };
            state = ddim_step(sched, &state, &out.eps, t_prev, sigma, noise.as_ref())?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.steps.push(StepRecord {
                    t,
                    t_prev,
                    branch: Branch::Boost,
                    h_norm,
                    h_blend_norm: h_norm,
                    dx_norm: 0.0,
                    features: None,
                    calibration: None,
                });
            }
        }
    }
    Ok(state.x)
}
