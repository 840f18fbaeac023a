//! Bottleneck blending primitives: norm-matched Slerp, norm-matched Lerp,
//! masked local blending, gamma schedules, and the cumulative-injection
//! closed form.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Angle below which Slerp falls back to norm-matched Lerp (numerically
/// identical there), and margin from pi at which inputs are rejected as
/// antiparallel.
const DEGENERATE_ANGLE: f64 = 1e-4;

/// How the blended feature is formed from the original and content tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendKind {
    /// Norm-matched spherical interpolation.
    Slerp,
    /// Lerp of norm-matched inputs, rescaled back to the original norm.
    LerpNorm,
    /// Plain Lerp of norm-matched inputs; does not restore the norm.
    Lerp,
}

impl BlendKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "slerp" => Ok(BlendKind::Slerp),
            "lerp_norm" => Ok(BlendKind::LerpNorm),
            "lerp" => Ok(BlendKind::Lerp),
            other => Err(Error::Config(format!(
                "blend_kind must be one of slerp|lerp_norm|lerp, got {other}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlendKind::Slerp => "slerp",
            BlendKind::LerpNorm => "lerp_norm",
            BlendKind::Lerp => "lerp",
        }
    }
}

/// How the injected predicted-x0 is re-standardized during latent calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StandardizeMode {
    /// Match the injected tensor's standard deviation to the plain one while
    /// keeping the injected mean.
    StdMatch,
    /// Literal scale-by-sigma variant: multiply centered values by the plain
    /// standard deviation without dividing by the injected one.
    ScaleLiteral,
    /// No standardization.
    None,
}

impl StandardizeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "std_match" => Ok(StandardizeMode::StdMatch),
            "scale_literal" => Ok(StandardizeMode::ScaleLiteral),
            "none" => Ok(StandardizeMode::None),
            other => Err(Error::Config(format!(
                "standardize must be one of std_match|scale_literal|none, got {other}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StandardizeMode::StdMatch => "std_match",
            StandardizeMode::ScaleLiteral => "scale_literal",
            StandardizeMode::None => "none",
        }
    }
}

/// Per-step gamma values, either constant or varying linearly over the
/// injection steps while pinning the cumulative injected fraction.
#[derive(Debug, Clone)]
pub struct GammaSchedule {
    kind: GammaScheduleKind,
    total_amount: f64,
    per_step: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaScheduleKind {
    Constant,
    Decreasing,
    Increasing,
}

impl GammaScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(GammaScheduleKind::Constant),
            "decreasing" => Ok(GammaScheduleKind::Decreasing),
            "increasing" => Ok(GammaScheduleKind::Increasing),
            other => Err(Error::Config(format!(
                "gamma schedule kind must be constant|decreasing|increasing, got {other}"
            ))),
        }
    }
}

impl GammaSchedule {
    pub fn kind(&self) -> GammaScheduleKind {
        self.kind
    }

    pub fn total_amount(&self) -> f64 {
        self.total_amount
    }

    /// Gamma for the `i`-th injection step (0-based, execution order).
    pub fn gamma_at(&self, i: usize) -> f64 {
        self.per_step[i.min(self.per_step.len() - 1)]
    }

    pub fn per_step(&self) -> &[f64] {
        &self.per_step
    }
}

fn checked_norm(t: &Tensor, label: &str) -> Result<f64> {
    let n = t.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!("{label} has zero or non-finite norm")));
    }
    Ok(n)
}

/// Rescales `content` to the norm of `h` and spherically interpolates from
/// `h` toward it with coefficient `gamma`, treating both tensors as single
/// flattened vectors. The result keeps the norm of `h`.
pub fn slerp_norm_matched(h: &Tensor, content: &Tensor, gamma: f64) -> Result<Tensor> {
    check_gamma(gamma)?;
    if h.shape() != content.shape() {
        return Err(Error::Contract(format!(
            "blend: shape {:?} vs {:?}",
            h.shape(),
            content.shape()
        )));
    }
    let hn = checked_norm(h, "h")?;
    let cn = checked_norm(content, "h_content")?;
    if gamma == 0.0 {
        return Ok(h.clone());
    }
    let matched = content.scaled(hn / cn);
    if gamma == 1.0 {
        return Ok(matched);
    }
    let mn = matched.norm();
    let cosang = (h.dot(&matched) / (hn * mn)).clamp(-1.0, 1.0);
    let angle = cosang.acos();
    if angle < DEGENERATE_ANGLE {
        return lerp_norm_matched(h, content, gamma);
    }
    if angle > std::f64::consts::PI - DEGENERATE_ANGLE {
        return Err(Error::Degenerate(
            "slerp is ill-defined for antiparallel inputs".into(),
        ));
    }
    let sin = angle.sin();
    let wa = ((1.0 - gamma) * angle).sin() / sin;
    let wb = (gamma * angle).sin() / sin;
    let mut out = h.scaled(wa);
    out.add_scaled(&matched, wb);
    Ok(out)
}

/// Lerp between `h` and the norm-matched content, rescaled back to the norm
/// of `h`. Identical to Slerp at the endpoints and in the small-angle limit.
pub fn lerp_norm_matched(h: &Tensor, content: &Tensor, gamma: f64) -> Result<Tensor> {
    let mut out = lerp_matched_inputs(h, content, gamma)?;
    if gamma == 0.0 || gamma == 1.0 {
        return Ok(out);
    }
    let hn = h.norm();
    let rn = checked_norm(&out, "lerp result")?;
    out.scale(hn / rn);
    Ok(out)
}

/// Plain Lerp of norm-matched inputs; the norm of the result is not restored.
pub fn lerp_plain(h: &Tensor, content: &Tensor, gamma: f64) -> Result<Tensor> {
    lerp_matched_inputs(h, content, gamma)
}

fn lerp_matched_inputs(h: &Tensor, content: &Tensor, gamma: f64) -> Result<Tensor> {
    check_gamma(gamma)?;
    if h.shape() != content.shape() {
        return Err(Error::Contract(format!(
            "blend: shape {:?} vs {:?}",
            h.shape(),
            content.shape()
        )));
    }
    let hn = checked_norm(h, "h")?;
    let cn = checked_norm(content, "h_content")?;
    if gamma == 0.0 {
        return Ok(h.clone());
    }
    let matched = content.scaled(hn / cn);
    if gamma == 1.0 {
        return Ok(matched);
    }
    let mut out = h.scaled(1.0 - gamma);
    out.add_scaled(&matched, gamma);
    Ok(out)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must be in [0,1], got {gamma}")));
    }
    Ok(())
}

pub fn blend(h: &Tensor, content: &Tensor, gamma: f64, kind: BlendKind) -> Result<Tensor> {
    match kind {
        BlendKind::Slerp => slerp_norm_matched(h, content, gamma),
        BlendKind::LerpNorm => lerp_norm_matched(h, content, gamma),
        BlendKind::Lerp => lerp_plain(h, content, gamma),
    }
}

/// Binary mask on the bottleneck spatial grid, broadcast over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMask {
    side_h: usize,
    side_w: usize,
    values: Vec<f64>,
}

impl FeatureMask {
    pub fn full(side_h: usize, side_w: usize) -> Self {
        FeatureMask { side_h, side_w, values: vec![1.0; side_h * side_w] }
    }

    pub fn from_values(side_h: usize, side_w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != side_h * side_w {
            return Err(Error::Config(format!(
                "mask has {} entries, expected {}x{}",
                values.len(),
                side_h,
                side_w
            )));
        }
        if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Config("mask entries must be 0 or 1".into()));
        }
        Ok(FeatureMask { side_h, side_w, values })
    }

    /// Loads a plain-text grid of whitespace-separated 0/1 rows.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|tok| match tok {
                    "0" => Ok(0.0),
                    "1" => Ok(1.0),
                    other => Err(Error::Config(format!(
                        "{}: mask entries must be 0 or 1, got {other}",
                        path.display()
                    ))),
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Config(format!("{}: empty mask file", path.display())));
        }
        let w = rows[0].len();
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Config(format!("{}: ragged mask rows", path.display())));
        }
        let h = rows.len();
        Ok(FeatureMask { side_h: h, side_w: w, values: rows.into_iter().flatten().collect() })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.side_h, self.side_w)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_all_ones(&self) -> bool {
        self.values.iter().all(|v| *v == 1.0)
    }

    pub fn is_all_zeros(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|v| **v == 1.0).count()
    }
}

/// Blends only the masked region: entries where the mask is zero are returned
/// bit-identical to `h`; the masked sub-vectors are blended with the norm
/// matching computed over the masked region only. An all-zero mask returns
/// `h` unchanged.
pub fn masked_blend(
    h: &Tensor,
    content: &Tensor,
    mask: &FeatureMask,
    gamma: f64,
    kind: BlendKind,
) -> Result<Tensor> {
    check_gamma(gamma)?;
    if h.shape() != content.shape() {
        return Err(Error::Contract(format!(
            "masked_blend: shape {:?} vs {:?}",
            h.shape(),
            content.shape()
        )));
    }
    if h.shape().len() != 3 {
        return Err(Error::Contract(format!(
            "masked_blend expects a [C,H,W] tensor, got {:?}",
            h.shape()
        )));
    }
    let (c, gh, gw) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    if mask.shape() != (gh, gw) {
        return Err(Error::Contract(format!(
            "mask shape {:?} does not match bottleneck grid {}x{}",
            mask.shape(),
            gh,
            gw
        )));
    }
    if mask.is_all_zeros() {
        return Ok(h.clone());
    }
    if mask.is_all_ones() {
        return blend(h, content, gamma, kind);
    }
    let hw = gh * gw;
    let picked: Vec<usize> = (0..hw).filter(|i| mask.values()[*i] == 1.0).collect();
    let mut h_sub = Vec::with_capacity(c * picked.len());
    let mut c_sub = Vec::with_capacity(c * picked.len());
    for ch in 0..c {
        for &i in &picked {
            h_sub.push(h.data()[ch * hw + i]);
            c_sub.push(content.data()[ch * hw + i]);
        }
    }
    let h_sub = Tensor::from_vec(&[h_sub.len()], h_sub);
    let c_sub = Tensor::from_vec(&[c_sub.len()], c_sub);
    let blended = blend(&h_sub, &c_sub, gamma, kind)?;
    let mut out = h.clone();
    let mut k = 0;
    for ch in 0..c {
        for &i in &picked {
            out.data_mut()[ch * hw + i] = blended.data()[k];
            k += 1;
        }
    }
    Ok(out)
}

/// Closed-form split of the recursive constant-gamma blend after `n` steps:
/// the surviving original fraction `(1-gamma)^n` and the accumulated content
/// fraction `1 - (1-gamma)^n`.
pub fn cumulative_content_fraction(gamma: f64, n: usize) -> Result<(f64, f64)> {
    check_gamma(gamma)?;
    let original = (1.0 - gamma).powi(n as i32);
    Ok((original, 1.0 - original))
}

/// Builds a gamma schedule over `n_steps` injection steps whose recursive
/// blend leaves an original fraction of exactly `1 - total_amount`.
///
/// The decreasing/increasing kinds vary gamma linearly by +-50% around a mean
/// solved by bisection on the product constraint.
pub fn build_gamma_schedule(
    kind: GammaScheduleKind,
    total_amount: f64,
    n_steps: usize,
) -> Result<GammaSchedule> {
    if !(total_amount > 0.0 && total_amount < 1.0) {
        return Err(Error::Config(format!(
            "gamma schedule total_amount must be in (0,1), got {total_amount}"
        )));
    }
    if n_steps < 1 {
        return Err(Error::Config("gamma schedule needs n_steps >= 1".into()));
    }
    let shape: Vec<f64> = match kind {
        GammaScheduleKind::Constant => vec![0.0; n_steps],
        GammaScheduleKind::Decreasing => linspace_centered(n_steps),
        GammaScheduleKind::Increasing => {
            let mut v = linspace_centered(n_steps);
            v.reverse();
            v
        }
    };
    let gammas_for = |mean: f64| -> Vec<f64> {
        shape.iter().map(|u| mean * (1.0 + 0.5 * u)).collect()
    };
    let residual = |mean: f64| -> f64 {
        let prod: f64 = gammas_for(mean).iter().map(|g| 1.0 - g).product();
        prod - (1.0 - total_amount)
    };
    // The surviving product is monotone decreasing in the mean; bisect on
    // the largest mean that keeps every per-step gamma inside [0,1].
    let mut hi = 1.0f64;
    for u in &shape {
        let cap = 1.0 / (1.0 + 0.5 * (*u).max(0.0));
        hi = hi.min(cap);
    }
    let mut lo = 0.0f64;
    if residual(hi) > 0.0 {
        return Err(Error::Config(format!(
            "gamma schedule infeasible: total_amount {total_amount} unreachable in {n_steps} steps"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mean = 0.5 * (lo + hi);
    let per_step = gammas_for(mean);
    if per_step.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(Error::Config(
            "gamma schedule infeasible: per-step gamma left [0,1]".into(),
        ));
    }
    let achieved = 1.0 - per_step.iter().map(|g| 1.0 - g).product::<f64>();
    if (achieved - total_amount).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "gamma schedule solve failed: achieved cumulative fraction {achieved}, wanted {total_amount}"
        )));
    }
    Ok(GammaSchedule { kind, total_amount, per_step })
}

fn linspace_centered(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| 1.0 - 2.0 * i as f64 / (n - 1) as f64).collect()
}

/// Smallest accepted calibration strength; omega is undefined at zero.
pub const MIN_OMEGA: f64 = 1e-3;

/// Content-injection ratio: one value for every step or a per-step schedule.
#[derive(Debug, Clone)]
pub enum GammaSpec {
    Constant(f64),
    Schedule(GammaSchedule),
}

impl GammaSpec {
    pub fn constant_value(&self) -> Option<f64> {
        match self {
            GammaSpec::Constant(g) => Some(*g),
            GammaSpec::Schedule(_) => None,
        }
    }
}

/// Everything that shapes one injected generation run.
#[derive(Debug, Clone)]
pub struct InjectionConfig {
    pub gamma: GammaSpec,
    pub omega: f64,
    pub t_edit: usize,
    pub t_boost: usize,
    pub mask: FeatureMask,
    pub blend_kind: BlendKind,
    pub standardize: StandardizeMode,
    /// Stochastic quality boosting for steps below `t_boost`.
    pub boost: bool,
    /// Scale the boost noise by sigma twice instead of once.
    pub boost_sigma_squared: bool,
}

impl InjectionConfig {
    /// Library defaults: gamma 0.6, omega 0.3, t_edit = 0.4 T, t_boost = 0.2 T,
    /// full mask, Slerp, std-matching, boosting on.
    pub fn defaults(t_max: usize, bottleneck_side: usize) -> Self {
        InjectionConfig {
            gamma: GammaSpec::Constant(0.6),
            omega: 0.3,
            t_edit: (2 * t_max) / 5,
            t_boost: t_max / 5,
            mask: FeatureMask::full(bottleneck_side, bottleneck_side),
            blend_kind: BlendKind::Slerp,
            standardize: StandardizeMode::StdMatch,
            boost: true,
            boost_sigma_squared: false,
        }
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if let GammaSpec::Constant(g) = &self.gamma {
            check_gamma(*g)?;
        }
        if !(self.omega >= MIN_OMEGA && self.omega <= 1.0) {
            return Err(Error::Config(format!(
                "omega must be in [{MIN_OMEGA}, 1], got {}",
                self.omega
            )));
        }
        if !(self.t_boost < self.t_edit && self.t_edit <= t_max) {
            return Err(Error::Config(format!(
                "need t_boost < t_edit <= T, got t_boost={}, t_edit={}, T={t_max}",
                self.t_boost, self.t_edit
            )));
        }
        Ok(())
    }

    /// Gamma for the `idx`-th of `n_inject` injection steps. A schedule must
    /// have been built for exactly `n_inject` steps.
    pub fn gamma_for(&self, idx: usize, n_inject: usize) -> Result<f64> {
        match &self.gamma {
            GammaSpec::Constant(g) => Ok(*g),
            GammaSpec::Schedule(s) => {
                if s.per_step().len() != n_inject {
                    return Err(Error::Config(format!(
                        "gamma schedule built for {} steps, plan has {n_inject} injection steps",
                        s.per_step().len()
                    )));
                }
                Ok(s.gamma_at(idx))
            }
        }
    }
}
