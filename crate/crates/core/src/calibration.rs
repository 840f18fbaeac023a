//! Latent calibration: converts the effect of a bottleneck injection into a
//! direct modification of the latent, with optional standardization of the
//! injected predicted-x0 and the strength parameter omega.

use crate::denoiser::{Denoiser, DenoiserOutput, DenoiserParams};
use crate::error::{Error, Result};
use crate::hspace::{InjectionConfig, StandardizeMode};
use crate::sampler::{ddim_step, predict_x0, LatentState};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Every intermediate of one calibration step, kept for diagnostics and the
/// algebraic identity checks.
#[derive(Debug, Clone)]
pub struct CalibrationIntermediates {
    pub p_plain: Tensor,
    pub p_injected: Tensor,
    pub p_regularized: Tensor,
    pub d_p: Tensor,
    pub d_eps: Tensor,
    pub d_x: Tensor,
    pub x_calibrated: Tensor,
}

/// Re-standardizes the injected predicted-x0 against the plain one.
///
/// `StdMatch` keeps the injected mean and rescales the centered values so the
/// standard deviation matches the plain tensor. `ScaleLiteral` multiplies the
/// centered values by the plain standard deviation without dividing by the
/// injected one. `None` is the identity.
pub fn regularize_pt(p_injected: &Tensor, p_plain: &Tensor, mode: StandardizeMode) -> Result<Tensor> {
    if p_injected.shape() != p_plain.shape() {
        return Err(Error::Contract(format!(
            "regularize_pt: shape {:?} vs {:?}",
            p_injected.shape(),
            p_plain.shape()
        )));
    }
    match mode {
        StandardizeMode::None => Ok(p_injected.clone()),
        StandardizeMode::StdMatch => {
            let std_plain = p_plain.std();
            if std_plain == 0.0 {
                return Err(Error::Degenerate("regularize_pt: p_plain has zero std".into()));
            }
            let std_inj = p_injected.std();
            if std_inj == 0.0 {
                return Err(Error::Degenerate("regularize_pt: p_injected has zero std".into()));
            }
            let mean_inj = p_injected.mean();
            let scale = std_plain / std_inj;
            let data = p_injected
                .data()
                .iter()
                .map(|v| mean_inj + (v - mean_inj) * scale)
                .collect();
            Ok(Tensor::from_vec(p_injected.shape(), data))
        }
        StandardizeMode::ScaleLiteral => {
            let std_plain = p_plain.std();
            if std_plain == 0.0 {
                return Err(Error::Degenerate("regularize_pt: p_plain has zero std".into()));
            }
            let mean_inj = p_injected.mean();
            let data = p_injected
                .data()
                .iter()
                .map(|v| mean_inj + (v - mean_inj) * std_plain)
                .collect();
            Ok(Tensor::from_vec(p_injected.shape(), data))
        }
    }
}

/// One calibrated reverse step `t -> t_prev`:
/// inject `h_blend`, regularize the injected predicted-x0, form
/// `dx = sqrt(abar_t) dP + omega sqrt(1-abar_t) d_eps`, shift the latent, and
/// take a plain deterministic DDIM step from the shifted latent with a fresh
/// epsilon evaluation.
///
/// Two exact identity cases short-circuit to a zero `dx`: an identity blend
/// (`h_blend` bit-equal to the captured bottleneck), and `omega = 1` with
/// standardization off, where the update is algebraically zero. Both keep the
/// trajectory bit-identical to the uncalibrated one.
pub fn latent_calibration_step(
    model: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    state: &LatentState,
    t_prev: usize,
    h_blend: &Tensor,
    cfg: &InjectionConfig,
) -> Result<(LatentState, CalibrationIntermediates)> {
    let plain = model.forward(params, &state.x, state.t)?;
    latent_calibration_step_from(model, params, sched, state, t_prev, h_blend, cfg, plain)
}

/// Same as [`latent_calibration_step`] but reuses an already-computed plain
/// forward pass of the current latent.
pub fn latent_calibration_step_from(
    model: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    state: &LatentState,
    t_prev: usize,
    h_blend: &Tensor,
    cfg: &InjectionConfig,
    plain: DenoiserOutput,
) -> Result<(LatentState, CalibrationIntermediates)> {
    cfg.validate(sched.t_max())?;
    let t = state.t;
    let omega = cfg.omega;

    if h_blend.bit_eq(&plain.h) {
        // Identity injection: the injected forward would reproduce the plain
        // epsilon bit for bit, so every delta is exactly zero.
        let p_plain = predict_x0(sched, &state.x, &plain.eps, t)?;
        let zero = Tensor::zeros(state.x.shape());
        let inter = CalibrationIntermediates {
            p_injected: p_plain.clone(),
            p_regularized: p_plain.clone(),
            d_p: zero.clone(),
            d_eps: zero.clone(),
            d_x: zero,
            x_calibrated: state.x.clone(),
            p_plain,
        };
        let next = ddim_step(sched, state, &plain.eps, t_prev, 0.0, None)?;
        return Ok((next, inter));
    }

    let injected = model.forward_injected(params, &state.x, t, h_blend)?;
    let p_plain = predict_x0(sched, &state.x, &plain.eps, t)?;
    let p_injected = predict_x0(sched, &state.x, &injected.eps, t)?;
    let p_regularized = regularize_pt(&p_injected, &p_plain, cfg.standardize)?;
    let d_p = p_regularized.sub(&p_plain);
    let d_eps = injected.eps.sub(&plain.eps);

    let d_x = if omega == 1.0 && cfg.standardize == StandardizeMode::None {
        // dx = sqrt(abar) dP + sqrt(1-abar) d_eps collapses to zero exactly;
        // evaluating the algebraic limit keeps the trajectory bit-equal to
        // the plain one.
        Tensor::zeros(state.x.shape())
    } else {
        let ab = sched.alpha_bar(t);
        let mut dx = d_p.scaled(ab.sqrt());
        dx.add_scaled(&d_eps, omega * (1.0 - ab).sqrt());
        dx
    };

    let x_calibrated = state.x.add(&d_x);
    let calibrated_state = LatentState { x: x_calibrated.clone(), t };
    let eps_fresh = if x_calibrated.bit_eq(&state.x) {
        plain.eps.clone()
    } else {
        model.forward(params, &x_calibrated, t)?.eps
    };
    let next = ddim_step(sched, &calibrated_state, &eps_fresh, t_prev, 0.0, None)?;

    let inter = CalibrationIntermediates {
        p_plain,
        p_injected,
        p_regularized,
        d_p,
        d_eps,
        d_x,
        x_calibrated,
    };
    Ok((next, inter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::hspace::{BlendKind, FeatureMask, GammaSpec};
    use crate::schedule::{make_schedule, ScheduleKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Denoiser, DenoiserParams, NoiseSchedule) {
        let model = Denoiser::new(DenoiserConfig {
            resolution: 8,
            in_channels: 3,
            widths: vec![8, 8],
            bottleneck_channels: 8,
            emb_dim: 8,
            groups: 4,
        })
        .unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let sched = make_schedule(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        (model, params, sched)
    }

    fn cfg(omega: f64, mode: StandardizeMode) -> InjectionConfig {
        InjectionConfig {
            gamma: GammaSpec::Constant(0.5),
            omega,
            t_edit: 40,
            t_boost: 20,
            mask: FeatureMask::full(2, 2),
            blend_kind: BlendKind::Slerp,
            standardize: mode,
            boost: false,
            boost_sigma_squared: false,
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn regularize_identity_when_stats_match() {
        let p = rand_t(&[3, 4, 4], 1);
        let out = regularize_pt(&p, &p, StandardizeMode::StdMatch).unwrap();
        assert!(out.mean_abs_diff(&p) < 1e-12);
        let out = regularize_pt(&p, &p, StandardizeMode::None).unwrap();
        assert!(out.bit_eq(&p));
    }

    #[test]
    fn regularize_std_match_halves_doubled_spread() {
        let p_plain = rand_t(&[2, 4, 4], 2);
        let p_inj = p_plain.scaled(2.0);
        let out = regularize_pt(&p_inj, &p_plain, StandardizeMode::StdMatch).unwrap();
        assert!((out.std() - p_plain.std()).abs() < 1e-12);
        assert!((out.mean() - p_inj.mean()).abs() < 1e-12);
        // Direct oracle: mean_inj + (p_inj - mean_inj) / 2.
        let mean_inj = p_inj.mean();
        for (o, v) in out.data().iter().zip(p_inj.data()) {
            let want = mean_inj + (v - mean_inj) * 0.5;
            assert!((o - want).abs() < 1e-12);
        }
    }

    #[test]
    fn regularize_rejects_zero_std() {
        let flat = Tensor::full(&[2, 2], 0.7);
        let p = rand_t(&[2, 2], 3);
        assert!(matches!(
            regularize_pt(&p, &flat, StandardizeMode::StdMatch),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn scale_literal_multiplies_without_dividing() {
        let p_plain = rand_t(&[2, 3, 3], 4);
        let p_inj = rand_t(&[2, 3, 3], 5);
        let out = regularize_pt(&p_inj, &p_plain, StandardizeMode::ScaleLiteral).unwrap();
        let mu = p_inj.mean();
        let s = p_plain.std();
        for (o, v) in out.data().iter().zip(p_inj.data()) {
            assert!((o - (mu + (v - mu) * s)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_injection_gives_zero_dx_any_omega_and_mode() {
        let (model, params, sched) = setup();
        let x = rand_t(&[3, 8, 8], 6);
        let state = LatentState { x, t: 60 };
        let h = model.forward(&params, &state.x, 60).unwrap().h;
        for mode in [StandardizeMode::StdMatch, StandardizeMode::ScaleLiteral, StandardizeMode::None] {
            for omega in [0.01, 0.3, 1.0] {
                let (next, inter) = latent_calibration_step(
                    &model, &params, &sched, &state, 40, &h, &cfg(omega, mode),
                )
                .unwrap();
                assert!(inter.d_x.data().iter().all(|v| *v == 0.0));
                assert!(inter.d_eps.data().iter().all(|v| *v == 0.0));
                let plain_eps = model.forward(&params, &state.x, 60).unwrap().eps;
                let plain_next = ddim_step(&sched, &state, &plain_eps, 40, 0.0, None).unwrap();
                assert!(next.x.bit_eq(&plain_next.x));
            }
        }
    }

    #[test]
    fn eq12_identity_without_standardization() {
        let (model, params, sched) = setup();
        let x = rand_t(&[3, 8, 8], 7);
        let state = LatentState { x, t: 60 };
        let out = model.forward(&params, &state.x, 60).unwrap();
        let h_blend = out.h.scaled(1.3);
        for omega in [0.001, 0.3, 0.7, 1.0] {
            let (_, inter) = latent_calibration_step(
                &model, &params, &sched, &state, 40, &h_blend, &cfg(omega, StandardizeMode::None),
            )
            .unwrap();
            let ab = sched.alpha_bar(60);
            let closed = inter.d_eps.scaled((omega - 1.0) * (1.0 - ab).sqrt());
            let scale = inter.d_eps.scaled((1.0 - ab).sqrt()).norm();
            let err = inter.d_x.sub(&closed).norm();
            assert!(err <= 1e-6 * scale.max(1e-12), "omega {omega}: err {err}, scale {scale}");
        }
    }

    #[test]
    fn omega_one_without_standardization_is_bitwise_plain() {
        let (model, params, sched) = setup();
        let x = rand_t(&[3, 8, 8], 8);
        let state = LatentState { x, t: 60 };
        let out = model.forward(&params, &state.x, 60).unwrap();
        let h_blend = out.h.scaled(0.5);
        let (next, inter) = latent_calibration_step(
            &model, &params, &sched, &state, 40, &h_blend, &cfg(1.0, StandardizeMode::None),
        )
        .unwrap();
        assert!(inter.d_x.data().iter().all(|v| *v == 0.0));
        let plain_next = ddim_step(&sched, &state, &out.eps, 40, 0.0, None).unwrap();
        assert!(next.x.bit_eq(&plain_next.x));
        // The deltas themselves are real.
        assert!(inter.d_eps.norm() > 0.0);
    }

    #[test]
    fn standardization_matches_plain_std() {
        let (model, params, sched) = setup();
        let x = rand_t(&[3, 8, 8], 9);
        let state = LatentState { x, t: 60 };
        let out = model.forward(&params, &state.x, 60).unwrap();
        let h_blend = out.h.scaled(1.7);
        let (_, inter) = latent_calibration_step(
            &model, &params, &sched, &state, 40, &h_blend, &cfg(0.3, StandardizeMode::StdMatch),
        )
        .unwrap();
        let rel = (inter.p_regularized.std() - inter.p_plain.std()).abs() / inter.p_plain.std();
        assert!(rel <= 1e-6, "std mismatch {rel}");
        assert!((inter.p_regularized.mean() - inter.p_injected.mean()).abs() < 1e-9);
        // x_calibrated = x + dx exactly.
        let want = state.x.add(&inter.d_x);
        assert!(inter.x_calibrated.bit_eq(&want));
    }

    #[test]
    fn omega_bounds_enforced() {
        let (model, params, sched) = setup();
        let x = rand_t(&[3, 8, 8], 10);
        let state = LatentState { x, t: 60 };
        let h = model.forward(&params, &state.x, 60).unwrap().h;
        for bad in [0.0, 1e-4, 1.5, -0.3] {
            let c = cfg(bad, StandardizeMode::None);
            assert!(latent_calibration_step(&model, &params, &sched, &state, 40, &h, &c).is_err());
        }
    }
}
