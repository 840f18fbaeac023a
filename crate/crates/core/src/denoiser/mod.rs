//! Small fixed-architecture U-Net epsilon predictor with an exposed bottleneck
//! and skip features, trained by the standard epsilon-MSE objective.
//!
//! Reverse-mode gradients are hand-written for exactly this op set and checked
//! against central finite differences.

mod layers;
mod net;
mod params;

pub use net::DenoiserOutput;
pub use params::{load_checkpoint, save_checkpoint, ConvBlockParams, DenoiserConfig, DenoiserParams};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Model handle: owns the validated architecture description; parameters are
/// passed explicitly so shared read-only use stays trivially thread-safe.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
}

/// Optimizer settings for [`Denoiser::train`]: adaptive-moment update with
/// bias correction.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 0, batch_size: 16, lr: 2e-4, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8 }
    }
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Denoiser { cfg })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> DenoiserParams {
        DenoiserParams::init(&self.cfg, rng)
    }

    /// All-zero parameters: the epsilon prediction is identically zero, which
    /// doubles as the closed-form stub predictor.
    pub fn zero_params(&self) -> DenoiserParams {
        DenoiserParams::zeros(&self.cfg)
    }

    pub fn bottleneck_shape(&self) -> [usize; 3] {
        self.cfg.bottleneck_shape()
    }

    /// Epsilon prediction with captured bottleneck and skips. Pure and
    /// deterministic for fixed inputs.
    pub fn forward(&self, params: &DenoiserParams, x: &Tensor, t: usize) -> Result<DenoiserOutput> {
        net::forward_with_tape(&self.cfg, params, x, t, None).map(|(out, _)| out)
    }

    /// Same as [`forward`](Self::forward) but replaces the bottleneck
    /// activation with `h_new` before the decoding path. The reported skips
    /// are the unmodified encoder skips.
    pub fn forward_injected(
        &self,
        params: &DenoiserParams,
        x: &Tensor,
        t: usize,
        h_new: &Tensor,
    ) -> Result<DenoiserOutput> {
        net::forward_with_tape(&self.cfg, params, x, t, Some(h_new)).map(|(out, _)| out)
    }

    fn sample_loss_grad(
        &self,
        params: &DenoiserParams,
        sched: &NoiseSchedule,
        x0: &Tensor,
        t: usize,
        noise: &Tensor,
    ) -> (f64, DenoiserParams) {
        let x_t = sched.q_sample(x0, noise, t);
        let (out, tape) =
            net::forward_with_tape(&self.cfg, params, &x_t, t, None).expect("validated inputs");
        let n = out.eps.numel() as f64;
        let diff = out.eps.sub(noise);
        let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
        let d_eps = diff.scaled(2.0 / n);
        let grads = net::backward(&self.cfg, params, &tape, &d_eps);
        (loss, grads)
    }

    /// Epsilon-MSE loss of one noised sample, without gradients.
    pub fn sample_loss(
        &self,
        params: &DenoiserParams,
        sched: &NoiseSchedule,
        x0: &Tensor,
        t: usize,
        noise: &Tensor,
    ) -> Result<f64> {
        let x_t = sched.q_sample(x0, noise, t);
        let out = self.forward(params, &x_t, t)?;
        Ok(out.eps.sub(noise).data().iter().map(|v| v * v).sum::<f64>() / noise.numel() as f64)
    }

    /// Runs `opts.steps` optimizer steps and returns the updated parameters
    /// plus the per-step loss curve. Fully reproducible from the rng state:
    /// all random draws happen on the calling thread and per-sample gradients
    /// are reduced in batch order, so the result does not depend on worker
    /// count. `steps == 0` returns the parameters unchanged.
    pub fn train(
        &self,
        params: DenoiserParams,
        dataset: &[Tensor],
        sched: &NoiseSchedule,
        opts: &TrainOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DenoiserParams, Vec<f64>)> {
        if dataset.is_empty() {
            return Err(Error::Contract("train: dataset must be non-empty".into()));
        }
        let expect = self.cfg.input_shape();
        for (i, img) in dataset.iter().enumerate() {
            if img.shape() != expect {
                return Err(Error::Contract(format!(
                    "train: dataset[{i}] shape {:?}, expected {expect:?}",
                    img.shape()
                )));
            }
        }
        if opts.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        let t_max = sched.t_max();
        let mut params = params;
        let mut m = DenoiserParams::zeros(&self.cfg);
        let mut v = DenoiserParams::zeros(&self.cfg);
        let mut losses = Vec::with_capacity(opts.steps);

        for step in 0..opts.steps {
            // Draw all randomness up front so batch-parallel execution stays
            // bit-reproducible.
            let batch: Vec<(usize, usize, Tensor)> = (0..opts.batch_size)
                .map(|_| {
                    let idx = rng.gen_range(0..dataset.len());
                    let t = rng.gen_range(1..=t_max);
                    let mut noise = Tensor::zeros(&expect);
                    for nv in noise.data_mut() {
                        *nv = rng.sample(StandardNormal);
                    }
                    (idx, t, noise)
                })
                .collect();

            let results: Vec<(f64, DenoiserParams)> = batch
                .par_iter()
                .map(|(idx, t, noise)| self.sample_loss_grad(&params, sched, &dataset[*idx], *t, noise))
                .collect();

            let inv_b = 1.0 / opts.batch_size as f64;
            let mut loss = 0.0;
            let mut grads = DenoiserParams::zeros(&self.cfg);
            for (l, g) in &results {
                loss += l * inv_b;
                for ((_, acc), (_, gt)) in grads.flat_mut().into_iter().zip(g.flat()) {
                    acc.add_scaled(gt, inv_b);
                }
            }

            if !loss.is_finite() {
                let name = grads.first_non_finite().unwrap_or_else(|| "<none>".into());
                return Err(Error::Numerical(format!(
                    "train step {step}: non-finite loss {loss}; first non-finite gradient in {name}"
                )));
            }

            let k = (step + 1) as f64;
            let bc1 = 1.0 - opts.beta1.powf(k);
            let bc2 = 1.0 - opts.beta2.powf(k);
            for ((((_, p), (_, g)), (_, mt)), (_, vt)) in params
                .flat_mut()
                .into_iter()
                .zip(grads.flat())
                .zip(m.flat_mut())
                .zip(v.flat_mut())
            {
                let (pd, gd, md, vd) = (p.data_mut(), g.data(), mt.data_mut(), vt.data_mut());
                for i in 0..pd.len() {
                    md[i] = opts.beta1 * md[i] + (1.0 - opts.beta1) * gd[i];
                    vd[i] = opts.beta2 * vd[i] + (1.0 - opts.beta2) * gd[i] * gd[i];
                    let mhat = md[i] / bc1;
                    let vhat = vd[i] / bc2;
                    pd[i] -= opts.lr * mhat / (vhat.sqrt() + opts.adam_eps);
                }
            }
            losses.push(loss);
        }
        Ok((params, losses))
    }

    /// Maximum relative error between reverse-mode and central-finite-difference
    /// gradients over `n_probes` probed weights, stratified across parameter
    /// tensors. The probe loss is the training objective on one noised sample.
    pub fn grad_check(
        &self,
        params: &DenoiserParams,
        sched: &NoiseSchedule,
        x0: &Tensor,
        t: usize,
        n_probes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if n_probes < 1 {
            return Err(Error::Contract("grad_check: n_probes must be >= 1".into()));
        }
        let mut noise = Tensor::zeros(&self.cfg.input_shape());
        for nv in noise.data_mut() {
            *nv = rng.sample(StandardNormal);
        }
        let x_t = sched.q_sample(x0, &noise, t);
        let (out, tape) = net::forward_with_tape(&self.cfg, params, &x_t, t, None)?;
        let n = out.eps.numel() as f64;
        let d_eps = out.eps.sub(&noise).scaled(2.0 / n);
        let analytic = net::backward(&self.cfg, params, &tape, &d_eps);

        let shapes: Vec<(String, usize)> =
            params.flat().into_iter().map(|(name, t)| (name, t.numel())).collect();
        let mut order: Vec<usize> = (0..shapes.len()).collect();
        order.shuffle(rng);

        let mut max_rel = 0.0f64;
        let mut work = params.clone();
        for probe in 0..n_probes {
            let ti = order[probe % order.len()];
            let (name, len) = &shapes[ti];
            let coord = rng.gen_range(0..*len);
            let rel = self.fd_rel_error(&mut work, &x_t, t, &noise, &analytic, name, coord)?;
            max_rel = max_rel.max(rel);
        }
        Ok(max_rel)
    }

    /// Relative error of a single coordinate's analytic gradient against a
    /// central finite difference. `work` must hold the same values the
    /// analytic gradients were computed for; it is restored before returning.
    fn fd_rel_error(
        &self,
        work: &mut DenoiserParams,
        x_t: &Tensor,
        t: usize,
        target: &Tensor,
        analytic: &DenoiserParams,
        name: &str,
        coord: usize,
    ) -> Result<f64> {
        let orig = work
            .tensor(name)
            .ok_or_else(|| Error::Contract(format!("grad_check: unknown tensor {name}")))?
            .data()[coord];
        let h = 1e-4 * orig.abs().max(1.0);
        let loss_at = |w: &mut DenoiserParams, v: f64| -> Result<f64> {
            w.tensor_mut(name).unwrap().data_mut()[coord] = v;
            let out = net::forward_with_tape(&self.cfg, w, x_t, t, None)?.0;
            Ok(out.eps.sub(target).data().iter().map(|d| d * d).sum::<f64>() / target.numel() as f64)
        };
        let lp = loss_at(work, orig + h)?;
        let lm = loss_at(work, orig - h)?;
        work.tensor_mut(name).unwrap().data_mut()[coord] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic.tensor(name).unwrap().data()[coord];
        Ok((a - fd).abs() / (fd.abs() + 1e-8))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};
    use rand::SeedableRng;

    fn tiny() -> Denoiser {
        Denoiser::new(DenoiserConfig {
            resolution: 8,
            in_channels: 3,
            widths: vec![8, 8],
            bottleneck_channels: 8,
            emb_dim: 8,
            groups: 4,
        })
        .unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(model: &Denoiser, seed: u64) -> Tensor {
        let mut r = rng(seed);
        let mut x = Tensor::zeros(&model.config().input_shape());
        for v in x.data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        x
    }

    fn sched() -> NoiseSchedule {
        make_schedule(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn zero_params_give_bias_only_field() {
        let model = tiny();
        let mut params = model.zero_params();
        let x = random_image(&model, 0);
        let out = model.forward(&params, &x, 5).unwrap();
        assert!(out.eps.data().iter().all(|v| *v == 0.0));
        // A nonzero output bias shifts every pixel of the prediction equally.
        params.out_b.data_mut().fill(0.25);
        let out = model.forward(&params, &x, 5).unwrap();
        assert!(out.eps.data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let x = random_image(&model, 1);
        let a = model.forward(&params, &x, 17).unwrap();
        let b = model.forward(&params, &x, 17).unwrap();
        assert!(a.eps.bit_eq(&b.eps));
        assert!(a.h.bit_eq(&b.h));
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let bad = Tensor::zeros(&[3, 4, 4]);
        let err = model.forward(&params, &bad, 1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let x = random_image(&model, 1);
        let bad_h = Tensor::zeros(&[8, 3, 3]);
        assert!(model.forward_injected(&params, &x, 1, &bad_h).is_err());
    }

    #[test]
    fn identity_injection_matches_plain_forward() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let x = random_image(&model, 2);
        let plain = model.forward(&params, &x, 9).unwrap();
        let injected = model.forward_injected(&params, &x, 9, &plain.h).unwrap();
        assert!(plain.eps.bit_eq(&injected.eps));
        assert!(plain.h.bit_eq(&injected.h));
    }

    #[test]
    fn zero_injection_perturbs_output() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let x = random_image(&model, 3);
        let plain = model.forward(&params, &x, 9).unwrap();
        let zeroed = model
            .forward_injected(&params, &x, 9, &Tensor::zeros(&model.bottleneck_shape()))
            .unwrap();
        assert!(plain.eps.mean_abs_diff(&zeroed.eps) > 1e-9);
    }

    #[test]
    fn injection_leaves_encoder_skips_untouched() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let x = random_image(&model, 4);
        let plain = model.forward(&params, &x, 9).unwrap();
        let doubled = model.forward_injected(&params, &x, 9, &plain.h.scaled(2.0)).unwrap();
        assert!(plain.eps.mean_abs_diff(&doubled.eps) > 1e-9);
        assert_eq!(plain.skips.len(), doubled.skips.len());
        for (a, b) in plain.skips.iter().zip(&doubled.skips) {
            assert!(a.bit_eq(b));
        }
        assert!(plain.h.bit_eq(&doubled.h));
    }

    #[test]
    fn grad_check_covers_every_tensor() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let x0 = random_image(&model, 5);
        let n = params.n_tensors() * 2;
        let err = model.grad_check(&params, &sched(), &x0, 41, n, &mut rng(6)).unwrap();
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn single_probe_on_bias_matches_fd() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let x0 = random_image(&model, 7);
        let s = sched();
        let mut r = rng(8);
        let mut noise = Tensor::zeros(&model.config().input_shape());
        for v in noise.data_mut() {
            *v = r.sample(StandardNormal);
        }
        let x_t = s.q_sample(&x0, &noise, 23);
        let (out, tape) = net::forward_with_tape(model.config(), &params, &x_t, 23, None).unwrap();
        let d_eps = out.eps.sub(&noise).scaled(2.0 / noise.numel() as f64);
        let analytic = net::backward(model.config(), &params, &tape, &d_eps);
        let mut work = params.clone();
        let rel = model
            .fd_rel_error(&mut work, &x_t, 23, &noise, &analytic, "mid.block1.conv.b", 3)
            .unwrap();
        assert!(rel < 1e-4, "bias probe relative error {rel}");
    }

    #[test]
    fn zeroed_gradient_layer_is_detected() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let x0 = random_image(&model, 9);
        let s = sched();
        let mut r = rng(10);
        let mut noise = Tensor::zeros(&model.config().input_shape());
        for v in noise.data_mut() {
            *v = r.sample(StandardNormal);
        }
        let x_t = s.q_sample(&x0, &noise, 23);
        let (out, tape) = net::forward_with_tape(model.config(), &params, &x_t, 23, None).unwrap();
        let d_eps = out.eps.sub(&noise).scaled(2.0 / noise.numel() as f64);
        let mut analytic = net::backward(model.config(), &params, &tape, &d_eps);
        let name = "enc0.block0.conv.w";
        analytic.tensor_mut(name).unwrap().data_mut().fill(0.0);
        let mut work = params.clone();
        // Probe a few coordinates of the sabotaged layer; a zeroed analytic
        // gradient against a nonzero finite difference gives error ~= 1.
        let mut worst = 0.0f64;
        for coord in [0usize, 11, 57] {
            let rel = model
                .fd_rel_error(&mut work, &x_t, 23, &noise, &analytic, name, coord)
                .unwrap();
            worst = worst.max(rel);
        }
        assert!(worst > 0.9, "sabotaged layer not flagged: {worst}");
    }

    #[test]
    fn train_zero_steps_is_noop() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let data = vec![random_image(&model, 11)];
        let opts = TrainOptions { steps: 0, ..Default::default() };
        let (after, losses) = model.train(params.clone(), &data, &sched(), &opts, &mut rng(0)).unwrap();
        assert_eq!(params, after);
        assert!(losses.is_empty());
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let opts = TrainOptions { steps: 1, ..Default::default() };
        assert!(matches!(
            model.train(params, &[], &sched(), &opts, &mut rng(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn train_aborts_on_non_finite_loss() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let mut bad = random_image(&model, 16);
        bad.data_mut()[3] = f64::NAN;
        let opts = TrainOptions { steps: 2, batch_size: 1, ..Default::default() };
        let err = model.train(params, &[bad], &sched(), &opts, &mut rng(0)).unwrap_err();
        match err {
            Error::Numerical(msg) => {
                assert!(msg.contains("step 0"), "{msg}");
                assert!(msg.contains("non-finite"), "{msg}");
            }
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn eps_shape_matches_input_across_configs() {
        for (res, widths, ch) in [(8usize, vec![8, 8], 8usize), (16, vec![8, 16], 12), (32, vec![8, 8, 8], 8)] {
            let model = Denoiser::new(DenoiserConfig {
                resolution: res,
                in_channels: 3,
                widths,
                bottleneck_channels: ch,
                emb_dim: 8,
                groups: 4,
            })
            .unwrap();
            let params = model.init_params(&mut rng(1));
            let x = {
                let mut r = rng(2);
                let mut t = Tensor::zeros(&model.config().input_shape());
                for v in t.data_mut() {
                    *v = r.gen_range(-1.0..1.0);
                }
                t
            };
            let out = model.forward(&params, &x, 3).unwrap();
            assert_eq!(out.eps.shape(), x.shape());
            assert_eq!(out.h.shape(), model.bottleneck_shape());
            assert_eq!(out.skips.len(), model.config().levels());
        }
    }

    #[test]
    fn train_is_bit_reproducible() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let data = vec![random_image(&model, 12), random_image(&model, 13)];
        let opts = TrainOptions { steps: 25, batch_size: 3, ..Default::default() };
        let (a, la) = model.train(params.clone(), &data, &sched(), &opts, &mut rng(42)).unwrap();
        let (b, lb) = model.train(params, &data, &sched(), &opts, &mut rng(42)).unwrap();
        assert_eq!(la, lb);
        for ((_, ta), (_, tb)) in a.flat().into_iter().zip(b.flat()) {
            assert!(ta.bit_eq(tb));
        }
    }

    #[test]
    fn train_single_image_loss_decreases() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let data = vec![random_image(&model, 14)];
        let opts = TrainOptions { steps: 2000, batch_size: 2, lr: 1e-3, ..Default::default() };
        let (_, losses) = model.train(params, &data, &sched(), &opts, &mut rng(0)).unwrap();
        let window = 100;
        let means: Vec<f64> = losses
            .chunks(window)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        assert!(
            means.last().unwrap() < means.first().unwrap(),
            "loss did not decrease: first window {:.4}, last window {:.4}",
            means[0],
            means.last().unwrap()
        );
        let decreasing = means.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(decreasing * 10 >= means.len() * 6, "trend not downward: {means:?}");
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn overfit_single_sample_below_ten_percent() {
        let model = tiny();
        let params = model.init_params(&mut rng(0));
        let data = vec![random_image(&model, 15)];
        let mut r = rng(0);
        // Train in chunks so the test can stop as soon as the bar is met.
        let chunk = TrainOptions { steps: 500, batch_size: 2, lr: 1e-3, ..Default::default() };
        let mut cur = params;
        let mut initial = None;
        let mut reached = false;
        for _ in 0..20 {
            let (next, losses) = model.train(cur, &data, &sched(), &chunk, &mut r).unwrap();
            cur = next;
            let head = losses[..50.min(losses.len())].iter().sum::<f64>() / 50f64.min(losses.len() as f64);
            let tail = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
            let init = *initial.get_or_insert(head);
            if tail < 0.1 * init {
                reached = true;
                break;
            }
        }
        assert!(reached, "loss never fell below 10% of its initial value within 10k steps");
    }
}
