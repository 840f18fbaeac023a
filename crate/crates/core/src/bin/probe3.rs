// Throwaway: criteria 2/9/10 validation on the trained model.
use hinject::config::{derive_seed, streams, RunConfig};
use hinject::denoiser::load_checkpoint;
use hinject::denoiser::Denoiser;
use hinject::hspace::{FeatureMask, GammaSpec, StandardizeMode};
use hinject::sampler::{ddim_invert, generate, reverse, Branch, ContentTrace, RunTrace};
use hinject::toyset::generate as toy_generate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() {
    let cfg = RunConfig::default();
    let sched = cfg.build_schedule().unwrap();
    let plan = cfg.build_plan().unwrap();
    let (dcfg, params) = load_checkpoint(Path::new("/root/pilot_cache/model.ckpt")).unwrap();
    let model = Denoiser::new(dcfg).unwrap();
    let pool = toy_generate(4, derive_seed(cfg.seed, streams::EVAL_SET), &cfg.toy_config()).unwrap();

    // Criterion 9 analogue: self-injection drift across gammas.
    let mut worst = 0.0f64;
    for s in &pool[..2] {
        let top = ddim_invert(&model, &params, &sched, &plan, &s.image).unwrap();
        let (own, recon) = ContentTrace::capture(&model, &params, &sched, &plan, &top).unwrap();
        for gamma in [0.0, 0.3, 0.6, 1.0] {
            let mut inj = cfg.build_injection(plan.inject_steps().len()).unwrap();
            inj.gamma = GammaSpec::Constant(gamma);
            inj.boost = false;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = generate(&model, &params, &sched, &plan, &top, &own, &inj, &mut rng, None).unwrap();
            let d = out.mean_abs_diff(&recon);
            worst = worst.max(d);
            println!("self-inject gamma={gamma}: mean abs {d:.3e}");
        }
    }
    println!("worst self-injection drift: {worst:.3e} (<= 1e-5?)");

    // Criterion 2: omega=1 bitwise equality + identity error.
    let a = &pool[0];
    let b = &pool[1];
    let top = ddim_invert(&model, &params, &sched, &plan, &a.image).unwrap();
    let ctop = ddim_invert(&model, &params, &sched, &plan, &b.image).unwrap();
    let (tr, _) = ContentTrace::capture(&model, &params, &sched, &plan, &ctop).unwrap();
    let mut inj = cfg.build_injection(plan.inject_steps().len()).unwrap();
    inj.omega = 1.0;
    inj.standardize = StandardizeMode::None;
    inj.boost = false;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = generate(&model, &params, &sched, &plan, &top, &tr, &inj, &mut rng, None).unwrap();
    let plain = reverse(&model, &params, &sched, &plan, &top).unwrap();
    println!("omega=1 bitwise equal: {}", out.bit_eq(&plain));

    let mut worst_rel = 0.0f64;
    for omega in [0.001, 0.3, 1.0] {
        let mut inj = cfg.build_injection(plan.inject_steps().len()).unwrap();
        inj.omega = omega;
        inj.standardize = StandardizeMode::None;
        inj.boost = false;
        let mut run = RunTrace::keeping_features();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        generate(&model, &params, &sched, &plan, &top, &tr, &inj, &mut rng, Some(&mut run)).unwrap();
        for rec in run.steps.iter().filter(|r| r.branch == Branch::Inject) {
            let inter = rec.calibration.as_ref().unwrap();
            let ab = sched.alpha_bar(rec.t);
            let closed = inter.d_eps.scaled((omega - 1.0) * (1.0 - ab).sqrt());
            let scale = inter.d_eps.scaled((1.0 - ab).sqrt()).norm().max(1e-12);
            worst_rel = worst_rel.max(inter.d_x.sub(&closed).norm() / scale);
        }
    }
    println!("eq12 identity worst rel: {worst_rel:.3e} (<= 1e-6?)");

    // Criterion 10: masked locality bit-exactness.
    let side = model.config().bottleneck_side();
    let mut vals = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side / 2 {
            vals[r * side + c] = 1.0;
        }
    }
    let mask = FeatureMask::from_values(side, side, vals).unwrap();
    let mut inj = cfg.build_injection(plan.inject_steps().len()).unwrap();
    inj.mask = mask.clone();
    inj.boost = false;
    let mut run = RunTrace::keeping_features();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    generate(&model, &params, &sched, &plan, &top, &tr, &inj, &mut rng, Some(&mut run)).unwrap();
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for rec in run.steps.iter().filter(|r| r.branch == Branch::Inject) {
        let (h, hb) = rec.features.as_ref().unwrap();
        let hw = side * side;
        for ch in 0..h.shape()[0] {
            for i in 0..hw {
                if mask.values()[i] == 0.0 {
                    checked += 1;
                    if h.data()[ch * hw + i].to_bits() != hb.data()[ch * hw + i].to_bits() {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    println!("masked locality: {checked} checked, {mismatches} mismatches");
}
