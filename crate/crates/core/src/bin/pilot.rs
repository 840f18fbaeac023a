// Throwaway pilot used while calibrating training and the acceptance seeds.
// Usage: pilot <extra_steps> [probe]
use hinject::config::{derive_seed, streams, RunConfig};
use hinject::denoiser::{load_checkpoint, save_checkpoint, Denoiser, TrainOptions};
use hinject::diagnostics::{collect_feature_trace, homo_hetero};
use hinject::hspace::GammaSpec;
use hinject::imageio::psnr;
use hinject::sampler::{ddim_invert, generate, reverse, ContentTrace, LatentState};
use hinject::tensor::Tensor;
use hinject::toyset::{color_hist_distance, generate as toy_generate, shape_iou};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

fn main() {
    let extra_steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = RunConfig::default();
    let sched = cfg.build_schedule().unwrap();
    let plan = cfg.build_plan().unwrap();
    let model = Denoiser::new(cfg.denoiser.clone()).unwrap();
    let ckpt = Path::new("/root/pilot_cache/model.ckpt");
    std::fs::create_dir_all("/root/pilot_cache").unwrap();

    let mut params = if ckpt.exists() {
        let (c, p) = load_checkpoint(ckpt).unwrap();
        assert_eq!(c, cfg.denoiser);
        println!("loaded cached checkpoint");
        p
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::TRAIN));
        model.init_params(&mut rng)
    };

    if extra_steps > 0 {
        let train_set = toy_generate(1024, derive_seed(cfg.seed, streams::TRAIN_SET), &cfg.toy_config()).unwrap();
        let images: Vec<Tensor> = train_set.iter().map(|s| s.image.clone()).collect();
        // Continuation rng varies with the current time so chunks differ.
        let mut rng = ChaCha8Rng::seed_from_u64(extra_steps as u64 ^ 0xABCD);
        let opts = TrainOptions { steps: extra_steps, batch_size: cfg.train.batch_size, lr: cfg.train.lr, ..Default::default() };
        let t0 = Instant::now();
        let (p2, losses) = model.train(params, &images, &sched, &opts, &mut rng).unwrap();
        params = p2;
        let w = 100.min(losses.len());
        println!(
            "trained {extra_steps} more steps in {:.0}s, last100 loss={:.4}",
            t0.elapsed().as_secs_f64(),
            losses[losses.len() - w..].iter().sum::<f64>() / w as f64
        );
        save_checkpoint(ckpt, &cfg.denoiser, &params).unwrap();
    }

    // PSNR probe.
    let holdout = toy_generate(16, derive_seed(cfg.seed, 50), &cfg.toy_config()).unwrap();
    let psnrs: Vec<f64> = holdout
        .par_iter()
        .map(|s| {
            let top = ddim_invert(&model, &params, &sched, &plan, &s.image).unwrap();
            let rec = reverse(&model, &params, &sched, &plan, &top).unwrap();
            psnr(&s.image, &rec)
        })
        .collect();
    println!(
        "round-trip psnr mean={:.2} min={:.2}",
        psnrs.iter().sum::<f64>() / psnrs.len() as f64,
        psnrs.iter().cloned().fold(f64::INFINITY, f64::min)
    );

    // Correlation probe with per-level detail.
    let diag = toy_generate(64, derive_seed(cfg.seed, streams::DIAGNOSE_SET), &cfg.toy_config()).unwrap();
    let dimages: Vec<Tensor> = diag.into_iter().map(|s| s.image).collect();
    let trace = collect_feature_trace(&model, &params, &sched, &plan, &dimages).unwrap();
    let report = homo_hetero(&trace, 1).unwrap();
    let t_min = 4 * sched.t_max() / 5;
    for level in 0..3 {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.level == level && r.t >= t_min).collect();
        let h: f64 = rows.iter().map(|r| r.r_homo).sum::<f64>() / rows.len() as f64;
        let e: f64 = rows.iter().map(|r| r.r_hetero).sum::<f64>() / rows.len() as f64;
        println!("level {level}: window r_homo={h:.3} r_hetero={e:.3}");
    }
    let (homo, hetero) = report.window_means(t_min).unwrap();
    println!("window ALL levels: r_homo={homo:.3} r_hetero={hetero:.3} gap={:.3}", homo - hetero);
    // Detail at a few t values, innermost level.
    for row in report.rows.iter().filter(|r| r.level == 2 && (r.t % 200 == 0 || r.t == 980)) {
        println!("  t={} level2 r_homo={:.3} r_hetero={:.3}", row.t, row.r_homo, row.r_hetero);
    }
    // Relative spread of the norms across samples at a few timesteps.
    for t_probe in [200usize, 600, 1000] {
        let hs: Vec<f64> = trace.records().iter().filter(|r| r.t == t_probe).map(|r| r.h_norm).collect();
        let gs: Vec<f64> = trace.records().iter().filter(|r| r.t == t_probe).map(|r| r.g_norms[2]).collect();
        let spread = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
            s / m
        };
        println!("  t={t_probe}: rel spread |h|={:.4} |g2|={:.4}", spread(&hs), spread(&gs));
    }

    // Transfer probe.
    let n_pairs = 8;
    let pool = toy_generate(2 * n_pairs, derive_seed(cfg.seed, streams::EVAL_SET), &cfg.toy_config()).unwrap();
    let (originals, contents) = pool.split_at(n_pairs);
    let prepared: Vec<(LatentState, ContentTrace)> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let top = ddim_invert(&model, &params, &sched, &plan, &originals[i].image).unwrap();
            let ctop = ddim_invert(&model, &params, &sched, &plan, &contents[i].image).unwrap();
            let (tr, _) = ContentTrace::capture(&model, &params, &sched, &plan, &ctop).unwrap();
            (top, tr)
        })
        .collect();
    let injection = cfg.build_injection(plan.inject_steps().len()).unwrap();
    let results: Vec<(f64, f64, f64, f64)> = (0..n_pairs)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::SWEEP_BASE + p as u64));
            let out = generate(&model, &params, &sched, &plan, &prepared[p].0, &prepared[p].1, &injection, &mut rng, None).unwrap();
            (
                shape_iou(&out, &contents[p]).unwrap(),
                shape_iou(&out, &originals[p]).unwrap(),
                color_hist_distance(&out, &originals[p].image).unwrap(),
                color_hist_distance(&out, &contents[p].image).unwrap(),
            )
        })
        .collect();
    let iou_wins = results.iter().filter(|r| r.0 > r.1).count();
    let hist_wins = results.iter().filter(|r| r.2 < r.3).count();
    for (i, r) in results.iter().enumerate() {
        println!(
            "  pair {i}: iou_c={:.3} iou_o={:.3} hist_o={:.3} hist_c={:.3}",
            r.0, r.1, r.2, r.3
        );
    }
    println!("transfer: iou_wins={iou_wins}/{n_pairs} hist_wins={hist_wins}/{n_pairs}");

    for gamma in [0.0, 0.2, 0.4, 0.6] {
        let mut inj = injection.clone();
        inj.gamma = GammaSpec::Constant(gamma);
        inj.boost = false;
        let ious: Vec<f64> = (0..n_pairs)
            .into_par_iter()
            .map(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let out = generate(&model, &params, &sched, &plan, &prepared[p].0, &prepared[p].1, &inj, &mut rng, None).unwrap();
                shape_iou(&out, &contents[p]).unwrap()
            })
            .collect();
        println!("gamma={gamma}: mean iou_content={:.3}", ious.iter().sum::<f64>() / n_pairs as f64);
    }
}
