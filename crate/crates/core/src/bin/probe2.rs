// Throwaway: generative-trace correlations + palette inspection.
use hinject::config::{derive_seed, streams, RunConfig};
use hinject::denoiser::{load_checkpoint, Denoiser};
use hinject::diagnostics::{homo_hetero, FeatureTrace, TraceRecord};
use hinject::hspace::{GammaSpec, StandardizeMode};
use hinject::imageio::write_ppm;
use hinject::sampler::{ddim_invert, generate, reverse, reverse_collect, ContentTrace, LatentState};
use hinject::tensor::Tensor;
use hinject::toyset::{color_hist_distance, generate as toy_generate, luminance, shape_iou};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::path::Path;

fn mean_color(img: &Tensor) -> [f64; 3] {
    let plane = img.shape()[1] * img.shape()[2];
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = img.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    out
}

fn main() {
    let cfg = RunConfig::default();
    let sched = cfg.build_schedule().unwrap();
    let plan = cfg.build_plan().unwrap();
    let (dcfg, params) = load_checkpoint(Path::new("/root/pilot_cache/model.ckpt")).unwrap();
    let model = Denoiser::new(dcfg).unwrap();

    // --- Generative traces: norms along reverse from pure noise. ---
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::DIAGNOSE_SET));
    let starts: Vec<LatentState> = (0..64)
        .map(|_| {
            let mut x = Tensor::zeros(&model.config().input_shape());
            for v in x.data_mut() {
                *v = rng.sample(StandardNormal);
            }
            LatentState { x, t: plan.steps()[0] }
        })
        .collect();
    let per: Vec<Vec<TraceRecord>> = starts
        .par_iter()
        .enumerate()
        .map(|(id, st)| {
            let mut recs = Vec::new();
            reverse_collect(&model, &params, &sched, &plan, st, |t, out| {
                recs.push(TraceRecord {
                    sample_id: id,
                    t,
                    h_norm: out.h.norm(),
                    g_norms: out.skips.iter().map(|g| g.norm()).collect(),
                });
            })
            .unwrap();
            recs
        })
        .collect();
    let mut trace = FeatureTrace::new();
    for recs in per {
        for r in recs {
            trace.add(r).unwrap();
        }
    }
    let report = homo_hetero(&trace, 1).unwrap();
    let t_min = 4 * sched.t_max() / 5;
    let (homo, hetero) = report.window_means(t_min).unwrap();
    println!("GENERATIVE window gap: r_homo={homo:.3} r_hetero={hetero:.3} gap={:.3}", homo - hetero);
    for level in 0..3 {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.level == level && r.t >= t_min).collect();
        let h: f64 = rows.iter().map(|r| r.r_homo).sum::<f64>() / rows.len() as f64;
        let e: f64 = rows.iter().map(|r| r.r_hetero).sum::<f64>() / rows.len() as f64;
        println!("  level {level}: r_homo={h:.3} r_hetero={e:.3}");
    }
    for row in report.rows.iter().filter(|r| r.level == 2 && (r.t % 200 == 0 || r.t == 980)) {
        println!("  t={} level2 r_homo={:.3} r_hetero={:.3}", row.t, row.r_homo, row.r_hetero);
    }

    // --- Palette inspection on 4 pairs, boost off. ---
    std::fs::create_dir_all("/root/pilot_cache/imgs").unwrap();
    let pool = toy_generate(8, derive_seed(cfg.seed, streams::EVAL_SET), &cfg.toy_config()).unwrap();
    let (originals, contents) = pool.split_at(4);
    for p in 0..4 {
        let top = ddim_invert(&model, &params, &sched, &plan, &originals[p].image).unwrap();
        let ctop = ddim_invert(&model, &params, &sched, &plan, &contents[p].image).unwrap();
        let (tr, _) = ContentTrace::capture(&model, &params, &sched, &plan, &ctop).unwrap();
        let recon = reverse(&model, &params, &sched, &plan, &top).unwrap();
        let mut inj = cfg.build_injection(plan.inject_steps().len()).unwrap();
        inj.boost = false;
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let result = generate(&model, &params, &sched, &plan, &top, &tr, &inj, &mut rng2, None).unwrap();
        inj.standardize = StandardizeMode::None;
        let mut rng3 = ChaCha8Rng::seed_from_u64(1);
        let result_nostd = generate(&model, &params, &sched, &plan, &top, &tr, &inj, &mut rng3, None).unwrap();
        let dir = Path::new("/root/pilot_cache/imgs");
        write_ppm(&dir.join(format!("p{p}_orig.ppm")), &originals[p].image).unwrap();
        write_ppm(&dir.join(format!("p{p}_content.ppm")), &contents[p].image).unwrap();
        write_ppm(&dir.join(format!("p{p}_recon.ppm")), &recon).unwrap();
        write_ppm(&dir.join(format!("p{p}_result.ppm")), &result).unwrap();
        println!(
            "pair {p}: orig bg={:?} fg={:?} lum_o={:.2}/{:.2}",
            originals[p].bg, originals[p].fg,
            luminance(&originals[p].bg), luminance(&originals[p].fg)
        );
        println!(
            "  mean colors: orig={:?} recon={:?} result={:?}",
            mean_color(&originals[p].image).map(|v| (v * 100.0).round() / 100.0),
            mean_color(&recon).map(|v| (v * 100.0).round() / 100.0),
            mean_color(&result).map(|v| (v * 100.0).round() / 100.0)
        );
        println!(
            "  recon: psnr-ish hist_o={:.3}; result: hist_o={:.3} hist_c={:.3} iou_c={:.3} iou_o={:.3}; nostd: hist_o={:.3}",
            color_hist_distance(&recon, &originals[p].image).unwrap(),
            color_hist_distance(&result, &originals[p].image).unwrap(),
            color_hist_distance(&result, &contents[p].image).unwrap(),
            shape_iou(&result, &contents[p]).unwrap(),
            shape_iou(&result, &originals[p]).unwrap(),
            color_hist_distance(&result_nostd, &originals[p].image).unwrap(),
        );
        let g04: Vec<f64> = [0.2, 0.4]
            .iter()
            .map(|g| {
                let mut inj2 = cfg.build_injection(plan.inject_steps().len()).unwrap();
                inj2.boost = false;
                inj2.gamma = GammaSpec::Constant(*g);
                let mut r = ChaCha8Rng::seed_from_u64(1);
                let out = generate(&model, &params, &sched, &plan, &top, &tr, &inj2, &mut r, None).unwrap();
                color_hist_distance(&out, &originals[p].image).unwrap()
            })
            .collect();
        println!("  hist_o at gamma 0.2/0.4 (boost off): {:.3} / {:.3}", g04[0], g04[1]);
    }
}
