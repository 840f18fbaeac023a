//! Command-line surface: train, invert, reconstruct, inject, diagnose, sweep.
//!
//! Every artifact directory receives a `manifest.txt` holding the fully
//! resolved configuration; re-running the same command from that manifest
//! reproduces the outputs byte-identically.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{derive_seed, streams, RunConfig};
use crate::denoiser::{load_checkpoint, save_checkpoint, Denoiser, DenoiserParams, TrainOptions};
use crate::diagnostics::{
    collect_feature_trace, homo_hetero, write_calibration_csv, write_run_trace_csv, write_text,
};
use crate::error::{Error, Result};
use crate::hspace::GammaSpec;
use crate::imageio::{psnr, read_ppm, write_png, write_ppm};
use crate::sampler::{ddim_invert, generate, reverse, ContentTrace, LatentState, RunTrace};
use crate::schedule::{NoiseSchedule, TimestepPlan};
use crate::tensor::Tensor;
use crate::toyset::{color_hist_distance, generate as toy_generate, load_dataset, save_dataset, shape_iou, ToySample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Invert,
    Reconstruct,
    Inject,
    Diagnose,
    Sweep,
}

impl Command {
    pub fn parse(s: &str) -> Result<Command> {
        match s {
            "train" => Ok(Command::Train),
            "invert" => Ok(Command::Invert),
            "reconstruct" => Ok(Command::Reconstruct),
            "inject" => Ok(Command::Inject),
            "diagnose" => Ok(Command::Diagnose),
            "sweep" => Ok(Command::Sweep),
            other => Err(Error::Config(format!(
                "unknown command {other}; expected train|invert|reconstruct|inject|diagnose|sweep"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Invert => "invert",
            Command::Reconstruct => "reconstruct",
            Command::Inject => "inject",
            Command::Diagnose => "diagnose",
            Command::Sweep => "sweep",
        }
    }
}

/// Parses `<command> [--config=FILE] [--key=value ...]`.
/// Precedence: defaults, then config file, then environment (paths and seed
/// only), then flags.
pub fn parse_args(args: &[String]) -> Result<(Command, RunConfig)> {
    if args.is_empty() {
        return Err(Error::Config(
            "usage: hinject <train|invert|reconstruct|inject|diagnose|sweep> [--config=FILE] [--key=value ...]"
                .into(),
        ));
    }
    let cmd = Command::parse(&args[0])?;
    let mut cfg = RunConfig::default();
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut config_file: Option<PathBuf> = None;
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        let stripped = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key=value flag, got {arg:?}")))?;
        let (key, value) = match stripped.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                // --key value form.
                i += 1;
                let v = args
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("flag --{stripped} is missing a value")))?;
                (stripped.to_string(), v.clone())
            }
        };
        if key == "config" {
            config_file = Some(PathBuf::from(value));
        } else {
            overrides.push((key, value));
        }
        i += 1;
    }
    if let Some(path) = config_file {
        cfg.apply_file(&path)?;
    }
    cfg.apply_env()?;
    for (k, v) in &overrides {
        cfg.set(k, v)?;
    }
    cfg.run.command = Some(cmd.name().to_string());
    Ok((cmd, cfg))
}

/// Entry point: returns the process exit code
/// (0 ok, 2 config, 3 contract, 4 numerical).
pub fn main_entry() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (cmd, cfg) = match parse_args(&args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("hinject: {e}");
            return e.exit_code();
        }
    };
    match run(cmd, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("hinject: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.paths.output)
        .map_err(|e| Error::io(cfg.paths.output.display().to_string(), e))?;
    match cmd {
        Command::Train => cmd_train(cfg),
        Command::Invert => cmd_invert(cfg),
        Command::Reconstruct => cmd_reconstruct(cfg),
        Command::Inject => cmd_inject(cfg),
        Command::Diagnose => cmd_diagnose(cfg),
        Command::Sweep => cmd_sweep(cfg),
    }
}

fn write_manifest(cfg: &RunConfig) -> Result<()> {
    write_text(&cfg.paths.output.join("manifest.txt"), &cfg.to_text())
}

fn load_model(cfg: &RunConfig) -> Result<(Denoiser, DenoiserParams)> {
    let path = &cfg.paths.checkpoint;
    if !path.exists() {
        return Err(Error::Config(format!(
            "paths.checkpoint {} does not exist",
            path.display()
        )));
    }
    let (ckpt_cfg, params) = load_checkpoint(path)?;
    if ckpt_cfg != cfg.denoiser {
        return Err(Error::Config(format!(
            "checkpoint architecture {ckpt_cfg:?} does not match configured denoiser {:?}",
            cfg.denoiser
        )));
    }
    Ok((Denoiser::new(ckpt_cfg)?, params))
}

/// Resolves an image reference: either `toyset:N` (sample N of the seeded
/// evaluation pool, with labels) or a PPM file path.
fn resolve_image(cfg: &RunConfig, key: &str, reference: &str) -> Result<(Tensor, Option<ToySample>)> {
    if let Some(idx) = reference.strip_prefix("toyset:") {
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::Config(format!("{key}: bad toyset index in {reference:?}")))?;
        let pool = toy_generate(idx + 1, derive_seed(cfg.seed, streams::EVAL_SET), &cfg.toy_config())?;
        let sample = pool.into_iter().last().unwrap();
        return Ok((sample.image.clone(), Some(sample)));
    }
    let path = Path::new(reference);
    if !path.exists() {
        return Err(Error::Config(format!("{key}: file {reference} does not exist")));
    }
    let img = read_ppm(path)?;
    if img.shape() != cfg.denoiser.input_shape() {
        return Err(Error::Config(format!(
            "{key}: image shape {:?} does not match denoiser input {:?}",
            img.shape(),
            cfg.denoiser.input_shape()
        )));
    }
    Ok((img, None))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let sched = cfg.build_schedule()?;
    let model = Denoiser::new(cfg.denoiser.clone())?;
    let samples = match &cfg.paths.dataset {
        Some(dir) if dir.join("manifest.csv").exists() => load_dataset(dir)?,
        Some(dir) => {
            let generated =
                toy_generate(cfg.toyset.count, derive_seed(cfg.seed, streams::TRAIN_SET), &cfg.toy_config())?;
            save_dataset(dir, &generated)?;
            generated
        }
        None => toy_generate(cfg.toyset.count, derive_seed(cfg.seed, streams::TRAIN_SET), &cfg.toy_config())?,
    };
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != cfg.denoiser.input_shape() {
            return Err(Error::Config(format!(
                "dataset sample {i} has shape {:?}, denoiser expects {:?}",
                s.image.shape(),
                cfg.denoiser.input_shape()
            )));
        }
    }
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::TRAIN));
    let params = model.init_params(&mut rng);
    let opts = TrainOptions {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        ..Default::default()
    };
    let (params, losses) = model.train(params, &images, &sched, &opts, &mut rng)?;
    if let Some(parent) = cfg.paths.checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    save_checkpoint(&cfg.paths.checkpoint, &cfg.denoiser, &params)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_text(&cfg.paths.output.join("loss.csv"), &csv)?;
    write_manifest(cfg)?;
    println!(
        "trained {} steps on {} samples; final_loss={}",
        losses.len(),
        images.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn invert_input(
    cfg: &RunConfig,
    model: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    key: &str,
    reference: &str,
) -> Result<(Tensor, Option<ToySample>, LatentState)> {
    let (img, sample) = resolve_image(cfg, key, reference)?;
    let top = ddim_invert(model, params, sched, plan, &img)?;
    Ok((img, sample, top))
}

fn require_ref<'a>(opt: &'a Option<String>, key: &str) -> Result<&'a str> {
    opt.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} is required for this command")))
}

fn cmd_invert(cfg: &RunConfig) -> Result<()> {
    let (model, params) = load_model(cfg)?;
    let sched = cfg.build_schedule()?;
    let plan = cfg.build_plan()?;
    let input = require_ref(&cfg.run.input, "run.input")?;
    let (_, _, top) = invert_input(cfg, &model, &params, &sched, &plan, "run.input", input)?;
    let out = cfg.paths.output.join("inverted.bin");
    top.x.write_file(&out)?;
    write_manifest(cfg)?;
    println!("inverted t={} -> {}", top.t, out.display());
    Ok(())
}

fn cmd_reconstruct(cfg: &RunConfig) -> Result<()> {
    let (model, params) = load_model(cfg)?;
    let sched = cfg.build_schedule()?;
    let plan = cfg.build_plan()?;
    let input = require_ref(&cfg.run.input, "run.input")?;
    let (img, _, top) = invert_input(cfg, &model, &params, &sched, &plan, "run.input", input)?;
    let recon = reverse(&model, &params, &sched, &plan, &top)?;
    write_ppm(&cfg.paths.output.join("reconstruction.ppm"), &recon)?;
    write_png(&cfg.paths.output.join("reconstruction.png"), &recon)?;
    let value = psnr(&img, &recon);
    write_text(
        &cfg.paths.output.join("psnr.csv"),
        &format!("input,psnr\n{input},{value}\n"),
    )?;
    write_manifest(cfg)?;
    println!("psnr={value}");
    Ok(())
}

struct PairMetrics {
    iou_content: f64,
    iou_original: f64,
    hist_original: f64,
    hist_content: f64,
}

fn pair_metrics(result: &Tensor, original: &ToySample, content: &ToySample) -> Result<PairMetrics> {
    Ok(PairMetrics {
        iou_content: shape_iou(result, content)?,
        iou_original: shape_iou(result, original)?,
        hist_original: color_hist_distance(result, &original.image)?,
        hist_content: color_hist_distance(result, &content.image)?,
    })
}

fn cmd_inject(cfg: &RunConfig) -> Result<()> {
    let (model, params) = load_model(cfg)?;
    let sched = cfg.build_schedule()?;
    let plan = cfg.build_plan()?;
    let injection = cfg.build_injection(plan.inject_steps().len())?;
    if injection.mask.is_all_zeros() {
        eprintln!("hinject: warning: all-zero mask, injection is a no-op");
    }
    let original_ref = require_ref(&cfg.run.original, "run.original")?;
    let content_ref = require_ref(&cfg.run.content, "run.content")?;
    let (orig_img, orig_sample, orig_top) =
        invert_input(cfg, &model, &params, &sched, &plan, "run.original", original_ref)?;
    let (content_img, content_sample, content_top) =
        invert_input(cfg, &model, &params, &sched, &plan, "run.content", content_ref)?;
    let (trace, _) = ContentTrace::capture(&model, &params, &sched, &plan, &content_top)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::RUN));
    let mut run_trace = if cfg.run.trace {
        RunTrace::keeping_features()
    } else {
        RunTrace::default()
    };
    let result = generate(
        &model,
        &params,
        &sched,
        &plan,
        &orig_top,
        &trace,
        &injection,
        &mut rng,
        Some(&mut run_trace),
    )?;
    write_ppm(&cfg.paths.output.join("result.ppm"), &result)?;
    write_png(&cfg.paths.output.join("result.png"), &result)?;
    write_ppm(&cfg.paths.output.join("original.ppm"), &orig_img)?;
    write_ppm(&cfg.paths.output.join("content.ppm"), &content_img)?;
    if cfg.run.trace {
        write_run_trace_csv(&cfg.paths.output.join("trace.csv"), &run_trace)?;
        write_calibration_csv(&cfg.paths.output.join("calibration.csv"), &run_trace)?;
    }
    if let (Some(orig), Some(content)) = (&orig_sample, &content_sample) {
        let gamma = cfg.injection.gamma;
        let m = pair_metrics(&result, orig, content)?;
        let mut csv = String::from(
            "original,content,gamma,omega,iou_content,iou_original,hist_original,hist_content\n",
        );
        csv.push_str(&format!(
            "{original_ref},{content_ref},{gamma},{},{},{},{},{}\n",
            cfg.injection.omega, m.iou_content, m.iou_original, m.hist_original, m.hist_content
        ));
        write_text(&cfg.paths.output.join("metrics.csv"), &csv)?;
        println!(
            "iou_content={} iou_original={} hist_original={} hist_content={}",
            m.iou_content, m.iou_original, m.hist_original, m.hist_content
        );
    } else {
        println!("result written (metrics need toyset-backed inputs)");
    }
    write_manifest(cfg)?;
    Ok(())
}

fn cmd_diagnose(cfg: &RunConfig) -> Result<()> {
    let (model, params) = load_model(cfg)?;
    let sched = cfg.build_schedule()?;
    let plan = cfg.build_plan()?;
    let n = cfg.run.diagnose_samples;
    if n < 3 {
        return Err(Error::Config(format!("run.diagnose_samples must be >= 3, got {n}")));
    }
    let samples = toy_generate(n, derive_seed(cfg.seed, streams::DIAGNOSE_SET), &cfg.toy_config())?;
    let images: Vec<Tensor> = samples.into_iter().map(|s| s.image).collect();
    let trace = collect_feature_trace(&model, &params, &sched, &plan, &images)?;
    trace.write_csv(&cfg.paths.output.join("trace.csv"))?;
    let report = homo_hetero(&trace, 1)?;
    report.write_csv(&cfg.paths.output.join("report.csv"))?;
    let t_min = 4 * sched.t_max() / 5;
    if let Some((homo, hetero)) = report.window_means(t_min) {
        println!("r_homo_mean={homo} r_hetero_mean={hetero} window_t_min={t_min}");
    }
    write_manifest(cfg)?;
    Ok(())
}

struct SweepRow {
    gamma: f64,
    omega: f64,
    mean_iou_content: f64,
    mean_iou_original: f64,
    mean_hist_original: f64,
    mean_hist_content: f64,
    iou_win_rate: f64,
    hist_win_rate: f64,
    pairs: usize,
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let (model, params) = load_model(cfg)?;
    let sched = cfg.build_schedule()?;
    let plan = cfg.build_plan()?;
    let n_pairs = cfg.toyset.pairs;
    if n_pairs < 1 {
        return Err(Error::Config("toyset.pairs must be >= 1".into()));
    }
    let gammas = if cfg.run.sweep_gamma.is_empty() {
        vec![cfg.injection.gamma]
    } else {
        cfg.run.sweep_gamma.clone()
    };
    let omegas = if cfg.run.sweep_omega.is_empty() {
        vec![cfg.injection.omega]
    } else {
        cfg.run.sweep_omega.clone()
    };
    let pool = toy_generate(2 * n_pairs, derive_seed(cfg.seed, streams::EVAL_SET), &cfg.toy_config())?;
    let (originals, contents) = pool.split_at(n_pairs);

    // Inversions and content traces are shared across the grid.
    let prepared: Vec<Result<(LatentState, ContentTrace)>> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let top = ddim_invert(&model, &params, &sched, &plan, &originals[i].image)?;
            let ctop = ddim_invert(&model, &params, &sched, &plan, &contents[i].image)?;
            let (trace, _) = ContentTrace::capture(&model, &params, &sched, &plan, &ctop)?;
            Ok((top, trace))
        })
        .collect();
    let prepared: Vec<(LatentState, ContentTrace)> =
        prepared.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (gi, gamma) in gammas.iter().enumerate() {
        for (oi, omega) in omegas.iter().enumerate() {
            let mut injection = cfg.build_injection(plan.inject_steps().len())?;
            injection.gamma = GammaSpec::Constant(*gamma);
            injection.omega = *omega;
            injection.validate(sched.t_max())?;
            let grid_index = gi * omegas.len() + oi;
            let metrics: Vec<Result<PairMetrics>> = (0..n_pairs)
                .into_par_iter()
                .map(|p| {
                    let run_index = (grid_index * n_pairs + p) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        streams::SWEEP_BASE + run_index,
                    ));
                    let (top, trace) = &prepared[p];
                    let result = generate(
                        &model, &params, &sched, &plan, top, trace, &injection, &mut rng, None,
                    )?;
                    pair_metrics(&result, &originals[p], &contents[p])
                })
                .collect();
            let metrics: Vec<PairMetrics> = metrics.into_iter().collect::<Result<_>>()?;
            let n = n_pairs as f64;
            let iou_wins = metrics.iter().filter(|m| m.iou_content > m.iou_original).count();
            let hist_wins = metrics.iter().filter(|m| m.hist_original < m.hist_content).count();
            rows.push(SweepRow {
                gamma: *gamma,
                omega: *omega,
                mean_iou_content: metrics.iter().map(|m| m.iou_content).sum::<f64>() / n,
                mean_iou_original: metrics.iter().map(|m| m.iou_original).sum::<f64>() / n,
                mean_hist_original: metrics.iter().map(|m| m.hist_original).sum::<f64>() / n,
                mean_hist_content: metrics.iter().map(|m| m.hist_content).sum::<f64>() / n,
                iou_win_rate: iou_wins as f64 / n,
                hist_win_rate: hist_wins as f64 / n,
                pairs: n_pairs,
            });
        }
    }

    let mut csv = String::from(
        "gamma,omega,mean_iou_content,mean_iou_original,mean_hist_original,mean_hist_content,iou_win_rate,hist_win_rate,pairs\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.gamma,
            r.omega,
            r.mean_iou_content,
            r.mean_iou_original,
            r.mean_hist_original,
            r.mean_hist_content,
            r.iou_win_rate,
            r.hist_win_rate,
            r.pairs
        ));
    }
    write_text(&cfg.paths.output.join("sweep.csv"), &csv)?;
    if gammas.len() >= 2 && omegas.len() == 1 {
        let means: Vec<f64> = rows.iter().map(|r| r.mean_iou_content).collect();
        let nondecreasing = means.windows(2).all(|w| w[1] >= w[0]);
        println!("trend gamma->mean_iou_content nondecreasing={nondecreasing}");
    }
    write_manifest(cfg)?;
    println!("sweep rows={}", rows.len());
    Ok(())
}
