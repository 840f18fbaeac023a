//! Norm-trace recording and the homo/hetero correlation analysis between the
//! bottleneck norm and the per-level skip norms, plus Pearson statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::denoiser::{Denoiser, DenoiserParams};
use crate::error::{Error, Result};
use crate::sampler::{ddim_invert, reverse_collect, RunTrace};
use crate::schedule::{NoiseSchedule, TimestepPlan};
use crate::tensor::Tensor;

/// One (sample, timestep) observation: the bottleneck norm and the skip norms
/// per level (outermost first).
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub sample_id: usize,
    pub t: usize,
    pub h_norm: f64,
    pub g_norms: Vec<f64>,
}

/// Collected norm observations; each (sample, t) pair appears at most once.
#[derive(Debug, Clone, Default)]
pub struct FeatureTrace {
    records: Vec<TraceRecord>,
    seen: BTreeSet<(usize, usize)>,
}

impl FeatureTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, rec: TraceRecord) -> Result<()> {
        if rec.g_norms.is_empty() {
            return Err(Error::Contract("trace record needs at least one skip level".into()));
        }
        if rec.h_norm < 0.0 || rec.g_norms.iter().any(|g| *g < 0.0) {
            return Err(Error::Contract("norms must be nonnegative".into()));
        }
        if !self.seen.insert((rec.sample_id, rec.t)) {
            return Err(Error::Contract(format!(
                "duplicate trace record for sample {} at t={}",
                rec.sample_id, rec.t
            )));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the trace CSV: `sample_id,t,level,h_norm,g_norm`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,t,level,h_norm,g_norm\n");
        for r in &self.records {
            for (level, g) in r.g_norms.iter().enumerate() {
                out.push_str(&format!("{},{},{},{},{}\n", r.sample_id, r.t, level, r.h_norm, g));
            }
        }
        write_text(path, &out)
    }
}

/// Per (timestep, level) homo/hetero Pearson correlations.
#[derive(Debug, Clone)]
pub struct CorrRow {
    pub t: usize,
    pub level: usize,
    pub r_homo: f64,
    pub r_hetero: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub rows: Vec<CorrRow>,
}

impl CorrelationReport {
    /// Writes the report CSV: `t,level,r_homo,r_hetero,n`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t,level,r_homo,r_hetero,n\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.t, r.level, r.r_homo, r.r_hetero, r.n));
        }
        write_text(path, &out)
    }

    /// Mean of `r_homo` and `r_hetero` over the rows with `t >= t_min`.
    pub fn window_means(&self, t_min: usize) -> Option<(f64, f64)> {
        let rows: Vec<&CorrRow> = self.rows.iter().filter(|r| r.t >= t_min).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let homo = rows.iter().map(|r| r.r_homo).sum::<f64>() / n;
        let hetero = rows.iter().map(|r| r.r_hetero).sum::<f64>() / n;
        Some((homo, hetero))
    }
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Contract(format!(
            "pearson: length mismatch {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::Contract(format!("pearson: need >= 3 points, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate("pearson: zero variance input".into()));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Homo/hetero correlation per (timestep, level). The homo variant pairs each
/// sample's bottleneck norm with its own skip norm; the hetero variant pairs
/// it with another sample's, using a cyclic shift of the sample ordering.
/// A zero shift would reproduce the homo pairing and is rejected.
pub fn homo_hetero(trace: &FeatureTrace, pairing_shift: usize) -> Result<CorrelationReport> {
    if trace.is_empty() {
        return Err(Error::Contract("homo_hetero: empty trace".into()));
    }
    if pairing_shift == 0 {
        return Err(Error::Degenerate(
            "homo_hetero: pairing_shift=0 degenerates r_hetero into r_homo".into(),
        ));
    }
    let levels = trace.records()[0].g_norms.len();
    if trace.records().iter().any(|r| r.g_norms.len() != levels) {
        return Err(Error::Contract("homo_hetero: inconsistent level counts".into()));
    }
    // Group by timestep, ordered by sample id.
    let mut by_t: BTreeMap<usize, Vec<&TraceRecord>> = BTreeMap::new();
    for r in trace.records() {
        by_t.entry(r.t).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (t, mut recs) in by_t {
        recs.sort_by_key(|r| r.sample_id);
        let n = recs.len();
        if n < 3 {
            return Err(Error::Contract(format!(
                "homo_hetero: only {n} samples at t={t}, need >= 3"
            )));
        }
        if pairing_shift % n == 0 {
            return Err(Error::Degenerate(format!(
                "homo_hetero: pairing_shift {pairing_shift} is a multiple of the sample count {n}"
            )));
        }
        let h: Vec<f64> = recs.iter().map(|r| r.h_norm).collect();
        let h_shifted: Vec<f64> = (0..n).map(|i| h[(i + pairing_shift) % n]).collect();
        for level in 0..levels {
            let g: Vec<f64> = recs.iter().map(|r| r.g_norms[level]).collect();
            let r_homo = pearson(&h, &g)?;
            let r_hetero = pearson(&h_shifted, &g)?;
            rows.push(CorrRow { t, level, r_homo, r_hetero, n });
        }
    }
    Ok(CorrelationReport { rows })
}

/// Inverts and reconstructs every image, recording the bottleneck and skip
/// norms at each plan step. Sample ids are the indices into `images`.
pub fn collect_feature_trace(
    model: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    images: &[Tensor],
) -> Result<FeatureTrace> {
    let per_sample: Vec<Result<Vec<TraceRecord>>> = images
        .par_iter()
        .enumerate()
        .map(|(id, img)| {
            let top = ddim_invert(model, params, sched, plan, img)?;
            let mut recs = Vec::new();
            reverse_collect(model, params, sched, plan, &top, |t, out| {
                recs.push(TraceRecord {
                    sample_id: id,
                    t,
                    h_norm: out.h.norm(),
                    g_norms: out.skips.iter().map(|g| g.norm()).collect(),
                });
            })?;
            Ok(recs)
        })
        .collect();
    let mut trace = FeatureTrace::new();
    for recs in per_sample {
        for r in recs? {
            trace.add(r)?;
        }
    }
    Ok(trace)
}

/// Writes the per-step generation trace CSV:
/// `t,branch,h_norm,h_blend_norm,dx_norm`.
pub fn write_run_trace_csv(path: &Path, run: &RunTrace) -> Result<()> {
    let mut out = String::from("t,branch,h_norm,h_blend_norm,dx_norm\n");
    for s in &run.steps {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.t,
            s.branch.name(),
            s.h_norm,
            s.h_blend_norm,
            s.dx_norm
        ));
    }
    write_text(path, &out)
}

/// Writes the calibration-intermediate norms per injection step:
/// `t,dp_norm,deps_norm,dx_norm,p_plain_std,p_regularized_std`.
/// Requires a run recorded with feature keeping on.
pub fn write_calibration_csv(path: &Path, run: &RunTrace) -> Result<()> {
    let mut out = String::from("t,dp_norm,deps_norm,dx_norm,p_plain_std,p_regularized_std\n");
    for s in &run.steps {
        if let Some(inter) = &s.calibration {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.t,
                inter.d_p.norm(),
                inter.d_eps.norm(),
                inter.d_x.norm(),
                inter.p_plain.std(),
                inter.p_regularized.std()
            ));
        }
    }
    write_text(path, &out)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
