//! HRF-convolved design matrices and the two-phase GLM that turns voxel
//! time series into single-trial betas.
//!
//! Phase 1 fits one joint GLM over all runs with a column per test
//! stimulus and per nuisance class (fixation, blank, one-back target) plus
//! per-run intercepts. Phase 2 fits each run separately on the phase-1
//! residuals with one column per training trial.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{BetaMatrix, Role, RunId, ScanParams, StimulusEvent};

/// Double-gamma HRF parameters, in seconds except the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrfParams {
    pub peak_delay: f64,
    pub undershoot_delay: f64,
    pub peak_dispersion: f64,
    pub undershoot_dispersion: f64,
    /// Undershoot amplitude relative to the peak gamma.
    pub undershoot_ratio: f64,
    pub kernel_length: f64,
}

impl Default for HrfParams {
    fn default() -> Self {
        HrfParams {
            peak_delay: 6.0,
            undershoot_delay: 16.0,
            peak_dispersion: 1.0,
            undershoot_dispersion: 1.0,
            undershoot_ratio: 1.0 / 6.0,
            kernel_length: 32.0,
        }
    }
}

impl HrfParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("peak_delay", self.peak_delay),
            ("undershoot_delay", self.undershoot_delay),
            ("peak_dispersion", self.peak_dispersion),
            ("undershoot_dispersion", self.undershoot_dispersion),
            ("undershoot_ratio", self.undershoot_ratio),
            ("kernel_length", self.kernel_length),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

fn gamma_pdf(t: f64, shape: f64, scale: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    ((shape - 1.0) * t.ln() - t / scale - ln_gamma(shape) - shape * scale.ln()).exp()
}

/// HRF sampled every `tr` seconds starting at t = 0, scaled to unit peak.
pub fn canonical_hrf(p: &HrfParams, tr: f64) -> Result<Vec<f64>> {
    p.validate()?;
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::InvalidParams(format!("tr must be positive, got {tr}")));
    }
    let n = ((p.kernel_length / tr) - 1e-9).ceil().max(1.0) as usize;
    let a1 = p.peak_delay / p.peak_dispersion;
    let a2 = p.undershoot_delay / p.undershoot_dispersion;
    let mut h: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * tr;
            gamma_pdf(t, a1, p.peak_dispersion)
                - p.undershoot_ratio * gamma_pdf(t, a2, p.undershoot_dispersion)
        })
        .collect();
    let peak = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak > 0.0 {
        h.iter_mut().for_each(|v| *v /= peak);
    } else {
        // kernel shorter than the rise of the response: keep a unit impulse
        h.iter_mut().for_each(|v| *v = 0.0);
        h[0] = 1.0;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    /// One column per test stimulus and per nuisance class.
    PerCondition,
    /// One column per training trial.
    PerTrial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub regressor_names: Vec<String>,
    pub includes_intercept: bool,
    /// Leading columns that model events (the rest are intercepts/drifts).
    pub n_event_columns: usize,
    /// Row range of each run in the concatenated time axis.
    pub run_rows: Vec<(RunId, Range<usize>)>,
}

impl DesignMatrix {
    pub fn n_regressors(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmConfig {
    /// Legendre drift regressors per run (0 = intercept only).
    pub drift_order: usize,
    /// Carry phase-1 regressors that are active in a run into that run's
    /// phase-2 design. With residual inputs this makes the trial betas the
    /// joint-model estimates instead of shrinking them toward the phase-1
    /// fit.
    pub phase2_nuisance: bool,
}

impl Default for GlmConfig {
    fn default() -> Self {
        GlmConfig {
            drift_order: 0,
            phase2_nuisance: true,
        }
    }
}

/// Boxcar for one event sampled at volume times `k * tr`, convolved with
/// `kernel`, `n_volumes` long.
pub fn event_regressor(event: &StimulusEvent, tr: f64, n_volumes: usize, kernel: &[f64]) -> DVector<f64> {
    let mut boxcar = vec![0.0; n_volumes];
    let end = event.onset + event.duration;
    let first = (event.onset / tr - 1e-9).ceil().max(0.0) as usize;
    let mut hit = false;
    let mut k = first;
    while k < n_volumes && (k as f64) * tr < end - 1e-9 {
        boxcar[k] = 1.0;
        hit = true;
        k += 1;
    }
    if !hit {
        // shorter than a TR and between samples: nearest volume
        let k = ((event.onset / tr).round() as usize).min(n_volumes - 1);
        boxcar[k] = 1.0;
    }
    let mut out = DVector::zeros(n_volumes);
    for (i, &b) in boxcar.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        for (j, &h) in kernel.iter().enumerate() {
            if i + j >= n_volumes {
                break;
            }
            out[i + j] += b * h;
        }
    }
    out
}

fn legendre(order: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if order == 0 {
        return p0;
    }
    for n in 1..order {
        let nf = n as f64;
        let p2 = ((2.0 * nf + 1.0) * x * p1 - nf * p0) / (nf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

fn condition_key(e: &StimulusEvent) -> Option<String> {
    match e.role {
        Role::Test => Some(e.stimulus_id.clone()),
        Role::Fixation => Some("fixation".into()),
        Role::Blank => Some("blank".into()),
        Role::OneBackTarget => Some("one_back".into()),
        Role::Train => None,
    }
}

fn check_event(e: &StimulusEvent, scan: &ScanParams, runs: &[RunId]) -> Result<()> {
    let out = || Error::EventOutOfRange {
        stimulus_id: e.stimulus_id.clone(),
        session: e.session,
        run: e.run,
    };
    if !runs.contains(&e.run_id()) {
        return Err(out());
    }
    if e.onset < 0.0 || e.onset + e.duration > scan.run_duration() + 1e-9 {
        return Err(out());
    }
    Ok(())
}

/// Builds the design over `runs` (concatenated in order). Event columns may
/// be empty.
fn design_for_runs(
    events: &[StimulusEvent],
    grouping: Grouping,
    scan: &ScanParams,
    hrf: &HrfParams,
    runs: &[RunId],
    drift_order: usize,
) -> Result<DesignMatrix> {
    scan.validate()?;
    let kernel = canonical_hrf(hrf, scan.tr)?;
    let nv = scan.n_volumes_per_run;
    let run_pos: HashMap<RunId, usize> = runs.iter().enumerate().map(|(i, r)| (*r, i)).collect();

    let mut names: Vec<String> = Vec::new();
    let mut col_of: HashMap<String, usize> = HashMap::new();
    let mut members: Vec<Vec<&StimulusEvent>> = Vec::new();
    for e in events {
        let key = match grouping {
            Grouping::PerCondition => condition_key(e),
            Grouping::PerTrial => (e.role == Role::Train).then(|| e.stimulus_id.clone()),
        };
        let Some(key) = key else { continue };
        check_event(e, scan, runs)?;
        let c = *col_of.entry(key.clone()).or_insert_with(|| {
            names.push(key);
            members.push(Vec::new());
            members.len() - 1
        });
        members[c].push(e);
    }
    let n_event_columns = names.len();
    let single_run = runs.len() == 1;
    for r in runs {
        names.push(if single_run {
            "intercept".into()
        } else {
            format!("intercept:{}", r.file_stem())
        });
    }
    for r in runs {
        for d in 1..=drift_order {
            names.push(format!("drift{d}:{}", r.file_stem()));
        }
    }

    let n_rows = nv * runs.len();
    let mut x = DMatrix::zeros(n_rows, names.len());
    for (c, evs) in members.iter().enumerate() {
        for e in evs {
            let base = run_pos[&e.run_id()] * nv;
            let reg = event_regressor(e, scan.tr, nv, &kernel);
            for k in 0..nv {
                x[(base + k, c)] += reg[k];
            }
        }
    }
    for (i, _) in runs.iter().enumerate() {
        let c = n_event_columns + i;
        for k in 0..nv {
            x[(i * nv + k, c)] = 1.0;
        }
    }
    let drift_base = n_event_columns + runs.len();
    for (i, _) in runs.iter().enumerate() {
        for d in 1..=drift_order {
            let c = drift_base + i * drift_order + (d - 1);
            for k in 0..nv {
                let xk = if nv > 1 {
                    2.0 * k as f64 / (nv - 1) as f64 - 1.0
                } else {
                    0.0
                };
                x[(i * nv + k, c)] = legendre(d, xk);
            }
        }
    }
    let run_rows = runs
        .iter()
        .enumerate()
        .map(|(i, r)| (*r, i * nv..(i + 1) * nv))
        .collect();
    Ok(DesignMatrix {
        values: x,
        regressor_names: names,
        includes_intercept: true,
        n_event_columns,
        run_rows,
    })
}

fn runs_in_events(events: &[StimulusEvent], scan: &ScanParams) -> Vec<RunId> {
    let mut present: Vec<RunId> = events.iter().map(|e| e.run_id()).collect();
    present.sort();
    present.dedup();
    if scan.runs.is_empty() {
        present
    } else {
        scan.runs.iter().filter(|r| present.contains(r)).copied().collect()
    }
}

/// Design over the runs that contain `events`, with per-run intercepts.
pub fn build_design(
    events: &[StimulusEvent],
    grouping: Grouping,
    scan: &ScanParams,
    hrf: &HrfParams,
) -> Result<DesignMatrix> {
    if let Some(e) = events
        .iter()
        .find(|e| !scan.runs.is_empty() && !scan.runs.contains(&e.run_id()))
    {
        return Err(Error::EventOutOfRange {
            stimulus_id: e.stimulus_id.clone(),
            session: e.session,
            run: e.run,
        });
    }
    let runs = runs_in_events(events, scan);
    if runs.is_empty() {
        return Err(Error::EmptyDesign);
    }
    let d = design_for_runs(events, grouping, scan, hrf, &runs, 0)?;
    if d.n_event_columns == 0 {
        return Err(Error::EmptyDesign);
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    /// Regressors x voxels.
    pub betas: DMatrix<f64>,
    /// Volumes x voxels.
    pub residuals: DMatrix<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Minimum-norm least squares via SVD. Returns the solution and the
/// numerical rank of `x`.
pub(crate) fn lstsq(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let (n, p) = x.shape();
    if p == 0 {
        return Ok((DMatrix::zeros(0, y.ncols()), 0));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let tol = smax * (n.max(p) as f64) * f64::EPSILON;
    let mut uty = u.transpose() * y;
    let mut rank = 0;
    for (i, &si) in s.iter().enumerate() {
        if si > tol {
            rank += 1;
            uty.row_mut(i).scale_mut(1.0 / si);
        } else {
            uty.row_mut(i).fill(0.0);
        }
    }
    let b = v_t.transpose() * uty;
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite least-squares solution".into()));
    }
    Ok((b, rank))
}

/// Ordinary least squares of every voxel column of `y` on the design.
pub fn fit_ols(x: &DesignMatrix, y: &DMatrix<f64>) -> Result<GlmFit> {
    fit_ols_matrix(&x.values, y)
}

pub(crate) fn fit_ols_matrix(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<GlmFit> {
    if x.nrows() != y.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "design has {} rows, data has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite design or data".into()));
    }
    let (betas, rank) = lstsq(x, y)?;
    let residuals = y - x * &betas;
    Ok(GlmFit {
        rank_deficient: rank < x.ncols(),
        betas,
        residuals,
        rank,
    })
}

/// Single-trial train betas and per-stimulus test betas from per-run BOLD
/// matrices (volumes x voxels).
pub fn two_phase_betas(
    events: &[StimulusEvent],
    bold: &BTreeMap<RunId, DMatrix<f64>>,
    scan: &ScanParams,
    hrf: &HrfParams,
    cfg: &GlmConfig,
) -> Result<(BetaMatrix, BetaMatrix)> {
    scan.validate()?;
    let runs = {
        let mut r = runs_in_events(events, scan);
        if r.is_empty() {
            r = bold.keys().copied().collect();
        }
        r
    };
    if runs.is_empty() {
        return Err(Error::EmptyDesign);
    }
    let n_vox = bold
        .values()
        .next()
        .map(|m| m.ncols())
        .ok_or(Error::EmptyDesign)?;
    for r in &runs {
        let m = bold.get(r).ok_or_else(|| {
            Error::ShapeMismatch(format!("no BOLD matrix for {}", r.file_stem()))
        })?;
        if m.nrows() != scan.n_volumes_per_run || m.ncols() != n_vox {
            return Err(Error::ShapeMismatch(format!(
                "BOLD for {} is {}x{}, expected {}x{}",
                r.file_stem(),
                m.nrows(),
                m.ncols(),
                scan.n_volumes_per_run,
                n_vox
            )));
        }
    }
    let nv = scan.n_volumes_per_run;
    let voxel_ids: Vec<u32> = (0..n_vox as u32).collect();

    // phase 1: joint fit of shared regressors
    let d1 = design_for_runs(events, Grouping::PerCondition, scan, hrf, &runs, cfg.drift_order)?;
    let mut y = DMatrix::zeros(nv * runs.len(), n_vox);
    for (i, r) in runs.iter().enumerate() {
        y.rows_mut(i * nv, nv).copy_from(&bold[r]);
    }
    let fit1 = fit_ols(&d1, &y)?;

    let mut test_ids = Vec::new();
    let mut test_rows = Vec::new();
    for (c, name) in d1.regressor_names[..d1.n_event_columns].iter().enumerate() {
        let is_test = events
            .iter()
            .any(|e| e.role == Role::Test && &e.stimulus_id == name);
        if is_test {
            test_ids.push(name.clone());
            test_rows.push(c);
        }
    }
    let test_betas = fit1.betas.select_rows(&test_rows);

    // phase 2: per-run single-trial fits on the residuals
    let per_run: Vec<Result<Option<(Vec<String>, DMatrix<f64>)>>> = runs
        .par_iter()
        .enumerate()
        .map(|(ri, run)| {
            let run_events: Vec<StimulusEvent> = events
                .iter()
                .filter(|e| e.run_id() == *run && e.role == Role::Train)
                .cloned()
                .collect();
            if run_events.is_empty() {
                return Ok(None);
            }
            let d2 = design_for_runs(&run_events, Grouping::PerTrial, scan, hrf, &[*run], 0)?;
            let n_trials = d2.n_event_columns;
            let rows = ri * nv..(ri + 1) * nv;
            let resid = fit1.residuals.rows(rows.start, nv).into_owned();
            let x = if cfg.phase2_nuisance {
                let block = d1.values.rows(rows.start, nv);
                let active: Vec<usize> = (0..d1.n_regressors())
                    .filter(|&c| block.column(c).iter().any(|v| *v != 0.0))
                    .collect();
                let nuisance = block.select_columns(&active);
                let trials = d2.values.columns(0, n_trials);
                let mut x = DMatrix::zeros(nv, n_trials + nuisance.ncols());
                x.columns_mut(0, n_trials).copy_from(&trials);
                x.columns_mut(n_trials, nuisance.ncols()).copy_from(&nuisance);
                x
            } else {
                d2.values.clone()
            };
            let fit = fit_ols_matrix(&x, &resid)?;
            let ids = d2.regressor_names[..n_trials].to_vec();
            Ok(Some((ids, fit.betas.rows(0, n_trials).into_owned())))
        })
        .collect();

    let mut train_ids = Vec::new();
    let mut blocks = Vec::new();
    for r in per_run {
        if let Some((ids, b)) = r? {
            train_ids.extend(ids);
            blocks.push(b);
        }
    }
    let n_train = train_ids.len();
    let mut train = DMatrix::zeros(n_train, n_vox);
    let mut at = 0;
    for b in blocks {
        train.rows_mut(at, b.nrows()).copy_from(&b);
        at += b.nrows();
    }
    Ok((
        BetaMatrix::from_f64(&train, train_ids, voxel_ids.clone())?,
        BetaMatrix::from_f64(&test_betas, test_ids, voxel_ids)?,
    ))
}
