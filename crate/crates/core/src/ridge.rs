//! Multi-target ridge regression from voxel betas to model features, with
//! k-fold cross-validated choice of the regularization strength.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::assign_targets;
use crate::model::{row_major, select_modality, Dataset, FeatureMatrix, FeatureModality, Modality};
use crate::ndm::NdmMatrix;

/// Regularization grid used when none is configured.
pub const DEFAULT_ALPHAS: [f64; 5] = [1e3, 1e4, 1e5, 1e6, 1e7];
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_FOLD_SEED: u64 = 17;
/// Floor on per-voxel standard deviations.
pub const SCALE_FLOOR: f64 = 1e-12;

/// Name of the CV objective, recorded in decoder metadata.
pub const CV_METRIC: &str = "mean per-dimension Pearson r of pooled out-of-fold predictions";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DecoderMode {
    Agnostic,
    ImageOnly,
    CaptionOnly,
}

impl DecoderMode {
    pub fn modality(self) -> Option<Modality> {
        match self {
            DecoderMode::Agnostic => None,
            DecoderMode::ImageOnly => Some(Modality::Image),
            DecoderMode::CaptionOnly => Some(Modality::Caption),
        }
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderMode::Agnostic => "agnostic",
            DecoderMode::ImageOnly => "image",
            DecoderMode::CaptionOnly => "caption",
        })
    }
}

impl FromStr for DecoderMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "agnostic" => Ok(DecoderMode::Agnostic),
            "image" | "imageonly" => Ok(DecoderMode::ImageOnly),
            "caption" | "captiononly" => Ok(DecoderMode::CaptionOnly),
            _ => Err(format!("unknown decoder mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub alpha_grid: Vec<f64>,
    pub n_folds: usize,
    pub fold_seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            alpha_grid: DEFAULT_ALPHAS.to_vec(),
            n_folds: DEFAULT_FOLDS,
            fold_seed: DEFAULT_FOLD_SEED,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() {
            return Err(Error::InvalidInput("alpha grid is empty".into()));
        }
        if self.alpha_grid.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidInput("alphas must be positive and finite".into()));
        }
        if self.alpha_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("alpha grid must be strictly increasing".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::InvalidInput("need at least 2 folds".into()));
        }
        Ok(())
    }
}

/// Which linear system the ridge solution is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RidgeSolver {
    /// Primal when voxels <= trials, dual otherwise.
    Auto,
    /// voxels x voxels system.
    Primal,
    /// trials x trials (Gram) system.
    Dual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeDecoder {
    /// Voxels x dims, applied to standardized inputs.
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub alpha: f64,
    pub x_mean: DVector<f64>,
    pub x_scale: DVector<f64>,
    pub trained_on: DecoderMode,
    pub target_model: String,
    pub feature_modality: Option<FeatureModality>,
    pub voxel_ids: Vec<u32>,
    pub fold_seed: Option<u64>,
    /// (alpha, mean CV score) for every grid value tried.
    pub cv_scores: Vec<(f64, f64)>,
}

impl RidgeDecoder {
    pub fn n_voxels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.weights.ncols()
    }

    pub fn to_ndm(&self) -> NdmMatrix {
        let w = self.weights.map(|v| v as f32);
        let meta = json!({
            "kind": "ridge_decoder",
            "alpha": self.alpha,
            "trained_on": self.trained_on,
            "target_model": self.target_model,
            "feature_modality": self.feature_modality,
            "fold_seed": self.fold_seed,
            "cv_scores": self.cv_scores,
            "cv_metric": CV_METRIC,
            "intercept": self.intercept.as_slice(),
            "x_mean": self.x_mean.as_slice(),
            "x_scale": self.x_scale.as_slice(),
        });
        NdmMatrix {
            rows: w.nrows(),
            cols: w.ncols(),
            data: row_major(&w),
            row_ids: self.voxel_ids.iter().map(|v| v.to_string()).collect(),
            meta: Some(meta),
        }
    }

    pub fn from_ndm(m: NdmMatrix) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            alpha: f64,
            trained_on: DecoderMode,
            target_model: String,
            feature_modality: Option<FeatureModality>,
            fold_seed: Option<u64>,
            #[serde(default)]
            cv_scores: Vec<(f64, f64)>,
            intercept: Vec<f64>,
            x_mean: Vec<f64>,
            x_scale: Vec<f64>,
        }
        let meta = m
            .meta
            .clone()
            .ok_or_else(|| Error::Format("decoder file has no header block".into()))?;
        let h: Header = serde_json::from_value(meta)?;
        if h.intercept.len() != m.cols || h.x_mean.len() != m.rows || h.x_scale.len() != m.rows {
            return Err(Error::Format("decoder header does not match weight shape".into()));
        }
        let voxel_ids = m
            .row_ids
            .iter()
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|_| Error::Format(format!("bad voxel id {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if voxel_ids.len() != m.rows {
            return Err(Error::Format("decoder needs one voxel id per weight row".into()));
        }
        let weights = DMatrix::from_row_slice(m.rows, m.cols, &m.data).map(f64::from);
        Ok(RidgeDecoder {
            weights,
            intercept: DVector::from_vec(h.intercept),
            alpha: h.alpha,
            x_mean: DVector::from_vec(h.x_mean),
            x_scale: DVector::from_vec(h.x_scale),
            trained_on: h.trained_on,
            target_model: h.target_model,
            feature_modality: h.feature_modality,
            voxel_ids,
            fold_seed: h.fold_seed,
            cv_scores: h.cv_scores,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_ndm().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ndm(NdmMatrix::load(path)?)
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("alpha".into(), format!("{:e}", self.alpha));
        m.insert("trained_on".into(), self.trained_on.to_string());
        m.insert("target_model".into(), self.target_model.clone());
        if let Some(fm) = self.feature_modality {
            m.insert("feature_modality".into(), fm.to_string());
        }
        if let Some(s) = self.fold_seed {
            m.insert("fold_seed".into(), s.to_string());
        }
        m.insert("cv_metric".into(), CV_METRIC.into());
        m.insert("n_voxels".into(), self.n_voxels().to_string());
        m
    }
}

/// Per-column z-scoring statistics.
#[derive(Debug, Clone)]
pub(crate) struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
    /// Columns with no variance; they are zeroed after centering.
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Standardizer {
        let n = x.nrows() as f64;
        let p = x.ncols();
        let mut mean = DVector::zeros(p);
        let mut scale = DVector::zeros(p);
        let mut constant = vec![false; p];
        for c in 0..p {
            let col = x.column(c);
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            let first = col[0];
            constant[c] = sd <= SCALE_FLOOR || col.iter().all(|v| *v == first);
            mean[c] = m;
            scale[c] = sd.max(SCALE_FLOOR);
        }
        Standardizer {
            mean,
            scale,
            constant,
        }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for c in 0..x.ncols() {
            let mut col = out.column_mut(c);
            if self.constant[c] {
                col.fill(0.0);
            } else {
                let (m, s) = (self.mean[c], self.scale[c]);
                col.apply(|v| *v = (*v - m) / s);
            }
        }
        out
    }
}

fn column_means(y: &DMatrix<f64>) -> DVector<f64> {
    let n = y.nrows() as f64;
    DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.sum() / n))
}

fn center(y: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut yc = y.clone();
    for (c, mut col) in yc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[c]);
    }
    yc
}

fn spd_solve(a: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(a)
        .ok_or_else(|| Error::NumericalFailure("ridge system is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Solves the ridge system on already standardized inputs and centered
/// targets.
pub(crate) fn solve_standardized(
    xs: &DMatrix<f64>,
    yc: &DMatrix<f64>,
    alpha: f64,
    solver: RidgeSolver,
) -> Result<DMatrix<f64>> {
    let (n, p) = xs.shape();
    let dual = match solver {
        RidgeSolver::Auto => p > n,
        RidgeSolver::Primal => false,
        RidgeSolver::Dual => true,
    };
    let w = if dual {
        let mut k = xs * xs.transpose();
        for i in 0..n {
            k[(i, i)] += alpha;
        }
        let c = spd_solve(k, yc)?;
        xs.transpose() * c
    } else {
        let mut a = xs.transpose() * xs;
        for i in 0..p {
            a[(i, i)] += alpha;
        }
        spd_solve(a, &(xs.transpose() * yc))?
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite ridge weights".into()));
    }
    Ok(w)
}

fn check_xy(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} input rows vs {} target rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::ShapeMismatch("ridge needs at least 2 rows".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite ridge inputs".into()));
    }
    Ok(())
}

/// Fits ridge weights for a fixed `alpha`, choosing primal or dual form by
/// shape.
pub fn fit_ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> Result<RidgeDecoder> {
    fit_ridge_with(x, y, alpha, RidgeSolver::Auto)
}

pub fn fit_ridge_with(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    alpha: f64,
    solver: RidgeSolver,
) -> Result<RidgeDecoder> {
    check_xy(x, y)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    let st = Standardizer::fit(x);
    if st.constant.iter().all(|c| *c) {
        return Err(Error::DegenerateInput("every input column is constant".into()));
    }
    let xs = st.transform(x);
    let y_mean = column_means(y);
    let yc = center(y, &y_mean);
    let weights = solve_standardized(&xs, &yc, alpha, solver)?;
    Ok(RidgeDecoder {
        weights,
        intercept: y_mean,
        alpha,
        x_mean: st.mean,
        x_scale: st.scale,
        trained_on: DecoderMode::Agnostic,
        target_model: String::new(),
        feature_modality: None,
        voxel_ids: (0..x.ncols() as u32).collect(),
        fold_seed: None,
        cv_scores: Vec::new(),
    })
}

pub fn predict(d: &RidgeDecoder, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != d.n_voxels() {
        return Err(Error::ShapeMismatch(format!(
            "decoder expects {} voxels, got {}",
            d.n_voxels(),
            x.ncols()
        )));
    }
    let mut xs = x.clone();
    for (c, mut col) in xs.column_iter_mut().enumerate() {
        let (m, s) = (d.x_mean[c], d.x_scale[c].max(SCALE_FLOOR));
        col.apply(|v| *v = (*v - m) / s);
    }
    let mut out = xs * &d.weights;
    for (c, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(d.intercept[c]);
    }
    Ok(out)
}

/// Validation index sets: a seeded shuffle of `0..n` cut into `k`
/// contiguous blocks, the first `n % k` blocks one element longer.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::TooFewRows { rows: n, folds: k });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        out.push(perm[at..at + len].to_vec());
        at += len;
    }
    Ok(out)
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Mean over target dimensions of the Pearson correlation between columns.
pub fn mean_column_pearson(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let d = truth.ncols();
    if d == 0 {
        return 0.0;
    }
    (0..d)
        .map(|c| pearson(pred.column(c).as_slice(), truth.column(c).as_slice()))
        .sum::<f64>()
        / d as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best_alpha: f64,
    /// Mean validation score per grid entry, in grid order.
    pub scores: Vec<f64>,
}

/// Out-of-fold predictions of one fold for every alpha, via one symmetric
/// eigendecomposition of the smaller Gram matrix.
fn fold_predictions(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    train: &[usize],
    val: &[usize],
    alphas: &[f64],
) -> Vec<DMatrix<f64>> {
    let xtr = x.select_rows(train);
    let st = Standardizer::fit(&xtr);
    let xs = st.transform(&xtr);
    let xv = st.transform(&x.select_rows(val));
    let ytr = y.select_rows(train);
    let y_mean = column_means(&ytr);
    let yc = center(&ytr, &y_mean);
    let (n, p) = xs.shape();

    // pred(alpha) = left * diag(1 / (lambda + alpha)) * right + mean
    let (left, lambdas, right) = if p > n {
        let eig = SymmetricEigen::new(&xs * xs.transpose());
        let q = eig.eigenvectors;
        let left = (&xv * xs.transpose()) * &q;
        let right = q.transpose() * &yc;
        (left, eig.eigenvalues, right)
    } else {
        let eig = SymmetricEigen::new(xs.transpose() * &xs);
        let v = eig.eigenvectors;
        let left = &xv * &v;
        let right = v.transpose() * (xs.transpose() * &yc);
        (left, eig.eigenvalues, right)
    };
    alphas
        .iter()
        .map(|&a| {
            let mut scaled = right.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row.scale_mut(1.0 / (lambdas[i].max(0.0) + a));
            }
            let mut pred = &left * scaled;
            for (c, mut col) in pred.column_iter_mut().enumerate() {
                col.add_scalar_mut(y_mean[c]);
            }
            pred
        })
        .collect()
}

/// Picks the alpha with the best cross-validated score. Out-of-fold
/// predictions are pooled over folds before scoring; ties go to the larger
/// alpha.
pub fn cv_select_alpha(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &CvConfig) -> Result<CvResult> {
    cfg.validate()?;
    if x.nrows() != y.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} input rows vs {} target rows",
            x.nrows(),
            y.nrows()
        )));
    }
    let n = x.nrows();
    let folds = kfold_indices(n, cfg.n_folds, cfg.fold_seed)?;
    let per_fold: Vec<(Vec<usize>, Vec<DMatrix<f64>>)> = folds
        .par_iter()
        .map(|val| {
            let mut in_val = vec![false; n];
            val.iter().for_each(|&i| in_val[i] = true);
            let train: Vec<usize> = (0..n).filter(|&i| !in_val[i]).collect();
            (val.clone(), fold_predictions(x, y, &train, val, &cfg.alpha_grid))
        })
        .collect();

    let mut scores = Vec::with_capacity(cfg.alpha_grid.len());
    for ai in 0..cfg.alpha_grid.len() {
        let mut oof = DMatrix::zeros(n, y.ncols());
        for (val, preds) in &per_fold {
            for (r, &i) in val.iter().enumerate() {
                oof.row_mut(i).copy_from(&preds[ai].row(r));
            }
        }
        scores.push(mean_column_pearson(&oof, y));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s >= scores[best] {
            best = i;
        }
    }
    Ok(CvResult {
        best_alpha: cfg.alpha_grid[best],
        scores,
    })
}

/// Cross-validates alpha on the training trials selected by `mode` and
/// refits on all of them.
pub fn train_decoder(
    ds: &Dataset,
    targets: &FeatureMatrix,
    mode: DecoderMode,
    cfg: &CvConfig,
) -> Result<RidgeDecoder> {
    let ds = match mode.modality() {
        Some(m) => select_modality(ds, m),
        None => ds.clone(),
    };
    let events = ds.train_events();
    let y = assign_targets(events.iter().copied(), targets, ds.pairing())?;
    let x = ds.betas_train().to_f64();
    if x.nrows() < cfg.n_folds.max(2) {
        return Err(Error::TooFewRows {
            rows: x.nrows(),
            folds: cfg.n_folds,
        });
    }
    let cv = cv_select_alpha(&x, y.values(), cfg)?;
    let mut d = fit_ridge(&x, y.values(), cv.best_alpha)?;
    d.trained_on = mode;
    d.target_model = targets.model_name.clone();
    d.feature_modality = Some(targets.feature_modality);
    d.voxel_ids = ds.betas_train().voxel_ids().to_vec();
    d.fold_seed = Some(cfg.fold_seed);
    d.cv_scores = cfg.alpha_grid.iter().copied().zip(cv.scores).collect();
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// (X~^T X~ + aI)^-1 X~^T Yc formed explicitly.
    fn normal_equation_oracle(x: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
        let n = x.nrows() as f64;
        let mut xs = x.clone();
        for mut col in xs.column_iter_mut() {
            let m = col.sum() / n;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            col.apply(|v| *v = (*v - m) / sd);
        }
        let mut yc = y.clone();
        for mut col in yc.column_iter_mut() {
            let m = col.sum() / n;
            col.add_scalar_mut(-m);
        }
        let a = xs.transpose() * &xs + DMatrix::identity(x.ncols(), x.ncols()) * alpha;
        a.try_inverse().unwrap() * xs.transpose() * yc
    }

    #[test]
    fn five_by_three_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 5, 3);
        let y = random(&mut rng, 5, 2);
        let d = fit_ridge(&x, &y, 2.0).unwrap();
        let oracle = normal_equation_oracle(&x, &y, 2.0);
        assert!((&d.weights - &oracle).amax() < 1e-10);

        let held_out = random(&mut rng, 1, 3);
        let mut xs = held_out.clone();
        for c in 0..3 {
            xs[(0, c)] = (xs[(0, c)] - d.x_mean[c]) / d.x_scale[c];
        }
        let expect = xs * &oracle + d.intercept.transpose();
        assert!((predict(&d, &held_out).unwrap() - expect).amax() < 1e-10);
    }

    #[test]
    fn vanishing_alpha_approaches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 12, 3);
        let w = random(&mut rng, 3, 2);
        let y = &x * &w;
        let d = fit_ridge(&x, &y, 1e-12).unwrap();
        let pred = predict(&d, &x).unwrap();
        assert!((pred - &y).amax() < 1e-8);
    }

    #[test]
    fn primal_and_dual_agree_on_wide_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 30, 200);
        let y = random(&mut rng, 30, 4);
        let p = fit_ridge_with(&x, &y, 10.0, RidgeSolver::Primal).unwrap();
        let d = fit_ridge_with(&x, &y, 10.0, RidgeSolver::Dual).unwrap();
        assert!((&p.weights - &d.weights).norm() / p.weights.norm() < 1e-8);
    }

    #[test]
    fn constant_voxel_gets_zero_weight_and_finite_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = random(&mut rng, 10, 4);
        x.column_mut(2).fill(0.1);
        let y = random(&mut rng, 10, 2);
        let d = fit_ridge(&x, &y, 1.0).unwrap();
        assert!(d.weights.row(2).iter().all(|v| *v == 0.0));
        assert!(d.x_scale.iter().all(|s| *s > 0.0));
        let mut new = random(&mut rng, 3, 4);
        new.column_mut(2).fill(5.0);
        assert!(predict(&d, &new).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn all_constant_input_is_degenerate() {
        let x = DMatrix::zeros(6, 3);
        let y = DMatrix::from_element(6, 1, 1.0);
        assert!(matches!(fit_ridge(&x, &y, 1.0), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn shape_errors() {
        let x = DMatrix::zeros(6, 3);
        assert!(matches!(
            fit_ridge(&x, &DMatrix::zeros(5, 1), 1.0),
            Err(Error::ShapeMismatch(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = fit_ridge(&random(&mut rng, 6, 3), &random(&mut rng, 6, 1), 1.0).unwrap();
        assert!(matches!(predict(&d, &DMatrix::zeros(2, 4)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn folds_partition_rows() {
        let folds = kfold_indices(23, 5, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(folds, kfold_indices(23, 5, 3).unwrap());
        assert!(matches!(kfold_indices(3, 5, 0), Err(Error::TooFewRows { .. })));
    }

    #[test]
    fn leave_one_out_gives_finite_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, 5, 4);
        let y = random(&mut rng, 5, 2);
        let cfg = CvConfig {
            n_folds: 5,
            ..CvConfig::default()
        };
        let r = cv_select_alpha(&x, &y, &cfg).unwrap();
        assert_eq!(r.scores.len(), 5);
        assert!(r.scores.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn grid_validation() {
        let bad = CvConfig {
            alpha_grid: vec![1e3, 1e3],
            ..CvConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(CvConfig {
            alpha_grid: vec![],
            ..CvConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!(CvConfig::default().alpha_grid, vec![1e3, 1e4, 1e5, 1e6, 1e7]);
    }

    #[test]
    fn ties_prefer_larger_alpha() {
        // constant targets: every alpha scores 0
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 20, 3);
        let y = DMatrix::from_element(20, 2, 1.5);
        let r = cv_select_alpha(&x, &y, &CvConfig::default()).unwrap();
        assert_eq!(r.best_alpha, 1e7);
    }

    #[test]
    fn decoder_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut d = fit_ridge(&random(&mut rng, 8, 3), &random(&mut rng, 8, 2), 3.0).unwrap();
        d.target_model = "m".into();
        d.trained_on = DecoderMode::CaptionOnly;
        d.voxel_ids = vec![3, 7, 9];
        d.cv_scores = vec![(1e3, 0.5)];
        let back = RidgeDecoder::from_ndm(d.to_ndm()).unwrap();
        assert_eq!(back.voxel_ids, d.voxel_ids);
        assert_eq!(back.trained_on, DecoderMode::CaptionOnly);
        assert_eq!(back.x_mean, d.x_mean);
        assert!((back.weights - &d.weights).amax() < 1e-6 * d.weights.amax());
    }
}
