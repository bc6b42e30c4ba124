//! Target assignment, cosine-distance pairwise accuracy and the evaluation
//! report with bootstrap confidence intervals.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, FeatureMatrix, FeatureModality, Modality, StimulusEvent};
use crate::ridge::{predict, RidgeDecoder};

pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// Looks up the target row for each stimulus. Same-modality features are
/// used directly; otherwise the paired stimulus' features are used.
/// Concatenated multimodal rows may be keyed by either member of the pair.
pub fn assign_targets<'a>(
    stimuli: impl IntoIterator<Item = &'a StimulusEvent>,
    feats: &FeatureMatrix,
    pairing: &BTreeMap<String, String>,
) -> Result<FeatureMatrix> {
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for e in stimuli {
        let own = e.stimulus_id.as_str();
        let paired = pairing
            .get(own)
            .map(String::as_str)
            .unwrap_or(e.paired_id.as_str());
        let native = match feats.feature_modality {
            FeatureModality::Vision => Some(Modality::Image),
            FeatureModality::Language => Some(Modality::Caption),
            FeatureModality::MultimodalConcat => None,
        };
        let row = match native {
            Some(m) if e.modality == Some(m) => feats.row_of(own),
            Some(_) => (!paired.is_empty()).then(|| feats.row_of(paired)).flatten(),
            None => feats
                .row_of(own)
                .or_else(|| (!paired.is_empty()).then(|| feats.row_of(paired)).flatten()),
        };
        let row = row.ok_or_else(|| Error::MissingTarget(own.to_owned()))?;
        rows.push(row);
        ids.push(own.to_owned());
    }
    let values = feats.values().select_rows(&rows);
    FeatureMatrix::new(values, ids, feats.model_name.clone(), feats.feature_modality)
}

/// `1 - cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na: f64 = a.iter().map(|v| v * v).sum();
    let nb: f64 = b.iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(cos_dist(dot, na, nb))
}

// sqrt(na * nb) rather than sqrt(na) * sqrt(nb): identical vectors give
// exactly zero.
fn cos_dist(dot: f64, na: f64, nb: f64) -> f64 {
    (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PairwiseMetric {
    /// Each prediction against its own target and one distractor target,
    /// averaged over ordered pairs.
    #[default]
    OneVsTwo,
    /// Summed matched vs. swapped distances for each unordered pair.
    TwoVsTwo,
}

/// Distances between every prediction row (rows) and target row (cols).
pub fn distance_matrix(preds: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if preds.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            preds.shape(),
            targets.shape()
        )));
    }
    let np: Vec<f64> = preds.row_iter().map(|r| r.norm_squared()).collect();
    let nt: Vec<f64> = targets.row_iter().map(|r| r.norm_squared()).collect();
    if np.iter().chain(&nt).any(|v| *v == 0.0) {
        return Err(Error::ZeroVector);
    }
    let dots = preds * targets.transpose();
    Ok(DMatrix::from_fn(preds.nrows(), preds.nrows(), |i, j| {
        cos_dist(dots[(i, j)], np[i], nt[j])
    }))
}

fn compare(correct: f64, wrong: f64) -> f64 {
    if correct < wrong {
        1.0
    } else if correct == wrong {
        0.5
    } else {
        0.0
    }
}

/// Per-item share of won comparisons; their mean is the pairwise accuracy.
pub fn per_item_scores(
    preds: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    metric: PairwiseMetric,
) -> Result<Vec<f64>> {
    let n = preds.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "pairwise accuracy needs at least 2 items, got {n}"
        )));
    }
    let d = distance_matrix(preds, targets)?;
    let scores = (0..n)
        .map(|i| {
            let won: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| match metric {
                    PairwiseMetric::OneVsTwo => compare(d[(i, i)], d[(i, j)]),
                    PairwiseMetric::TwoVsTwo => {
                        compare(d[(i, i)] + d[(j, j)], d[(i, j)] + d[(j, i)])
                    }
                })
                .sum();
            won / (n - 1) as f64
        })
        .collect();
    Ok(scores)
}

/// Fraction of ordered pairs (i, j) where prediction i is closer to target i
/// than to target j. Exact ties count one half.
pub fn pairwise_accuracy(preds: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<f64> {
    pairwise_accuracy_with(preds, targets, PairwiseMetric::OneVsTwo)
}

pub fn pairwise_accuracy_with(
    preds: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    metric: PairwiseMetric,
) -> Result<f64> {
    let s = per_item_scores(preds, targets, metric)?;
    Ok(mean(&s))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_captions: f64,
    pub acc_images: f64,
    pub acc_overall: f64,
    pub ci95_captions: (f64, f64),
    pub ci95_images: (f64, f64),
    pub ci95_overall: (f64, f64),
    pub n_test: usize,
    pub decoder_meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub bootstrap: usize,
    pub seed: u64,
    pub metric: PairwiseMetric,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bootstrap: DEFAULT_BOOTSTRAP,
            seed: 7,
            metric: PairwiseMetric::OneVsTwo,
        }
    }
}

/// Decorrelated per-resample seed.
pub(crate) fn mix_seed(master: u64, counter: u64) -> u64 {
    let mut z = master ^ counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn interval(mut values: Vec<f64>) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    (percentile(&values, 0.025), percentile(&values, 0.975))
}

fn resample_mean(scores: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let n = scores.len();
    (0..n).map(|_| scores[rng.random_range(0..n)]).sum::<f64>() / n as f64
}

/// Per-modality and overall accuracy from already computed predictions and
/// targets (rows aligned with `modalities`).
pub fn score_predictions(
    preds: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    modalities: &[Modality],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.bootstrap == 0 {
        return Err(Error::InvalidInput("bootstrap count must be >= 1".into()));
    }
    let rows_of = |m: Modality| -> Vec<usize> {
        modalities
            .iter()
            .enumerate()
            .filter(|(_, x)| **x == m)
            .map(|(i, _)| i)
            .collect()
    };
    let cap = rows_of(Modality::Caption);
    let img = rows_of(Modality::Image);
    let cap_scores = per_item_scores(&preds.select_rows(&cap), &targets.select_rows(&cap), opts.metric)?;
    let img_scores = per_item_scores(&preds.select_rows(&img), &targets.select_rows(&img), opts.metric)?;
    let acc_captions = mean(&cap_scores);
    let acc_images = mean(&img_scores);
    let acc_overall = (acc_captions + acc_images) / 2.0;

    let boots: Vec<(f64, f64)> = (0..opts.bootstrap as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, b));
            (resample_mean(&cap_scores, &mut rng), resample_mean(&img_scores, &mut rng))
        })
        .collect();
    let ci95_captions = interval(boots.iter().map(|b| b.0).collect());
    let ci95_images = interval(boots.iter().map(|b| b.1).collect());
    let ci95_overall = interval(boots.iter().map(|b| (b.0 + b.1) / 2.0).collect());

    let mut decoder_meta = BTreeMap::new();
    decoder_meta.insert("ci_method".into(), "percentile bootstrap over test items".into());
    decoder_meta.insert("bootstrap".into(), opts.bootstrap.to_string());
    decoder_meta.insert("seed".into(), opts.seed.to_string());
    decoder_meta.insert("metric".into(), format!("{:?}", opts.metric));
    Ok(EvalReport {
        acc_captions,
        acc_images,
        acc_overall,
        ci95_captions,
        ci95_images,
        ci95_overall,
        n_test: modalities.len(),
        decoder_meta,
    })
}

/// Predictions for the test stimuli of `ds`, paired with their targets and
/// presentation modalities.
pub fn test_predictions(
    d: &RidgeDecoder,
    ds: &Dataset,
    feats: &FeatureMatrix,
) -> Result<(DMatrix<f64>, FeatureMatrix, Vec<Modality>)> {
    let betas = ds.betas_test();
    if betas.n_trials() == 0 {
        return Err(Error::InvalidInput("no test betas".into()));
    }
    if betas.voxel_ids() != d.voxel_ids.as_slice() {
        return Err(Error::ShapeMismatch(
            "decoder and test betas cover different voxels".into(),
        ));
    }
    let events = ds.test_events();
    let targets = assign_targets(events.iter().copied(), feats, ds.pairing())?;
    let modalities = events
        .iter()
        .map(|e| e.modality.expect("validated stimulus"))
        .collect();
    let preds = predict(d, &betas.to_f64())?;
    Ok((preds, targets, modalities))
}

pub fn evaluate(
    d: &RidgeDecoder,
    ds: &Dataset,
    feats: &FeatureMatrix,
    boot: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(
        d,
        ds,
        feats,
        &EvalOptions {
            bootstrap: boot,
            seed,
            ..EvalOptions::default()
        },
    )
}

pub fn evaluate_with(
    d: &RidgeDecoder,
    ds: &Dataset,
    feats: &FeatureMatrix,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let (preds, targets, modalities) = test_predictions(d, ds, feats)?;
    let mut report = score_predictions(&preds, targets.values(), &modalities, opts)?;
    report.decoder_meta.extend(d.metadata());
    Ok(report)
}
