//! Ground-truth forward model: paired image/caption stimuli sharing a
//! semantic latent, block-structured voxel responses, synthetic feature
//! "models" and an atlas labelling each block with real ROI labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{assign_targets, score_predictions, EvalOptions};
use crate::glm::{canonical_hrf, event_regressor, lstsq, two_phase_betas, GlmConfig, HrfParams};
use crate::model::{
    assemble_dataset, write_events, BetaMatrix, Dataset, FeatureMatrix, FeatureModality, Modality,
    Role, RunId, ScanParams, StimulusEvent, DEFAULT_TR, INTER_STIMULUS_INTERVAL, STIMULUS_DURATION,
};
use crate::ndm::NdmMatrix;
use crate::roi::{load_roi_definition, AtlasAssignment, Hemisphere, RoiName};

/// Seconds of fixation before the first event of a run.
pub const LEAD_IN: f64 = 8.0;
/// Seconds kept free after the last event so its response is sampled.
pub const TAIL: f64 = 16.0;
/// A fixation period is inserted after this many stimuli.
pub const FIXATION_EVERY: usize = 10;
/// A one-back repeat is inserted after this many stimuli.
pub const ONE_BACK_EVERY: usize = 12;

pub const VISION_MODEL: &str = "synth-vision";
pub const LANGUAGE_MODEL: &str = "synth-language";
pub const MULTIMODAL_MODEL: &str = "synth-multimodal";

// Atlas labels outside every embedded ROI, used for the noise block.
const NOISE_LABELS: [(Hemisphere, u32); 8] = [
    (Hemisphere::L, 1),
    (Hemisphere::R, 1),
    (Hemisphere::L, 3),
    (Hemisphere::R, 3),
    (Hemisphere::L, 5),
    (Hemisphere::R, 5),
    (Hemisphere::L, 6),
    (Hemisphere::R, 6),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelBlocks {
    pub amodal: usize,
    pub vision_only: usize,
    pub language_only: usize,
    pub noise_only: usize,
}

impl Default for VoxelBlocks {
    fn default() -> Self {
        VoxelBlocks {
            amodal: 200,
            vision_only: 200,
            language_only: 200,
            noise_only: 200,
        }
    }
}

impl VoxelBlocks {
    pub fn total(&self) -> usize {
        self.amodal + self.vision_only + self.language_only + self.noise_only
    }

    /// Voxel id ranges of the four blocks, in storage order.
    pub fn ranges(&self) -> [std::ops::Range<u32>; 4] {
        let a = self.amodal as u32;
        let v = a + self.vision_only as u32;
        let l = v + self.language_only as u32;
        let n = l + self.noise_only as u32;
        [0..a, a..v, v..l, l..n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    /// Test stimuli; half images, half their paired captions.
    pub n_test: usize,
    pub d_sem: usize,
    pub d_vis: usize,
    pub d_lang: usize,
    pub voxel_blocks: VoxelBlocks,
    pub noise_sigma: f64,
    pub bold_mode: bool,
    pub seed: u64,
    /// `tr` and run length are used; runs are laid out as needed, or taken
    /// from `runs` when it is non-empty.
    pub scan: ScanParams,
    pub hrf: HrfParams,
    /// Feature noise norm relative to the unit-norm latent parts.
    pub feature_noise: f64,
    /// Scale of the per-modality baseline pattern added to signal voxels.
    pub modality_offset: f64,
    /// Presentations per test stimulus; beta-mode test noise shrinks by
    /// its square root.
    pub test_repeats: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 400,
            n_test: 40,
            d_sem: 32,
            d_vis: 16,
            d_lang: 16,
            voxel_blocks: VoxelBlocks::default(),
            noise_sigma: 1.0,
            bold_mode: false,
            seed: 0,
            scan: ScanParams {
                tr: DEFAULT_TR,
                n_volumes_per_run: 170,
                runs: Vec::new(),
            },
            hrf: HrfParams::default(),
            feature_noise: 0.1,
            modality_offset: 3.0,
            test_repeats: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_train < 2 {
            return bad(format!("n_train must be at least 2, got {}", self.n_train));
        }
        if self.n_test < 4 || self.n_test % 2 != 0 {
            return bad(format!("n_test must be even and at least 4, got {}", self.n_test));
        }
        if self.d_sem == 0 {
            return bad("d_sem must be positive".into());
        }
        let b = &self.voxel_blocks;
        if b.amodal + b.vision_only + b.language_only == 0 {
            return bad("at least one signal block must be non-empty".into());
        }
        if b.vision_only > 0 && self.d_vis == 0 {
            return bad("d_vis must be positive when the vision block is used".into());
        }
        if b.language_only > 0 && self.d_lang == 0 {
            return bad("d_lang must be positive when the language block is used".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("feature_noise", self.feature_noise),
            ("modality_offset", self.modality_offset),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.test_repeats == 0 {
            return bad("test_repeats must be positive".into());
        }
        self.scan
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        self.hrf
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if slots_per_run(&self.scan) == 0 {
            return bad(format!(
                "runs of {} volumes are too short for a single event",
                self.scan.n_volumes_per_run
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn slots_per_run(scan: &ScanParams) -> usize {
    let usable = scan.run_duration() - LEAD_IN - TAIL - STIMULUS_DURATION;
    if usable < 0.0 {
        0
    } else {
        (usable / (STIMULUS_DURATION + INTER_STIMULUS_INTERVAL)).floor() as usize + 1
    }
}

/// Everything the generator drew, kept for oracle checks.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub w_amodal: DMatrix<f64>,
    pub w_vis: DMatrix<f64>,
    pub w_lang: DMatrix<f64>,
    /// Pair index `k` covers `img-k` and `cap-k`; rows of the latents.
    pub pair_ids: Vec<(String, String)>,
    pub semantic: DMatrix<f64>,
    pub vision: DMatrix<f64>,
    pub language: DMatrix<f64>,
    pub offset_image: DVector<f64>,
    pub offset_caption: DVector<f64>,
    pub features: Vec<FeatureMatrix>,
    /// Noiseless responses of the train trials and test stimuli.
    pub train_signal: DMatrix<f64>,
    pub train_ids: Vec<String>,
    pub test_signal: DMatrix<f64>,
    pub test_ids: Vec<String>,
    pub events: Vec<StimulusEvent>,
    pub pairing: BTreeMap<String, String>,
    pub voxel_ids: Vec<u32>,
    pub seed: u64,
}

impl SynthTruth {
    pub fn feature(&self, model_name: &str) -> Option<&FeatureMatrix> {
        self.features.iter().find(|f| f.model_name == model_name)
    }
}

#[derive(Debug, Clone)]
pub enum SynthData {
    Betas { train: BetaMatrix, test: BetaMatrix },
    Bold(BTreeMap<RunId, DMatrix<f64>>),
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub config: SynthConfig,
    pub events: Vec<StimulusEvent>,
    /// Layout actually used, with the runs filled in.
    pub scan: ScanParams,
    pub data: SynthData,
    pub features: Vec<FeatureMatrix>,
    pub atlas: AtlasAssignment,
    pub truth: SynthTruth,
}

impl SynthOutput {
    /// Betas ready for decoding. BOLD output goes through the two-phase GLM.
    pub fn dataset(&self) -> Result<Dataset> {
        let (train, test) = match &self.data {
            SynthData::Betas { train, test } => (train.clone(), test.clone()),
            SynthData::Bold(bold) => two_phase_betas(
                &self.events,
                bold,
                &self.scan,
                &self.config.hrf,
                &GlmConfig::default(),
            )?,
        };
        assemble_dataset(self.events.clone(), train, test)
    }

    pub fn feature(&self, model_name: &str) -> Option<&FeatureMatrix> {
        self.features.iter().find(|f| f.model_name == model_name)
    }

    /// Writes `events.tsv`, `atlas.tsv`, `config.json`, `scan.json`, one
    /// `<model>.ndm` per feature model, and either `train.ndm`/`test.ndm`
    /// or `bold/<run>.ndm`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_events(dir.join("events.tsv"), &self.events)?;
        self.atlas.save(dir.join("atlas.tsv"))?;
        let write_json = |name: &str, v: String| {
            let p = dir.join(name);
            fs::write(&p, v).map_err(|e| Error::io(&p, e))
        };
        write_json("config.json", serde_json::to_string_pretty(&self.config)?)?;
        write_json("scan.json", serde_json::to_string_pretty(&self.scan)?)?;
        for f in &self.features {
            f.save(dir.join(format!("{}.ndm", f.model_name)))?;
        }
        match &self.data {
            SynthData::Betas { train, test } => {
                train.save(dir.join("train.ndm"))?;
                test.save(dir.join("test.ndm"))?;
            }
            SynthData::Bold(bold) => {
                let bdir = dir.join("bold");
                fs::create_dir_all(&bdir).map_err(|e| Error::io(&bdir, e))?;
                for (run, m) in bold {
                    let ids = (0..m.nrows()).map(|k| format!("vol-{k:04}")).collect();
                    let data = m.transpose().iter().map(|v| *v as f32).collect();
                    NdmMatrix::new(m.nrows(), m.ncols(), data, ids)?
                        .save(bdir.join(format!("{}.ndm", run.file_stem())))?;
                }
            }
        }
        let sig = |m: &DMatrix<f64>, ids: &[String]| {
            BetaMatrix::from_f64(m, ids.to_vec(), self.truth.voxel_ids.clone())
        };
        let tdir = dir.join("truth");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        sig(&self.truth.train_signal, &self.truth.train_ids)?.save(tdir.join("signal_train.ndm"))?;
        sig(&self.truth.test_signal, &self.truth.test_ids)?.save(tdir.join("signal_test.ndm"))
    }
}

/// Independent stream per generator stage, so changing one stage's draws
/// leaves the others untouched.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    // row-major draw order keeps values independent of storage layout
    let mut m = DMatrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    let mut m = gaussian(rng, r, c);
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    m
}

struct Presentation {
    pair: usize,
    modality: Modality,
    role: Role,
}

fn stimulus_id(pair: usize, m: Modality) -> String {
    match m {
        Modality::Image => format!("img-{pair:04}"),
        Modality::Caption => format!("cap-{pair:04}"),
    }
}

/// Packs the shuffled presentations into runs with periodic fixations and
/// one-back repeats.
fn lay_out(
    cfg: &SynthConfig,
    seq: &[Presentation],
) -> Result<(Vec<StimulusEvent>, ScanParams)> {
    let slots = slots_per_run(&cfg.scan);
    let soa = STIMULUS_DURATION + INTER_STIMULUS_INTERVAL;
    let mut events = Vec::new();
    let mut runs: Vec<RunId> = Vec::new();
    let mut it = seq.iter().peekable();
    while it.peek().is_some() {
        let run = if cfg.scan.runs.is_empty() {
            RunId::new(1, runs.len() as u32 + 1)
        } else {
            *cfg.scan.runs.get(runs.len()).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{} runs are too few for {} presentations",
                    cfg.scan.runs.len(),
                    seq.len()
                ))
            })?
        };
        runs.push(run);
        let mut last: Option<&Presentation> = None;
        let mut since_fix = 0;
        let mut since_oneback = 0;
        for slot in 0..slots {
            let onset = LEAD_IN + slot as f64 * soa;
            let mut push = |id: String, modality: Option<Modality>, role: Role, paired: String| {
                events.push(StimulusEvent {
                    stimulus_id: id,
                    modality,
                    onset,
                    duration: STIMULUS_DURATION,
                    run: run.run,
                    session: run.session,
                    role,
                    paired_id: paired,
                });
            };
            if since_fix == FIXATION_EVERY {
                push("fixation".into(), None, Role::Fixation, String::new());
                since_fix = 0;
                continue;
            }
            if since_oneback == ONE_BACK_EVERY {
                let p = last.expect("a stimulus precedes every repeat");
                push(
                    stimulus_id(p.pair, p.modality),
                    Some(p.modality),
                    Role::OneBackTarget,
                    stimulus_id(p.pair, p.modality.other()),
                );
                since_oneback = 0;
                continue;
            }
            let Some(p) = it.next() else { break };
            push(
                stimulus_id(p.pair, p.modality),
                Some(p.modality),
                p.role,
                stimulus_id(p.pair, p.modality.other()),
            );
            last = Some(p);
            since_fix += 1;
            since_oneback += 1;
        }
    }
    let scan = ScanParams::new(cfg.scan.tr, cfg.scan.n_volumes_per_run, runs)?;
    Ok((events, scan))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let b = cfg.voxel_blocks;
    let n_vox = b.total();
    let n_test_pairs = cfg.n_test / 2;
    let n_pairs = cfg.n_train + n_test_pairs;

    let mut rng_w = stream(cfg.seed, 0);
    let w_amodal = gaussian(&mut rng_w, cfg.d_sem, b.amodal);
    let w_vis = gaussian(&mut rng_w, cfg.d_vis, b.vision_only);
    let w_lang = gaussian(&mut rng_w, cfg.d_lang, b.language_only);
    let n_signal = b.amodal + b.vision_only + b.language_only;
    let offset = |rng: &mut ChaCha8Rng| {
        let mut o = DVector::zeros(n_vox);
        for i in 0..n_signal {
            let z: f64 = StandardNormal.sample(rng);
            o[i] = cfg.modality_offset * z;
        }
        o
    };
    let offset_image = offset(&mut rng_w);
    let offset_caption = offset(&mut rng_w);

    let mut rng_lat = stream(cfg.seed, 1);
    let semantic = unit_rows(&mut rng_lat, n_pairs, cfg.d_sem);
    let vision = unit_rows(&mut rng_lat, n_pairs, cfg.d_vis);
    let language = unit_rows(&mut rng_lat, n_pairs, cfg.d_lang);

    let response = |pair: usize, m: Modality| -> DVector<f64> {
        let mut r = DVector::zeros(n_vox);
        let [ra, rv, rl, _] = b.ranges();
        let s = semantic.row(pair);
        r.rows_mut(ra.start as usize, b.amodal)
            .copy_from(&(s * &w_amodal).transpose());
        match m {
            Modality::Image => {
                let v = vision.row(pair);
                r.rows_mut(rv.start as usize, b.vision_only)
                    .copy_from(&(v * &w_vis).transpose());
                r += &offset_image;
            }
            Modality::Caption => {
                let l = language.row(pair);
                r.rows_mut(rl.start as usize, b.language_only)
                    .copy_from(&(l * &w_lang).transpose());
                r += &offset_caption;
            }
        }
        r
    };

    // features
    let mut rng_f = stream(cfg.seed, 2);
    let noisy = |rng: &mut ChaCha8Rng, parts: &[&DMatrix<f64>]| {
        let d: usize = parts.iter().map(|p| p.ncols()).sum();
        let mut m = DMatrix::zeros(n_pairs, d);
        let mut c0 = 0;
        for p in parts {
            m.columns_mut(c0, p.ncols()).copy_from(*p);
            c0 += p.ncols();
        }
        let sd = cfg.feature_noise * (parts.len() as f64 / d as f64).sqrt();
        // f32-representable so files on disk hold exactly these values
        (m + gaussian(rng, n_pairs, d) * sd).map(|v| v as f32 as f64)
    };
    let vis_feats = noisy(&mut rng_f, &[&semantic, &vision]);
    let lang_feats = noisy(&mut rng_f, &[&semantic, &language]);
    let mut mm = DMatrix::zeros(n_pairs, vis_feats.ncols() + lang_feats.ncols());
    mm.columns_mut(0, vis_feats.ncols()).copy_from(&vis_feats);
    mm.columns_mut(vis_feats.ncols(), lang_feats.ncols())
        .copy_from(&lang_feats);
    let ids = |m: Modality| (0..n_pairs).map(|k| stimulus_id(k, m)).collect::<Vec<_>>();
    let features = vec![
        FeatureMatrix::new(vis_feats, ids(Modality::Image), VISION_MODEL, FeatureModality::Vision)?,
        FeatureMatrix::new(lang_feats, ids(Modality::Caption), LANGUAGE_MODEL, FeatureModality::Language)?,
        FeatureMatrix::new(mm, ids(Modality::Image), MULTIMODAL_MODEL, FeatureModality::MultimodalConcat)?,
    ];

    // presentation order
    let mut rng_layout = stream(cfg.seed, 3);
    let mut seq: Vec<Presentation> = (0..cfg.n_train)
        .map(|k| Presentation {
            pair: k,
            modality: if k % 2 == 0 { Modality::Image } else { Modality::Caption },
            role: Role::Train,
        })
        .collect();
    for k in cfg.n_train..n_pairs {
        for m in [Modality::Image, Modality::Caption] {
            for _ in 0..cfg.test_repeats {
                seq.push(Presentation {
                    pair: k,
                    modality: m,
                    role: Role::Test,
                });
            }
        }
    }
    seq.shuffle(&mut rng_layout);
    let (events, scan) = lay_out(cfg, &seq)?;

    let mut train_ids = Vec::new();
    let mut test_ids: Vec<String> = Vec::new();
    let mut signal_of: BTreeMap<String, DVector<f64>> = BTreeMap::new();
    for p in &seq {
        let id = stimulus_id(p.pair, p.modality);
        if !signal_of.contains_key(&id) {
            signal_of.insert(id.clone(), response(p.pair, p.modality));
        }
    }
    for e in &events {
        match e.role {
            Role::Train => train_ids.push(e.stimulus_id.clone()),
            Role::Test if !test_ids.contains(&e.stimulus_id) => test_ids.push(e.stimulus_id.clone()),
            _ => {}
        }
    }
    let stack = |ids: &[String]| {
        let mut m = DMatrix::zeros(ids.len(), n_vox);
        for (i, id) in ids.iter().enumerate() {
            m.row_mut(i).copy_from(&signal_of[id].transpose());
        }
        m
    };
    let train_signal = stack(&train_ids);
    let test_signal = stack(&test_ids);
    let voxel_ids: Vec<u32> = (0..n_vox as u32).collect();

    let mut rng_noise = stream(cfg.seed, 4);
    let data = if cfg.bold_mode {
        SynthData::Bold(synth_bold(cfg, &events, &scan, &signal_of, n_vox, &mut rng_noise)?)
    } else {
        let sigma_test = cfg.noise_sigma / (cfg.test_repeats as f64).sqrt();
        let train = &train_signal + gaussian(&mut rng_noise, train_ids.len(), n_vox) * cfg.noise_sigma;
        let test = &test_signal + gaussian(&mut rng_noise, test_ids.len(), n_vox) * sigma_test;
        SynthData::Betas {
            train: BetaMatrix::from_f64(&train, train_ids.clone(), voxel_ids.clone())?,
            test: BetaMatrix::from_f64(&test, test_ids.clone(), voxel_ids.clone())?,
        }
    };

    let atlas = block_atlas(&b)?;
    let pairing = events
        .iter()
        .filter(|e| e.role.is_stimulus())
        .map(|e| (e.stimulus_id.clone(), e.paired_id.clone()))
        .collect();
    let truth = SynthTruth {
        w_amodal,
        w_vis,
        w_lang,
        pair_ids: (0..n_pairs)
            .map(|k| (stimulus_id(k, Modality::Image), stimulus_id(k, Modality::Caption)))
            .collect(),
        semantic,
        vision,
        language,
        offset_image,
        offset_caption,
        features: features.clone(),
        train_signal,
        train_ids,
        test_signal,
        test_ids,
        events: events.clone(),
        pairing,
        voxel_ids,
        seed: cfg.seed,
    };
    Ok(SynthOutput {
        config: cfg.clone(),
        events,
        scan,
        data,
        features,
        atlas,
        truth,
    })
}

/// Per-run BOLD: event regressors scaled by their response patterns, a
/// per-run voxel baseline and white noise. Fixations and one-back repeats
/// each get one fixed pattern.
fn synth_bold(
    cfg: &SynthConfig,
    events: &[StimulusEvent],
    scan: &ScanParams,
    signal_of: &BTreeMap<String, DVector<f64>>,
    n_vox: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<RunId, DMatrix<f64>>> {
    let kernel = canonical_hrf(&cfg.hrf, scan.tr)?;
    let nv = scan.n_volumes_per_run;
    let mut rng_nuis = stream(cfg.seed, 5);
    let fixation = gaussian(&mut rng_nuis, 1, n_vox).row(0).into_owned();
    let one_back = gaussian(&mut rng_nuis, 1, n_vox).row(0).into_owned();
    let mut out = BTreeMap::new();
    for run in &scan.runs {
        let baseline = gaussian(&mut rng_nuis, 1, n_vox);
        let mut y = DMatrix::from_fn(nv, n_vox, |_, c| baseline[(0, c)]);
        for e in events.iter().filter(|e| e.run_id() == *run) {
            let pattern = match e.role {
                Role::Train | Role::Test => signal_of[&e.stimulus_id].transpose(),
                Role::Fixation | Role::Blank => fixation.clone(),
                Role::OneBackTarget => one_back.clone(),
            };
            let reg = event_regressor(e, scan.tr, nv, &kernel);
            y += reg * pattern;
        }
        y += gaussian(rng, nv, n_vox) * cfg.noise_sigma;
        out.insert(*run, y);
    }
    Ok(out)
}

/// Labels the amodal block with high-level visual labels, the vision block
/// with low-level visual labels, the language block with language labels and
/// the noise block with labels outside all three.
pub fn block_atlas(b: &VoxelBlocks) -> Result<AtlasAssignment> {
    let mut atlas = AtlasAssignment::default();
    let [ra, rv, rl, rn] = b.ranges();
    for (range, roi) in [
        (ra, RoiName::HighLevelVisual),
        (rv, RoiName::LowLevelVisual),
        (rl, RoiName::Language),
    ] {
        let labels = load_roi_definition(roi)?;
        for (i, v) in range.enumerate() {
            let l = &labels[i % labels.len()];
            atlas.insert(v, l.hemisphere, l.label_id);
        }
    }
    for (i, v) in rn.enumerate() {
        let (h, id) = NOISE_LABELS[i % NOISE_LABELS.len()];
        atlas.insert(v, h, id);
    }
    Ok(atlas)
}

/// Overall pairwise accuracy of the least-squares linear readout from the
/// noiseless train responses to the train targets, applied to the
/// noiseless responses of `test_ids`.
pub fn oracle_best_accuracy(truth: &SynthTruth, feats: &FeatureMatrix, test_ids: &[String]) -> Result<f64> {
    oracle_accuracy_on(truth, feats, test_ids, &truth.voxel_ids)
}

/// As [`oracle_best_accuracy`], reading out only from `voxels`.
pub fn oracle_accuracy_on(
    truth: &SynthTruth,
    feats: &FeatureMatrix,
    test_ids: &[String],
    voxels: &[u32],
) -> Result<f64> {
    let own = truth.feature(&feats.model_name).ok_or_else(|| {
        Error::MismatchedProvenance(format!("no feature model named {}", feats.model_name))
    })?;
    if own != feats {
        return Err(Error::MismatchedProvenance(format!(
            "{} differs from the generated matrix",
            feats.model_name
        )));
    }
    let cols: Vec<usize> = voxels
        .iter()
        .map(|v| {
            truth
                .voxel_ids
                .iter()
                .position(|x| x == v)
                .ok_or(Error::UnknownVoxel(*v))
        })
        .collect::<Result<_>>()?;
    let event_of = |id: &String| {
        truth
            .events
            .iter()
            .find(|e| e.role.is_stimulus() && &e.stimulus_id == id)
            .ok_or_else(|| Error::MissingTarget(id.clone()))
    };
    let train_events: Vec<&StimulusEvent> = truth.train_ids.iter().map(event_of).collect::<Result<_>>()?;
    let test_events: Vec<&StimulusEvent> = test_ids.iter().map(event_of).collect::<Result<_>>()?;
    let test_rows: Vec<usize> = test_ids
        .iter()
        .map(|id| {
            truth
                .test_ids
                .iter()
                .position(|t| t == id)
                .ok_or_else(|| Error::InvalidInput(format!("{id} is not a test stimulus")))
        })
        .collect::<Result<_>>()?;

    let y = assign_targets(train_events.iter().copied(), feats, &truth.pairing)?;
    let x = truth.train_signal.select_columns(&cols);
    let x_mean = x.row_mean();
    let y_mean = y.values().row_mean();
    let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[(r, c)] - x_mean[c]);
    let yc = DMatrix::from_fn(y.values().nrows(), y.values().ncols(), |r, c| {
        y.values()[(r, c)] - y_mean[c]
    });
    let (w, _) = lstsq(&xc, &yc)?;
    let xt = truth.test_signal.select_rows(&test_rows).select_columns(&cols);
    let xt = DMatrix::from_fn(xt.nrows(), xt.ncols(), |r, c| xt[(r, c)] - x_mean[c]);
    let mut preds = xt * w;
    for mut row in preds.row_iter_mut() {
        row += &y_mean;
    }
    let targets = assign_targets(test_events.iter().copied(), feats, &truth.pairing)?;
    let modalities: Vec<Modality> = test_events.iter().map(|e| e.modality.expect("stimulus")).collect();
    let report = score_predictions(
        &preds,
        targets.values(),
        &modalities,
        &EvalOptions {
            bootstrap: 1,
            ..EvalOptions::default()
        },
    )?;
    Ok(report.acc_overall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::two_phase_betas;
    use crate::roi::{apply_mask, named_mask};

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 60,
            n_test: 8,
            d_sem: 6,
            d_vis: 4,
            d_lang: 4,
            voxel_blocks: VoxelBlocks {
                amodal: 20,
                vision_only: 15,
                language_only: 15,
                noise_only: 10,
            },
            noise_sigma: 0.0,
            test_repeats: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = [
            SynthConfig { n_test: 5, ..small() },
            SynthConfig { d_sem: 0, ..small() },
            SynthConfig { noise_sigma: -1.0, ..small() },
            SynthConfig {
                voxel_blocks: VoxelBlocks {
                    amodal: 0,
                    vision_only: 0,
                    language_only: 0,
                    noise_only: 10,
                },
                ..small()
            },
            SynthConfig {
                scan: ScanParams {
                    tr: 2.0,
                    n_volumes_per_run: 5,
                    runs: vec![],
                },
                ..small()
            },
        ];
        for c in bad {
            assert!(matches!(generate(&c), Err(Error::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn config_json_fills_defaults() {
        let c = SynthConfig::from_json(r#"{"n_train": 10, "seed": 3}"#).unwrap();
        assert_eq!(c.n_train, 10);
        assert_eq!(c.n_test, 40);
        assert_eq!(c.voxel_blocks, VoxelBlocks::default());
        assert!(SynthConfig::from_json(r#"{"n_test": 3}"#).is_err());
    }

    #[test]
    fn zero_noise_betas_equal_forward_model() {
        let out = generate(&small()).unwrap();
        let SynthData::Betas { train, test } = &out.data else { panic!() };
        assert_eq!(train.values(), &out.truth.train_signal.map(|v| v as f32));
        assert_eq!(test.values(), &out.truth.test_signal.map(|v| v as f32));
        assert_eq!(train.n_trials(), 60);
        assert_eq!(test.n_trials(), 8);
    }

    #[test]
    fn responses_follow_block_structure() {
        let cfg = SynthConfig {
            modality_offset: 0.0,
            ..small()
        };
        let out = generate(&cfg).unwrap();
        let t = &out.truth;
        let [_, rv, rl, rn] = cfg.voxel_blocks.ranges();
        for (i, id) in t.train_ids.iter().enumerate() {
            let row = t.train_signal.row(i);
            let silent = if id.starts_with("img") { &rl } else { &rv };
            assert!(silent.clone().all(|v| row[v as usize] == 0.0));
            assert!(rn.clone().all(|v| row[v as usize] == 0.0));
            let k: usize = id[4..].parse().unwrap();
            let expect = t.semantic.row(k) * &t.w_amodal;
            assert!((row.columns(0, 20) - expect).amax() < 1e-12);
        }
        for m in [&t.semantic, &t.vision, &t.language] {
            for r in m.row_iter() {
                assert!((r.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_output_is_deterministic() {
        let cfg = SynthConfig {
            noise_sigma: 0.7,
            ..small()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.features, b.features);
        let (SynthData::Betas { train: ta, .. }, SynthData::Betas { train: tb, .. }) = (&a.data, &b.data) else {
            panic!()
        };
        assert_eq!(ta, tb);
        let c = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn events_form_a_valid_dataset() {
        let out = generate(&small()).unwrap();
        let ds = out.dataset().unwrap();
        assert_eq!(ds.train_events().len(), 60);
        let imgs = ds
            .train_events()
            .iter()
            .filter(|e| e.modality == Some(Modality::Image))
            .count();
        assert_eq!(imgs, 30);
        assert!(out.events.iter().any(|e| e.role == Role::Fixation));
        assert!(out.events.iter().any(|e| e.role == Role::OneBackTarget));
        let reps = out
            .events
            .iter()
            .filter(|e| e.stimulus_id == out.truth.test_ids[0] && e.role == Role::Test)
            .count();
        assert_eq!(reps, 2);
    }

    #[test]
    fn zero_noise_bold_round_trips_through_glm() {
        let out = generate(&SynthConfig {
            bold_mode: true,
            ..small()
        })
        .unwrap();
        let SynthData::Bold(bold) = &out.data else { panic!() };
        let (train, test) =
            two_phase_betas(&out.events, bold, &out.scan, &out.config.hrf, &GlmConfig::default()).unwrap();
        let t = &out.truth;
        let check = |b: &BetaMatrix, sig: &DMatrix<f64>, ids: &[String]| {
            for (i, id) in b.trial_ids().iter().enumerate() {
                let r = ids.iter().position(|x| x == id).unwrap();
                let truth = sig.row(r);
                let err = (b.to_f64().row(i) - truth).norm() / truth.norm();
                assert!(err < 1e-5, "{id}: {err}");
            }
        };
        check(&train, &t.train_signal, &t.train_ids);
        // test betas come from the first fit, which leaves train responses
        // unmodelled, so only their shape is checked
        assert_eq!(test.n_trials(), t.test_ids.len());
    }

    #[test]
    fn atlas_blocks_map_to_rois() {
        let cfg = small();
        let out = generate(&cfg).unwrap();
        let [ra, rv, rl, _] = cfg.voxel_blocks.ranges();
        let high = named_mask(RoiName::HighLevelVisual, &out.atlas).unwrap();
        let low = named_mask(RoiName::LowLevelVisual, &out.atlas).unwrap();
        let lang = named_mask(RoiName::Language, &out.atlas).unwrap();
        assert_eq!(high.voxel_ids, ra.collect::<Vec<_>>());
        assert_eq!(low.voxel_ids, rv.collect::<Vec<_>>());
        assert_eq!(lang.voxel_ids, rl.collect::<Vec<_>>());
        let ds = out.dataset().unwrap();
        assert_eq!(apply_mask(ds.betas_train(), &high).unwrap().n_voxels(), 20);
    }

    #[test]
    fn oracle_is_perfect_without_noise_and_checks_provenance() {
        let out = generate(&SynthConfig {
            n_train: 200,
            ..small()
        })
        .unwrap();
        let t = &out.truth;
        for f in &out.features {
            assert_eq!(oracle_best_accuracy(t, f, &t.test_ids).unwrap(), 1.0);
        }
        let other = generate(&SynthConfig { seed: 9, ..small() }).unwrap();
        assert!(matches!(
            oracle_best_accuracy(t, &other.features[0], &t.test_ids),
            Err(Error::MismatchedProvenance(_))
        ));
        let [.., rn] = small().voxel_blocks.ranges();
        let noise: Vec<u32> = rn.collect();
        assert_eq!(oracle_accuracy_on(t, &out.features[0], &t.test_ids, &noise).unwrap(), 0.5);
    }

    #[test]
    fn save_dir_writes_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&small()).unwrap();
        out.save_dir(dir.path()).unwrap();
        let ds = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(ds.betas_train(), out.dataset().unwrap().betas_train());
        let f = FeatureMatrix::load(dir.path().join("synth-language.ndm"), None).unwrap();
        assert_eq!(&f, out.feature(LANGUAGE_MODEL).unwrap());
        assert!(AtlasAssignment::load(dir.path().join("atlas.tsv")).is_ok());
    }
}
