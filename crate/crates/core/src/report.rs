//! Experiment grids: mask, train and evaluate every (features, mode, ROI)
//! tuple of a plan, then write per-tuple reports, an aggregate CSV, one SVG
//! chart per ROI and a manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, DEFAULT_BOOTSTRAP};
use crate::model::{Dataset, FeatureMatrix, FeatureModality};
use crate::ridge::{train_decoder, CvConfig, DecoderMode};
use crate::roi::{apply_mask, named_mask, AtlasAssignment, RoiName};

pub const WORKERS_ENV: &str = "NEURODEC_WORKERS";

pub const CSV_HEADER: &str = "model,feature_modality,mode,roi,acc_captions,acc_images,acc_overall,\
ci_captions_lo,ci_captions_hi,ci_images_lo,ci_images_hi,ci_overall_lo,ci_overall_hi";

fn via_display<T: fmt::Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn via_from_str<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
where
    T: FromStr,
    T::Err: fmt::Display,
    D: Deserializer<'de>,
{
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlanRoi {
    Whole,
    Named(RoiName),
}

impl fmt::Display for PlanRoi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanRoi::Whole => f.write_str("whole"),
            PlanRoi::Named(r) => r.fmt(f),
        }
    }
}

impl FromStr for PlanRoi {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("whole") {
            return Ok(PlanRoi::Whole);
        }
        match s.parse()? {
            RoiName::Custom => Err(Error::UnknownRoi(format!("{s} (plans accept whole, low, high, language)"))),
            r => Ok(PlanRoi::Named(r)),
        }
    }
}

/// A feature file, optionally with the model name and modality to use when
/// the file carries no metadata.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanFeatures {
    Path(PathBuf),
    Described {
        path: PathBuf,
        model: String,
        #[serde(serialize_with = "via_display", deserialize_with = "via_from_str")]
        modality: FeatureModality,
    },
}

impl PlanFeatures {
    pub fn path(&self) -> &Path {
        match self {
            PlanFeatures::Path(p) | PlanFeatures::Described { path: p, .. } => p,
        }
    }

    pub fn load(&self) -> Result<FeatureMatrix> {
        match self {
            PlanFeatures::Path(p) => FeatureMatrix::load(p, None),
            PlanFeatures::Described { path, model, modality } => {
                FeatureMatrix::load(path, Some((model.as_str(), *modality)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanTuple {
    pub features: PlanFeatures,
    #[serde(serialize_with = "via_display", deserialize_with = "via_from_str")]
    pub mode: DecoderMode,
    #[serde(serialize_with = "via_display", deserialize_with = "via_from_str")]
    pub roi: PlanRoi,
}

/// Cartesian product shorthand for tuples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanGrid {
    pub features: Vec<PlanFeatures>,
    pub modes: Vec<String>,
    pub rois: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n: DEFAULT_BOOTSTRAP,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    /// Directory with `events.tsv`, `train.ndm` and `test.ndm`.
    pub dataset: PathBuf,
    /// Needed when any tuple uses an ROI other than `whole`.
    #[serde(default)]
    pub atlas: Option<PathBuf>,
    #[serde(default)]
    pub tuples: Vec<PlanTuple>,
    #[serde(default)]
    pub grid: Option<PlanGrid>,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    pub out_dir: PathBuf,
}

impl RunPlan {
    /// Parses a plan; relative paths are taken relative to `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut p: RunPlan = serde_json::from_str(text)?;
        let fix = |path: &mut PathBuf| {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        };
        fix(&mut p.dataset);
        fix(&mut p.out_dir);
        if let Some(a) = p.atlas.as_mut() {
            fix(a);
        }
        let fix_f = |f: &mut PlanFeatures| match f {
            PlanFeatures::Path(path) | PlanFeatures::Described { path, .. } => fix(path),
        };
        p.tuples.iter_mut().for_each(|t| fix_f(&mut t.features));
        if let Some(g) = p.grid.as_mut() {
            g.features.iter_mut().for_each(fix_f);
        }
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Explicit tuples followed by the grid expansion (features, then modes,
    /// then ROIs).
    pub fn expanded_tuples(&self) -> Result<Vec<PlanTuple>> {
        let mut out = self.tuples.clone();
        if let Some(g) = &self.grid {
            for f in &g.features {
                for m in &g.modes {
                    let mode: DecoderMode = m.parse().map_err(Error::InvalidInput)?;
                    for r in &g.rois {
                        out.push(PlanTuple {
                            features: f.clone(),
                            mode,
                            roi: r.parse()?,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<Vec<PlanTuple>> {
        let tuples = self.expanded_tuples()?;
        if tuples.is_empty() {
            return Err(Error::InvalidInput("plan has no tuples".into()));
        }
        let mut seen = HashSet::new();
        for t in &tuples {
            if !seen.insert((t.features.path().to_path_buf(), t.mode, t.roi)) {
                return Err(Error::InvalidInput(format!(
                    "duplicate tuple ({}, {}, {})",
                    t.features.path().display(),
                    t.mode,
                    t.roi
                )));
            }
        }
        self.cv.validate()?;
        if self.bootstrap.n == 0 {
            return Err(Error::InvalidInput("bootstrap count must be >= 1".into()));
        }
        let mut required: Vec<&Path> = vec![&self.dataset];
        let needs_atlas = tuples.iter().any(|t| t.roi != PlanRoi::Whole);
        match (&self.atlas, needs_atlas) {
            (Some(a), _) => required.push(a),
            (None, true) => {
                return Err(Error::InvalidInput("ROI tuples need an atlas".into()));
            }
            _ => {}
        }
        required.extend(tuples.iter().map(|t| t.features.path()));
        for p in required {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by plan"),
                ));
            }
        }
        Ok(tuples)
    }
}

/// Outcome of one tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub features: PathBuf,
    pub model: String,
    pub feature_modality: String,
    pub mode: String,
    pub roi: String,
    /// `ok` or `failed:<error>`.
    pub status: String,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub csv: PathBuf,
    pub figures: Vec<PathBuf>,
}

impl Manifest {
    pub fn all_ok(&self) -> bool {
        self.entries.iter().all(|e| e.status == "ok")
    }

    /// 0 when every tuple succeeded, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_ok() {
            0
        } else {
            2
        }
    }
}

/// Worker cap from the environment, if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

struct Row {
    model: String,
    feature_modality: String,
    mode: DecoderMode,
    roi: PlanRoi,
    report: EvalReport,
}

fn run_tuple(
    t: &PlanTuple,
    ds: &Dataset,
    feats: &Result<FeatureMatrix, String>,
    atlas: Option<&AtlasAssignment>,
    plan: &RunPlan,
) -> Result<EvalReport, String> {
    let feats = feats.as_ref().map_err(Clone::clone)?;
    let inner = || -> Result<EvalReport> {
        let ds = match t.roi {
            PlanRoi::Whole => ds.clone(),
            PlanRoi::Named(r) => {
                let atlas = atlas.ok_or_else(|| Error::InvalidInput("no atlas".into()))?;
                let m = named_mask(r, atlas)?;
                ds.with_betas(apply_mask(ds.betas_train(), &m)?, apply_mask(ds.betas_test(), &m)?)?
            }
        };
        let d = train_decoder(&ds, feats, t.mode, &plan.cv)?;
        let mut rep = evaluate(&d, &ds, feats, plan.bootstrap.n, plan.bootstrap.seed)?;
        rep.decoder_meta.insert("roi".into(), t.roi.to_string());
        Ok(rep)
    };
    inner().map_err(|e| e.to_string())
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "features".into())
}

/// Runs every tuple and writes all outputs under `plan.out_dir`. Per-tuple
/// failures are recorded in the manifest; only plan-level problems are
/// returned as errors.
pub fn run_plan(plan: &RunPlan) -> Result<Manifest> {
    run_plan_with_workers(plan, workers_from_env())
}

pub fn run_plan_with_workers(plan: &RunPlan, workers: Option<usize>) -> Result<Manifest> {
    let tuples = plan.validate()?;
    let ds = Dataset::load_dir(&plan.dataset)?;
    let atlas = plan.atlas.as_ref().map(AtlasAssignment::load).transpose()?;

    let mut feature_cache: HashMap<&PlanFeatures, Result<FeatureMatrix, String>> = HashMap::new();
    for t in &tuples {
        feature_cache
            .entry(&t.features)
            .or_insert_with(|| t.features.load().map_err(|e| e.to_string()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
    let results: Vec<Result<EvalReport, String>> = pool.install(|| {
        tuples
            .par_iter()
            .map(|t| run_tuple(t, &ds, &feature_cache[&t.features], atlas.as_ref(), plan))
            .collect()
    });

    // all file output happens here, on one thread
    let out = &plan.out_dir;
    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for (t, res) in tuples.iter().zip(results) {
        let (model, fm) = match &feature_cache[&t.features] {
            Ok(f) => (f.model_name.clone(), f.feature_modality.to_string()),
            Err(_) => (file_stem(t.features.path()), String::new()),
        };
        let mut entry = ManifestEntry {
            features: t.features.path().to_path_buf(),
            model: model.clone(),
            feature_modality: fm.clone(),
            mode: t.mode.to_string(),
            roi: t.roi.to_string(),
            status: String::new(),
            report: None,
        };
        match res {
            Ok(report) => {
                let name = format!("{}__{}__{}.json", file_stem(t.features.path()), t.mode, t.roi);
                let path = reports_dir.join(name);
                fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .map_err(|e| Error::io(&path, e))?;
                entry.status = "ok".into();
                entry.report = Some(path);
                rows.push(Row {
                    model,
                    feature_modality: fm,
                    mode: t.mode,
                    roi: t.roi,
                    report,
                });
            }
            Err(e) => entry.status = format!("failed:{e}"),
        }
        entries.push(entry);
    }

    let csv = out.join("results.csv");
    fs::write(&csv, aggregate_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    let mut figures = Vec::new();
    let mut rois: Vec<PlanRoi> = rows.iter().map(|r| r.roi).collect();
    rois.sort();
    rois.dedup();
    for roi in rois {
        let path = out.join(format!("accuracy_{roi}.svg"));
        let sel: Vec<&Row> = rows.iter().filter(|r| r.roi == roi).collect();
        fs::write(&path, bar_chart_svg(&format!("ROI: {roi}"), &sel)).map_err(|e| Error::io(&path, e))?;
        figures.push(path);
    }
    let manifest = Manifest {
        entries,
        csv,
        figures,
    };
    let mpath = out.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

fn aggregate_csv(rows: &[Row]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let p = &r.report;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.model),
            r.feature_modality,
            r.mode,
            r.roi,
            p.acc_captions,
            p.acc_images,
            p.acc_overall,
            p.ci95_captions.0,
            p.ci95_captions.1,
            p.ci95_images.0,
            p.ci95_images.1,
            p.ci95_overall.0,
            p.ci95_overall.1
        );
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Bars of overall accuracy (with CI whiskers) per model and mode, with
/// caption (circle) and image (triangle) accuracies overlaid as markers.
fn bar_chart_svg(title: &str, rows: &[&Row]) -> String {
    const BAR: f64 = 18.0;
    const GAP: f64 = 14.0;
    const LEFT: f64 = 60.0;
    const TOP: f64 = 40.0;
    const H: f64 = 240.0;
    let width = LEFT + 20.0 + rows.len() as f64 * (BAR + 4.0) + GAP * rows.len() as f64 / 3.0 + 20.0;
    let height = TOP + H + 120.0;
    let y = |acc: f64| TOP + H * (1.0 - acc.clamp(0.0, 1.0));
    let color = |m: DecoderMode| match m {
        DecoderMode::Agnostic => "#4c72b0",
        DecoderMode::ImageOnly => "#dd8452",
        DecoderMode::CaptionOnly => "#55a868",
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="20" font-size="14">{}</text>"#, xml_escape(title));
    for tick in 0..=10 {
        let a = tick as f64 / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{a:.1}</text>"##,
            width - 10.0,
            y(a),
            y(a),
            LEFT - 4.0,
            y(a) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#000" stroke-dasharray="4 3"/>"##,
        width - 10.0,
        y(0.5),
        y(0.5)
    );
    let mut x = LEFT + 10.0;
    let mut last_model: Option<&str> = None;
    for r in rows {
        if last_model.is_some_and(|m| m != r.model) {
            x += GAP;
        }
        last_model = Some(&r.model);
        let p = &r.report;
        let cx = x + BAR / 2.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{BAR}" height="{:.1}" fill="{}"><title>{} {}: {:.3}</title></rect>"#,
            y(p.acc_overall),
            y(0.0) - y(p.acc_overall),
            color(r.mode),
            xml_escape(&r.model),
            r.mode,
            p.acc_overall
        );
        let _ = writeln!(
            s,
            r##"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="#333"/>"##,
            y(p.ci95_overall.0),
            y(p.ci95_overall.1)
        );
        let _ = writeln!(
            s,
            r##"<circle cx="{cx:.1}" cy="{:.1}" r="3.5" fill="#fff" stroke="#000"/>"##,
            y(p.acc_captions)
        );
        let ty = y(p.acc_images);
        let _ = writeln!(
            s,
            r##"<polygon points="{:.1},{:.1} {:.1},{:.1} {:.1},{:.1}" fill="#000"/>"##,
            cx,
            ty - 4.0,
            cx - 4.0,
            ty + 3.0,
            cx + 4.0,
            ty + 3.0
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.1},{:.1}) rotate(60)">{} ({})</text>"#,
            cx - 3.0,
            y(0.0) + 8.0,
            xml_escape(&r.model),
            r.mode
        );
        x += BAR + 4.0;
    }
    let ly = height - 14.0;
    let _ = writeln!(
        s,
        r##"<circle cx="{LEFT}" cy="{:.1}" r="3.5" fill="#fff" stroke="#000"/><text x="{:.1}" y="{ly:.1}">captions</text><polygon points="{:.1},{:.1} {:.1},{:.1} {:.1},{:.1}" fill="#000"/><text x="{:.1}" y="{ly:.1}">images</text>"##,
        ly - 4.0,
        LEFT + 8.0,
        LEFT + 80.0,
        ly - 8.0,
        LEFT + 76.0,
        ly - 1.0,
        LEFT + 84.0,
        ly - 1.0,
        LEFT + 90.0
    );
    s.push_str("</svg>\n");
    s
}

/// Accuracies of agnostic decoders trained on mean-pooled and on
/// CLS-pooled features of one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolingRow {
    pub model: String,
    pub pooling: String,
    pub acc_captions: f64,
    pub acc_images: f64,
    pub acc_overall: f64,
}

pub fn compare_pooling(
    features_mean: &FeatureMatrix,
    features_cls: &FeatureMatrix,
    ds: &Dataset,
    cv: &CvConfig,
    bootstrap: BootstrapConfig,
) -> Result<Vec<PoolingRow>> {
    if features_mean.stimulus_ids() != features_cls.stimulus_ids() {
        return Err(Error::AlignmentMismatch(
            "pooled feature files list different stimuli".into(),
        ));
    }
    if features_mean.feature_modality != features_cls.feature_modality {
        return Err(Error::AlignmentMismatch(format!(
            "feature modalities differ: {} vs {}",
            features_mean.feature_modality, features_cls.feature_modality
        )));
    }
    let model = features_mean.model_name.clone();
    [("mean", features_mean), ("cls", features_cls)]
        .into_iter()
        .map(|(pooling, f)| {
            let d = train_decoder(ds, f, DecoderMode::Agnostic, cv)?;
            let r = evaluate(&d, ds, f, bootstrap.n, bootstrap.seed)?;
            Ok(PoolingRow {
                model: model.clone(),
                pooling: pooling.into(),
                acc_captions: r.acc_captions,
                acc_images: r.acc_images,
                acc_overall: r.acc_overall,
            })
        })
        .collect()
}

pub fn pooling_csv(rows: &[PoolingRow]) -> String {
    let mut s = String::from("model,pooling,acc_captions,acc_images,acc_overall\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_field(&r.model),
            r.pooling,
            r.acc_captions,
            r.acc_images,
            r.acc_overall
        );
    }
    s
}

/// Parses the aggregate CSV back into (key, values) rows; used to check
/// consistency with the per-tuple reports.
pub fn read_aggregate_csv(text: &str) -> Result<Vec<(BTreeMap<String, String>, Vec<f64>)>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty CSV".into()))?
        .split(',')
        .collect();
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(Error::InvalidInput(format!("CSV row has {} fields", f.len())));
        }
        let keys = header[..4]
            .iter()
            .zip(&f[..4])
            .map(|(h, v)| (h.to_string(), v.to_string()))
            .collect();
        let vals = f[4..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| Error::InvalidInput(e.to_string())))
            .collect::<Result<_>>()?;
        out.push((keys, vals));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig, VoxelBlocks, LANGUAGE_MODEL, VISION_MODEL};

    fn small_dir() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_train: 80,
            n_test: 8,
            d_sem: 6,
            d_vis: 4,
            d_lang: 4,
            voxel_blocks: VoxelBlocks {
                amodal: 20,
                vision_only: 20,
                language_only: 20,
                noise_only: 10,
            },
            noise_sigma: 0.5,
            ..SynthConfig::default()
        };
        let data = dir.path().join("data");
        generate(&cfg).unwrap().save_dir(&data).unwrap();
        (dir, data)
    }

    fn plan(data: &Path, out: &Path) -> RunPlan {
        RunPlan {
            dataset: data.to_path_buf(),
            atlas: Some(data.join("atlas.tsv")),
            tuples: vec![],
            grid: Some(PlanGrid {
                features: vec![
                    PlanFeatures::Path(data.join(format!("{VISION_MODEL}.ndm"))),
                    PlanFeatures::Path(data.join(format!("{LANGUAGE_MODEL}.ndm"))),
                ],
                modes: vec!["agnostic".into(), "image".into()],
                rois: vec!["whole".into(), "high".into()],
            }),
            cv: CvConfig::default(),
            bootstrap: BootstrapConfig { n: 50, seed: 7 },
            out_dir: out.to_path_buf(),
        }
    }

    #[test]
    fn plan_json_resolves_relative_paths() {
        let p = RunPlan::from_json(
            r#"{"dataset": "d", "out_dir": "o",
                "tuples": [{"features": "f.ndm", "mode": "caption", "roi": "language"},
                           {"features": {"path": "g.ndm", "model": "m", "modality": "vision"},
                            "mode": "agnostic", "roi": "whole"}]}"#,
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(p.dataset, Path::new("/base/d"));
        assert_eq!(p.tuples[0].mode, DecoderMode::CaptionOnly);
        assert_eq!(p.tuples[0].roi, PlanRoi::Named(RoiName::Language));
        assert_eq!(p.tuples[1].features.path(), Path::new("/base/g.ndm"));
        assert_eq!(p.bootstrap, BootstrapConfig::default());
        assert!(RunPlan::from_json(
            r#"{"dataset": "d", "out_dir": "o", "tuples": [{"features": "f", "mode": "x", "roi": "whole"}]}"#,
            Path::new(".")
        )
        .is_err());
    }

    #[test]
    fn duplicate_tuples_and_missing_files_are_rejected() {
        let (dir, data) = small_dir();
        let mut p = plan(&data, &dir.path().join("out"));
        p.tuples = p.expanded_tuples().unwrap()[..1].to_vec();
        assert!(matches!(p.validate(), Err(Error::InvalidInput(_))));
        let mut p = plan(&data, &dir.path().join("out"));
        p.grid.as_mut().unwrap().features.push(PlanFeatures::Path(data.join("nope.ndm")));
        assert!(matches!(p.validate(), Err(Error::Io { .. })));
    }

    #[test]
    fn grid_run_writes_all_outputs_deterministically() {
        let (dir, data) = small_dir();
        let p = plan(&data, &dir.path().join("out"));
        let m = run_plan_with_workers(&p, Some(2)).unwrap();
        assert_eq!(m.entries.len(), 8);
        assert!(m.all_ok(), "{:?}", m.entries);
        assert_eq!(m.exit_code(), 0);
        assert_eq!(m.figures.len(), 2);
        let csv = fs::read_to_string(&m.csv).unwrap();
        let rows = read_aggregate_csv(&csv).unwrap();
        assert_eq!(rows.len(), 8);
        for (entry, (keys, vals)) in m.entries.iter().zip(&rows) {
            assert_eq!(keys["roi"], entry.roi);
            let r: EvalReport =
                serde_json::from_str(&fs::read_to_string(entry.report.as_ref().unwrap()).unwrap()).unwrap();
            assert_eq!(vals[..3], [r.acc_captions, r.acc_images, r.acc_overall]);
            assert_eq!(vals[7..], [r.ci95_overall.0, r.ci95_overall.1]);
        }
        let svg = fs::read_to_string(&m.figures[0]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<circle") && svg.contains("<polygon"));

        let p2 = RunPlan {
            out_dir: dir.path().join("out2"),
            ..p
        };
        let m2 = run_plan_with_workers(&p2, Some(1)).unwrap();
        assert_eq!(csv, fs::read_to_string(&m2.csv).unwrap());
    }

    #[test]
    fn failing_tuple_is_isolated() {
        let (dir, data) = small_dir();
        let bad = data.join("broken.ndm");
        fs::write(&bad, b"NDM1garbage").unwrap();
        let mut p = plan(&data, &dir.path().join("out"));
        p.grid = None;
        p.tuples = vec![
            PlanTuple {
                features: PlanFeatures::Path(data.join(format!("{VISION_MODEL}.ndm"))),
                mode: DecoderMode::Agnostic,
                roi: PlanRoi::Whole,
            },
            PlanTuple {
                features: PlanFeatures::Path(bad),
                mode: DecoderMode::Agnostic,
                roi: PlanRoi::Whole,
            },
        ];
        let m = run_plan_with_workers(&p, None).unwrap();
        assert_eq!(m.entries[0].status, "ok");
        assert!(m.entries[1].status.starts_with("failed:"));
        assert_eq!(m.exit_code(), 2);
        assert_eq!(read_aggregate_csv(&fs::read_to_string(&m.csv).unwrap()).unwrap().len(), 1);
    }

    #[test]
    fn pooling_comparison() {
        let (_dir, data) = small_dir();
        let ds = Dataset::load_dir(&data).unwrap();
        let f = FeatureMatrix::load(data.join(format!("{VISION_MODEL}.ndm")), None).unwrap();
        let rows = compare_pooling(&f, &f, &ds, &CvConfig::default(), BootstrapConfig { n: 10, seed: 1 }).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].acc_overall, rows[1].acc_overall);
        assert_eq!(pooling_csv(&rows).lines().count(), 3);
        let g = FeatureMatrix::load(data.join(format!("{LANGUAGE_MODEL}.ndm")), None).unwrap();
        assert!(matches!(
            compare_pooling(&f, &g, &ds, &CvConfig::default(), BootstrapConfig::default()),
            Err(Error::AlignmentMismatch(_))
        ));
    }
}
