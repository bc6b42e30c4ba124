use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use neurodec::eval::{evaluate_with, EvalOptions, PairwiseMetric};
use neurodec::glm::{two_phase_betas, GlmConfig, HrfParams};
use neurodec::model::{read_events, BetaMatrix, Dataset, FeatureMatrix, FeatureModality, RunId, ScanParams};
use neurodec::ndm::NdmMatrix;
use neurodec::report::{compare_pooling, pooling_csv, run_plan, BootstrapConfig, RunPlan};
use neurodec::ridge::{train_decoder, CvConfig, DecoderMode, RidgeDecoder, DEFAULT_ALPHAS};
use neurodec::roi::{apply_mask, build_mask, load_roi_definition, parse_custom_labels, AtlasAssignment, RoiName};
use neurodec::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(name = "neurodec", version, about = "Modality-agnostic fMRI decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    OneVsTwo,
    TwoVsTwo,
}

#[derive(clap::Args)]
struct FeatureArgs {
    /// Feature matrix (NDM1).
    #[arg(long)]
    features: PathBuf,
    /// Model name for feature files written without metadata.
    #[arg(long, requires = "feature_modality")]
    model_name: Option<String>,
    /// vision, language or multimodal; for files without metadata.
    #[arg(long, requires = "model_name")]
    feature_modality: Option<FeatureModality>,
}

impl FeatureArgs {
    fn load(&self) -> anyhow::Result<FeatureMatrix> {
        let fallback = self.model_name.as_deref().zip(self.feature_modality);
        FeatureMatrix::load(&self.features, fallback)
            .with_context(|| format!("loading features {}", self.features.display()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Simulate {
        /// JSON config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Estimate train and test betas from per-run BOLD matrices.
    FitGlm {
        #[arg(long)]
        events: PathBuf,
        /// Directory of `ses-XX_run-YY.ndm` files (volumes x voxels).
        #[arg(long)]
        bold_dir: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        tr: f64,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
        /// Legendre drift regressors per run.
        #[arg(long, default_value_t = 0)]
        drift_order: usize,
        /// Fit the single-trial GLM on residuals alone, without re-including
        /// the first-fit regressors.
        #[arg(long)]
        residual_only: bool,
    },
    /// Cross-validate and fit a ridge decoder.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        /// agnostic, image or caption.
        #[arg(long, default_value = "agnostic")]
        mode: DecoderMode,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHAS)]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a decoder on the test set of a dataset.
    Evaluate {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Metric::OneVsTwo)]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restrict a beta matrix to an atlas ROI.
    Mask {
        #[arg(long)]
        atlas: PathBuf,
        /// low, high, language or custom.
        #[arg(long)]
        roi: String,
        /// Label list for `--roi custom`: one `HEMI label_id` per line.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        betas: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute an experiment plan.
    Run {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Compare mean- and CLS-pooled features of one model.
    ComparePooling {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        mean: PathBuf,
        #[arg(long)]
        cls: PathBuf,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_run_stem(stem: &str) -> Option<RunId> {
    let (ses, run) = stem.split_once('_')?;
    Some(RunId::new(
        ses.strip_prefix("ses-")?.parse().ok()?,
        run.strip_prefix("run-")?.parse().ok()?,
    ))
}

fn load_bold_dir(dir: &Path) -> anyhow::Result<BTreeMap<RunId, nalgebra::DMatrix<f64>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ndm") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some(run) = parse_run_stem(stem) else {
            bail!("{} is not named ses-XX_run-YY.ndm", path.display());
        };
        let m = NdmMatrix::load(&path)?;
        let values = nalgebra::DMatrix::from_row_iterator(m.rows, m.cols, m.data.iter().map(|v| *v as f64));
        out.insert(run, values);
    }
    if out.is_empty() {
        bail!("no run files in {}", dir.display());
    }
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Simulate { config, out_dir } => {
            let cfg = match config {
                Some(p) => SynthConfig::load(&p)?,
                None => SynthConfig::default(),
            };
            let out = generate(&cfg)?;
            out.save_dir(&out_dir)?;
            println!(
                "wrote {} events, {} voxels, {} feature models to {}",
                out.events.len(),
                cfg.voxel_blocks.total(),
                out.features.len(),
                out_dir.display()
            );
        }
        Command::FitGlm {
            events,
            bold_dir,
            tr,
            out_train,
            out_test,
            drift_order,
            residual_only,
        } => {
            let events = read_events(&events)?;
            let bold = load_bold_dir(&bold_dir)?;
            let n_volumes = bold.values().next().map(|m| m.nrows()).unwrap_or(0);
            let scan = ScanParams::new(tr, n_volumes, bold.keys().copied().collect())?;
            let cfg = GlmConfig {
                drift_order,
                phase2_nuisance: !residual_only,
            };
            let (train, test) = two_phase_betas(&events, &bold, &scan, &HrfParams::default(), &cfg)?;
            train.save(&out_train)?;
            test.save(&out_test)?;
            println!("{} train trials, {} test stimuli", train.n_trials(), test.n_trials());
        }
        Command::Train {
            dataset,
            features,
            mode,
            alphas,
            folds,
            seed,
            out,
        } => {
            let ds = Dataset::load_dir(&dataset)?;
            let feats = features.load()?;
            let cfg = CvConfig {
                alpha_grid: alphas,
                n_folds: folds,
                fold_seed: seed,
            };
            let d = train_decoder(&ds, &feats, mode, &cfg)?;
            d.save(&out)?;
            println!("alpha {:e}, {} voxels -> {} dims", d.alpha, d.n_voxels(), d.n_dims());
        }
        Command::Evaluate {
            decoder,
            dataset,
            features,
            bootstrap,
            seed,
            metric,
            out,
        } => {
            let d = RidgeDecoder::load(&decoder)?;
            let ds = Dataset::load_dir(&dataset)?;
            let feats = features.load()?;
            let opts = EvalOptions {
                bootstrap,
                seed,
                metric: match metric {
                    Metric::OneVsTwo => PairwiseMetric::OneVsTwo,
                    Metric::TwoVsTwo => PairwiseMetric::TwoVsTwo,
                },
            };
            let r = evaluate_with(&d, &ds, &feats, &opts)?;
            write_file(&out, &serde_json::to_string_pretty(&r)?)?;
            println!(
                "captions {:.3}  images {:.3}  overall {:.3}",
                r.acc_captions, r.acc_images, r.acc_overall
            );
        }
        Command::Mask {
            atlas,
            roi,
            labels,
            betas,
            out,
        } => {
            let atlas = AtlasAssignment::load(&atlas)?;
            let name: RoiName = roi.parse()?;
            let defn = match (name, labels) {
                (RoiName::Custom, Some(p)) => parse_custom_labels(
                    &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                (RoiName::Custom, None) => bail!("--roi custom needs --labels"),
                (_, Some(_)) => bail!("--labels only applies to --roi custom"),
                (n, None) => load_roi_definition(n)?,
            };
            let mask = build_mask(name, &defn, &atlas)?;
            let b = apply_mask(&BetaMatrix::load(&betas)?, &mask)?;
            b.save(&out)?;
            println!("{} voxels in {}", b.n_voxels(), name);
        }
        Command::Run { plan } => {
            let plan = RunPlan::load(&plan)?;
            let m = run_plan(&plan)?;
            let failed = m.entries.iter().filter(|e| e.status != "ok").count();
            for e in m.entries.iter().filter(|e| e.status != "ok") {
                eprintln!("{} {} {}: {}", e.model, e.mode, e.roi, e.status);
            }
            println!(
                "{} tuples, {} failed; results in {}",
                m.entries.len(),
                failed,
                m.csv.display()
            );
            return Ok(ExitCode::from(m.exit_code() as u8));
        }
        Command::ComparePooling {
            dataset,
            mean,
            cls,
            bootstrap,
            seed,
            out,
        } => {
            let ds = Dataset::load_dir(&dataset)?;
            let rows = compare_pooling(
                &FeatureMatrix::load(&mean, None)?,
                &FeatureMatrix::load(&cls, None)?,
                &ds,
                &CvConfig::default(),
                BootstrapConfig { n: bootstrap, seed },
            )?;
            write_file(&out, &pooling_csv(&rows))?;
            for r in rows {
                println!("{} {}: overall {:.3}", r.model, r.pooling, r.acc_overall);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
