use std::fs;
use std::path::Path;
use std::process::Command;

use neurodec::eval::evaluate;
use neurodec::ridge::{train_decoder, CvConfig, DecoderMode};
use neurodec::synth::{generate, oracle_best_accuracy, SynthConfig, VoxelBlocks, VISION_MODEL};

fn small(noise_sigma: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        n_train: 160,
        n_test: 20,
        d_sem: 8,
        d_vis: 4,
        d_lang: 4,
        voxel_blocks: VoxelBlocks {
            amodal: 60,
            vision_only: 40,
            language_only: 40,
            noise_only: 20,
        },
        noise_sigma,
        seed,
        ..SynthConfig::default()
    }
}

fn neurodec(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_neurodec")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = neurodec(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn accuracy_falls_as_noise_rises() {
    let mean_overall = |sigma: f64| {
        (0..3)
            .map(|seed| {
                let out = generate(&small(sigma, seed)).unwrap();
                let ds = out.dataset().unwrap();
                let f = &out.features[0];
                let d = train_decoder(&ds, f, DecoderMode::Agnostic, &CvConfig::default()).unwrap();
                evaluate(&d, &ds, f, 1, 0).unwrap().acc_overall
            })
            .sum::<f64>()
            / 3.0
    };
    let accs: Vec<f64> = [0.0, 2.0, 8.0].into_iter().map(mean_overall).collect();
    assert!(accs[0] > 0.95, "{accs:?}");
    assert!(accs[0] >= accs[1] && accs[1] > accs[2], "{accs:?}");
}

#[test]
fn decoder_does_not_beat_noiseless_readout() {
    for seed in 0..3 {
        let out = generate(&small(1.0, seed)).unwrap();
        let ds = out.dataset().unwrap();
        let f = out.feature(VISION_MODEL).unwrap();
        let d = train_decoder(&ds, f, DecoderMode::Agnostic, &CvConfig::default()).unwrap();
        let acc = evaluate(&d, &ds, f, 1, 0).unwrap().acc_overall;
        let oracle = oracle_best_accuracy(&out.truth, f, ds.betas_test().trial_ids()).unwrap();
        assert!(acc <= oracle + 0.02, "seed {seed}: decoder {acc} oracle {oracle}");
    }
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let config = root.join("config.json");
    fs::write(&config, serde_json::to_string(&small(0.5, 4)).unwrap()).unwrap();
    ok(&["simulate", "--config", p(&config), "--out-dir", p(&data)]);

    let feats = data.join(format!("{VISION_MODEL}.ndm"));
    let decoder = root.join("dec.ndm");
    let stdout = ok(&[
        "train", "--dataset", p(&data), "--features", p(&feats), "--mode", "image", "--out", p(&decoder),
    ]);
    assert!(stdout.starts_with("alpha "));

    let report = root.join("report.json");
    ok(&[
        "evaluate", "--decoder", p(&decoder), "--dataset", p(&data), "--features", p(&feats),
        "--bootstrap", "20", "--out", p(&report),
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["n_test"], 20);
    assert!(r["acc_images"].as_f64().unwrap() > 0.6);

    let masked = root.join("masked.ndm");
    let stdout = ok(&[
        "mask", "--atlas", p(&data.join("atlas.tsv")), "--roi", "high", "--betas", p(&data.join("train.ndm")),
        "--out", p(&masked),
    ]);
    assert_eq!(stdout.trim(), "60 voxels in high");

    let bad = neurodec(&[
        "mask", "--atlas", p(&data.join("atlas.tsv")), "--roi", "motor", "--betas", p(&data.join("train.ndm")),
        "--out", p(&masked),
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let plan = root.join("plan.json");
    fs::write(
        &plan,
        format!(
            r#"{{"dataset": "data", "atlas": "data/atlas.tsv", "out_dir": "out",
                "bootstrap": {{"n": 20, "seed": 1}},
                "grid": {{"features": ["data/{VISION_MODEL}.ndm"], "modes": ["agnostic", "caption"], "rois": ["whole", "language"]}}}}"#
        ),
    )
    .unwrap();
    ok(&["run", "--plan", p(&plan)]);
    let csv = fs::read_to_string(root.join("out/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(root.join("out/manifest.json").exists());
}
