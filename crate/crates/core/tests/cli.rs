//! End-to-end tests of the command-line surface: exit codes, flag
//! overrides, and the files each subcommand leaves behind.

use std::path::Path;
use std::process::{Command, Output};

use cinelora::data::frame::Frame;
use cinelora::data::generator::{ClipMeta, CLIP_META_FILE};
use cinelora::data::captions::LightingTag;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cinelora"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A config small enough that the whole pipeline runs in seconds.
fn smoke_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        "clips = 4\n\
         frames_per_clip = 40\n\
         val_fraction = 0.25\n\
         total_steps = 4\n\
         eval_interval = 2\n\
         grad_accum = 1\n\
         max_caption_len = 16\n\
         num_frames = 8\n\
         steps = 3\n\
         shards = 2\n\
         overlap = 2\n\
         seed = 11\n",
    )
    .unwrap();
    path
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let config = smoke_config(tmp.path());
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let gen = tmp.path().join("gen");

    // prepare: clips + manifest + (empty) rejection report.
    let out = run(bin().args(["--config"]).arg(&config).arg("prepare").arg("--outdir").arg(&data));
    assert_success(&out);
    assert!(data.join("manifest.json").is_file());
    assert_eq!(std::fs::read_to_string(data.join("rejections.tsv")).unwrap(), "");
    let listing = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(listing.contains("3 train / 1 val"), "{listing}");

    // prepare is idempotent: same config + seed, byte-identical manifest.
    let data2 = tmp.path().join("data2");
    let out = run(bin().args(["--config"]).arg(&config).arg("prepare").arg("--outdir").arg(&data2));
    assert_success(&out);
    let a = std::fs::read(data.join("manifest.json")).unwrap();
    let b = std::fs::read(data2.join("manifest.json")).unwrap();
    // The manifests embed their own absolute clip paths only when outside
    // the manifest directory; both live next to their clips, so the
    // documents are relative and must match byte for byte.
    assert_eq!(a, b);

    // train: base model, adapters, checkpoint, NDJSON log.
    let out = run(bin()
        .args(["--config"])
        .arg(&config)
        .arg("train")
        .arg("--manifest")
        .arg(data.join("manifest.json"))
        .arg("--outdir")
        .arg(&runs));
    assert_success(&out);
    for file in ["base_model.bin", "adapters.bin", "checkpoint.json", "train_log.ndjson"] {
        assert!(runs.join(file).is_file(), "missing {file}");
    }
    let log = std::fs::read_to_string(runs.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 4 + 2, "4 step lines + 2 eval lines");
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("l_diff").is_some() || v.get("val_metric").is_some());
    }

    // merge: self-contained checkpoint.
    let merged = runs.join("merged.bin");
    let out = run(bin()
        .arg("merge")
        .arg("--base")
        .arg(runs.join("base_model.bin"))
        .arg("--lora")
        .arg(runs.join("adapters.bin"))
        .arg("--output")
        .arg(&merged));
    assert_success(&out);

    // generate from the merged checkpoint, conditioning on a dataset frame.
    let still = data.join("clips/clip_0000/frame_00000.png");
    let out = run(bin()
        .args(["--config"])
        .arg(&config)
        .arg("generate")
        .arg("--checkpoint")
        .arg(&merged)
        .arg("--image")
        .arg(&still)
        .args(["--caption", "a crimson sphere drifts across a dusk plain in torchlit lighting"])
        .arg("--outdir")
        .arg(&gen));
    assert_success(&out);
    for t in 0..8 {
        assert!(gen.join(format!("frame_{t:05}.png")).is_file(), "frame {t}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(gen.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["plan"]["intervals"][0][1].as_u64(), Some(5));
    assert_eq!(report["plan"]["intervals"][1][0].as_u64(), Some(3));
    assert!(report.get("divergence").is_none(), "not requested");

    // eval: clip against itself has zero perceptual distance.
    let report_path = tmp.path().join("eval.json");
    let out = run(bin()
        .arg("eval")
        .arg(&gen)
        .arg("--reference")
        .arg(&gen)
        .args(["--style", "torch"])
        .arg("--out")
        .arg(&report_path));
    assert_success(&out);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(doc["frames"].as_u64(), Some(8));
    assert_eq!(doc["perceptual_proxy"].as_f64(), Some(0.0));
    assert!(doc["temporal_stability"].as_f64().unwrap() >= 0.0);
    assert!(doc["style_distance"].as_f64().unwrap() >= 0.0);
}

#[test]
fn strict_prepare_rejects_an_undersized_ingest_clip() {
    let tmp = tempfile::tempdir().unwrap();
    let ingest = tmp.path().join("ingest");
    let clip = ingest.join("tiny");
    std::fs::create_dir_all(&clip).unwrap();
    for t in 0..10 {
        Frame::black(16, 16)
            .unwrap()
            .save_png(&clip.join(format!("frame_{t:05}.png")))
            .unwrap();
    }
    let meta = ClipMeta {
        video_id: "tiny".into(),
        caption: "a crimson sphere drifts".into(),
        lighting_tag: LightingTag::Day,
        scene_id: "scene-x".into(),
        fps: 24,
    };
    std::fs::write(clip.join(CLIP_META_FILE), serde_json::to_string(&meta).unwrap()).unwrap();

    let outdir = tmp.path().join("data");
    let out = run(bin()
        .arg("prepare")
        .arg("--ingest")
        .arg(&ingest)
        .arg("--outdir")
        .arg(&outdir)
        .arg("--strict"));
    assert_eq!(out.status.code(), Some(2), "strict rejection exit code");
    let report = std::fs::read_to_string(outdir.join("rejections.tsv")).unwrap();
    assert!(report.starts_with("tiny\ttoo few frames"), "{report}");

    // Without --strict the same ingest is an operational error (no
    // manifest can be built from zero accepted clips) — exit 1.
    let out = run(bin().arg("prepare").arg("--ingest").arg(&ingest).arg("--outdir").arg(&outdir));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_errors_fail_before_any_writes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "learning_rate = 1.0\n").unwrap();
    let outdir = tmp.path().join("data");
    let out = run(bin().args(["--config"]).arg(&config).arg("prepare").arg("--outdir").arg(&outdir));
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(msg.contains("learning_rate"), "{msg}");
    assert!(!outdir.exists(), "no writes on config errors");

    // Same for a value that fails cross-module validation.
    std::fs::write(&config, "frames_per_clip = 10\n").unwrap();
    let out = run(bin().args(["--config"]).arg(&config).arg("prepare").arg("--outdir").arg(&outdir));
    assert_eq!(out.status.code(), Some(1));
    assert!(!outdir.exists());
}

#[test]
fn merge_rejects_mismatched_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let config = smoke_config(tmp.path());
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    assert_success(&run(
        bin().args(["--config"]).arg(&config).arg("prepare").arg("--outdir").arg(&data),
    ));
    assert_success(&run(bin()
        .args(["--config"])
        .arg(&config)
        .arg("train")
        .arg("--manifest")
        .arg(data.join("manifest.json"))
        .arg("--outdir")
        .arg(&runs)));

    // A base model with a different architecture: same seed, wider model.
    let other = tmp.path().join("other.bin");
    let mut model_config = cinelora::model::ModelConfig::default();
    model_config.d_model = 32;
    cinelora::model::VideoDit::<f32>::new(model_config, 11)
        .unwrap()
        .save(&other)
        .unwrap();

    let out = run(bin()
        .arg("merge")
        .arg("--base")
        .arg(&other)
        .arg("--lora")
        .arg(runs.join("adapters.bin"))
        .arg("--output")
        .arg(tmp.path().join("merged.bin")));
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr).to_string();
    // The message must name both digests.
    assert!(msg.contains("digest mismatch"), "{msg}");
    assert!(msg.contains("artifact carries") && msg.contains("model has"), "{msg}");
}
