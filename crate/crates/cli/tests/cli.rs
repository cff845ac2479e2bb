//! End-to-end runs of the `strm` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use strm_cli::RunManifest;
use strm_core::autodiff::Tensor;
use strm_core::checkpoint::load_checkpoint;
use strm_core::enrichment::patch_magnitudes;
use strm_core::episodes::{load_clip, save_clip, ClipRecord, FeatureClip};
use strm_core::model::{Model, ModelConfig};

fn strm(args: &[&str]) -> Output {
    strm_env(args, &[])
}

fn strm_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_strm"));
    cmd.args(args).env_remove("STRM_SEED").env_remove("SOURCE_DATE_EPOCH");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_dim(dir: &Path, dim: &str) {
    ok(&strm(&["synth", "--out", s(dir), "--classes", "7", "--clips", "8", "--frames", "4", "--dim", dim]));
}

fn synth(dir: &Path) {
    synth_dim(dir, "8");
}

const SMALL_MODEL: &[&str] = &[
    "--psi-dim", "4", "--value-dim", "6", "--cls-dim", "4", "--ways", "3", "--shots", "2", "--test-classes", "3",
];

fn train(data: &Path, out: &Path, episodes: &str, env: &[(&str, &str)]) -> String {
    let mut args = vec![
        "train", "--data", s(data), "--out", s(out), "--episodes", episodes, "--eval-every", "10",
        "--eval-episodes", "5", "--accumulate", "4",
    ];
    args.extend_from_slice(SMALL_MODEL);
    ok(&strm_env(&args, env))
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn synth_writes_every_clip_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&strm(&["synth", "--out", s(&out), "--classes", "10", "--clips", "20", "--dim", "4"]));
    let files = tree(&out);
    let clips = files.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "stfb")).count();
    assert_eq!(clips, 200);
    assert!(out.join("manifest.tsv").is_file());
    assert_eq!(fs::read_to_string(out.join("manifest.tsv")).unwrap().lines().count(), 200);
    let manifest = RunManifest::read(&out.join("run.json")).unwrap();
    assert_eq!(manifest.command.name(), "synth");
    assert_eq!(manifest.seed, Some(7));
}

#[test]
fn synth_is_byte_reproducible_with_a_fixed_epoch() {
    let dir = tempfile::tempdir().unwrap();
    // Identical relative output paths keep the run manifests comparable.
    let run = |name: &str| {
        let cwd = dir.path().join(name);
        fs::create_dir_all(&cwd).unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_strm"))
            .current_dir(&cwd)
            .args(["synth", "--out", "d", "--classes", "3", "--clips", "2", "--dim", "4"])
            .env("SOURCE_DATE_EPOCH", "1700000000")
            .env_remove("STRM_SEED")
            .output()
            .unwrap();
        ok(&out);
        tree(&cwd.join("d"))
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.len(), 3 * 2 + 2);
    assert_eq!(a, b);
    let stamp = RunManifest::read(&dir.path().join("a/d/run.json")).unwrap().timestamp;
    assert_eq!(stamp, "2023-11-14T22:13:20Z");
}

#[test]
fn synth_rejects_single_frame_clips() {
    let dir = tempfile::tempdir().unwrap();
    let out = strm(&["synth", "--out", s(&dir.path().join("d")), "--frames", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tuples_lists_counts_per_set() {
    let out = ok(&strm(&["tuples", "--frames", "8"]));
    let totals: Vec<&str> = out.lines().skip(1).map(|l| l.rsplit('\t').next().unwrap()).collect();
    assert_eq!(totals, ["28", "56", "70", "84", "98", "126", "154"]);
    assert!(out.starts_with("omega\tper_cardinality\ttotal\n{2}\t28\t28\n"));

    let out = ok(&strm(&["tuples", "--frames", "5", "--omega", "1,5", "--omega", "{2,3}"]));
    assert_eq!(out.lines().nth(1), Some("{1,5}\t5,1\t6"));
    assert_eq!(out.lines().nth(2), Some("{2,3}\t10,10\t20"));

    assert_eq!(strm(&["tuples", "--frames", "3", "--omega", "4"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&strm(&["gradcheck", "--out", s(dir.path())]));
    assert!(!out.contains("FAIL"));
    let table = fs::read_to_string(dir.path().join("gradcheck.tsv")).unwrap();
    assert_eq!(table, out);
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    for want in ["ple.w_query", "fle.token.0", "trm.key.2", "trm.value.2", "qc.cls.2"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
}

#[test]
fn gradcheck_flags_a_corrupted_adjoint() {
    let out = strm(&["gradcheck", "--corrupt-param", "trm.value.2"]);
    assert_eq!(out.status.code(), Some(4));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let failed: Vec<&str> = stdout
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(failed, ["trm.value.2"]);
}

#[test]
fn gradcheck_without_query_class_weight_skips_its_rows() {
    let out = ok(&strm(&["gradcheck", "--lambda", "0"]));
    assert!(!out.contains("qc.cls"));
    let out = ok(&strm(&["gradcheck", "--no-qc", "--no-ple", "--omega", "2,3"]));
    assert!(!out.contains("qc.cls") && !out.contains("ple."));
    assert!(out.contains("trm.key.3"));
}

#[test]
fn train_eval_and_replay_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let run = dir.path().join("run");
    train(&data, &run, "20", &[]);
    for f in ["checkpoint.stck", "model.json", "metrics.tsv", "report.json", "run.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.tsv")).unwrap();
    let episodes: Vec<&str> = metrics.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(episodes, ["10", "20"]);

    let eval_dir = dir.path().join("eval");
    let out = ok(&strm(&[
        "eval", "--data", s(&data), "--checkpoint", s(&run.join("checkpoint.stck")), "--out", s(&eval_dir),
        "--episodes", "5", "--ways", "3", "--shots", "2", "--test-classes", "3",
    ]));
    assert!(out.contains("over 5 episodes"));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    let trained: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(eval, trained);

    let again = dir.path().join("again");
    ok(&strm(&["replay", s(&run.join("run.json")), "--out", s(&again)]));
    for f in ["checkpoint.stck", "metrics.tsv", "report.json", "model.json"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train(&data, &a, "8", &[("STRM_SEED", "5")]);
    let manifest = RunManifest::read(&a.join("run.json")).unwrap();
    assert_eq!(manifest.seed, Some(5));
    assert!(manifest.seed_from_env);
    let mut args = vec![
        "train", "--data", s(&data), "--out", s(&b), "--episodes", "8", "--eval-every", "10", "--eval-episodes", "5",
        "--accumulate", "4", "--seed", "5",
    ];
    args.extend_from_slice(SMALL_MODEL);
    ok(&strm(&args));
    assert_eq!(fs::read(a.join("checkpoint.stck")).unwrap(), fs::read(b.join("checkpoint.stck")).unwrap());
    train(&data, &c, "8", &[]);
    assert_ne!(fs::read(a.join("checkpoint.stck")).unwrap(), fs::read(c.join("checkpoint.stck")).unwrap());

    assert_eq!(strm_env(&["gradcheck"], &[("STRM_SEED", "abc")]).status.code(), Some(2));
}

#[test]
fn exit_codes_separate_usage_io_and_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = strm(&["train", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let data = dir.path().join("data");
    synth(&data);
    fs::write(dir.path().join("bad.stck"), b"NOPE....").unwrap();
    let out = strm(&[
        "eval", "--data", s(&data), "--checkpoint", s(&dir.path().join("bad.stck")), "--out", s(&dir.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    assert_eq!(strm(&["train", "--bogus"]).status.code(), Some(2));
    let out = strm(&["train", "--data", s(&data), "--out", s(&dir.path().join("o")), "--ways", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_rejects_data_of_another_width() {
    let dir = tempfile::tempdir().unwrap();
    let (data, wide) = (dir.path().join("data"), dir.path().join("wide"));
    synth(&data);
    synth_dim(&wide, "12");
    let run = dir.path().join("run");
    train(&data, &run, "4", &[]);
    let out = strm(&[
        "eval", "--data", s(&wide), "--checkpoint", s(&run.join("checkpoint.stck")), "--out", s(&dir.path().join("e")),
        "--ways", "3", "--test-classes", "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("feature dimension"));
}

fn export(dir: &Path, clip: &ClipRecord, run: &Path) -> PathBuf {
    let path = dir.join(format!("{}.stfb", clip.clip_id));
    save_clip(clip, &path).unwrap();
    let out = dir.join(format!("attn_{}", clip.clip_id));
    ok(&strm(&[
        "attn-export", "--checkpoint", s(&run.join("checkpoint.stck")), "--clip", s(&path), "--out", s(&out),
    ]));
    out
}

#[test]
fn attention_export_writes_grids_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let run = dir.path().join("run");
    train(&data, &run, "4", &[]);

    let clip = load_clip(&data.join("c000_0000.stfb")).unwrap();
    let out = export(dir.path(), &clip, &run);
    let config: ModelConfig = serde_json::from_str(&fs::read_to_string(run.join("model.json")).unwrap()).unwrap();
    let model = Model::from_store(config, load_checkpoint(&run.join("checkpoint.stck")).unwrap()).unwrap();
    let enriched = model.enriched_patches(&clip).unwrap();
    let patches = clip.features.patches;
    for frame in 0..clip.features.frames {
        let pgm = fs::read(out.join(format!("frame_{frame:02}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(pgm.len(), 11 + 4);
        let csv = fs::read_to_string(out.join(format!("frame_{frame:02}.csv"))).unwrap();
        let values: Vec<f64> = csv.lines().flat_map(|l| l.split(',')).map(|v| v.parse().unwrap()).collect();
        assert_eq!(csv.lines().count(), 2);
        for (p, v) in values.iter().enumerate() {
            let row = enriched.row(frame * patches + p);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((v - norm).abs() <= 1e-9);
        }
    }
    assert_eq!(patch_magnitudes(&enriched).len(), clip.features.frames * patches);

    let uniform = ClipRecord {
        clip_id: "flat".into(),
        label: 0,
        features: FeatureClip::new(Tensor::filled(&[4, 4, 8], 0.5)).unwrap(),
    };
    let out = export(dir.path(), &uniform, &run);
    for frame in 0..4 {
        let pgm = fs::read(out.join(format!("frame_{frame:02}.pgm"))).unwrap();
        assert_eq!(&pgm[11..], &[128; 4]);
    }
}

#[test]
fn ablation_reports_five_variants() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let out = dir.path().join("abl");
    let mut args = vec![
        "ablate", "--data", s(&data), "--out", s(&out), "--episodes", "4", "--eval-every", "4", "--eval-episodes", "3",
        "--accumulate", "2",
    ];
    args.extend_from_slice(SMALL_MODEL);
    ok(&strm(&args));
    let table = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    let labels: Vec<&str> = table.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(labels, ["variant", "baseline", "+PLE", "+FLE", "+PLE+FLE", "full"]);
    for line in table.lines().skip(1) {
        let acc: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
