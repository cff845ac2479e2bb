//! The `strm` command-line tool.
//!
//! Every command that writes files first records a [`RunManifest`] in its
//! output directory; `strm replay` re-runs it.

pub mod args;
pub mod error;
pub mod export;
pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use strm_core::autodiff::{param_seed, AdjointFault};
use strm_core::checkpoint::{load_checkpoint, save_checkpoint};
use strm_core::enrichment::patch_magnitudes;
use strm_core::episodes::{
    generate_synthetic, load_clip, load_dataset, sample_episode, save_dataset, Dataset, EpisodeSpec, Extents,
    SyntheticSpec,
};
use strm_core::matching::tuples_of;
use strm_core::model::{gradient_check, Model, ModelConfig, Variant};
use strm_core::training::{evaluate, metrics_log, train, EvalReport};

pub use args::{Cli, Command};
pub use error::{CliError, CliResult, EXIT_IO, EXIT_NUMERICAL, EXIT_USAGE};
pub use manifest::{RunManifest, MANIFEST_FILE, SEED_ENV};

pub const CHECKPOINT_FILE: &str = "checkpoint.stck";
pub const MODEL_CONFIG_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.tsv";
pub const GRADCHECK_FILE: &str = "gradcheck.tsv";
pub const TUPLES_FILE: &str = "tuples.tsv";

/// Most parameters a gradient check will perturb.
pub const GRADCHECK_PARAM_CAP: usize = 100_000;

/// Runs `command`, applying the `STRM_SEED` override if set.
pub fn run(command: Command) -> CliResult<()> {
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    execute(command, env_seed)
}

/// Runs `command` with an explicit seed override.
pub fn execute(mut command: Command, env_seed: Option<u64>) -> CliResult<()> {
    let mut from_env = false;
    if let (Some(seed), Some(slot)) = (env_seed, command.seed_mut()) {
        *slot = seed;
        from_env = true;
    }
    match &command {
        Command::Synth(a) => cmd_synth(&command, a, from_env),
        Command::Train(a) => cmd_train(&command, a, from_env),
        Command::Eval(a) => cmd_eval(&command, a, from_env),
        Command::Gradcheck(a) => cmd_gradcheck(&command, a, from_env),
        Command::Tuples(a) => cmd_tuples(&command, a),
        Command::Ablate(a) => cmd_ablate(&command, a, from_env),
        Command::AttnExport(a) => cmd_attn_export(&command, a),
        Command::Replay(a) => {
            let manifest = RunManifest::read(&a.manifest)?;
            let mut recorded = manifest.command;
            if let Some(out) = &a.out {
                recorded.set_out_dir(out.clone());
            }
            execute(recorded, None)
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_text(path, &(text + "\n"))
}

fn record(command: &Command, resolved: serde_json::Value, from_env: bool, outputs: &[&str]) -> CliResult<()> {
    let Some(dir) = command.out_dir() else {
        return Ok(());
    };
    let outputs = outputs.iter().map(|o| dir.join(o)).collect();
    RunManifest::new(command.clone(), resolved, from_env, outputs).write(dir)?;
    Ok(())
}

fn cmd_synth(command: &Command, a: &args::SynthArgs, from_env: bool) -> CliResult<()> {
    let spec = a.spec();
    spec.validate()?;
    record(command, json!({ "synthetic": spec }), from_env, &[strm_core::episodes::MANIFEST_NAME])?;
    let clips = generate_synthetic(&spec)?;
    let manifest = save_dataset(&clips, &a.out)?;
    println!("wrote {} clips and {}", clips.len(), manifest.display());
    Ok(())
}

/// Reads a model configuration from `explicit`, else from `model.json`
/// beside the checkpoint, else infers it from the checkpoint itself.
pub fn load_model(checkpoint: &Path, explicit: Option<&Path>, extents: Extents) -> CliResult<Model> {
    let store = load_checkpoint(checkpoint)?;
    let sibling = checkpoint.with_file_name(MODEL_CONFIG_FILE);
    let config_path = explicit
        .map(Path::to_path_buf)
        .or_else(|| sibling.is_file().then_some(sibling));
    let config: ModelConfig = match config_path {
        Some(path) => {
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Json { path, source: e })?
        }
        None => ModelConfig::infer(
            &store,
            &ModelConfig {
                frames: extents.frames,
                patches: extents.patches,
                dim: extents.dim,
                ..ModelConfig::default()
            },
        )?,
    };
    let model = Model::from_store(config, store)?;
    let expected = model.config().extents();
    for (what, e, f) in [
        ("feature dimension", expected.dim, extents.dim),
        ("frames per clip", expected.frames, extents.frames),
        ("patches per frame", expected.patches, extents.patches),
    ] {
        if e != f {
            return Err(strm_core::Error::ExtentMismatch {
                what: format!("checkpoint vs data {what}"),
                expected: e,
                found: f,
            }
            .into());
        }
    }
    Ok(model)
}

fn split(data: &Dataset, test_classes: usize) -> CliResult<(Dataset, Dataset)> {
    Ok(data.split_holdout(test_classes)?)
}

fn cmd_train(command: &Command, a: &args::TrainArgs, from_env: bool) -> CliResult<()> {
    let data = load_dataset(&a.data)?;
    let (train_set, test_set) = split(&data, a.test_classes)?;
    let ext = data.extents();
    let model_config = a.model.config(ext.frames, ext.patches, ext.dim, a.seed);
    let train_config = a.schedule.config(&a.episode, a.seed);
    model_config.validate()?;
    train_config.validate()?;
    record(
        command,
        json!({ "model": model_config, "train": train_config }),
        from_env,
        &[CHECKPOINT_FILE, MODEL_CONFIG_FILE, METRICS_FILE, REPORT_FILE],
    )?;
    println!("episode\taccuracy\tci95\tloss_tm\tloss_qc");
    let outcome = train(&train_set, &test_set, &model_config, &train_config, |row| {
        println!("{}", row.to_line())
    })?;
    save_checkpoint(&outcome.model.store, &a.out.join(CHECKPOINT_FILE))?;
    write_json(&a.out.join(MODEL_CONFIG_FILE), &model_config)?;
    write_text(&a.out.join(METRICS_FILE), &metrics_log(&outcome.metrics))?;
    write_json(&a.out.join(REPORT_FILE), &outcome.final_report)?;
    println!("{}", outcome.final_report);
    Ok(())
}

/// The evaluation stream for `seed`; `train` uses the same one.
pub fn eval_spec(episode: &args::EpisodeArgs, seed: u64) -> EpisodeSpec {
    episode.spec(param_seed(seed, "eval"))
}

fn cmd_eval(command: &Command, a: &args::EvalArgs, from_env: bool) -> CliResult<()> {
    let data = load_dataset(&a.data)?;
    let set = if a.test_classes == 0 {
        data
    } else {
        split(&data, a.test_classes)?.1
    };
    let model = load_model(&a.checkpoint, a.config.as_deref(), set.extents())?;
    let spec = eval_spec(&a.episode, a.seed);
    spec.validate()?;
    record(
        command,
        json!({ "model": model.config(), "episodes": spec, "count": a.episodes }),
        from_env,
        &[REPORT_FILE],
    )?;
    let report: EvalReport = evaluate(&set, &model, &spec, a.episodes)?;
    write_json(&a.out.join(REPORT_FILE), &report)?;
    println!("{report}");
    Ok(())
}

/// The in-memory data a gradient check runs on.
pub fn gradcheck_setup(a: &args::GradcheckArgs) -> CliResult<(ModelConfig, Dataset, EpisodeSpec)> {
    let config = ModelConfig {
        frames: a.frames,
        patches: a.patches,
        dim: a.dim,
        psi_dim: a.psi_dim,
        value_dim: a.value_dim,
        cls_dim: a.cls_dim,
        omega: a.omega.clone(),
        lambda: a.lambda,
        use_ple: !a.no_ple,
        use_fle: !a.no_fle,
        use_qc: !a.no_qc,
        tuple_keep_ratio: 1.0,
        seed: a.seed,
    };
    config.validate()?;
    let spec = EpisodeSpec {
        ways: a.ways,
        shots: a.shots,
        queries_per_class: 1,
        seed: a.seed,
    };
    spec.validate()?;
    let data = Dataset::new(generate_synthetic(&SyntheticSpec {
        num_classes: a.ways,
        clips_per_class: a.shots + 1,
        frames: a.frames,
        patches: a.patches,
        dim: a.dim,
        motif_strength: 1.0,
        noise_sigma: 0.3,
        seed: a.seed,
        permutation_seeds: None,
    })?)?;
    Ok((config, data, spec))
}

fn cmd_gradcheck(command: &Command, a: &args::GradcheckArgs, from_env: bool) -> CliResult<()> {
    let (config, data, spec) = gradcheck_setup(a)?;
    let model = Model::init(config.clone())?;
    let count = model.store.numel();
    if count > GRADCHECK_PARAM_CAP {
        return Err(CliError::Usage(format!(
            "gradient check is capped at {GRADCHECK_PARAM_CAP} parameters, this configuration has {count}"
        )));
    }
    let fault = match &a.corrupt_param {
        Some(name) => Some(AdjointFault {
            param: model
                .store
                .find(name)
                .ok_or_else(|| CliError::Usage(format!("no parameter named {name}")))?,
            scale: 2.0,
        }),
        None => None,
    };
    record(
        command,
        json!({ "model": config, "episodes": spec, "step": a.step, "tol": a.tol }),
        from_env,
        &[GRADCHECK_FILE],
    )?;
    let episode = sample_episode(&data, &spec, 0)?;
    let rows = gradient_check(&model, &episode, a.step, a.tol, fault)?;
    let mut table = String::from("param\tnumel\trel_error\tmax_abs_error\tstatus\n");
    for r in &rows {
        table.push_str(&format!(
            "{}\t{}\t{:.3e}\t{:.3e}\t{}\n",
            r.name,
            r.numel,
            r.rel_error,
            r.max_abs_error,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    print!("{table}");
    if let Some(out) = &a.out {
        write_text(&out.join(GRADCHECK_FILE), &table)?;
    }
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed))
    }
}

/// The cardinality sets listed when none are given: all non-empty subsets
/// of {2, 3, 4}.
pub fn default_omega_sets() -> Vec<Vec<usize>> {
    vec![
        vec![2],
        vec![3],
        vec![4],
        vec![2, 3],
        vec![2, 4],
        vec![3, 4],
        vec![2, 3, 4],
    ]
}

/// A cardinality set, its per-cardinality tuple counts and their total.
pub type TupleRow = (Vec<usize>, Vec<usize>, usize);

/// One row per cardinality set.
pub fn tuple_table(frames: usize, sets: &[Vec<usize>]) -> CliResult<Vec<TupleRow>> {
    sets.iter()
        .map(|set| {
            let counts = set
                .iter()
                .map(|&w| Ok(tuples_of(frames, w)?.len()))
                .collect::<CliResult<Vec<_>>>()?;
            let total = counts.iter().sum();
            Ok((set.clone(), counts, total))
        })
        .collect()
}

fn cmd_tuples(command: &Command, a: &args::TuplesArgs) -> CliResult<()> {
    let sets: Vec<Vec<usize>> = if a.omega.is_empty() {
        default_omega_sets()
    } else {
        a.omega.iter().map(|s| s.0.clone()).collect()
    };
    let rows = tuple_table(a.frames, &sets)?;
    record(command, json!({ "frames": a.frames, "omega": sets }), false, &[TUPLES_FILE])?;
    let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    let mut table = String::from("omega\tper_cardinality\ttotal\n");
    for (set, counts, total) in &rows {
        table.push_str(&format!("{{{}}}\t{}\t{total}\n", join(set), join(counts)));
    }
    print!("{table}");
    if let Some(out) = &a.out {
        write_text(&out.join(TUPLES_FILE), &table)?;
    }
    Ok(())
}

fn cmd_ablate(command: &Command, a: &args::AblateArgs, from_env: bool) -> CliResult<()> {
    let data = load_dataset(&a.data)?;
    let (train_set, test_set) = split(&data, a.test_classes)?;
    let ext = data.extents();
    let base = a.model.config(ext.frames, ext.patches, ext.dim, a.seed);
    let train_config = a.schedule.config(&a.episode, a.seed);
    base.validate()?;
    train_config.validate()?;
    let variants: Vec<ModelConfig> = Variant::ALL.iter().map(|v| v.apply(&base)).collect();
    record(
        command,
        json!({ "variants": variants, "train": train_config }),
        from_env,
        &[ABLATION_FILE],
    )?;
    let mut table = String::from("variant\taccuracy\tci95\n");
    for (variant, config) in Variant::ALL.iter().zip(&variants) {
        let outcome = train(&train_set, &test_set, config, &train_config, |_| {})?;
        let r = &outcome.final_report;
        let line = format!("{}\t{:.6}\t{:.6}\n", variant.label(), r.accuracy, r.ci95);
        print!("{line}");
        table.push_str(&line);
    }
    write_text(&a.out.join(ABLATION_FILE), &table)?;
    Ok(())
}

/// Per-frame file names of an attention export.
pub fn frame_files(frame: usize) -> (String, String) {
    (format!("frame_{frame:02}.csv"), format!("frame_{frame:02}.pgm"))
}

fn cmd_attn_export(command: &Command, a: &args::AttnExportArgs) -> CliResult<()> {
    let clip = load_clip(&a.clip)?;
    let f = &clip.features;
    let extents = Extents {
        frames: f.frames,
        patches: f.patches,
        dim: f.dim,
    };
    let side = export::grid_side(f.patches)?;
    let model = load_model(&a.checkpoint, a.config.as_deref(), extents)?;
    let outputs: Vec<String> = (0..f.frames)
        .flat_map(|i| {
            let (c, p) = frame_files(i);
            [c, p]
        })
        .collect();
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    record(command, json!({ "model": model.config() }), false, &names)?;
    let enriched = model.enriched_patches(&clip)?;
    let magnitudes = patch_magnitudes(&enriched);
    let gray = export::to_gray(&magnitudes);
    let per_frame = f.patches;
    for i in 0..f.frames {
        let range = i * per_frame..(i + 1) * per_frame;
        let (csv, pgm) = frame_files(i);
        write_text(&a.out.join(csv), &export::grid_csv(&magnitudes[range.clone()], side))?;
        let path: PathBuf = a.out.join(pgm);
        fs::write(&path, export::pgm_bytes(&gray[range], side)).map_err(|e| CliError::io(&path, e))?;
    }
    println!("wrote {} frame grids of {side}x{side} to {}", f.frames, a.out.display());
    Ok(())
}
