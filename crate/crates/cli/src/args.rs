use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use strm_core::episodes::{EpisodeSpec, SyntheticSpec};
use strm_core::model::ModelConfig;
use strm_core::training::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "strm", version, about = "Few-shot action recognition with spatio-temporal enrichment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name", content = "args")]
pub enum Command {
    /// Generate a synthetic order-sensitive dataset.
    Synth(SynthArgs),
    /// Train a model episodically and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out classes.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Count the frame tuples per cardinality set.
    Tuples(TuplesArgs),
    /// Train and compare the five enrichment variants.
    Ablate(AblateArgs),
    /// Export per-patch activation magnitudes after patch-level enrichment.
    AttnExport(AttnExportArgs),
    /// Re-run the command recorded in a run manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::Tuples(_) => "tuples",
            Command::Ablate(_) => "ablate",
            Command::AttnExport(_) => "attn-export",
            Command::Replay(_) => "replay",
        }
    }

    /// Output directory, if the command has one.
    pub fn out_dir(&self) -> Option<&PathBuf> {
        match self {
            Command::Synth(a) => Some(&a.out),
            Command::Train(a) => Some(&a.out),
            Command::Eval(a) => Some(&a.out),
            Command::Gradcheck(a) => a.out.as_ref(),
            Command::Tuples(a) => a.out.as_ref(),
            Command::Ablate(a) => Some(&a.out),
            Command::AttnExport(a) => Some(&a.out),
            Command::Replay(_) => None,
        }
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            Command::Synth(a) => a.out = dir,
            Command::Train(a) => a.out = dir,
            Command::Eval(a) => a.out = dir,
            Command::Gradcheck(a) => a.out = Some(dir),
            Command::Tuples(a) => a.out = Some(dir),
            Command::Ablate(a) => a.out = dir,
            Command::AttnExport(a) => a.out = dir,
            Command::Replay(_) => {}
        }
    }

    /// The seed a `STRM_SEED` override replaces.
    pub fn seed_mut(&mut self) -> Option<&mut u64> {
        match self {
            Command::Synth(a) => Some(&mut a.seed),
            Command::Train(a) => Some(&mut a.seed),
            Command::Eval(a) => Some(&mut a.seed),
            Command::Gradcheck(a) => Some(&mut a.seed),
            Command::Ablate(a) => Some(&mut a.seed),
            Command::Tuples(_) | Command::AttnExport(_) | Command::Replay(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub clips: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Patches per frame (P²).
    #[arg(long, default_value_t = 4)]
    pub patches: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Standard deviation of the shared frame prototypes.
    #[arg(long, default_value_t = 0.2)]
    pub motif: f64,
    /// Standard deviation of the per-element clip noise.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            clips_per_class: self.clips,
            frames: self.frames,
            patches: self.patches,
            dim: self.dim,
            motif_strength: self.motif,
            noise_sigma: self.noise,
            seed: self.seed,
            permutation_seeds: None,
        }
    }
}

/// Model widths and toggles; clip extents come from the data.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    pub psi_dim: usize,
    /// TRM embedding width D'.
    #[arg(long, default_value_t = 32)]
    pub value_dim: usize,
    /// Query-class code width D''.
    #[arg(long, default_value_t = 32)]
    pub cls_dim: usize,
    /// Tuple cardinalities, e.g. `--omega 2,3`.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub omega: Vec<usize>,
    /// Weight of the query-class loss.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long)]
    pub no_ple: bool,
    #[arg(long)]
    pub no_fle: bool,
    #[arg(long)]
    pub no_qc: bool,
    /// Fraction of tuples kept per cardinality.
    #[arg(long, default_value_t = 1.0)]
    pub keep_ratio: f64,
}

impl ModelArgs {
    pub fn config(&self, frames: usize, patches: usize, dim: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            frames,
            patches,
            dim,
            psi_dim: self.psi_dim,
            value_dim: self.value_dim,
            cls_dim: self.cls_dim,
            omega: self.omega.clone(),
            lambda: self.lambda,
            use_ple: !self.no_ple,
            use_fle: !self.no_fle,
            use_qc: !self.no_qc,
            tuple_keep_ratio: self.keep_ratio,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EpisodeArgs {
    #[arg(long, default_value_t = 5)]
    pub ways: usize,
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
    #[arg(long, default_value_t = 1)]
    pub queries: usize,
}

impl EpisodeArgs {
    pub fn spec(&self, seed: u64) -> EpisodeSpec {
        EpisodeSpec {
            ways: self.ways,
            shots: self.shots,
            queries_per_class: self.queries,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 2000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f64,
    /// Episodes averaged into each optimizer step.
    #[arg(long, default_value_t = 16)]
    pub accumulate: usize,
    #[arg(long, default_value_t = 500)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 200)]
    pub eval_episodes: usize,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
}

impl ScheduleArgs {
    pub fn config(&self, episodes: &EpisodeArgs, seed: u64) -> TrainConfig {
        TrainConfig {
            episodes: self.episodes,
            learning_rate: self.lr,
            accumulate_every: self.accumulate,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            ways: episodes.ways,
            shots: episodes.shots,
            queries_per_class: episodes.queries,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Highest-labelled classes held out for evaluation.
    #[arg(long, default_value_t = 5)]
    pub test_classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Model configuration; defaults to `model.json` beside the checkpoint,
    /// else it is read off the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate on this many highest-labelled classes; 0 uses all.
    #[arg(long, default_value_t = 5)]
    pub test_classes: usize,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub episode: EpisodeArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub patches: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub psi_dim: usize,
    #[arg(long, default_value_t = 12)]
    pub value_dim: usize,
    #[arg(long, default_value_t = 6)]
    pub cls_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub ways: usize,
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub omega: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long)]
    pub no_ple: bool,
    #[arg(long)]
    pub no_fle: bool,
    #[arg(long)]
    pub no_qc: bool,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scales the adjoint of the named parameter by 2.
    #[arg(long, hide = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt_param: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TuplesArgs {
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// A cardinality set such as `2,3`; repeat for several rows. Without
    /// it, the seven subsets of {2,3,4} are listed.
    #[arg(long, value_parser = parse_omega)]
    pub omega: Vec<OmegaSet>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OmegaSet(pub Vec<usize>);

fn parse_omega(s: &str) -> Result<OmegaSet, String> {
    s.trim_matches(|c| c == '{' || c == '}')
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()
        .map(OmegaSet)
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub test_classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AttnExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A clip file in the binary feature format.
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
