//! The full matching model: enrichment, TRM and the query-class classifier
//! assembled over one episode.

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    compare_gradients, finite_diff_gradients, AdjointFault, GradCheckRow, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::enrichment::{fle_forward, pool_frames, ple_forward, FleParams, FleVars, PleParams, PleVars};
use crate::episodes::{ClipRecord, Episode, Extents};
use crate::error::{Error, Result};
use crate::matching::{
    embed_tuples, pool_codes, pool_embeddings, qc_codes, qc_similarity_codes, trm_distance_embedded,
    QcParams, QcVars, TrmParams, TrmVars, TupleSets,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub psi_dim: usize,
    /// Width `D'` of the TRM key and value embeddings.
    pub value_dim: usize,
    /// Width `D''` of the query-class codes.
    pub cls_dim: usize,
    pub omega: Vec<usize>,
    pub lambda: f64,
    pub use_ple: bool,
    pub use_fle: bool,
    pub use_qc: bool,
    pub tuple_keep_ratio: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            patches: 4,
            dim: 64,
            psi_dim: 32,
            value_dim: 32,
            cls_dim: 32,
            omega: vec![2],
            lambda: 0.1,
            use_ple: true,
            use_fle: true,
            use_qc: true,
            tuple_keep_ratio: 1.0,
            seed: 0,
        }
    }
}

/// Named model variants of the enrichment ablation, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Ple,
    Fle,
    PleFle,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Ple,
        Variant::Fle,
        Variant::PleFle,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ple => "+PLE",
            Variant::Fle => "+FLE",
            Variant::PleFle => "+PLE+FLE",
            Variant::Full => "full",
        }
    }

    /// `config` with this variant's toggles.
    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        let (ple, fle, qc) = match self {
            Variant::Baseline => (false, false, false),
            Variant::Ple => (true, false, false),
            Variant::Fle => (false, true, false),
            Variant::PleFle => (true, true, false),
            Variant::Full => (true, true, true),
        };
        ModelConfig {
            use_ple: ple,
            use_fle: fle,
            use_qc: qc,
            ..config.clone()
        }
    }
}

/// True when `x` is `n/d` for some `d ≤ 100`.
fn small_rational(x: f64) -> bool {
    (1..=100).any(|d| {
        let n = x * d as f64;
        (n - n.round()).abs() < 1e-9
    })
}

impl ModelConfig {
    pub fn extents(&self) -> Extents {
        Extents {
            frames: self.frames,
            patches: self.patches,
            dim: self.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("frames", self.frames),
            ("patches", self.patches),
            ("dim", self.dim),
            ("psi_dim", self.psi_dim),
            ("value_dim", self.value_dim),
            ("cls_dim", self.cls_dim),
        ];
        if let Some((what, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{what} must be positive")));
        }
        if self.frames < 2 {
            return Err(Error::InvalidConfig(format!(
                "at least 2 frames are needed, got {}",
                self.frames
            )));
        }
        if self.omega.is_empty() {
            return Err(Error::InvalidConfig("omega must name at least one cardinality".into()));
        }
        let mut sorted = self.omega.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.omega {
            return Err(Error::InvalidConfig(format!(
                "omega {:?} must be strictly increasing",
                self.omega
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda {} must be non-negative", self.lambda)));
        }
        let rho = self.tuple_keep_ratio;
        if !(rho > 0.0 && rho <= 1.0) || !small_rational(rho) {
            return Err(Error::InvalidConfig(format!(
                "tuple keep ratio {rho} must be a fraction in (0, 1] with denominator at most 100"
            )));
        }
        Ok(())
    }

    pub fn tuple_sets(&self) -> Result<TupleSets> {
        TupleSets::subsampled(self.frames, &self.omega, self.tuple_keep_ratio, self.seed)
    }

    /// Reads the extents, cardinalities and toggles off a parameter set.
    /// Settings that leave no trace in the weights (λ, ρ, seed) come from
    /// `base`.
    pub fn infer(store: &ParamStore, base: &ModelConfig) -> Result<ModelConfig> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            let id = store.find(name).ok_or_else(|| Error::MissingParam(name.into()))?;
            Ok(store.get(id).value.shape().to_vec())
        };
        let mut omega: Vec<usize> = store
            .iter()
            .filter_map(|p| p.name.strip_prefix("trm.key.")?.parse().ok())
            .collect();
        omega.sort_unstable();
        let first = *omega.first().ok_or_else(|| Error::MissingParam("trm.key.*".into()))?;
        let key = shape(&format!("trm.key.{first}"))?;
        let dim = key[0] / first;
        let use_ple = store.find("ple.w_query").is_some();
        let use_fle = store.find("fle.token.0").is_some();
        let use_qc = store.find(&format!("qc.cls.{first}")).is_some();
        let config = ModelConfig {
            dim,
            value_dim: key[1],
            psi_dim: if use_ple { shape("ple.psi.0")?[1] } else { base.psi_dim },
            frames: if use_fle { shape("fle.token.0")?[0] } else { base.frames },
            cls_dim: if use_qc { shape(&format!("qc.cls.{first}"))?[1] } else { base.cls_dim },
            omega,
            use_ple,
            use_fle,
            use_qc,
            ..base.clone()
        };
        config.validate()?;
        Ok(config)
    }
}

/// A model configuration together with its weights.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
    ple: Option<PleParams>,
    fle: Option<FleParams>,
    trm: TrmParams,
    qc: Option<QcParams>,
    tuples: TupleSets,
}

struct Bound {
    ple: Option<PleVars>,
    fle: Option<FleVars>,
    trm: TrmVars,
    qc: Option<QcVars>,
}

/// Class scores of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeScores {
    /// `−T(Q, S^c)` per way.
    pub trm_logits: Tensor,
    /// `M(Q, c)` per way, when the query-class classifier is enabled.
    pub qc_logits: Option<Tensor>,
}

impl EpisodeScores {
    /// Predicted way: argmax of the TRM logits, ties to the lowest way.
    pub fn prediction(&self) -> usize {
        argmax(self.trm_logits.data())
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Result of running the model over one episode.
#[derive(Debug, Clone)]
pub struct EpisodeForward {
    /// `L_TM + λ·L_QC`, averaged over queries.
    pub loss: Var,
    pub loss_tm: f64,
    pub loss_qc: f64,
    pub scores: Vec<EpisodeScores>,
}

impl Model {
    /// Fresh weights for `config`; only enabled modules get parameters.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let ple = config
            .use_ple
            .then(|| PleParams::init(&mut store, config.dim, config.psi_dim, seed));
        let fle = config
            .use_fle
            .then(|| FleParams::init(&mut store, config.frames, config.dim, seed));
        let trm = TrmParams::init(&mut store, &config.omega, config.dim, config.value_dim, seed);
        let qc = config
            .use_qc
            .then(|| QcParams::init(&mut store, &config.omega, config.dim, config.cls_dim, seed));
        let tuples = config.tuple_sets()?;
        Ok(Self {
            config,
            store,
            ple,
            fle,
            trm,
            qc,
            tuples,
        })
    }

    /// Wraps loaded weights, checking that they are exactly the parameters
    /// `config` calls for, with the expected shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Model::init(config.clone())?;
        for p in reference.store.iter() {
            let id = store.find(&p.name).ok_or_else(|| Error::MissingParam(p.name.clone()))?;
            let found = store.get(id).value.shape();
            for (axis, (&e, &f)) in p.value.shape().iter().zip(found).enumerate() {
                if e != f {
                    return Err(Error::ExtentMismatch {
                        what: format!("{} axis {axis}", p.name),
                        expected: e,
                        found: f,
                    });
                }
            }
            if p.value.rank() != found.len() {
                return Err(Error::InvalidConfig(format!(
                    "{} has rank {}, expected {}",
                    p.name,
                    found.len(),
                    p.value.rank()
                )));
            }
        }
        if let Some(extra) = store.iter().find(|p| reference.store.find(&p.name).is_none()) {
            return Err(Error::InvalidConfig(format!(
                "parameter {} is not used by this configuration",
                extra.name
            )));
        }
        Ok(Self {
            ple: config.use_ple.then(|| PleParams::find(&store)).flatten(),
            fle: config.use_fle.then(|| FleParams::find(&store)).flatten(),
            trm: TrmParams::find(&store, &config.omega).expect("checked above"),
            qc: config.use_qc.then(|| QcParams::find(&store, &config.omega)).flatten(),
            tuples: config.tuple_sets()?,
            config,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tuples(&self) -> &TupleSets {
        &self.tuples
    }

    /// Ids of the query-class parameters, if that classifier is enabled.
    pub fn qc_param_ids(&self) -> Vec<ParamId> {
        self.qc
            .iter()
            .flat_map(|q| q.heads.iter().map(|h| h.cls))
            .collect()
    }

    pub fn ple_params(&self) -> Option<&PleParams> {
        self.ple.as_ref()
    }

    fn bind(&self, tape: &mut Tape, with_qc: bool) -> Bound {
        Bound {
            ple: self.ple.map(|p| p.bind(tape, &self.store)),
            fle: self.fle.map(|f| f.bind(tape, &self.store)),
            trm: self.trm.bind(tape, &self.store),
            qc: if with_qc {
                self.qc.as_ref().map(|q| q.bind(tape, &self.store))
            } else {
                None
            },
        }
    }

    fn check_extents(&self, clip: &ClipRecord) -> Result<()> {
        let f = &clip.features;
        for (what, expected, found) in [
            ("frames", self.config.frames, f.frames),
            ("patches", self.config.patches, f.patches),
            ("channels", self.config.dim, f.dim),
        ] {
            if expected != found {
                return Err(Error::ExtentMismatch {
                    what: format!("clip {} {what}", clip.clip_id),
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    /// Pooled frames `H` of every clip, in order, from one batched PLE pass.
    fn pooled_frames(&self, tape: &mut Tape, clips: &[&ClipRecord], w: &Bound) -> Result<Vec<Var>> {
        let c = &self.config;
        let rows_per_clip = c.frames * c.patches;
        let mut data = Vec::with_capacity(clips.len() * rows_per_clip * c.dim);
        for clip in clips {
            self.check_extents(clip)?;
            data.extend_from_slice(clip.features.values.data());
        }
        let x = tape.constant(Tensor::new(&[clips.len() * rows_per_clip, c.dim], data)?);
        let f = match &w.ple {
            Some(ple) => ple_forward(tape, x, c.patches, ple)?,
            None => x,
        };
        let h = pool_frames(tape, f, c.patches)?;
        (0..clips.len())
            .map(|i| Ok(tape.slice_rows(h, i * c.frames, (i + 1) * c.frames)?))
            .collect()
    }

    /// PLE output for one clip, `[L·P² × D]`; the raw patches when PLE is off.
    pub fn enriched_patches(&self, clip: &ClipRecord) -> Result<Tensor> {
        self.check_extents(clip)?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let x = tape.constant(clip.features.patch_matrix());
        let f = match &w.ple {
            Some(ple) => ple_forward(&mut tape, x, self.config.patches, ple)?,
            None => x,
        };
        Ok(tape.value(f).clone())
    }

    /// Records the model over `episode` on `tape`.
    ///
    /// Every support clip is enriched and embedded once and shared by all
    /// queries. When `with_loss` is false the query-class classifier is
    /// skipped and the loss is the TRM term alone.
    pub fn forward_episode(&self, tape: &mut Tape, episode: &Episode<'_>, with_loss: bool) -> Result<EpisodeForward> {
        let ways = episode.ways();
        if ways < 2 {
            return Err(Error::InvalidConfig(format!("episodes need at least 2 ways, got {ways}")));
        }
        if episode.support.iter().any(Vec::is_empty) || episode.queries.is_empty() {
            return Err(Error::EmptySupport);
        }
        let w = self.bind(tape, with_loss);
        let clips: Vec<&ClipRecord> = episode
            .support
            .iter()
            .flatten()
            .copied()
            .chain(episode.queries.iter().map(|q| q.clip))
            .collect();
        let h = self.pooled_frames(tape, &clips, &w)?;
        let e = match &w.fle {
            Some(fle) => h
                .iter()
                .map(|&hi| fle_forward(tape, hi, fle))
                .collect::<Result<Vec<_>>>()?,
            None => h.clone(),
        };

        let embedded = e
            .iter()
            .map(|&ei| embed_tuples(tape, ei, &self.tuples, &w.trm))
            .collect::<Result<Vec<_>>>()?;
        let codes = match &w.qc {
            Some(qc) => Some(
                h.iter()
                    .map(|&hi| qc_codes(tape, hi, &self.tuples, qc))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };

        let mut offset = 0;
        let mut class_embeddings = Vec::with_capacity(ways);
        let mut class_codes = Vec::with_capacity(ways);
        for support in &episode.support {
            let range = offset..offset + support.len();
            offset += support.len();
            class_embeddings.push(pool_embeddings(tape, &embedded[range.clone()])?);
            if let Some(codes) = &codes {
                class_codes.push(pool_codes(tape, &codes[range])?);
            }
        }

        let mut tm_terms = Vec::with_capacity(episode.queries.len());
        let mut qc_terms = Vec::with_capacity(episode.queries.len());
        let mut scores = Vec::with_capacity(episode.queries.len());
        for (qi, query) in episode.queries.iter().enumerate() {
            let idx = offset + qi;
            let distances = class_embeddings
                .iter()
                .map(|class| trm_distance_embedded(tape, &embedded[idx], class, w.trm.value_dim()))
                .collect::<Result<Vec<_>>>()?;
            let tm_logits = tape.concat(&distances, 0)?;
            let tm_logits = tape.scale(tm_logits, -1.0)?;
            let tm_row = tape.reshape(tm_logits, &[1, ways])?;
            let tm_probs = tape.softmax_rows(tm_row)?;
            tm_terms.push(tape.cross_entropy(tm_probs, query.target)?);

            let qc_logits = match &codes {
                Some(codes) => {
                    let sims = class_codes
                        .iter()
                        .map(|class| qc_similarity_codes(tape, &codes[idx], class))
                        .collect::<Result<Vec<_>>>()?;
                    let logits = tape.concat(&sims, 0)?;
                    let row = tape.reshape(logits, &[1, ways])?;
                    let probs = tape.softmax_rows(row)?;
                    qc_terms.push(tape.cross_entropy(probs, query.target)?);
                    Some(tape.value(logits).clone())
                }
                None => None,
            };
            scores.push(EpisodeScores {
                trm_logits: tape.value(tm_logits).clone(),
                qc_logits,
            });
        }

        let tm = tape.concat(&tm_terms, 0)?;
        let tm = tape.mean(tm, 0)?;
        let loss_tm = tape.value(tm).item();
        let (loss, loss_qc) = if qc_terms.is_empty() {
            (tm, 0.0)
        } else {
            let qc = tape.concat(&qc_terms, 0)?;
            let qc = tape.mean(qc, 0)?;
            let loss_qc = tape.value(qc).item();
            let weighted = tape.scale(qc, self.config.lambda)?;
            (tape.add(tm, weighted)?, loss_qc)
        };
        Ok(EpisodeForward {
            loss,
            loss_tm,
            loss_qc,
            scores,
        })
    }

    /// Scalar joint loss of an episode for the current weights.
    pub fn episode_loss(&self, episode: &Episode<'_>) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward_episode(&mut tape, episode, true)?;
        Ok(tape.value(out.loss).item())
    }

    /// Predicted way per query.
    pub fn predict(&self, episode: &Episode<'_>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let out = self.forward_episode(&mut tape, episode, false)?;
        Ok(out.scores.iter().map(EpisodeScores::prediction).collect())
    }
}

/// Checks the analytic gradient of the joint loss on `episode` against
/// central differences with step `step`, one row per parameter.
///
/// The query-class weights are left out when `λ = 0`, since they cannot
/// influence the loss. `fault` deliberately corrupts one adjoint.
pub fn gradient_check(
    model: &Model,
    episode: &Episode<'_>,
    step: f64,
    tol: f64,
    fault: Option<AdjointFault>,
) -> Result<Vec<GradCheckRow>> {
    let mut analytic = model.store.clone();
    analytic.zero_grads();
    let mut tape = Tape::with_fault(fault);
    let out = model.forward_episode(&mut tape, episode, true)?;
    tape.backward(out.loss)?.accumulate_into(&mut analytic);

    let mut probe = model.clone();
    let mut failure = None;
    let numeric = finite_diff_gradients(
        |store| {
            probe.store.clone_from(store);
            match probe.episode_loss(episode) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &model.store,
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let skipped: Vec<String> = if model.config.lambda == 0.0 {
        model
            .qc_param_ids()
            .into_iter()
            .map(|id| model.store.get(id).name.clone())
            .collect()
    } else {
        Vec::new()
    };
    Ok(compare_gradients(&analytic, &numeric?, tol)
        .into_iter()
        .filter(|row| !skipped.contains(&row.name))
        .collect())
}
