//! Tuple-based temporal matching and query-class similarity.
//!
//! A video's enriched frames are read as ordered frame tuples. Each query
//! tuple is compared with a query-specific class prototype, which is an
//! attention-weighted mix of the value embeddings of every tuple in that
//! class's support videos. The class distance is the mean Euclidean gap
//! per cardinality, summed over cardinalities.
//!
//! The auxiliary classifier projects tuples of the pooled (pre-FLE) frame
//! features to ReLU codes. It scores a class by the best cosine match of
//! each query code among all support codes.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::enrichment::init_matrix;
use crate::error::{Error, Result};

/// Strictly increasing frame indices `t₁ < … < t_ω`, stored zero-based.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TupleIndex(Vec<usize>);

impl TupleIndex {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() || indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "tuple indices must be non-empty and strictly increasing, got {indices:?}"
            )));
        }
        Ok(Self(indices))
    }

    pub fn cardinality(&self) -> usize {
        self.0.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    /// Frame numbers counted from 1.
    pub fn one_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }
}

impl fmt::Display for TupleIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.one_based().iter().map(ToString::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

fn validate_omega(frames: usize, omega: &[usize]) -> Result<()> {
    if omega.is_empty() {
        return Err(Error::InvalidConfig("cardinality set is empty".into()));
    }
    for &w in omega {
        if w == 0 || w > frames {
            return Err(Error::InvalidConfig(format!(
                "cardinality {w} outside 1..={frames}"
            )));
        }
    }
    Ok(())
}

/// All tuples of one cardinality in lexicographic order.
pub fn tuples_of(frames: usize, cardinality: usize) -> Result<Vec<TupleIndex>> {
    validate_omega(frames, &[cardinality])?;
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..cardinality).collect();
    loop {
        out.push(TupleIndex(current.clone()));
        // Rightmost position that can still advance.
        let Some(pos) = (0..cardinality).rev().find(|&i| current[i] < frames - cardinality + i) else {
            break;
        };
        current[pos] += 1;
        for i in pos + 1..cardinality {
            current[i] = current[i - 1] + 1;
        }
    }
    Ok(out)
}

/// Tuples for every cardinality in `omega`, in the order given, each block
/// lexicographic.
pub fn enumerate_tuples(frames: usize, omega: &[usize]) -> Result<Vec<TupleIndex>> {
    validate_omega(frames, omega)?;
    let mut out = Vec::new();
    for &w in omega {
        out.extend(tuples_of(frames, w)?);
    }
    Ok(out)
}

/// Concatenation `[e_{t₁}; …; e_{t_ω}]` of the selected rows of `E`.
pub fn tuple_repr(e: &Tensor, tuple: &TupleIndex) -> Result<Tensor> {
    let rows = e.rows();
    let mut data = Vec::with_capacity(tuple.cardinality() * e.cols());
    for &t in tuple.indices() {
        if t >= rows {
            return Err(Error::InvalidConfig(format!(
                "tuple index {} out of range for {rows} frames",
                t + 1
            )));
        }
        data.extend_from_slice(e.row(t));
    }
    Ok(Tensor::vector(data))
}

/// Tuples of one cardinality, possibly subsampled.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleBlock {
    pub cardinality: usize,
    pub tuples: Vec<TupleIndex>,
    /// Frame index of tuple `i` at position `j` is `columns[j][i]`.
    columns: Vec<Vec<usize>>,
}

impl TupleBlock {
    fn new(cardinality: usize, tuples: Vec<TupleIndex>) -> Self {
        let columns = (0..cardinality)
            .map(|j| tuples.iter().map(|t| t.indices()[j]).collect())
            .collect();
        Self {
            cardinality,
            tuples,
            columns,
        }
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

/// The tuple sets used for matching, one block per cardinality.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleSets {
    pub frames: usize,
    pub blocks: Vec<TupleBlock>,
}

impl TupleSets {
    pub fn new(frames: usize, omega: &[usize]) -> Result<Self> {
        Self::subsampled(frames, omega, 1.0, 0)
    }

    /// Keeps the first `⌈ρ·|Π_ω|⌉` tuples of a seeded shuffle of each block
    /// (then restores lexicographic order). `ρ = 1` keeps every tuple in
    /// its original order without touching the generator.
    pub fn subsampled(frames: usize, omega: &[usize], keep_ratio: f64, seed: u64) -> Result<Self> {
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tuple keep ratio {keep_ratio} outside (0, 1]"
            )));
        }
        validate_omega(frames, omega)?;
        let mut blocks = Vec::with_capacity(omega.len());
        for &w in omega {
            let all = tuples_of(frames, w)?;
            let keep = ((keep_ratio * all.len() as f64) - 1e-9).ceil().max(1.0) as usize;
            let tuples = if keep >= all.len() {
                all
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(w as u64);
                let mut shuffled = all;
                shuffled.shuffle(&mut rng);
                shuffled.truncate(keep);
                shuffled.sort();
                shuffled
            };
            blocks.push(TupleBlock::new(w, tuples));
        }
        Ok(Self { frames, blocks })
    }

    pub fn omega(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.cardinality).collect()
    }
}

/// Stacks the tuple representations of one block as rows: `[|Π_ω| × ωD]`.
pub fn tuple_matrix(tape: &mut Tape, e: Var, block: &TupleBlock) -> Result<Var> {
    let mut parts = Vec::with_capacity(block.cardinality);
    for col in &block.columns {
        parts.push(tape.select_rows(e, col)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        Ok(tape.concat(&parts, 1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrmHead {
    pub cardinality: usize,
    pub key: ParamId,
    pub value: ParamId,
}

/// Key and value projections `ωD → D'`, one pair per cardinality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrmParams {
    pub heads: Vec<TrmHead>,
}

#[derive(Debug, Clone)]
pub struct TrmVars {
    heads: Vec<(usize, Var, Var)>,
    value_dim: usize,
}

impl TrmParams {
    pub fn init(store: &mut ParamStore, omega: &[usize], dim: usize, value_dim: usize, seed: u64) -> Self {
        let heads = omega
            .iter()
            .map(|&w| TrmHead {
                cardinality: w,
                key: init_matrix(store, &format!("trm.key.{w}"), w * dim, value_dim, seed),
                value: init_matrix(store, &format!("trm.value.{w}"), w * dim, value_dim, seed),
            })
            .collect();
        Self { heads }
    }

    pub fn find(store: &ParamStore, omega: &[usize]) -> Option<Self> {
        let heads = omega
            .iter()
            .map(|&w| {
                Some(TrmHead {
                    cardinality: w,
                    key: store.find(&format!("trm.key.{w}"))?,
                    value: store.find(&format!("trm.value.{w}"))?,
                })
            })
            .collect::<Option<_>>()?;
        Some(Self { heads })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> TrmVars {
        let value_dim = store.get(self.heads[0].value).value.cols();
        let heads = self
            .heads
            .iter()
            .map(|h| (h.cardinality, tape.param(store, h.key), tape.param(store, h.value)))
            .collect();
        TrmVars { heads, value_dim }
    }
}

/// Key and value embeddings of every tuple of one or more clips, per block.
#[derive(Debug, Clone)]
pub struct TupleEmbedding {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Embeds all tuples of one clip's enriched frames `E: [L × D]`.
pub fn embed_tuples(tape: &mut Tape, e: Var, sets: &TupleSets, w: &TrmVars) -> Result<TupleEmbedding> {
    check_blocks(sets, w.heads.iter().map(|h| h.0))?;
    let mut keys = Vec::with_capacity(sets.blocks.len());
    let mut values = Vec::with_capacity(sets.blocks.len());
    for (block, &(_, wk, wv)) in sets.blocks.iter().zip(&w.heads) {
        let tuples = tuple_matrix(tape, e, block)?;
        keys.push(tape.matmul(tuples, wk)?);
        values.push(tape.matmul(tuples, wv)?);
    }
    Ok(TupleEmbedding { keys, values })
}

fn check_blocks(sets: &TupleSets, heads: impl Iterator<Item = usize>) -> Result<()> {
    let heads: Vec<usize> = heads.collect();
    if heads != sets.omega() {
        return Err(Error::InvalidConfig(format!(
            "parameters cover cardinalities {heads:?} but tuples use {:?}",
            sets.omega()
        )));
    }
    Ok(())
}

/// Pools the tuple embeddings of a class's support videos into one set of
/// `K·|Π_ω|` rows per block.
pub fn pool_embeddings(tape: &mut Tape, supports: &[TupleEmbedding]) -> Result<TupleEmbedding> {
    let first = supports.first().ok_or(Error::EmptySupport)?;
    if supports.len() == 1 {
        return Ok(first.clone());
    }
    let blocks = first.keys.len();
    let mut keys = Vec::with_capacity(blocks);
    let mut values = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let k: Vec<Var> = supports.iter().map(|s| s.keys[b]).collect();
        let v: Vec<Var> = supports.iter().map(|s| s.values[b]).collect();
        keys.push(tape.concat(&k, 0)?);
        values.push(tape.concat(&v, 0)?);
    }
    Ok(TupleEmbedding { keys, values })
}

/// Distance `T(Q, S^c) = Σ_ω (1/|Π_ω|) Σ_t ‖q_t − p_t^c‖` from embedded
/// query tuples to a pooled support embedding, shape `[1]`.
pub fn trm_distance_embedded(
    tape: &mut Tape,
    query: &TupleEmbedding,
    class: &TupleEmbedding,
    value_dim: usize,
) -> Result<Var> {
    let scale = 1.0 / (value_dim as f64).sqrt();
    let mut total: Option<Var> = None;
    for b in 0..query.keys.len() {
        let support_keys = tape.transpose(class.keys[b])?;
        let scores = tape.matmul(query.keys[b], support_keys)?;
        let scores = tape.scale(scores, scale)?;
        let attention = tape.softmax_rows(scores)?;
        let prototypes = tape.matmul(attention, class.values[b])?;
        let gap = tape.sub(query.values[b], prototypes)?;
        let dists = tape.row_norms(gap)?;
        let mean = tape.mean(dists, 0)?;
        total = Some(match total {
            Some(t) => tape.add(t, mean)?,
            None => mean,
        });
    }
    total.ok_or_else(|| Error::InvalidConfig("no tuple blocks".into()))
}

/// Distance between a query video and one class's support videos, all
/// given as enriched frames `[L × D]`.
pub fn trm_distance(
    tape: &mut Tape,
    query: Var,
    supports: &[Var],
    sets: &TupleSets,
    w: &TrmVars,
) -> Result<Var> {
    if supports.is_empty() {
        return Err(Error::EmptySupport);
    }
    let q = embed_tuples(tape, query, sets, w)?;
    let s = supports
        .iter()
        .map(|&e| embed_tuples(tape, e, sets, w))
        .collect::<Result<Vec<_>>>()?;
    let pooled = pool_embeddings(tape, &s)?;
    trm_distance_embedded(tape, &q, &pooled, w.value_dim)
}

impl TrmVars {
    pub fn value_dim(&self) -> usize {
        self.value_dim
    }
}

/// Class logits `−T(Q, S^c)` from per-class distances, shape `[C]`.
pub fn trm_logits(tape: &mut Tape, distances: &[Var]) -> Result<Var> {
    let stacked = tape.concat(distances, 0)?;
    Ok(tape.scale(stacked, -1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QcHead {
    pub cardinality: usize,
    pub cls: ParamId,
}

/// Projections `W_cls: ωD → D''`, one per cardinality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QcParams {
    pub heads: Vec<QcHead>,
}

#[derive(Debug, Clone)]
pub struct QcVars {
    heads: Vec<(usize, Var)>,
}

impl QcParams {
    pub fn init(store: &mut ParamStore, omega: &[usize], dim: usize, cls_dim: usize, seed: u64) -> Self {
        let heads = omega
            .iter()
            .map(|&w| QcHead {
                cardinality: w,
                cls: init_matrix(store, &format!("qc.cls.{w}"), w * dim, cls_dim, seed),
            })
            .collect();
        Self { heads }
    }

    pub fn find(store: &ParamStore, omega: &[usize]) -> Option<Self> {
        let heads = omega
            .iter()
            .map(|&w| {
                Some(QcHead {
                    cardinality: w,
                    cls: store.find(&format!("qc.cls.{w}"))?,
                })
            })
            .collect::<Option<_>>()?;
        Some(Self { heads })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> QcVars {
        QcVars {
            heads: self
                .heads
                .iter()
                .map(|h| (h.cardinality, tape.param(store, h.cls)))
                .collect(),
        }
    }
}

/// Unit-normalised codes `z_t = relu(W_clsᵀ l_t)` of every tuple of one
/// clip's pooled frames `H: [L × D]`, one `[|Π_ω| × D'']` matrix per block.
/// All-zero codes stay zero.
pub fn qc_codes(tape: &mut Tape, h: Var, sets: &TupleSets, w: &QcVars) -> Result<Vec<Var>> {
    check_blocks(sets, w.heads.iter().map(|h| h.0))?;
    let mut out = Vec::with_capacity(sets.blocks.len());
    for (block, &(_, cls)) in sets.blocks.iter().zip(&w.heads) {
        let tuples = tuple_matrix(tape, h, block)?;
        let z = tape.matmul(tuples, cls)?;
        let z = tape.relu(z)?;
        out.push(tape.normalize_rows(z)?);
    }
    Ok(out)
}

/// `M(Q, c) = Σ_ω (1/|Π_ω|) Σ_t max_j cos(z_t^Q, z_j^c)` from normalised
/// codes; `class` holds the pooled support codes per block. Shape `[1]`.
pub fn qc_similarity_codes(tape: &mut Tape, query: &[Var], class: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&q, &c) in query.iter().zip(class) {
        let ct = tape.transpose(c)?;
        let sims = tape.matmul(q, ct)?;
        let best = tape.max(sims, 1)?;
        let mean = tape.mean(best, 0)?;
        total = Some(match total {
            Some(t) => tape.add(t, mean)?,
            None => mean,
        });
    }
    total.ok_or_else(|| Error::InvalidConfig("no tuple blocks".into()))
}

/// Pools normalised support codes of one class, one matrix per block.
pub fn pool_codes(tape: &mut Tape, supports: &[Vec<Var>]) -> Result<Vec<Var>> {
    let first = supports.first().ok_or(Error::EmptySupport)?;
    if supports.len() == 1 {
        return Ok(first.clone());
    }
    (0..first.len())
        .map(|b| {
            let parts: Vec<Var> = supports.iter().map(|s| s[b]).collect();
            Ok(tape.concat(&parts, 0)?)
        })
        .collect()
}

/// Query-class similarity between a query and one class's supports, all
/// given as pooled frames `[L × D]`.
pub fn qc_similarity(
    tape: &mut Tape,
    query: Var,
    supports: &[Var],
    sets: &TupleSets,
    w: &QcVars,
) -> Result<Var> {
    if supports.is_empty() {
        return Err(Error::EmptySupport);
    }
    let q = qc_codes(tape, query, sets, w)?;
    let s = supports
        .iter()
        .map(|&h| qc_codes(tape, h, sets, w))
        .collect::<Result<Vec<_>>>()?;
    let pooled = pool_codes(tape, &s)?;
    qc_similarity_codes(tape, &q, &pooled)
}
