//! Patch-level and frame-level feature enrichment.
//!
//! Patch-level enrichment (PLE) lets the `P²` patch features of one frame
//! attend to each other and then refines every patch with a small
//! pointwise network, both with residual connections. Frames are pooled to
//! one vector each, and frame-level enrichment (FLE) mixes those vectors
//! across time with an MLP-mixer layer: a token-mixing MLP over the frame
//! axis followed by a channel-mixing MLP over the feature axis.
//!
//! Neither stage carries bias terms or normalization layers.

use crate::autodiff::{param_seed, seeded_init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Creates a Glorot-initialised `[rows × cols]` parameter.
pub(crate) fn init_matrix(store: &mut ParamStore, name: &str, rows: usize, cols: usize, seed: u64) -> ParamId {
    let value = seeded_init(&[rows, cols], rows, cols, param_seed(seed, name));
    store.insert(name, value)
}

/// Handles to the PLE weights inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PleParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    /// `D×Dψ`, `Dψ×Dψ`, `Dψ×D`, ReLU after the first two.
    pub psi: [ParamId; 3],
}

/// PLE weights recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PleVars {
    w_query: Var,
    w_key: Var,
    w_value: Var,
    psi: [Var; 3],
    dim: usize,
}

impl PleParams {
    pub fn init(store: &mut ParamStore, dim: usize, psi_dim: usize, seed: u64) -> Self {
        Self {
            w_query: init_matrix(store, "ple.w_query", dim, dim, seed),
            w_key: init_matrix(store, "ple.w_key", dim, dim, seed),
            w_value: init_matrix(store, "ple.w_value", dim, dim, seed),
            psi: [
                init_matrix(store, "ple.psi.0", dim, psi_dim, seed),
                init_matrix(store, "ple.psi.1", psi_dim, psi_dim, seed),
                init_matrix(store, "ple.psi.2", psi_dim, dim, seed),
            ],
        }
    }

    /// Looks the weights up by name, e.g. in a loaded checkpoint.
    pub fn find(store: &ParamStore) -> Option<Self> {
        Some(Self {
            w_query: store.find("ple.w_query")?,
            w_key: store.find("ple.w_key")?,
            w_value: store.find("ple.w_value")?,
            psi: [
                store.find("ple.psi.0")?,
                store.find("ple.psi.1")?,
                store.find("ple.psi.2")?,
            ],
        })
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [
            self.w_query,
            self.w_key,
            self.w_value,
            self.psi[0],
            self.psi[1],
            self.psi[2],
        ]
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> PleVars {
        PleVars {
            w_query: tape.param(store, self.w_query),
            w_key: tape.param(store, self.w_key),
            w_value: tape.param(store, self.w_value),
            psi: self.psi.map(|id| tape.param(store, id)),
            dim: store.get(self.w_query).value.rows(),
        }
    }
}

/// Patch-level enrichment of a stack of frames.
///
/// `x` holds `F` frames of `patches` rows each, shape `[F·P² × D]`. Every
/// frame is enriched independently:
///
/// ```text
/// α = softmax((x W_q)(x W_k)ᵀ / √D) (x W_v) + x
/// f = ψ(α) + α
/// ```
pub fn ple_forward(tape: &mut Tape, x: Var, patches: usize, w: &PleVars) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let [rows, dim] = shape[..] else {
        return Err(Error::InvalidConfig(format!(
            "PLE input must be a [frames·patches × D] matrix, got {shape:?}"
        )));
    };
    if dim != w.dim {
        return Err(Error::ExtentMismatch {
            what: "PLE feature dimension".into(),
            expected: w.dim,
            found: dim,
        });
    }
    if patches == 0 || rows % patches != 0 {
        return Err(Error::InvalidConfig(format!(
            "{rows} patch rows do not split into frames of {patches} patches"
        )));
    }
    let frames = rows / patches;
    let scale = 1.0 / (dim as f64).sqrt();

    let q = tape.matmul(x, w.w_query)?;
    let k = tape.matmul(x, w.w_key)?;
    let v = tape.matmul(x, w.w_value)?;
    let mut attended = Vec::with_capacity(frames);
    for f in 0..frames {
        let (lo, hi) = (f * patches, (f + 1) * patches);
        let (qf, kf, vf) = if frames == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, lo, hi)?,
                tape.slice_rows(k, lo, hi)?,
                tape.slice_rows(v, lo, hi)?,
            )
        };
        let kt = tape.transpose(kf)?;
        let scores = tape.matmul(qf, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        attended.push(tape.matmul(weights, vf)?);
    }
    let attended = if frames == 1 {
        attended[0]
    } else {
        tape.concat(&attended, 0)?
    };
    let alpha = tape.add(attended, x)?;

    let h = tape.matmul(alpha, w.psi[0])?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w.psi[1])?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w.psi[2])?;
    Ok(tape.add(h, alpha)?)
}

/// Spatial average of each frame's patches: `[F·P² × D] → [F × D]`.
pub fn pool_frames(tape: &mut Tape, f: Var, patches: usize) -> Result<Var> {
    let shape = tape.value(f).shape().to_vec();
    let [rows, dim] = shape[..] else {
        return Err(Error::InvalidConfig(format!(
            "pooling input must be a matrix, got {shape:?}"
        )));
    };
    if patches == 0 || rows % patches != 0 {
        return Err(Error::InvalidConfig(format!(
            "{rows} patch rows do not split into frames of {patches} patches"
        )));
    }
    let stacked = tape.reshape(f, &[rows / patches, patches, dim])?;
    Ok(tape.mean(stacked, 1)?)
}

/// Handles to the FLE weights inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FleParams {
    /// `L×L` token-mixing weights.
    pub token: [ParamId; 2],
    /// `D×D` channel-mixing weights.
    pub channel: [ParamId; 2],
}

#[derive(Debug, Clone, Copy)]
pub struct FleVars {
    token: [Var; 2],
    channel: [Var; 2],
    frames: usize,
    dim: usize,
}

impl FleParams {
    pub fn init(store: &mut ParamStore, frames: usize, dim: usize, seed: u64) -> Self {
        Self {
            token: [
                init_matrix(store, "fle.token.0", frames, frames, seed),
                init_matrix(store, "fle.token.1", frames, frames, seed),
            ],
            channel: [
                init_matrix(store, "fle.channel.0", dim, dim, seed),
                init_matrix(store, "fle.channel.1", dim, dim, seed),
            ],
        }
    }

    pub fn find(store: &ParamStore) -> Option<Self> {
        Some(Self {
            token: [store.find("fle.token.0")?, store.find("fle.token.1")?],
            channel: [store.find("fle.channel.0")?, store.find("fle.channel.1")?],
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.token[0], self.token[1], self.channel[0], self.channel[1]]
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> FleVars {
        FleVars {
            token: self.token.map(|id| tape.param(store, id)),
            channel: self.channel.map(|id| tape.param(store, id)),
            frames: store.get(self.token[0]).value.rows(),
            dim: store.get(self.channel[0]).value.rows(),
        }
    }
}

/// Frame-level enrichment of one video's frame features `H: [L × D]`.
///
/// ```text
/// H* = relu(Hᵀ W_t1) W_t2 + Hᵀ        (D × L)
/// E  = relu(H*ᵀ W_r1) W_r2 + H*ᵀ      (L × D)
/// ```
pub fn fle_forward(tape: &mut Tape, h: Var, w: &FleVars) -> Result<Var> {
    let shape = tape.value(h).shape().to_vec();
    let [frames, dim] = shape[..] else {
        return Err(Error::InvalidConfig(format!(
            "FLE input must be an [L × D] matrix, got {shape:?}"
        )));
    };
    if frames != w.frames {
        return Err(Error::ExtentMismatch {
            what: "FLE frame count".into(),
            expected: w.frames,
            found: frames,
        });
    }
    if dim != w.dim {
        return Err(Error::ExtentMismatch {
            what: "FLE feature dimension".into(),
            expected: w.dim,
            found: dim,
        });
    }
    let ht = tape.transpose(h)?;
    let mixed = tape.matmul(ht, w.token[0])?;
    let mixed = tape.relu(mixed)?;
    let mixed = tape.matmul(mixed, w.token[1])?;
    let h_star = tape.add(mixed, ht)?;

    let h_star_t = tape.transpose(h_star)?;
    let refined = tape.matmul(h_star_t, w.channel[0])?;
    let refined = tape.relu(refined)?;
    let refined = tape.matmul(refined, w.channel[1])?;
    Ok(tape.add(refined, h_star_t)?)
}

/// L2 magnitude of every patch row of an `[F·P² × D]` feature stack.
pub fn patch_magnitudes(features: &Tensor) -> Vec<f64> {
    (0..features.rows())
        .map(|r| features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}
