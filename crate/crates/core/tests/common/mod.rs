//! Straight-line reference implementations over nested `Vec`s.
//!
//! Nothing here touches the tape; every formula is evaluated with plain
//! loops so it can serve as an independent oracle.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strm_core::autodiff::Tensor;
use strm_core::episodes::{ClipRecord, Episode, FeatureClip};
use strm_core::model::Model;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// One frame of patch-level enrichment, `x: [P² × D]`.
pub fn ple(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, psi: [&Mat; 3]) -> Mat {
    let d = x[0].len() as f64;
    let (q, k, v) = (matmul(x, wq), matmul(x, wk), matmul(x, wv));
    let mut alpha = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let logits: Vec<f64> = k.iter().map(|kj| dot(&q[i], kj) / d.sqrt()).collect();
        let a = softmax(&logits);
        let row: Vec<f64> = (0..x[0].len())
            .map(|c| x[i][c] + (0..x.len()).map(|j| a[j] * v[j][c]).sum::<f64>())
            .collect();
        alpha.push(row);
    }
    let h = relu(&matmul(&alpha, psi[0]));
    let h = relu(&matmul(&h, psi[1]));
    add(&matmul(&h, psi[2]), &alpha)
}

pub fn pool(f: &Mat) -> Vec<f64> {
    (0..f[0].len())
        .map(|c| f.iter().map(|r| r[c]).sum::<f64>() / f.len() as f64)
        .collect()
}

/// Frame-level enrichment of `h: [L × D]`.
pub fn fle(h: &Mat, t1: &Mat, t2: &Mat, r1: &Mat, r2: &Mat) -> Mat {
    let ht = transpose(h);
    let h_star = add(&matmul(&relu(&matmul(&ht, t1)), t2), &ht);
    let hs_t = transpose(&h_star);
    add(&matmul(&relu(&matmul(&hs_t, r1)), r2), &hs_t)
}

/// Strictly increasing 0-based index tuples, by recursion.
pub fn tuples(frames: usize, card: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, frames: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for t in start..frames {
            cur.push(t);
            go(t + 1, frames, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, frames, card, &mut Vec::new(), &mut out);
    out
}

pub fn concat_rows(e: &Mat, t: &[usize]) -> Vec<f64> {
    t.iter().flat_map(|&i| e[i].iter().copied()).collect()
}

fn project(v: &[f64], w: &Mat) -> Vec<f64> {
    (0..w[0].len()).map(|j| v.iter().zip(w).map(|(x, r)| x * r[j]).sum()).collect()
}

/// `T(Q, S^c)` with one `(W_key, W_value)` pair per cardinality.
pub fn trm_distance(query: &Mat, supports: &[Mat], omega: &[usize], keys: &[Mat], values: &[Mat]) -> f64 {
    let frames = query.len();
    let mut total = 0.0;
    for (b, &w) in omega.iter().enumerate() {
        let pi = tuples(frames, w);
        let dk = keys[b][0].len() as f64;
        let mut sk = Vec::new();
        let mut sv = Vec::new();
        for s in supports {
            for t in &pi {
                let r = concat_rows(s, t);
                sk.push(project(&r, &keys[b]));
                sv.push(project(&r, &values[b]));
            }
        }
        let mut sum = 0.0;
        for t in &pi {
            let r = concat_rows(query, t);
            let (qk, qv) = (project(&r, &keys[b]), project(&r, &values[b]));
            let a = softmax(&sk.iter().map(|k| dot(&qk, k) / dk.sqrt()).collect::<Vec<_>>());
            let mut proto = vec![0.0; qv.len()];
            for (ai, v) in a.iter().zip(&sv) {
                for (p, x) in proto.iter_mut().zip(v) {
                    *p += ai * x;
                }
            }
            let gap: Vec<f64> = qv.iter().zip(&proto).map(|(x, y)| x - y).collect();
            sum += norm(&gap);
        }
        total += sum / pi.len() as f64;
    }
    total
}

/// `M(Q, c)` with one `W_cls` per cardinality.
pub fn qc_similarity(query: &Mat, supports: &[Mat], omega: &[usize], cls: &[Mat]) -> f64 {
    let frames = query.len();
    let code = |e: &Mat, t: &[usize], w: &Mat| -> Vec<f64> {
        project(&concat_rows(e, t), w).into_iter().map(|v| v.max(0.0)).collect()
    };
    let mut total = 0.0;
    for (b, &w) in omega.iter().enumerate() {
        let pi = tuples(frames, w);
        let support_codes: Vec<Vec<f64>> = supports
            .iter()
            .flat_map(|s| pi.iter().map(move |t| (s, t)))
            .map(|(s, t)| code(s, t, &cls[b]))
            .collect();
        let mut sum = 0.0;
        for t in &pi {
            let z = code(query, t, &cls[b]);
            sum += support_codes
                .iter()
                .map(|c| cosine(&z, c))
                .fold(f64::NEG_INFINITY, f64::max);
        }
        total += sum / pi.len() as f64;
    }
    total
}

fn param(model: &Model, name: &str) -> Mat {
    let id = model.store.find(name).unwrap_or_else(|| panic!("missing {name}"));
    mat(&model.store.get(id).value)
}

/// Pooled frames `H` and enriched frames `E` of one clip.
pub fn clip_frames(model: &Model, clip: &ClipRecord) -> (Mat, Mat) {
    let c = model.config();
    let f = &clip.features;
    let mut h = Vec::with_capacity(f.frames);
    for i in 0..f.frames {
        let x: Mat = f.frame(i).chunks(f.dim).map(<[f64]>::to_vec).collect();
        let enriched = if c.use_ple {
            ple(
                &x,
                &param(model, "ple.w_query"),
                &param(model, "ple.w_key"),
                &param(model, "ple.w_value"),
                [
                    &param(model, "ple.psi.0"),
                    &param(model, "ple.psi.1"),
                    &param(model, "ple.psi.2"),
                ],
            )
        } else {
            x
        };
        h.push(pool(&enriched));
    }
    let e = if c.use_fle {
        fle(
            &h,
            &param(model, "fle.token.0"),
            &param(model, "fle.token.1"),
            &param(model, "fle.channel.0"),
            &param(model, "fle.channel.1"),
        )
    } else {
        h.clone()
    };
    (h, e)
}

/// `(L_TM + λ·L_QC, L_TM, L_QC)` of an episode, by direct composition.
pub fn episode_loss(model: &Model, episode: &Episode<'_>) -> (f64, f64, f64) {
    let c = model.config();
    let keys: Vec<Mat> = c.omega.iter().map(|w| param(model, &format!("trm.key.{w}"))).collect();
    let values: Vec<Mat> = c.omega.iter().map(|w| param(model, &format!("trm.value.{w}"))).collect();
    let cls: Vec<Mat> = if c.use_qc {
        c.omega.iter().map(|w| param(model, &format!("qc.cls.{w}"))).collect()
    } else {
        Vec::new()
    };
    let supports: Vec<Vec<(Mat, Mat)>> = episode
        .support
        .iter()
        .map(|s| s.iter().map(|clip| clip_frames(model, clip)).collect())
        .collect();
    let (mut tm, mut qc) = (0.0, 0.0);
    for q in &episode.queries {
        let (qh, qe) = clip_frames(model, q.clip);
        let logits: Vec<f64> = supports
            .iter()
            .map(|s| {
                let es: Vec<Mat> = s.iter().map(|p| p.1.clone()).collect();
                -trm_distance(&qe, &es, &c.omega, &keys, &values)
            })
            .collect();
        tm += -softmax(&logits)[q.target].max(1e-12).ln();
        if c.use_qc {
            let sims: Vec<f64> = supports
                .iter()
                .map(|s| {
                    let hs: Vec<Mat> = s.iter().map(|p| p.0.clone()).collect();
                    qc_similarity(&qh, &hs, &c.omega, &cls)
                })
                .collect();
            qc += -softmax(&sims)[q.target].max(1e-12).ln();
        }
    }
    let n = episode.queries.len() as f64;
    let (tm, qc) = (tm / n, qc / n);
    (tm + c.lambda * qc, tm, qc)
}

/// A clip of the given `[L × P² × D]` values with a fixed label.
pub fn clip_from(id: &str, label: u32, frames: usize, patches: usize, dim: usize, values: Vec<f64>) -> ClipRecord {
    ClipRecord {
        clip_id: id.into(),
        label,
        features: FeatureClip::new(Tensor::new(&[frames, patches, dim], values).unwrap()).unwrap(),
    }
}

pub fn random_clip(rng: &mut ChaCha8Rng, id: &str, label: u32, frames: usize, patches: usize, dim: usize) -> ClipRecord {
    let values = (0..frames * patches * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    clip_from(id, label, frames, patches, dim, values)
}
