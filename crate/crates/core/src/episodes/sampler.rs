use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ClipRecord, Dataset};

/// Shape of a C-way K-shot task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 5,
            queries_per_class: 1,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::InvalidConfig(format!(
                "episodes need at least 2 ways, got {}",
                self.ways
            )));
        }
        if self.shots == 0 || self.queries_per_class == 0 {
            return Err(Error::InvalidConfig("shots and queries must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub clip: &'a ClipRecord,
    /// Position of the true class within the episode's ways.
    pub target: usize,
}

/// One sampled task. Way `i` is dataset class `classes[i]`.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    pub classes: Vec<u32>,
    pub support: Vec<Vec<&'a ClipRecord>>,
    pub queries: Vec<Query<'a>>,
}

impl Episode<'_> {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }
}

/// Draws episode number `counter` of the stream defined by `spec.seed`.
///
/// Classes are drawn without replacement, then `shots` supports and
/// `queries_per_class` queries per class, also without replacement. The
/// result depends only on `(seed, counter)` and the sorted clip ids.
pub fn sample_episode<'a>(dataset: &'a Dataset, spec: &EpisodeSpec, counter: u64) -> Result<Episode<'a>> {
    spec.validate()?;
    let classes = dataset.classes();
    if classes.len() < spec.ways {
        return Err(Error::InsufficientClasses {
            available: classes.len(),
            needed: spec.ways,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(counter);

    let per_class = spec.shots + spec.queries_per_class;
    let chosen: Vec<u32> = index::sample(&mut rng, classes.len(), spec.ways)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut support = Vec::with_capacity(spec.ways);
    let mut queries = Vec::with_capacity(spec.ways * spec.queries_per_class);
    for (way, &label) in chosen.iter().enumerate() {
        let pool = dataset.class_clips(label);
        if pool.len() < per_class {
            return Err(Error::InsufficientClips {
                class: label,
                available: pool.len(),
                needed: per_class,
            });
        }
        let picks: Vec<&ClipRecord> = index::sample(&mut rng, pool.len(), per_class)
            .into_iter()
            .map(|i| &dataset.clips()[pool[i]])
            .collect();
        support.push(picks[..spec.shots].to_vec());
        queries.extend(picks[spec.shots..].iter().map(|&clip| Query { clip, target: way }));
    }
    Ok(Episode {
        classes: chosen,
        support,
        queries,
    })
}

/// Order-invariant reference classifier: every clip is reduced to its mean
/// feature over frames and patches, and each query goes to the class whose
/// mean support vector is nearest (ties to the lowest way).
pub fn mean_pool_predictions(episode: &Episode<'_>) -> Vec<usize> {
    let mean_vec = |c: &ClipRecord| {
        let f = &c.features;
        let rows = f.frames * f.patches;
        let mut m = vec![0.0; f.dim];
        for r in 0..rows {
            for (acc, v) in m.iter_mut().zip(&f.values.data()[r * f.dim..(r + 1) * f.dim]) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= rows as f64);
        m
    };
    let centers: Vec<Vec<f64>> = episode
        .support
        .iter()
        .map(|clips| {
            let vecs: Vec<Vec<f64>> = clips.iter().map(|c| mean_vec(c)).collect();
            let mut center = vec![0.0; vecs[0].len()];
            for v in &vecs {
                center.iter_mut().zip(v).for_each(|(c, x)| *c += x);
            }
            center.iter_mut().for_each(|c| *c /= vecs.len() as f64);
            center
        })
        .collect();
    episode
        .queries
        .iter()
        .map(|q| {
            let v = mean_vec(q.clip);
            let dist = |c: &Vec<f64>| c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let mut best = 0;
            for (i, c) in centers.iter().enumerate().skip(1) {
                if dist(c) < dist(&centers[best]) {
                    best = i;
                }
            }
            best
        })
        .collect()
}
