//! Clip ingestion, synthetic data and episode sampling.

mod clip_io;
mod sampler;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub use clip_io::{decode_clip, encode_clip, load_clip, save_clip, CLIP_MAGIC, CLIP_VERSION};
pub use sampler::{mean_pool_predictions, sample_episode, Episode, EpisodeSpec, Query};
pub use synthetic::{generate_synthetic, SyntheticGenerator, SyntheticSpec};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Backbone-free features of one video: `[L × P² × D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip {
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub values: Tensor,
}

impl FeatureClip {
    pub fn new(values: Tensor) -> Result<Self> {
        let [frames, patches, dim] = *values.shape() else {
            return Err(Error::InvalidConfig(format!(
                "clip features must be [L × P² × D], got {:?}",
                values.shape()
            )));
        };
        Ok(Self {
            frames,
            patches,
            dim,
            values,
        })
    }

    /// Features of frame `i` as a `[P² × D]` slice.
    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.patches * self.dim;
        &self.values.data()[i * n..(i + 1) * n]
    }

    /// The clip as a `[L·P² × D]` matrix of patch rows.
    pub fn patch_matrix(&self) -> Tensor {
        self.values
            .reshaped(&[self.frames * self.patches, self.dim])
            .expect("same element count")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub label: u32,
    pub features: FeatureClip,
}

/// Feature extents shared by every clip of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extents {
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
}

/// An immutable set of clips, kept sorted by clip id.
#[derive(Debug, Clone)]
pub struct Dataset {
    extents: Extents,
    clips: Vec<ClipRecord>,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    pub fn new(mut clips: Vec<ClipRecord>) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::InvalidConfig("dataset has no clips".into()))?;
        let extents = Extents {
            frames: first.features.frames,
            patches: first.features.patches,
            dim: first.features.dim,
        };
        for c in &clips {
            let f = &c.features;
            for (what, expected, found) in [
                ("frames", extents.frames, f.frames),
                ("patches", extents.patches, f.patches),
                ("channels", extents.dim, f.dim),
            ] {
                if expected != found {
                    return Err(Error::ExtentMismatch {
                        what: format!("clip {} {what}", c.clip_id),
                        expected,
                        found,
                    });
                }
            }
        }
        clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        if let Some(w) = clips.windows(2).find(|w| w[0].clip_id == w[1].clip_id) {
            return Err(Error::InvalidConfig(format!("duplicate clip id {}", w[0].clip_id)));
        }
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, c) in clips.iter().enumerate() {
            by_class.entry(c.label).or_default().push(i);
        }
        Ok(Self {
            extents,
            clips,
            by_class,
        })
    }

    pub fn extents(&self) -> Extents {
        self.extents
    }

    pub fn clips(&self) -> &[ClipRecord] {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Labels present, ascending.
    pub fn classes(&self) -> Vec<u32> {
        self.by_class.keys().copied().collect()
    }

    /// Clip indices of one class, in clip-id order.
    pub fn class_clips(&self, label: u32) -> &[usize] {
        self.by_class.get(&label).map_or(&[], Vec::as_slice)
    }

    /// Clips whose label satisfies `keep`.
    pub fn filter_classes(&self, keep: impl Fn(u32) -> bool) -> Result<Dataset> {
        Dataset::new(self.clips.iter().filter(|c| keep(c.label)).cloned().collect())
    }

    /// Splits off the `test_classes` highest labels as a held-out set.
    pub fn split_holdout(&self, test_classes: usize) -> Result<(Dataset, Dataset)> {
        let classes = self.classes();
        if test_classes == 0 || test_classes >= classes.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot hold out {test_classes} of {} classes",
                classes.len()
            )));
        }
        let cut = classes[classes.len() - test_classes];
        Ok((
            self.filter_classes(|l| l < cut)?,
            self.filter_classes(|l| l >= cut)?,
        ))
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes every clip under `dir` plus a `path<TAB>label` manifest.
pub fn save_dataset(clips: &[ClipRecord], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for c in clips {
        let name = format!("{}.stfb", c.clip_id);
        save_clip(c, &dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{}\n", c.label));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a manifest; relative clip paths resolve against its directory.
/// A dataset directory may be given in place of the manifest file.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut clips = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Manifest {
            path: manifest.clone(),
            line: n + 1,
            reason,
        };
        let (file, label) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `path<TAB>label`".into()))?;
        let label: u32 = label
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad label {label:?}")))?;
        let clip = load_clip(&base.join(file))?;
        if clip.label != label {
            return Err(bad(format!(
                "manifest label {label} disagrees with clip header label {}",
                clip.label
            )));
        }
        clips.push(clip);
    }
    Dataset::new(clips)
}
