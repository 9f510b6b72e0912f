use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tpf;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Split tag used for training videos.
pub const TRAIN: &str = "train";
/// Split tag used for held-out videos carrying frame truth.
pub const TEST: &str = "test";

/// Dataset description stored as `manifest.json` next to the feature files.
///
/// Class indices are 1-based: abnormal classes are `1..=k-1` and the normal
/// class is `k`, the last entry of `classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub dim: usize,
    pub num_classes: usize,
    pub classes: Vec<String>,
    pub videos: Vec<VideoEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    /// Feature file, relative to the manifest's directory.
    pub path: String,
    pub label: u8,
    pub class_index: usize,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_truth: Option<Vec<u8>>,
}

impl VideoEntry {
    pub fn video_id(&self) -> String {
        Path::new(&self.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.clone())
    }
}

/// One video: frame embeddings plus its weak label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// F×D frame embeddings.
    pub frames: Tensor,
    /// 1 when the video contains an anomaly.
    pub label: u8,
    /// 1-based class index; equals `k` for normal videos.
    pub class_index: usize,
    pub frame_truth: Option<Vec<u8>>,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_abnormal(&self) -> bool {
        self.label == 1
    }

    pub fn validate(&self, dim: usize, num_classes: usize) -> Result<()> {
        if self.frames.rows() == 0 {
            return Err(Error::contract(format!("{}: no frames", self.video_id)));
        }
        if self.frames.cols() != dim {
            return Err(Error::contract(format!(
                "{}: D={} but dataset D={dim}",
                self.video_id,
                self.frames.cols()
            )));
        }
        check_label(&self.video_id, self.label, self.class_index, num_classes)?;
        if let Some(truth) = &self.frame_truth {
            if truth.len() != self.frames.rows() {
                return Err(Error::contract(format!(
                    "{}: frame_truth has {} entries for {} frames",
                    self.video_id,
                    truth.len(),
                    self.frames.rows()
                )));
            }
            if truth.iter().any(|&t| t > 1) {
                return Err(Error::contract(format!("{}: frame_truth not binary", self.video_id)));
            }
        }
        Ok(())
    }
}

fn check_label(id: &str, label: u8, class_index: usize, k: usize) -> Result<()> {
    match label {
        0 if class_index == k => Ok(()),
        0 => Err(Error::contract(format!(
            "{id}: normal video must use class index {k}, got {class_index}"
        ))),
        1 if (1..k).contains(&class_index) => Ok(()),
        1 => Err(Error::contract(format!(
            "{id}: abnormal class index {class_index} outside 1..={}",
            k - 1
        ))),
        other => Err(Error::contract(format!("{id}: label {other} is not 0/1"))),
    }
}

impl DatasetManifest {
    pub fn normal_index(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract("need at least one abnormal and one normal class"));
        }
        if self.classes.len() != self.num_classes {
            return Err(Error::contract(format!(
                "{} class names for num_classes={}",
                self.classes.len(),
                self.num_classes
            )));
        }
        if self.dim == 0 {
            return Err(Error::contract("dim must be positive"));
        }
        let mut seen = HashSet::new();
        for name in &self.classes {
            if !seen.insert(name) {
                return Err(Error::contract(format!("duplicate class name {name:?}")));
            }
        }
        let mut paths = HashSet::new();
        for v in &self.videos {
            check_label(&v.path, v.label, v.class_index, self.num_classes)?;
            if !paths.insert(&v.path) {
                return Err(Error::contract(format!("{} listed more than once", v.path)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn split<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a VideoEntry> + 'a {
        self.videos.iter().filter(move |v| v.split == tag)
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self { manifest, root })
    }

    pub fn load_video(&self, entry: &VideoEntry) -> Result<FeatureSequence> {
        let frames = tpf::load_features_with_dim(&self.root.join(&entry.path), self.manifest.dim)?;
        let seq = FeatureSequence {
            video_id: entry.video_id(),
            frames,
            label: entry.label,
            class_index: entry.class_index,
            frame_truth: entry.frame_truth.clone(),
        };
        seq.validate(self.manifest.dim, self.manifest.num_classes)?;
        Ok(seq)
    }

    pub fn load_split(&self, tag: &str) -> Result<Vec<FeatureSequence>> {
        self.manifest.split(tag).map(|e| self.load_video(e)).collect()
    }
}
