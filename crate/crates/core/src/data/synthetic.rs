//! Synthetic frame-embedding datasets with injected anomaly segments.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, FeatureSequence, VideoEntry, TEST, TRAIN};
use super::tokens::{class_token_embeddings, VOCABULARY_SEED};
use super::tpf;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed::rng_for;

const EVENT_NAMES: [&str; 13] = [
    "abuse",
    "arrest",
    "arson",
    "assault",
    "burglary",
    "explosion",
    "fighting",
    "road_accident",
    "robbery",
    "shooting",
    "shoplifting",
    "stealing",
    "vandalism",
];

pub const NORMAL_CLASS: &str = "normal";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub name: String,
    /// k, including the normal class.
    pub num_classes: usize,
    pub dim: usize,
    pub frames: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    /// Anomaly segment length bounds as fractions of F, within (0, 1].
    pub segment_min: f64,
    pub segment_max: f64,
    /// Minimum Euclidean distance between any two class prototypes.
    pub separation: f64,
    /// Standard deviation of the per-component Gaussian frame noise.
    pub noise: f64,
    /// Cosine between each prototype and the frozen token of its class
    /// name, standing in for a pretrained text/vision alignment. Zero makes
    /// prototypes independent of the tokens.
    pub text_alignment: f64,
    /// Slow scene drift: every video gets a Gaussian random walk over its
    /// frames whose per-component standard deviation reaches `drift` at
    /// the last frame. Zero disables it.
    #[serde(default)]
    pub drift: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            num_classes: 4,
            dim: 64,
            frames: 64,
            train_videos: 200,
            test_videos: 60,
            segment_min: 0.1,
            segment_max: 0.5,
            separation: 1.0,
            noise: 0.1,
            text_alignment: 0.2,
            drift: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    /// Harder benchmark for comparing model variants: noisier frames and
    /// slow scene drift, so accuracy stays below the ceiling.
    pub fn ablation() -> Self {
        Self {
            name: "synthetic-ablation".into(),
            noise: 0.3,
            drift: 0.5,
            ..Self::default()
        }
    }

    /// Parses a JSON object whose keys override the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("data config: {e}")))?;
        let serde_json::Value::Object(overrides) = value else {
            return Err(Error::Config("data config must be a JSON object".into()));
        };
        let serde_json::Value::Object(mut merged) = serde_json::to_value(Self::default())? else {
            unreachable!("config serializes to an object")
        };
        merged.extend(overrides);
        let cfg: Self = serde_json::from_value(serde_json::Value::Object(merged))
            .map_err(|e| Error::Config(format!("data config: {e}")))?;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract("synthetic data needs k >= 2"));
        }
        if self.dim == 0 || self.frames == 0 {
            return Err(Error::contract("synthetic data needs D >= 1 and F >= 1"));
        }
        let in_range = |x: f64| x > 0.0 && x <= 1.0;
        if !(in_range(self.segment_min) && in_range(self.segment_max) && self.segment_min <= self.segment_max) {
            return Err(Error::contract(format!(
                "segment range [{}, {}] must lie in (0, 1]",
                self.segment_min, self.segment_max
            )));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::contract("noise scale must be positive"));
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return Err(Error::contract("drift must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.text_alignment) {
            return Err(Error::contract("text_alignment must lie in [0, 1)"));
        }
        if self.text_alignment > 0.0 && self.dim < 2 {
            return Err(Error::contract("text_alignment needs D >= 2"));
        }
        if !(self.separation >= 0.0 && self.separation < 2.0) {
            return Err(Error::contract("unit prototypes cannot be separated by 2 or more"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.num_classes - 1)
            .map(|i| match EVENT_NAMES.get(i) {
                Some(n) => n.to_string(),
                None => format!("event_{}", i + 1),
            })
            .collect();
        names.push(NORMAL_CLASS.into());
        names
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub sequence: FeatureSequence,
    pub split: &'static str,
}

/// Generated dataset held in memory. Every video carries frame truth here;
/// only the test split keeps it when written to disk.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub classes: Vec<String>,
    /// Unit-norm prototype per class (row `k-1` is the normal prototype).
    pub prototypes: Tensor,
    pub videos: Vec<SyntheticVideo>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `rho * token + sqrt(1 - rho^2) * r`, with `r` a random unit vector
/// orthogonal to `token`.
fn aligned_candidate(rng: &mut ChaCha8Rng, token: &[f64], rho: f64) -> Vec<f64> {
    loop {
        let r = unit_gaussian(rng, token.len());
        let along: f64 = r.iter().zip(token).map(|(a, b)| a * b).sum();
        let perp: Vec<f64> = r.iter().zip(token).map(|(a, b)| a - along * b).collect();
        let n = perp.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            let c = (1.0 - rho * rho).sqrt() / n;
            return token.iter().zip(&perp).map(|(t, p)| rho * t + c * p).collect();
        }
    }
}

fn draw_prototypes(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    const MAX_ATTEMPTS: usize = 10_000;
    let tokens = if cfg.text_alignment > 0.0 {
        Some(class_token_embeddings(&cfg.class_names(), cfg.dim, VOCABULARY_SEED)?)
    } else {
        None
    };
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    let mut attempts = 0;
    while protos.len() < cfg.num_classes {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::contract(format!(
                "could not place {} prototypes {} apart in D={}",
                cfg.num_classes, cfg.separation, cfg.dim
            )));
        }
        let cand = match &tokens {
            Some(t) => aligned_candidate(rng, t.row(protos.len()), cfg.text_alignment),
            None => unit_gaussian(rng, cfg.dim),
        };
        if protos.iter().all(|p| distance(p, &cand) >= cfg.separation) {
            protos.push(cand);
        }
    }
    Ok(protos)
}

fn noisy_frame(rng: &mut ChaCha8Rng, proto: &[f64], noise: f64, out: &mut Vec<f64>) {
    out.extend(proto.iter().map(|&p| {
        let z: f64 = StandardNormal.sample(rng);
        p + noise * z
    }));
}

/// Adds a zero-start random walk with per-component std `scale` at the
/// last row to the row-major `frames`.
fn add_drift(rng: &mut ChaCha8Rng, scale: f64, dim: usize, frames: &mut [f64]) {
    let f = frames.len() / dim;
    let step = scale / ((f.max(2) - 1) as f64).sqrt();
    let mut walk = vec![0.0; dim];
    for row in frames.chunks_mut(dim).skip(1) {
        for (w, x) in walk.iter_mut().zip(row) {
            let g: f64 = StandardNormal.sample(rng);
            *w += step * g;
            *x += *w;
        }
    }
}

/// Draws prototypes and videos; fully determined by `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut proto_rng = rng_for(cfg.seed, "synthetic/prototypes");
    let mut rng = rng_for(cfg.seed, "synthetic/videos");
    let mut drift_rng = rng_for(cfg.seed, "synthetic/drift");
    let protos = draw_prototypes(cfg, &mut proto_rng)?;
    let k = cfg.num_classes;
    let (f, d) = (cfg.frames, cfg.dim);
    let normal = &protos[k - 1];

    let min_len = ((cfg.segment_min * f as f64).ceil() as usize).clamp(1, f);
    let max_len = ((cfg.segment_max * f as f64).floor() as usize).clamp(min_len, f);

    let mut videos = Vec::with_capacity(cfg.train_videos + cfg.test_videos);
    for (split, count) in [(TRAIN, cfg.train_videos), (TEST, cfg.test_videos)] {
        let normals = count / 2;
        for i in 0..count {
            let abnormal = i >= normals;
            let mut data = Vec::with_capacity(f * d);
            let mut truth = vec![0u8; f];
            let class_index = if abnormal {
                let tau = rng.random_range(1..k);
                let len = rng.random_range(min_len..=max_len);
                let start = rng.random_range(0..=f - len);
                truth[start..start + len].fill(1);
                for &t in &truth {
                    let proto = if t == 1 { &protos[tau - 1] } else { normal };
                    noisy_frame(&mut rng, proto, cfg.noise, &mut data);
                }
                tau
            } else {
                for _ in 0..f {
                    noisy_frame(&mut rng, normal, cfg.noise, &mut data);
                }
                k
            };
            if cfg.drift > 0.0 {
                add_drift(&mut drift_rng, cfg.drift, d, &mut data);
            }
            let kind = if abnormal { "abnormal" } else { "normal" };
            videos.push(SyntheticVideo {
                sequence: FeatureSequence {
                    video_id: format!("{split}_{i:04}_{kind}"),
                    frames: Tensor::matrix(f, d, data)?,
                    label: abnormal as u8,
                    class_index,
                    frame_truth: Some(truth),
                },
                split,
            });
        }
    }

    let prototypes = Tensor::matrix(k, d, protos.concat())?;
    Ok(SyntheticDataset {
        classes: cfg.class_names(),
        config: cfg.clone(),
        prototypes,
        videos,
    })
}

impl SyntheticDataset {
    pub fn split(&self, tag: &str) -> Vec<FeatureSequence> {
        self.videos
            .iter()
            .filter(|v| v.split == tag)
            .map(|v| v.sequence.clone())
            .collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.config.name.clone(),
            dim: self.config.dim,
            num_classes: self.config.num_classes,
            classes: self.classes.clone(),
            videos: self
                .videos
                .iter()
                .map(|v| VideoEntry {
                    path: format!("features/{}.tpf", v.sequence.video_id),
                    label: v.sequence.label,
                    class_index: v.sequence.class_index,
                    split: v.split.to_string(),
                    frame_truth: if v.split == TEST {
                        v.sequence.frame_truth.clone()
                    } else {
                        None
                    },
                })
                .collect(),
        }
    }

    /// Writes `manifest.json` and `features/*.tpf` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let features = dir.join("features");
        fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
        let manifest = self.manifest();
        for (v, entry) in self.videos.iter().zip(&manifest.videos) {
            tpf::save_features(&dir.join(&entry.path), &v.sequence.frames)?;
        }
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_classes: 3,
            dim: 8,
            frames: 12,
            train_videos: 6,
            test_videos: 4,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        for (x, y) in a.videos.iter().zip(&b.videos) {
            assert_eq!(x.sequence, y.sequence);
        }
        let c = generate_synthetic(&SyntheticConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.videos[0].sequence.frames, c.videos[0].sequence.frames);
    }

    #[test]
    fn vanishing_noise_gives_exact_prototypes() {
        let ds = generate_synthetic(&SyntheticConfig { noise: 1e-300, ..small() }).unwrap();
        for v in ds.videos.iter().filter(|v| v.sequence.label == 1) {
            let s = &v.sequence;
            let truth = s.frame_truth.as_ref().unwrap();
            for (j, &t) in truth.iter().enumerate() {
                let proto_row = if t == 1 { s.class_index - 1 } else { 2 };
                assert_eq!(s.frames.row(j), ds.prototypes.row(proto_row));
            }
        }
    }

    #[test]
    fn segments_and_labels() {
        let ds = generate_synthetic(&small()).unwrap();
        for v in &ds.videos {
            let s = &v.sequence;
            let positives: usize = s.frame_truth.as_ref().unwrap().iter().map(|&t| t as usize).sum();
            if s.label == 1 {
                assert!((1..=12).contains(&positives));
                assert!((1..3).contains(&s.class_index));
                let t = s.frame_truth.as_ref().unwrap();
                let first = t.iter().position(|&x| x == 1).unwrap();
                assert!(t[first..first + positives].iter().all(|&x| x == 1));
            } else {
                assert_eq!(positives, 0);
                assert_eq!(s.class_index, 3);
            }
            s.validate(8, 3).unwrap();
        }
        assert_eq!(ds.split(TRAIN).len(), 6);
        assert_eq!(ds.split(TEST).len(), 4);
    }

    #[test]
    fn prototypes_respect_separation() {
        let cfg = SyntheticConfig {
            separation: 1.3,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for i in 0..4 {
            for j in 0..i {
                assert!(distance(ds.prototypes.row(i), ds.prototypes.row(j)) >= 1.3);
            }
            let n = ds.prototypes.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prototypes_share_the_requested_cosine_with_their_tokens() {
        for rho in [0.0, 0.2, 0.6] {
            let ds = generate_synthetic(&SyntheticConfig { text_alignment: rho, ..SyntheticConfig::default() }).unwrap();
            let tokens = class_token_embeddings(&ds.classes, 64, VOCABULARY_SEED).unwrap();
            for i in 0..4 {
                let (p, t) = (ds.prototypes.row(i), tokens.row(i));
                let cos = p.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
                if rho > 0.0 {
                    assert!((cos - rho).abs() < 1e-12, "class {i}: {cos} vs {rho}");
                } else {
                    assert!(cos.abs() < 0.5);
                }
            }
        }
    }

    #[test]
    fn json_overrides_defaults() {
        let cfg = SyntheticConfig::from_json(r#"{"noise":0.3,"seed":9}"#).unwrap();
        assert_eq!((cfg.noise, cfg.seed, cfg.dim), (0.3, 9, 64));
        assert!(matches!(SyntheticConfig::from_json(r#"{"nois":0.3}"#), Err(Error::Config(_))));
        assert!(matches!(SyntheticConfig::from_json(r#"{"noise":-1}"#), Err(Error::Config(_))));
        assert!(SyntheticConfig::from_json("[]").is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_synthetic(&SyntheticConfig { text_alignment: 1.0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { text_alignment: -0.1, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { num_classes: 1, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { noise: 0.0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { segment_min: 0.0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { segment_max: 1.5, ..small() }).is_err());
    }

    #[test]
    fn only_test_split_keeps_truth_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small()).unwrap();
        let m = ds.write(dir.path()).unwrap();
        for v in &m.videos {
            assert_eq!(v.frame_truth.is_some(), v.split == TEST);
        }
        let loaded = super::super::Dataset::open(&dir.path().join("manifest.json")).unwrap();
        let test = loaded.load_split(TEST).unwrap();
        assert_eq!(test.len(), 4);
        assert_eq!(test[3].frames, ds.split(TEST)[3].frames);
    }
}
