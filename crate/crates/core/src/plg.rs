//! Frame-level pseudo-labels from text/frame match similarities.
//!
//! Everything here works on plain values: labels are training targets and
//! never carry gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::FeatureSequence;
use crate::error::{Error, Result};

/// Which side of the threshold counts as anomalous.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelPolarity {
    /// `γ = 1` iff `ψ̃ <= 1 - θ`. Large fused scores mean "normal", so the
    /// anomaly evidence is their complement.
    #[default]
    AnomalyOriented,
    /// `γ = 1` iff `ψ̃ >= θ`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlgConfig {
    /// Weight of the normal-text similarities in the fusion.
    pub alpha: f64,
    pub theta: f64,
    #[serde(default)]
    pub polarity: LabelPolarity,
}

impl Default for PlgConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            theta: 0.55,
            polarity: LabelPolarity::AnomalyOriented,
        }
    }
}

impl PlgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta {} outside (0, 1)", self.theta)));
        }
        Ok(())
    }
}

/// Per-video result. `psi` is the normalized fused score; it is empty for
/// normal videos, whose labels are all zero by definition.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub video_id: String,
    pub psi: Vec<f64>,
    pub gamma: Vec<u8>,
}

/// `values[j] = <X[j], t>`.
pub fn similarities(x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
    if x.cols() != t.len() {
        return Err(Error::dim(
            "similarities",
            format!("frames have D={} but text has D={}", x.cols(), t.len()),
        ));
    }
    Ok((0..x.rows())
        .map(|j| x.row(j).iter().zip(t).map(|(a, b)| a * b).sum())
        .collect())
}

/// Min-max scaling to `[0, 1]`; a constant vector maps to zeros.
pub fn minmax_normalize(s: &[f64]) -> Vec<f64> {
    let mn = s.iter().copied().fold(f64::INFINITY, f64::min);
    let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx > mn {
        let range = mx - mn;
        s.iter().map(|v| (v - mn) / range).collect()
    } else {
        vec![0.0; s.len()]
    }
}

/// `ψ[j] = α·s_an[j] + (1 − α)·(1 − s_aa[j])`.
pub fn fuse(s_an_norm: &[f64], s_aa_norm: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if s_an_norm.len() != s_aa_norm.len() {
        return Err(Error::contract(format!(
            "fuse: lengths {} and {} differ",
            s_an_norm.len(),
            s_aa_norm.len()
        )));
    }
    Ok(s_an_norm
        .iter()
        .zip(s_aa_norm)
        .map(|(an, aa)| alpha * an + (1.0 - alpha) * (1.0 - aa))
        .collect())
}

/// Binary labels from normalized fused scores. Scores on the threshold are labeled 1.
pub fn threshold_labels(psi_norm: &[f64], theta: f64, polarity: LabelPolarity) -> Vec<u8> {
    psi_norm
        .iter()
        .map(|&p| match polarity {
            LabelPolarity::AnomalyOriented => u8::from(p <= 1.0 - theta),
            LabelPolarity::Literal => u8::from(p >= theta),
        })
        .collect()
}

/// Labels for an abnormal video from its raw normal-text (`s_an`) and
/// true-class (`s_aa`) similarities. Returns `(ψ̃, γ)`.
pub fn labels_from_similarities(s_an: &[f64], s_aa: &[f64], cfg: &PlgConfig) -> Result<(Vec<f64>, Vec<u8>)> {
    let psi = fuse(&minmax_normalize(s_an), &minmax_normalize(s_aa), cfg.alpha)?;
    let psi = minmax_normalize(&psi);
    let gamma = threshold_labels(&psi, cfg.theta, cfg.polarity);
    Ok((psi, gamma))
}

/// Pseudo-labels for one video given the embedding set `e` (k×D, row `i`
/// is class `i + 1`) and the normal-class text used against abnormal videos.
pub fn pseudo_labels(video: &FeatureSequence, e: &Tensor, normal_text: &[f64], cfg: &PlgConfig) -> Result<PseudoLabels> {
    let f = video.num_frames();
    if !video.is_abnormal() {
        return Ok(PseudoLabels {
            video_id: video.video_id.clone(),
            psi: Vec::new(),
            gamma: vec![0; f],
        });
    }
    let tau = video.class_index;
    if tau == 0 || tau > e.rows() {
        return Err(Error::contract(format!(
            "{}: no text embedding for class {tau} (have {})",
            video.video_id,
            e.rows()
        )));
    }
    let s_an = similarities(&video.frames, normal_text)?;
    let s_aa = similarities(&video.frames, e.row(tau - 1))?;
    let (psi, gamma) = labels_from_similarities(&s_an, &s_aa, cfg)?;
    Ok(PseudoLabels {
        video_id: video.video_id.clone(),
        psi,
        gamma,
    })
}
