//! Held-out scoring, pseudo-label export and the files written for both.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::metrics::{frame_ap, frame_auc};
use crate::plg::{pseudo_labels, PseudoLabels};
use crate::tcsal::Detector;
use crate::train::{LogRow, Model};

/// Videos scored per forward pass.
pub const SCORE_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreCurve {
    pub video_id: String,
    pub scores: Vec<f64>,
    pub truth: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub ap: f64,
    pub num_frames: usize,
    pub curves: Vec<ScoreCurve>,
}

/// Frame scores for `videos`, using only the detector.
pub fn score_videos(detector: &Detector, videos: &[FeatureSequence]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(videos.len());
    for chunk in videos.chunks(SCORE_CHUNK) {
        let frames: Vec<_> = chunk.iter().map(|v| &v.frames).collect();
        out.extend(detector.score(&frames)?);
    }
    Ok(out)
}

/// Frame AUC and AP over all frames of all `videos`, which must carry
/// frame truth.
pub fn evaluate(detector: &Detector, videos: &[FeatureSequence]) -> Result<EvalResult> {
    if videos.is_empty() {
        return Err(Error::contract("no test videos"));
    }
    for v in videos {
        if v.frame_truth.is_none() {
            return Err(Error::contract(format!("{}: test video without frame truth", v.video_id)));
        }
    }
    let scores = score_videos(detector, videos)?;
    let curves: Vec<ScoreCurve> = videos
        .iter()
        .zip(scores)
        .map(|(v, scores)| ScoreCurve {
            video_id: v.video_id.clone(),
            scores,
            truth: v.frame_truth.clone().unwrap_or_default(),
        })
        .collect();
    let all_scores: Vec<f64> = curves.iter().flat_map(|c| c.scores.iter().copied()).collect();
    let all_truth: Vec<u8> = curves.iter().flat_map(|c| c.truth.iter().copied()).collect();
    Ok(EvalResult {
        auc: frame_auc(&all_scores, &all_truth)?,
        ap: frame_ap(&all_scores, &all_truth)?,
        num_frames: all_scores.len(),
        curves,
    })
}

/// Pseudo-labels for every video from the model's current text branch.
/// The i-th abnormal video is paired with normal video `i mod n` for its
/// normality prompt; without normal videos the raw normal text is used.
pub fn export_pseudo_labels(model: &Model, videos: &[FeatureSequence], cfg: &TrainConfig) -> Result<Vec<PseudoLabels>> {
    let e = model.embedding_set()?;
    let k = model.num_classes();
    let normals: Vec<&FeatureSequence> = videos.iter().filter(|v| !v.is_abnormal()).collect();
    let plg = cfg.plg();
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; normals.len()];
    let mut next_abnormal = 0;
    videos
        .iter()
        .map(|v| {
            v.validate(model.dim, k)?;
            let text = if !v.is_abnormal() || normals.is_empty() {
                e.row(k - 1).to_vec()
            } else {
                let pair = next_abnormal % normals.len();
                next_abnormal += 1;
                match &cache[pair] {
                    Some(t) => t.clone(),
                    None => {
                        let t = model.enhanced_normal_text(&normals[pair].frames)?;
                        cache[pair] = Some(t.clone());
                        t
                    }
                }
            };
            pseudo_labels(v, &e, &text, &plg)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub ap: f64,
    pub num_frames: usize,
    pub config_hash: String,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(report)? + "\n"))
}

pub const LOG_HEADER: &str = "epoch,step,rank_normal,rank_abnormal,dil,cl,sp,sm,total";

pub fn training_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let t = &r.report.terms;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, r.step, t.rank_normal, t.rank_abnormal, t.dil, t.cl, t.sp, t.sm, r.report.total
        );
    }
    s
}

pub fn write_training_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    write(path, &training_log_csv(rows))
}

/// One `frame,score,truth` CSV per video, named `<video_id>.csv`.
pub fn write_score_curves(dir: &Path, curves: &[ScoreCurve]) -> Result<()> {
    for c in curves {
        let mut s = String::from("frame,score,truth\n");
        for (j, (score, truth)) in c.scores.iter().zip(&c.truth).enumerate() {
            let _ = writeln!(s, "{j},{score},{truth}");
        }
        write(&dir.join(format!("{}.csv", c.video_id)), &s)?;
    }
    Ok(())
}

/// `video_id,frame,psi,gamma`; `psi` is empty for normal videos.
pub fn pseudo_labels_csv(labels: &[PseudoLabels]) -> String {
    let mut s = String::from("video_id,frame,psi,gamma\n");
    for l in labels {
        for (j, g) in l.gamma.iter().enumerate() {
            match l.psi.get(j) {
                Some(p) => {
                    let _ = writeln!(s, "{},{j},{p},{g}", l.video_id);
                }
                None => {
                    let _ = writeln!(s, "{},{j},,{g}", l.video_id);
                }
            }
        }
    }
    s
}

pub fn write_pseudo_labels(path: &Path, labels: &[PseudoLabels]) -> Result<()> {
    write(path, &pseudo_labels_csv(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig, TEST, TRAIN};
    use crate::train::train;

    fn setup() -> (TrainConfig, Model, Vec<FeatureSequence>, Vec<FeatureSequence>) {
        let data = generate_synthetic(&SyntheticConfig {
            num_classes: 3,
            dim: 8,
            frames: 6,
            train_videos: 8,
            test_videos: 6,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            layers: 1,
            heads: 2,
            context_len: 2,
            batch_normal: 2,
            batch_abnormal: 2,
            epochs: 1,
            ..TrainConfig::synthetic()
        };
        let (model, _) = train(&cfg, &data.classes, 8, &data.split(TRAIN), |_| {}).unwrap();
        (cfg, model, data.split(TRAIN), data.split(TEST))
    }

    #[test]
    fn evaluation_never_reads_text_parameters() {
        let (_, model, _, test) = setup();
        let text_reads = model.text.params.read_count();
        let det_reads = model.detector.params.read_count();
        let r = evaluate(&model.detector, &test).unwrap();
        assert_eq!(model.text.params.read_count(), text_reads);
        assert!(model.detector.params.read_count() > det_reads);
        assert_eq!(r.num_frames, 36);
        assert!((0.0..=1.0).contains(&r.auc) && (0.0..=1.0).contains(&r.ap));
        assert_eq!(r.curves.len(), 6);
    }

    #[test]
    fn evaluation_needs_truth() {
        let (_, model, train_split, _) = setup();
        let mut v = train_split;
        v[0].frame_truth = None;
        assert!(evaluate(&model.detector, &v).is_err());
    }

    #[test]
    fn pseudo_label_export_shapes() {
        let (cfg, model, train_split, _) = setup();
        let labels = export_pseudo_labels(&model, &train_split, &cfg).unwrap();
        assert_eq!(labels.len(), train_split.len());
        for (l, v) in labels.iter().zip(&train_split) {
            assert_eq!(l.gamma.len(), v.num_frames());
            if !v.is_abnormal() {
                assert!(l.gamma.iter().all(|&g| g == 0) && l.psi.is_empty());
            } else {
                assert_eq!(l.psi.len(), v.num_frames());
            }
        }
        let csv = pseudo_labels_csv(&labels);
        assert!(csv.starts_with("video_id,frame,psi,gamma\n"));
        assert_eq!(csv.lines().count(), 1 + 8 * 6);
    }
}
