//! Trains on the synthetic benchmark and prints held-out metrics.
//!
//! Usage: `synthetic_run [train-config-overrides-json] [data-config-overrides-json]`.
//! Set `SYNTH_EVERY=n` to print label quality and test AUC every n epochs.

use std::time::Instant;

use wsvad_core::config::TrainConfig;
use wsvad_core::data::{generate_synthetic, FeatureSequence, SyntheticConfig, TEST, TRAIN};
use wsvad_core::eval::{evaluate, export_pseudo_labels};
use wsvad_core::metrics::frame_auc;
use wsvad_core::seed::rng_for;
use wsvad_core::train::{train_step, Model, Optimizers, Sampler};

fn main() -> wsvad_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut train_json = args.get(1).cloned().unwrap_or_else(|| "{}".into());
    if !train_json.contains("\"preset\"") {
        train_json = train_json.replacen('{', "{\"preset\":\"synthetic\",", 1).replace(",}", "}");
    }
    let cfg = TrainConfig::from_json(&train_json)?;
    let data_cfg = SyntheticConfig::from_json(args.get(2).map_or("{}", String::as_str))?;
    let data = generate_synthetic(&data_cfg)?;
    let start = Instant::now();
    let train_split = data.split(TRAIN);
    let every: usize = std::env::var("SYNTH_EVERY").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    let mut model = Model::new(&cfg, &data.classes, data_cfg.dim)?;
    let mut opt = Optimizers::new(&model, &cfg);
    let mut sampler = Sampler::for_videos(&train_split, rng_for(cfg.seed, "sampler"))?;
    let steps = sampler.steps_per_epoch(cfg.batch_abnormal);
    for epoch in 1..=cfg.epochs {
        sampler.start_epoch();
        let mut last = None;
        for _ in 0..steps {
            let b = sampler.next_batch(cfg.batch_normal, cfg.batch_abnormal);
            let n: Vec<_> = b.normal.iter().map(|&i| &train_split[i]).collect();
            let a: Vec<_> = b.abnormal.iter().map(|&i| &train_split[i]).collect();
            last = Some(train_step(&mut model, &mut opt, &n, &a, &cfg)?);
        }
        if every > 0 && epoch % every == 0 {
            let t = last.expect("at least one step").terms;
            let (acc, psi_auc) = label_quality(&model, &train_split, &cfg)?;
            let e = model.embedding_set()?;
            let diag: Vec<String> = (0..e.rows())
                .map(|i| format!("{:.2}/{:.2}", dot(e.row(i), data.prototypes.row(i)), dot(e.row(i), data.prototypes.row(e.rows() - 1))))
                .collect();
            let auc = evaluate(&model.detector, &data.split(TEST))?.auc;
            eprintln!(
                "epoch {epoch:>3} rank_n {:.3} rank_a {:.3} dil {:.3} cl {:.3} | labels {acc:.3} psi-auc {psi_auc:.3} | own/normal {} | test auc {auc:.4} [{:.1}s]",
                t.rank_normal,
                t.rank_abnormal,
                t.dil,
                t.cl,
                diag.join(" "),
                start.elapsed().as_secs_f64()
            );
        }
    }
    let (acc, psi_auc) = label_quality(&model, &train_split, &cfg)?;
    println!("pseudo-label accuracy {acc:.4} psi-auc {psi_auc:.4}");
    let r = evaluate(&model.detector, &data.split(TEST))?;
    println!(
        "auc {:.4} ap {:.4} frames {} train_secs {:.1}",
        r.auc,
        r.ap,
        r.num_frames,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Frame accuracy of γ and AUC of 1 - ψ̃ over the abnormal training videos.
fn label_quality(model: &Model, videos: &[FeatureSequence], cfg: &TrainConfig) -> wsvad_core::Result<(f64, f64)> {
    let labels = export_pseudo_labels(model, videos, cfg)?;
    let (mut agree, mut total) = (0usize, 0usize);
    let (mut anomaly, mut truth) = (Vec::new(), Vec::new());
    for (l, v) in labels.iter().zip(videos) {
        if v.is_abnormal() {
            let t = v.frame_truth.as_ref().expect("synthetic truth");
            agree += l.gamma.iter().zip(t).filter(|(a, b)| a == b).count();
            total += t.len();
            anomaly.extend(l.psi.iter().map(|p| 1.0 - p));
            truth.extend_from_slice(t);
        }
    }
    Ok((agree as f64 / total as f64, frame_auc(&anomaly, &truth)?))
}
