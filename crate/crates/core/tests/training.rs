use wsvad_core::config::TrainConfig;
use wsvad_core::data::{generate_synthetic, SyntheticConfig, TRAIN};
use wsvad_core::train::train;

fn epoch_means(rows: &[wsvad_core::train::LogRow], epochs: usize) -> Vec<f64> {
    (0..epochs)
        .map(|e| {
            let t: Vec<f64> = rows.iter().filter(|r| r.epoch == e).map(|r| r.report.total).collect();
            t.iter().sum::<f64>() / t.len() as f64
        })
        .collect()
}

#[test]
fn training_reduces_the_loss() {
    let data = SyntheticConfig { num_classes: 3, dim: 16, frames: 16, train_videos: 60, test_videos: 10, ..Default::default() };
    let ds = generate_synthetic(&data).unwrap();
    let mut drops = Vec::new();
    for seed in 0..3 {
        let cfg = TrainConfig { seed, epochs: 8, layers: 1, heads: 2, context_len: 4, ..TrainConfig::synthetic() };
        let (_, rows) = train(&cfg, &ds.classes, data.dim, &ds.split(TRAIN), |_| {}).unwrap();
        let first = rows.iter().map(|r| r.epoch).min().unwrap();
        let m = epoch_means(&rows, first + cfg.epochs);
        drops.push(m[first] - m[first + cfg.epochs - 1]);
    }
    drops.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(drops[1] > 0.0, "epoch-mean loss drops {drops:?}");
}
