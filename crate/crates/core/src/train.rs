//! Batch sampling, the joint training step and the training loop.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::TrainConfig;
use crate::data::{class_token_embeddings, FeatureSequence, VOCABULARY_SEED};
use crate::error::{Error, Result};
use crate::losses::{
    bce_loss, dil_term, rank_loss_abnormal, rank_loss_normal, smooth_sparse, total_loss, LossReport, LossTerms,
};
use crate::nn::{Bound, ParamEntry, ParamSet};
use crate::plg::labels_from_similarities;
use crate::prompt::TextBranch;
use crate::seed::rng_for;
use crate::tcsal::{pack_segments, Detector};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Text branch (training only) and detector (training and scoring).
#[derive(Clone, Debug)]
pub struct Model {
    pub classes: Vec<String>,
    pub dim: usize,
    pub text: TextBranch,
    pub detector: Detector,
}

impl Model {
    pub fn new(cfg: &TrainConfig, classes: &[String], dim: usize) -> Result<Self> {
        cfg.validate()?;
        let tokens = class_token_embeddings(classes, dim, VOCABULARY_SEED)?;
        let text = TextBranch::new(tokens, cfg.context_len, cfg.nvp, &mut rng_for(cfg.seed, "init/text"))?;
        let detector = Detector::new(dim, cfg.tcsal(), &mut rng_for(cfg.seed, "init/detector"))?;
        Ok(Self {
            classes: classes.to_vec(),
            dim,
            text,
            detector,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// SHA-256 over both parameter checksums.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.text.params.checksum());
        h.update(self.detector.params.checksum());
        hex::encode(h.finalize())
    }

    /// Current text embedding set (k×D) as matched against frames.
    pub fn embedding_set(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.text.params.bind(&mut tape, false)?;
        let e = matching_texts(&mut tape, self, &p)?;
        Ok(tape.value(e).clone())
    }

    /// Normal-class text enhanced with the prompt of `normal_frames`, as
    /// matched against abnormal frames.
    pub fn enhanced_normal_text(&self, normal_frames: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.text.params.bind(&mut tape, false)?;
        let k = self.num_classes();
        let e = matching_texts(&mut tape, self, &p)?;
        let t = tape.slice_rows(e, k - 1, k)?;
        let x = tape.constant(normal_frames.clone())?;
        let out = enhanced_matching_text(&mut tape, self, &p, t, x)?;
        Ok(tape.value(out).data().to_vec())
    }

    fn check_videos<'a>(&self, videos: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<()> {
        for v in videos {
            v.validate(self.dim, self.num_classes())?;
        }
        Ok(())
    }
}

/// Adam with weight decay applied directly to the parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .ids()
            .map(|id| {
                let s = params.get(id);
                Tensor::zeros(s.rows(), s.cols())
            })
            .collect();
        Self {
            learning_rate,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::contract("optimizer state does not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (lr, wd) = (self.learning_rate, self.weight_decay);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            if g.numel() != p.numel() {
                return Err(Error::contract("gradient shape does not match parameter"));
            }
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * *pi);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite { op: "adam update" });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Pool {
    items: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
}

impl Pool {
    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.order.clone_from(&self.items);
        self.order.shuffle(rng);
        self.cursor = 0;
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.reshuffle(rng);
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Indices of the videos in one batch, by slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub normal: Vec<usize>,
    pub abnormal: Vec<usize>,
}

/// Draws batches from per-class permutations; each epoch starts from fresh
/// permutations and a pool that runs dry mid-epoch is reshuffled.
#[derive(Clone, Debug)]
pub struct Sampler {
    normal: Pool,
    abnormal: Pool,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(normal: Vec<usize>, abnormal: Vec<usize>, rng: ChaCha8Rng) -> Result<Self> {
        if normal.is_empty() || abnormal.is_empty() {
            return Err(Error::contract("training needs both normal and abnormal videos"));
        }
        let pool = |items: Vec<usize>| Pool {
            order: items.clone(),
            cursor: items.len(),
            items,
        };
        Ok(Self {
            normal: pool(normal),
            abnormal: pool(abnormal),
            rng,
        })
    }

    /// Splits `videos` by label.
    pub fn for_videos(videos: &[FeatureSequence], rng: ChaCha8Rng) -> Result<Self> {
        let (abnormal, normal): (Vec<usize>, Vec<usize>) = (0..videos.len()).partition(|&i| videos[i].is_abnormal());
        Self::new(normal, abnormal, rng)
    }

    pub fn steps_per_epoch(&self, batch_abnormal: usize) -> usize {
        self.abnormal.items.len().div_ceil(batch_abnormal)
    }

    pub fn start_epoch(&mut self) {
        self.normal.reshuffle(&mut self.rng);
        self.abnormal.reshuffle(&mut self.rng);
    }

    pub fn next_batch(&mut self, batch_normal: usize, batch_abnormal: usize) -> Batch {
        Batch {
            normal: self.normal.take(batch_normal, &mut self.rng),
            abnormal: self.abnormal.take(batch_abnormal, &mut self.rng),
        }
    }
}

/// Loss graph of one batch.
pub struct StepGraph {
    pub loss: Var,
    pub terms: LossTerms<Var>,
    /// Pseudo-labels per abnormal slot.
    pub labels: Vec<Vec<u8>>,
}

/// Embedding set with unit-norm rows; similarities are taken against these.
fn matching_texts(tape: &mut Tape, model: &Model, text: &Bound) -> Result<Var> {
    let e = model.text.bank.build_embedding_set(tape, text)?;
    tape.normalize_rows(e)
}

fn enhanced_matching_text(tape: &mut Tape, model: &Model, text: &Bound, t_normal: Var, x_normal: Var) -> Result<Var> {
    let t = model.text.enhanced_normal(tape, text, t_normal, x_normal)?;
    tape.normalize_rows(t)
}

fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let all = tape.concat_rows(parts)?;
    tape.mean(all)
}

/// Records the full objective for one batch. Normal video `j mod n` supplies
/// the normality prompt for abnormal slot `j`.
pub fn build_loss(
    tape: &mut Tape,
    model: &Model,
    text: &Bound,
    det: &Bound,
    normals: &[&FeatureSequence],
    abnormals: &[&FeatureSequence],
    cfg: &TrainConfig,
) -> Result<StepGraph> {
    if normals.is_empty() || abnormals.is_empty() {
        return Err(Error::contract("a batch needs normal and abnormal videos"));
    }
    if normals.iter().any(|v| v.is_abnormal()) || abnormals.iter().any(|v| !v.is_abnormal()) {
        return Err(Error::contract("batch slots hold videos of the wrong label"));
    }
    let k = model.num_classes();
    let videos: Vec<&FeatureSequence> = normals.iter().chain(abnormals).copied().collect();
    let segments = pack_segments(videos.iter().map(|v| v.num_frames()));
    let n: usize = segments.iter().map(|s| s.len).sum();
    let mut packed = Vec::with_capacity(n * model.dim);
    for v in &videos {
        packed.extend_from_slice(v.frames.data());
    }
    let x = tape.constant(Tensor::matrix(n, model.dim, packed)?)?;

    let e = matching_texts(tape, model, text)?;
    let sims = tape.matmul_nt(x, e)?;
    let t_normal = tape.slice_rows(e, k - 1, k)?;

    let mut rank_n = Vec::with_capacity(normals.len());
    for seg in &segments[..normals.len()] {
        let s = tape.slice_rows(sims, seg.start, seg.start + seg.len)?;
        let s_nn = tape.slice_cols(s, k - 1, k)?;
        let phi_na = tape.slice_cols(s, 0, k - 1)?;
        rank_n.push(rank_loss_normal(tape, s_nn, phi_na)?);
    }

    let mut enhanced: Vec<Option<Var>> = vec![None; normals.len()];
    let plg = cfg.plg();
    let (mut rank_a, mut dil, mut sp, mut sm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut labels = Vec::with_capacity(abnormals.len());
    for (j, (seg, video)) in segments[normals.len()..].iter().zip(abnormals).enumerate() {
        let pair = j % normals.len();
        let t_dot = match enhanced[pair] {
            Some(t) => t,
            None => {
                let ns = segments[pair];
                let xn = tape.slice_rows(x, ns.start, ns.start + ns.len)?;
                let t = enhanced_matching_text(tape, model, text, t_normal, xn)?;
                enhanced[pair] = Some(t);
                t
            }
        };
        let tau = video.class_index;
        let s = tape.slice_rows(sims, seg.start, seg.start + seg.len)?;
        let s_aa = tape.slice_cols(s, tau - 1, tau)?;
        let mut others = Vec::new();
        if tau > 1 {
            others.push(tape.slice_cols(s, 0, tau - 1)?);
        }
        if tau < k - 1 {
            others.push(tape.slice_cols(s, tau, k - 1)?);
        }
        let phi_aa = match others.len() {
            0 => None,
            1 => Some(others[0]),
            _ => Some(tape.concat_cols(&others)?),
        };
        let xa = tape.slice_rows(x, seg.start, seg.start + seg.len)?;
        let s_an = tape.matmul_nt(xa, t_dot)?;
        rank_a.push(rank_loss_abnormal(tape, s_an, s_aa, phi_aa)?);
        let aa_norm = tape.minmax_normalize(s_aa)?;
        let an_norm = tape.minmax_normalize(s_an)?;
        let an_ref = tape.detach(an_norm)?;
        dil.push(dil_term(tape, aa_norm, an_ref)?);
        let (p, m) = smooth_sparse(tape, aa_norm)?;
        sp.push(p);
        sm.push(m);
        let (_, gamma) = labels_from_similarities(tape.value(s_an).data(), tape.value(s_aa).data(), &plg)?;
        labels.push(gamma);
    }

    let eta = model.detector.forward(tape, det, x, &segments)?;
    let mut gamma_all = vec![0u8; segments[normals.len()].start];
    for g in &labels {
        gamma_all.extend_from_slice(g);
    }
    let terms = LossTerms {
        rank_normal: mean_of(tape, &rank_n)?,
        rank_abnormal: mean_of(tape, &rank_a)?,
        dil: mean_of(tape, &dil)?,
        cl: bce_loss(tape, eta, &gamma_all)?,
        sp: mean_of(tape, &sp)?,
        sm: mean_of(tape, &sm)?,
    };
    let loss = total_loss(tape, &terms, &cfg.loss_weights(), &cfg.loss_toggles())?;
    Ok(StepGraph { loss, terms, labels })
}

/// Optimizer state for both parameter groups.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub text: Adam,
    pub detector: Adam,
}

impl Optimizers {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            text: Adam::new(&model.text.params, cfg.learning_rate, cfg.weight_decay),
            detector: Adam::new(&model.detector.params, cfg.learning_rate, cfg.weight_decay),
        }
    }
}

/// One synchronized step: pseudo-labels from the current parameters, the
/// joint loss, and one update of both groups.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizers,
    normals: &[&FeatureSequence],
    abnormals: &[&FeatureSequence],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let text = model.text.params.bind(&mut tape, true)?;
    let det = model.detector.params.bind(&mut tape, true)?;
    let graph = build_loss(&mut tape, model, &text, &det, normals, abnormals, cfg)?;
    let value = |v: Var| tape.value(v).item();
    let t = &graph.terms;
    let report = LossReport {
        terms: LossTerms {
            rank_normal: value(t.rank_normal),
            rank_abnormal: value(t.rank_abnormal),
            dil: value(t.dil),
            cl: value(t.cl),
            sp: value(t.sp),
            sm: value(t.sm),
        },
        total: value(graph.loss),
    };
    let mut grads = tape.backward(graph.loss)?;
    let text_grads: Vec<Option<Tensor>> = text.vars().iter().map(|v| grads.take(*v)).collect();
    let det_grads: Vec<Option<Tensor>> = det.vars().iter().map(|v| grads.take(*v)).collect();
    opt.text.update(&mut model.text.params, &text_grads)?;
    opt.detector.update(&mut model.detector.params, &det_grads)?;
    Ok(report)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Trains a fresh model on `videos` (the training split). `on_step` sees
/// every log row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    classes: &[String],
    dim: usize,
    videos: &[FeatureSequence],
    mut on_step: impl FnMut(&LogRow),
) -> Result<(Model, Vec<LogRow>)> {
    let mut model = Model::new(cfg, classes, dim)?;
    model.check_videos(videos)?;
    let mut opt = Optimizers::new(&model, cfg);
    let mut sampler = Sampler::for_videos(videos, rng_for(cfg.seed, "sampler"))?;
    let steps = sampler.steps_per_epoch(cfg.batch_abnormal);
    let mut log = Vec::with_capacity(cfg.epochs * steps);
    let mut global = 0;
    for epoch in 1..=cfg.epochs {
        sampler.start_epoch();
        for _ in 0..steps {
            let batch = sampler.next_batch(cfg.batch_normal, cfg.batch_abnormal);
            let normals: Vec<&FeatureSequence> = batch.normal.iter().map(|&i| &videos[i]).collect();
            let abnormals: Vec<&FeatureSequence> = batch.abnormal.iter().map(|&i| &videos[i]).collect();
            let report = train_step(&mut model, &mut opt, &normals, &abnormals, cfg)?;
            global += 1;
            let row = LogRow {
                epoch,
                step: global,
                report,
            };
            on_step(&row);
            log.push(row);
        }
    }
    Ok((model, log))
}

/// Everything needed to restore a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub classes: Vec<String>,
    pub dim: usize,
    pub text: Vec<ParamEntry>,
    pub detector: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            classes: model.classes.clone(),
            dim: model.dim,
            text: model.text.params.export(),
            detector: model.detector.params.export(),
        }
    }

    pub fn restore(&self) -> Result<Model> {
        if self.config.hash() != self.config_hash {
            return Err(Error::contract("checkpoint config hash does not match its config"));
        }
        let mut model = Model::new(&self.config, &self.classes, self.dim)?;
        model.text.params.import(&self.text)?;
        model.detector.params.import(&self.detector)?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?)
    }
}
