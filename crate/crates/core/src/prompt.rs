//! Learnable text prompts and the normality visual prompt.
//!
//! A class embedding is the projection of the mean of the prompt sequence
//! `(ctx_1 + pos_1, ..., ctx_l + pos_l, token + pos_{l+1})`. The context
//! vectors are shared by every class; class tokens are frozen.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Bound, FeedForward, ParamId, ParamSet};

/// Standard deviation of the context / positional initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// How the normal-class text embedding is enhanced before matching
/// abnormal videos.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NvpMode {
    /// Use the raw normal-class embedding.
    Off,
    /// Aggregate the normal video with uniform frame weights.
    FrameAverage,
    /// Aggregate with softmax weights over normal-text/frame similarities.
    SimilarityAggregate,
}

impl std::str::FromStr for NvpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(NvpMode::Off),
            "frame-average" => Ok(NvpMode::FrameAverage),
            "similarity-aggregate" => Ok(NvpMode::SimilarityAggregate),
            other => Err(Error::Config(format!("unknown NVP mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PromptBank {
    /// l×D shared context vectors.
    pub contexts: ParamId,
    /// (l+1)×D positional embeddings.
    pub positions: ParamId,
    /// D×D projection applied to the pooled sequence.
    pub projection: ParamId,
    /// k×D frozen class tokens (row `k-1` is the normal class).
    pub tokens: Tensor,
    pub context_len: usize,
}

impl PromptBank {
    pub fn new(params: &mut ParamSet, tokens: Tensor, context_len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::contract("prompt context length must be >= 1"));
        }
        if tokens.rows() < 2 {
            return Err(Error::contract("prompt bank needs k >= 2 class tokens"));
        }
        let d = tokens.cols();
        let contexts = params.add("prompt.contexts", gaussian(rng, context_len, d, PROMPT_INIT_STD));
        let positions = params.add("prompt.positions", gaussian(rng, context_len + 1, d, PROMPT_INIT_STD));
        let mut proj = gaussian(rng, d, d, PROMPT_INIT_STD);
        for i in 0..d {
            proj.data_mut()[i * d + i] += 1.0;
        }
        let projection = params.add("prompt.projection", proj);
        Ok(Self {
            contexts,
            positions,
            projection,
            tokens,
            context_len,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Sum of the class-independent part of the sequence: Σ(ctx_i + pos_i) + pos_{l+1}.
    fn shared_sum(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        let l = self.context_len;
        let pos_ctx = tape.slice_rows(p[self.positions], 0, l)?;
        let pos_cls = tape.slice_rows(p[self.positions], l, l + 1)?;
        let seq = tape.add(p[self.contexts], pos_ctx)?;
        let summed = tape.sum_axis(seq, Axis::Rows)?;
        tape.add(summed, pos_cls)
    }

    fn project(&self, tape: &mut Tape, p: &Bound, token_rows: Tensor) -> Result<Var> {
        let shared = self.shared_sum(tape, p)?;
        let tokens = tape.constant(token_rows)?;
        let seq_sum = tape.add(tokens, shared)?;
        let mean = tape.scale(seq_sum, 1.0 / (self.context_len + 1) as f64)?;
        tape.matmul_nt(mean, p[self.projection])
    }

    /// Text embedding (1×D) of the 1-based `class_index`.
    pub fn encode_class(&self, tape: &mut Tape, p: &Bound, class_index: usize) -> Result<Var> {
        let k = self.num_classes();
        if !(1..=k).contains(&class_index) {
            return Err(Error::contract(format!("class index {class_index} outside 1..={k}")));
        }
        let row = Tensor::row_vector(self.tokens.row(class_index - 1).to_vec());
        self.project(tape, p, row)
    }

    /// Embedding set E as a k×D matrix; row `i` is class `i + 1`.
    pub fn build_embedding_set(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        self.project(tape, p, self.tokens.clone())
    }
}

/// Normality visual prompt Q (1×D) from a normal video `x_normal` (F×D).
///
/// Returns `None` when the mode is [`NvpMode::Off`].
pub fn compute_nvp(tape: &mut Tape, t_normal: Var, x_normal: Var, mode: NvpMode) -> Result<Option<Var>> {
    let f = tape.value(x_normal).rows();
    if f == 0 {
        return Err(Error::contract("normality prompt needs at least one frame"));
    }
    match mode {
        NvpMode::Off => Ok(None),
        NvpMode::FrameAverage => {
            let s = tape.sum_axis(x_normal, Axis::Rows)?;
            Ok(Some(tape.scale(s, 1.0 / f as f64)?))
        }
        NvpMode::SimilarityAggregate => {
            // 1×F similarities as a row so the softmax runs over frames
            let sims = tape.matmul_nt(t_normal, x_normal)?;
            let weights = tape.softmax(sims, Axis::Cols)?;
            Ok(Some(tape.matmul(weights, x_normal)?))
        }
    }
}

/// `FFN(concat(t, q)) + t`.
pub fn enhance_normal_text(tape: &mut Tape, p: &Bound, ffn: &FeedForward, t_normal: Var, q: Var) -> Result<Var> {
    let joined = tape.concat_cols(&[t_normal, q])?;
    let delta = ffn.forward(tape, p, joined)?;
    tape.add(delta, t_normal)
}

/// Trainable text side: prompt bank plus the NVP feed-forward block.
#[derive(Clone, Debug)]
pub struct TextBranch {
    pub params: ParamSet,
    pub bank: PromptBank,
    pub ffn: FeedForward,
    pub nvp: NvpMode,
}

impl TextBranch {
    pub fn new(tokens: Tensor, context_len: usize, nvp: NvpMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = tokens.cols();
        let mut params = ParamSet::new();
        let bank = PromptBank::new(&mut params, tokens, context_len, rng)?;
        let ffn = FeedForward::zero_output(&mut params, "nvp.ffn", 2 * d, 2 * d, d, rng);
        Ok(Self { params, bank, ffn, nvp })
    }

    /// Normal-class text used against an abnormal video, after the
    /// configured NVP enhancement with the paired normal video.
    pub fn enhanced_normal(&self, tape: &mut Tape, p: &Bound, t_normal: Var, x_normal: Var) -> Result<Var> {
        match compute_nvp(tape, t_normal, x_normal, self.nvp)? {
            Some(q) => enhance_normal_text(tape, p, &self.ffn, t_normal, q),
            None => Ok(t_normal),
        }
    }
}
