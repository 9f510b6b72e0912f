//! Training objectives. Similarity vectors are F×1 columns (or any shape
//! holding F values); sets of them are F×n matrices.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the squared temporal differences.
    pub lambda_sp: f64,
    /// Weight of the similarity sum.
    pub lambda_sm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sp: 0.1,
            lambda_sm: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_sp < 0.0 || self.lambda_sm < 0.0 || !self.lambda_sp.is_finite() || !self.lambda_sm.is_finite() {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Switches for the alignment losses; disabled terms are reported but do
/// not enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub rank_normal: bool,
    pub rank_abnormal: bool,
    pub dil: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            rank_normal: true,
            rank_abnormal: true,
            dil: true,
        }
    }
}

/// One value per objective term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub rank_normal: T,
    pub rank_abnormal: T,
    pub dil: T,
    pub cl: T,
    pub sp: T,
    pub sm: T,
}

impl<T: Copy> LossTerms<T> {
    fn weighted(&self, w: &LossWeights, on: &LossToggles) -> Vec<(f64, T)> {
        let mut parts = Vec::with_capacity(6);
        if on.rank_normal {
            parts.push((1.0, self.rank_normal));
        }
        if on.rank_abnormal {
            parts.push((1.0, self.rank_abnormal));
        }
        if on.dil {
            parts.push((1.0, self.dil));
        }
        parts.push((1.0, self.cl));
        parts.push((w.lambda_sp, self.sp));
        parts.push((w.lambda_sm, self.sm));
        parts
    }
}

impl LossTerms<f64> {
    /// `rank_n + rank_a + dil + cl + λ_sp·sp + λ_sm·sm` over enabled terms.
    pub fn total(&self, w: &LossWeights, on: &LossToggles) -> f64 {
        self.weighted(w, on).into_iter().map(|(c, v)| c * v).sum()
    }
}

/// Term values of one step together with the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub terms: LossTerms<f64>,
    pub total: f64,
}

/// Weighted total on the tape; same order of summation as [`LossTerms::total`].
pub fn total_loss(tape: &mut Tape, terms: &LossTerms<Var>, w: &LossWeights, on: &LossToggles) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (c, v) in terms.weighted(w, on) {
        let scaled = if c == 1.0 { v } else { tape.scale(v, c)? };
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| Error::contract("no loss terms"))
}

fn hinge(tape: &mut Tape, positive: Var, negative: Option<Var>) -> Result<Var> {
    let pos = tape.max_all(positive)?;
    let margin = tape.affine(pos, -1.0, 1.0)?;
    let arg = match negative {
        Some(n) => {
            let neg = tape.max_all(n)?;
            tape.add(margin, neg)?
        }
        None => margin,
    };
    tape.relu(arg)
}

/// `max(0, 1 − max S^nn + max φ^na)` for a normal video.
pub fn rank_loss_normal(tape: &mut Tape, s_nn: Var, phi_na: Var) -> Result<Var> {
    hinge(tape, s_nn, Some(phi_na))
}

/// Both abnormal-video hinges. With no other abnormal classes
/// (`phi_aa = None`) each hinge is `max(0, 1 − max S)`.
pub fn rank_loss_abnormal(tape: &mut Tape, s_an: Var, s_aa: Var, phi_aa: Option<Var>) -> Result<Var> {
    let a = hinge(tape, s_an, phi_aa)?;
    let b = hinge(tape, s_aa, phi_aa)?;
    tape.add(a, b)
}

/// Cosine between normalized abnormal-text and normal-text profiles of one
/// video; zero when either is the zero vector.
pub fn dil_term(tape: &mut Tape, s_aa_norm: Var, s_an_norm: Var) -> Result<Var> {
    tape.cosine(s_aa_norm, s_an_norm)
}

/// `(Σ (S̃[j] − S̃[j+1])², Σ S̃[j])`. A single frame has no differences.
pub fn smooth_sparse(tape: &mut Tape, s_norm: Var) -> Result<(Var, Var)> {
    let v = tape.value(s_norm);
    let col = if v.cols() == 1 { s_norm } else { tape.transpose(s_norm)? };
    let f = tape.value(col).rows();
    let sm = tape.sum(col)?;
    let sp = if f < 2 {
        tape.constant(Tensor::scalar(0.0))?
    } else {
        let head = tape.slice_rows(col, 0, f - 1)?;
        let tail = tape.slice_rows(col, 1, f)?;
        let diff = tape.sub(head, tail)?;
        let sq = tape.mul(diff, diff)?;
        tape.sum(sq)?
    };
    Ok((sp, sm))
}

/// Mean binary cross-entropy with pseudo-labels `gamma` as targets.
pub fn bce_loss(tape: &mut Tape, eta: Var, gamma: &[u8]) -> Result<Var> {
    let shape = tape.value(eta).shape().to_vec();
    let n = tape.value(eta).numel();
    if n != gamma.len() {
        return Err(Error::contract(format!("bce: {n} scores for {} labels", gamma.len())));
    }
    if gamma.iter().any(|&g| g > 1) {
        return Err(Error::contract("bce: labels must be 0/1"));
    }
    let g = Tensor::new(shape, gamma.iter().map(|&g| g as f64).collect())?;
    let not_g = g.map(|v| 1.0 - v);
    let p = tape.clamp(eta, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let log_q = tape.log(q)?;
    let g = tape.constant(g)?;
    let not_g = tape.constant(not_g)?;
    let a = tape.mul(g, log_p)?;
    let b = tape.mul(not_g, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}
