//! Temporal encoder with input-adaptive attention spans, and the frame
//! classifier.
//!
//! Videos are packed row-wise into one N×D matrix and described by
//! [`Segment`]s; position-wise layers run on the packed matrix while
//! attention never crosses a segment boundary.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Bound, FeedForward, LayerNorm, Linear, ParamId, ParamSet};

/// Standard deviation of the span-weight initialization.
pub const SPAN_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalMode {
    /// Causal attention under the adaptive soft span mask.
    #[default]
    Tcsal,
    /// Bidirectional full-context attention without a mask.
    PlainEncoder,
}

impl std::str::FromStr for TemporalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tcsal" => Ok(TemporalMode::Tcsal),
            "plain-encoder" => Ok(TemporalMode::PlainEncoder),
            other => Err(Error::Config(format!("unknown temporal mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcsalConfig {
    pub layers: usize,
    pub heads: usize,
    /// Ramp width R of the soft mask, in frames.
    pub softness: f64,
    /// Feed-forward hidden width as a multiple of D.
    pub ffn_ratio: usize,
    pub mode: TemporalMode,
}

impl Default for TcsalConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            softness: 256.0,
            ffn_ratio: 2,
            mode: TemporalMode::Tcsal,
        }
    }
}

impl TcsalConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("layers, heads and ffn_ratio must be positive".into()));
        }
        if dim % self.heads != 0 {
            return Err(Error::Config(format!("D={dim} not divisible by {} heads", self.heads)));
        }
        if !(self.softness >= 1.0) || !self.softness.is_finite() {
            return Err(Error::Config(format!("softness {} must be >= 1", self.softness)));
        }
        Ok(())
    }
}

/// Rows `start..start + len` of a packed matrix belong to one video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Segments for videos of the given lengths packed back to back.
pub fn pack_segments(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|len| {
            let s = Segment { start, len };
            start += len;
            s
        })
        .collect()
}

/// `χ_z(h) = min(max((R + z − h)/R, 0), 1)`.
pub fn soft_mask(h: f64, z: f64, softness: f64) -> f64 {
    if h <= z {
        1.0
    } else if h >= softness + z {
        0.0
    } else {
        ((softness + z - h) / softness).clamp(0.0, 1.0)
    }
}

fn mask_slope_active(h: f64, z: f64, softness: f64) -> bool {
    h > z && h < softness + z
}

/// Span per row and head: `z = F · sigmoid(X·C + b)` with `F` the length of
/// the row's segment. `c` is D×H, `b` is 1×H; the result is N×H.
pub fn adaptive_span(tape: &mut Tape, x: Var, c: Var, b: Var, segments: &[Segment]) -> Result<Var> {
    let n = tape.value(x).rows();
    let mut lengths = Vec::with_capacity(n);
    for s in segments {
        lengths.extend(std::iter::repeat_n(s.len as f64, s.len));
    }
    if lengths.len() != n {
        return Err(Error::dim(
            "adaptive_span",
            format!("segments cover {} rows, input has {n}", lengths.len()),
        ));
    }
    let logits = tape.matmul(x, c)?;
    let logits = tape.add(logits, b)?;
    let gate = tape.sigmoid(logits)?;
    let frames = tape.constant(Tensor::column(lengths))?;
    tape.mul(gate, frames)
}

/// Attention pattern of [`SpanAttention`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionKind {
    /// Causal with the soft span mask of ramp width `softness`; needs spans.
    Span { softness: f64 },
    /// Causal, unmasked.
    Causal,
    /// Every frame sees every frame of its segment.
    Full,
}

impl AttentionKind {
    fn causal(self) -> bool {
        !matches!(self, AttentionKind::Full)
    }
}

/// Multi-head attention over packed segments. Inputs are Q, K, V (N×D,
/// head `h` owns columns `h·dh..(h+1)·dh`) and, for [`AttentionKind::Span`],
/// spans Z (N×H). The output is the N×D concatenation of head outputs.
#[derive(Clone, Debug)]
pub struct SpanAttention {
    pub segments: Vec<Segment>,
    pub heads: usize,
    pub kind: AttentionKind,
}

struct Scratch {
    beta: Vec<f64>,
    chi: Vec<f64>,
    ex: Vec<f64>,
}

impl Scratch {
    fn new() -> Self {
        Self {
            beta: Vec::new(),
            chi: Vec::new(),
            ex: Vec::new(),
        }
    }
}

struct HeadCtx<'a> {
    q: &'a [f64],
    k: &'a [f64],
    d: usize,
    off: usize,
    dh: usize,
    scale: f64,
}

impl HeadCtx<'_> {
    fn row<'b>(&self, m: &'b [f64], r: usize) -> &'b [f64] {
        &m[r * self.d + self.off..r * self.d + self.off + self.dh]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl SpanAttention {
    fn check(&self, q: &Tensor, k: &Tensor, v: &Tensor, z: Option<&Tensor>) -> Result<()> {
        let (n, d) = (q.rows(), q.cols());
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(Error::dim("span_attention", "Q, K, V shapes differ"));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::dim("span_attention", format!("D={d} not divisible by {} heads", self.heads)));
        }
        let covered: usize = self.segments.iter().map(|s| s.len).sum();
        let contiguous = self
            .segments
            .iter()
            .scan(0, |next, s| {
                let ok = s.start == *next && s.len > 0;
                *next += s.len;
                Some(ok)
            })
            .all(|ok| ok);
        if covered != n || !contiguous {
            return Err(Error::dim("span_attention", "segments must tile the rows"));
        }
        match (self.kind, z) {
            (AttentionKind::Span { softness }, Some(z)) => {
                if z.rows() != n || z.cols() != self.heads {
                    return Err(Error::dim("span_attention", format!("spans must be {n}×{}", self.heads)));
                }
                if !(softness >= 1.0) {
                    return Err(Error::contract("softness must be >= 1"));
                }
                if z.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::contract("spans must be nonnegative"));
                }
                Ok(())
            }
            (AttentionKind::Span { .. }, None) => Err(Error::contract("span attention needs spans")),
            (_, Some(_)) => Err(Error::contract("spans given to unmasked attention")),
            (_, None) => Ok(()),
        }
    }

    /// Fills mask values and shifted exponentials for query `t` of a
    /// segment and returns their weighted sum.
    fn query(&self, ctx: &HeadCtx, seg: Segment, t: usize, z: Option<f64>, sc: &mut Scratch) -> f64 {
        let end = if self.kind.causal() { t + 1 } else { seg.len };
        sc.beta.clear();
        sc.chi.clear();
        sc.ex.clear();
        let qt = ctx.row(ctx.q, seg.start + t);
        for r in 0..end {
            sc.beta.push(dot(qt, ctx.row(ctx.k, seg.start + r)) * ctx.scale);
            let chi = match (self.kind, z) {
                (AttentionKind::Span { softness }, Some(z)) => soft_mask(t.abs_diff(r) as f64, z, softness),
                _ => 1.0,
            };
            sc.chi.push(chi);
        }
        let m = sc
            .beta
            .iter()
            .zip(&sc.chi)
            .filter(|(_, c)| **c > 0.0)
            .map(|(b, _)| *b)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (b, c) in sc.beta.iter().zip(&sc.chi) {
            let e = if *c > 0.0 { (b - m).exp() } else { 0.0 };
            sc.ex.push(e);
            s += c * e;
        }
        s
    }

    fn span_of(z: Option<&Tensor>, row: usize, h: usize) -> Option<f64> {
        z.map(|z| z.get(row, h))
    }

    fn ctx<'a>(&self, q: &'a Tensor, k: &'a Tensor, h: usize) -> HeadCtx<'a> {
        let d = q.cols();
        let dh = d / self.heads;
        HeadCtx {
            q: q.data(),
            k: k.data(),
            d,
            off: h * dh,
            dh,
            scale: 1.0 / (dh as f64).sqrt(),
        }
    }

    pub fn forward_values(&self, q: &Tensor, k: &Tensor, v: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
        self.check(q, k, v, z)?;
        let (n, d) = (q.rows(), q.cols());
        let mut out = vec![0.0; n * d];
        let mut sc = Scratch::new();
        for h in 0..self.heads {
            let ctx = self.ctx(q, k, h);
            for &seg in &self.segments {
                for t in 0..seg.len {
                    let row = seg.start + t;
                    let s = self.query(&ctx, seg, t, Self::span_of(z, row, h), &mut sc);
                    let o = &mut out[row * d + ctx.off..row * d + ctx.off + ctx.dh];
                    for (r, (c, e)) in sc.chi.iter().zip(&sc.ex).enumerate() {
                        let w = c * e / s;
                        if w != 0.0 {
                            axpy(w, ctx.row(v.data(), seg.start + r), o);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(n, d, out))
    }

    /// Records the attention on the tape.
    pub fn apply(self, tape: &mut Tape, q: Var, k: Var, v: Var, z: Option<Var>) -> Result<Var> {
        let value = self.forward_values(tape.value(q), tape.value(k), tape.value(v), z.map(|z| tape.value(z)))?;
        let mut inputs = vec![q, k, v];
        inputs.extend(z);
        tape.custom(&inputs, value, Box::new(self))
    }
}

impl CustomOp for SpanAttention {
    fn name(&self) -> &'static str {
        "span_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let z = inputs.get(3).copied();
        let (n, d) = (q.rows(), q.cols());
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dz = z.map(|_| vec![0.0; n * self.heads]);
        let mut sc = Scratch::new();
        let mut domega = Vec::new();
        for h in 0..self.heads {
            let ctx = self.ctx(q, k, h);
            let (off, dh) = (ctx.off, ctx.dh);
            for &seg in &self.segments {
                for t in 0..seg.len {
                    let row = seg.start + t;
                    let zt = Self::span_of(z, row, h);
                    let s = self.query(&ctx, seg, t, zt, &mut sc);
                    let g = &grad.data()[row * d + off..row * d + off + dh];
                    domega.clear();
                    let mut c = 0.0;
                    for (r, (chi, e)) in sc.chi.iter().zip(&sc.ex).enumerate() {
                        let dw = dot(g, ctx.row(v.data(), seg.start + r));
                        domega.push(dw);
                        c += chi * e / s * dw;
                    }
                    let qt: Vec<f64> = ctx.row(q.data(), row).to_vec();
                    for (r, ((chi, e), dw)) in sc.chi.iter().zip(&sc.ex).zip(&domega).enumerate() {
                        let kr = seg.start + r;
                        let w = chi * e / s;
                        if w != 0.0 {
                            axpy(w, g, &mut dv[kr * d + off..kr * d + off + dh]);
                            let db = w * (dw - c) * ctx.scale;
                            axpy(db, ctx.row(k.data(), kr), &mut dq[row * d + off..row * d + off + dh]);
                            axpy(db, &qt, &mut dk[kr * d + off..kr * d + off + dh]);
                        }
                        if let (Some(dz), Some(zt), AttentionKind::Span { softness }) = (dz.as_mut(), zt, self.kind) {
                            let hdist = t.abs_diff(r) as f64;
                            if mask_slope_active(hdist, zt, softness) {
                                dz[row * self.heads + h] += e / s * (dw - c) / softness;
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![
            Some(Tensor::from_parts(n, d, dq)),
            Some(Tensor::from_parts(n, d, dk)),
            Some(Tensor::from_parts(n, d, dv)),
        ];
        if let Some(dz) = dz {
            out.push(Some(Tensor::from_parts(n, self.heads, dz)));
        }
        out
    }
}

/// Single-head attention weights (F×F) for one video; entries outside the
/// attention domain are zero. `z` must be given exactly for
/// [`AttentionKind::Span`].
pub fn attention_weights(q: &Tensor, k: &Tensor, z: Option<&[f64]>, kind: AttentionKind) -> Result<Tensor> {
    let f = q.rows();
    let att = SpanAttention {
        segments: vec![Segment { start: 0, len: f }],
        heads: 1,
        kind,
    };
    let zt = z.map(|z| Tensor::column(z.to_vec()));
    att.check(q, k, k, zt.as_ref())?;
    let ctx = att.ctx(q, k, 0);
    let mut out = vec![0.0; f * f];
    let mut sc = Scratch::new();
    for t in 0..f {
        let s = att.query(&ctx, Segment { start: 0, len: f }, t, z.map(|z| z[t]), &mut sc);
        for (r, (c, e)) in sc.chi.iter().zip(&sc.ex).enumerate() {
            out[t * f + r] = c * e / s;
        }
    }
    Ok(Tensor::from_parts(f, f, out))
}

/// Single-head causal attention of one video under the soft span mask.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, z: &[f64], softness: f64) -> Result<Tensor> {
    let att = SpanAttention {
        segments: vec![Segment { start: 0, len: q.rows() }],
        heads: 1,
        kind: AttentionKind::Span { softness },
    };
    att.forward_values(q, k, v, Some(&Tensor::column(z.to_vec())))
}

/// Single-head causal attention of one video without a mask.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let att = SpanAttention {
        segments: vec![Segment { start: 0, len: q.rows() }],
        heads: 1,
        kind: AttentionKind::Causal,
    };
    att.forward_values(q, k, v, None)
}

#[derive(Clone, Debug)]
pub struct SpanParams {
    /// D×H, one column per head.
    pub weight: ParamId,
    /// 1×H.
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    span: SpanParams,
    norm_attn: LayerNorm,
    ffn: FeedForward,
    norm_ffn: LayerNorm,
}

/// Temporal encoder plus frame classifier. Holds its own parameters so
/// scoring never needs the text side.
#[derive(Clone, Debug)]
pub struct Detector {
    pub params: ParamSet,
    pub config: TcsalConfig,
    pub dim: usize,
    layers: Vec<EncoderLayer>,
    head_norm: LayerNorm,
    head: Linear,
}

impl Detector {
    pub fn new(dim: usize, config: TcsalConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate(dim)?;
        let mut params = ParamSet::new();
        let hidden = config.ffn_ratio * dim;
        let layers = (0..config.layers)
            .map(|i| {
                let p = &mut params;
                EncoderLayer {
                    query: Linear::new(p, &format!("layer{i}.query"), dim, dim, rng),
                    key: Linear::new(p, &format!("layer{i}.key"), dim, dim, rng),
                    value: Linear::new(p, &format!("layer{i}.value"), dim, dim, rng),
                    output: Linear::new(p, &format!("layer{i}.output"), dim, dim, rng),
                    span: SpanParams {
                        weight: p.add(format!("layer{i}.span.weight"), gaussian(rng, dim, config.heads, SPAN_INIT_STD)),
                        bias: p.add(format!("layer{i}.span.bias"), Tensor::zeros(1, config.heads)),
                    },
                    norm_attn: LayerNorm::new(p, &format!("layer{i}.norm_attn"), dim),
                    ffn: FeedForward::new(p, &format!("layer{i}.ffn"), dim, hidden, dim, rng),
                    norm_ffn: LayerNorm::new(p, &format!("layer{i}.norm_ffn"), dim),
                }
            })
            .collect();
        let head_norm = LayerNorm::new(&mut params, "classifier.norm", dim);
        let head = Linear::new(&mut params, "classifier.linear", dim, 1, rng);
        Ok(Self {
            params,
            config,
            dim,
            layers,
            head_norm,
            head,
        })
    }

    /// Span parameters of every layer, for inspection.
    pub fn span_params(&self) -> Vec<SpanParams> {
        self.layers.iter().map(|l| l.span.clone()).collect()
    }

    /// Classifier weight and bias ids.
    pub fn classifier(&self) -> &Linear {
        &self.head
    }

    /// Temporal encoding of packed frames (N×D).
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var, segments: &[Segment]) -> Result<Var> {
        let mut x = x;
        for layer in &self.layers {
            let q = layer.query.forward(tape, p, x)?;
            let k = layer.key.forward(tape, p, x)?;
            let v = layer.value.forward(tape, p, x)?;
            let (kind, z) = match self.config.mode {
                TemporalMode::Tcsal => {
                    let z = adaptive_span(tape, x, p[layer.span.weight], p[layer.span.bias], segments)?;
                    (AttentionKind::Span { softness: self.config.softness }, Some(z))
                }
                TemporalMode::PlainEncoder => (AttentionKind::Full, None),
            };
            let att = SpanAttention {
                segments: segments.to_vec(),
                heads: self.config.heads,
                kind,
            }
            .apply(tape, q, k, v, z)?;
            let att = layer.output.forward(tape, p, att)?;
            let res = tape.add(x, att)?;
            let x1 = layer.norm_attn.forward(tape, p, res)?;
            let f = layer.ffn.forward(tape, p, x1)?;
            let res = tape.add(x1, f)?;
            x = layer.norm_ffn.forward(tape, p, res)?;
        }
        Ok(x)
    }

    /// `η = sigmoid(w·LayerNorm(x') + c)` per row; N×1.
    pub fn classify(&self, tape: &mut Tape, p: &Bound, encoded: Var) -> Result<Var> {
        let n = self.head_norm.forward(tape, p, encoded)?;
        let logits = self.head.forward(tape, p, n)?;
        tape.sigmoid(logits)
    }

    /// Frame scores (N×1) of packed frames.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, segments: &[Segment]) -> Result<Var> {
        let enc = self.encode(tape, p, x, segments)?;
        self.classify(tape, p, enc)
    }

    /// Scores for each video without recording gradients.
    pub fn score(&self, videos: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        if videos.is_empty() {
            return Ok(Vec::new());
        }
        for v in videos {
            if v.cols() != self.dim {
                return Err(Error::dim("score", format!("frames have D={} but model has D={}", v.cols(), self.dim)));
            }
        }
        let segments = pack_segments(videos.iter().map(|v| v.rows()));
        let packed = Tensor::from_parts(
            segments.iter().map(|s| s.len).sum(),
            self.dim,
            videos.iter().flat_map(|v| v.data().iter().copied()).collect(),
        );
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(packed)?;
        let eta = self.forward(&mut tape, &p, x, &segments)?;
        let eta = tape.value(eta).data();
        Ok(segments.iter().map(|s| eta[s.start..s.start + s.len].to_vec()).collect())
    }
}
