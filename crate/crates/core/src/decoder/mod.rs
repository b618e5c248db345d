//! Toy conditional decoder standing in for the language model.
//!
//! The next-token distribution depends only on the previous token, the
//! position, and a condition vector built from the grounded evidence and the
//! question:
//!
//! ```text
//! logits = W_outᵀ · tanh(W_hᵀ · [emb(prev); c; pos(t)])
//! ```
//!
//! The condition vector has width `D_v + D_l`, independent of the frame count
//! N, so the decoder only ever sees the K evidence rows.

mod vocab;

pub use vocab::{Vocab, BOS, BOS_TOKEN, EOS, EOS_TOKEN, MAX_VOCAB};

use serde::{Deserialize, Serialize};

use crate::egm::{AttentionState, QuestionEmbedding};
use crate::error::{CoeError, Result};
use crate::numerics::{log_sum_exp, softmax_into, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub vocab: usize,
    pub d_embed: usize,
    pub d_cond: usize,
    pub d_pos: usize,
    pub hidden: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// |V| × D_e.
    pub embed: Matrix,
    /// (D_e + D_c + D_p) × H.
    pub w_h: Matrix,
    /// H × |V|.
    pub w_out: Matrix,
    /// T_max × D_p.
    pub pos: Matrix,
}

impl DecoderParams {
    pub fn new(embed: Matrix, w_h: Matrix, w_out: Matrix, pos: Matrix) -> Result<Self> {
        let p = Self {
            embed,
            w_h,
            w_out,
            pos,
        };
        p.dims()?;
        Ok(p)
    }

    pub fn init(dims: DecoderDims, rng: &mut Rng) -> Result<Self> {
        let d_in = dims.d_embed + dims.d_cond + dims.d_pos;
        let embed = Matrix::from_fn(dims.vocab, dims.d_embed, |_, _| rng.normal());
        let w_h_scale = 1.0 / (d_in as f64).sqrt();
        let w_h = Matrix::from_fn(d_in, dims.hidden, |_, _| w_h_scale * rng.normal());
        let w_out_scale = 1.0 / (dims.hidden as f64).sqrt();
        let w_out = Matrix::from_fn(dims.hidden, dims.vocab, |_, _| w_out_scale * rng.normal());
        let pos = Matrix::from_fn(dims.max_len, dims.d_pos, |_, _| rng.normal());
        Self::new(embed, w_h, w_out, pos)
    }

    pub fn zeros(dims: DecoderDims) -> Self {
        let d_in = dims.d_embed + dims.d_cond + dims.d_pos;
        Self {
            embed: Matrix::zeros(dims.vocab, dims.d_embed),
            w_h: Matrix::zeros(d_in, dims.hidden),
            w_out: Matrix::zeros(dims.hidden, dims.vocab),
            pos: Matrix::zeros(dims.max_len, dims.d_pos),
        }
    }

    pub fn dims(&self) -> Result<DecoderDims> {
        let vocab = self.embed.rows();
        let d_embed = self.embed.cols();
        let d_pos = self.pos.cols();
        let hidden = self.w_h.cols();
        let d_in = self.w_h.rows();
        if self.w_out.shape() != (hidden, vocab) || d_in < d_embed + d_pos {
            return Err(CoeError::Dimension {
                op: "DecoderParams",
                left: self.w_h.shape(),
                right: self.w_out.shape(),
            });
        }
        Ok(DecoderDims {
            vocab,
            d_embed,
            d_cond: d_in - d_embed - d_pos,
            d_pos,
            hidden,
            max_len: self.pos.rows(),
        })
    }

    fn dims_unchecked(&self) -> DecoderDims {
        self.dims().expect("decoder shapes validated at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub embed: Matrix,
    pub w_h: Matrix,
    pub w_out: Matrix,
    pub pos: Matrix,
}

impl DecoderGrads {
    pub fn zeros_like(p: &DecoderParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            embed: z(&p.embed),
            w_h: z(&p.w_h),
            w_out: z(&p.w_out),
            pos: z(&p.pos),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &DecoderGrads) -> Result<()> {
        self.embed.axpy(alpha, &other.embed)?;
        self.w_h.axpy(alpha, &other.w_h)?;
        self.w_out.axpy(alpha, &other.w_out)?;
        self.pos.axpy(alpha, &other.pos)
    }

    pub fn scale(&mut self, s: f64) {
        for m in [&mut self.embed, &mut self.w_h, &mut self.w_out, &mut self.pos] {
            *m = m.scale(s);
        }
    }
}

/// A generated or target token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Total log-probability under the temperature-1 policy, when scored.
    pub logprob: Option<f64>,
    /// Generation stopped at the length limit before EOS.
    #[serde(default)]
    pub truncated: bool,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self {
            ids,
            logprob: None,
            truncated: false,
        }
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }
}

/// `[mean of E_g rows; mean of question token embeddings]`.
pub fn condition_vector(e: &AttentionState, q: &QuestionEmbedding) -> Vec<f64> {
    let mut c = e.grounded.column_mean();
    c.extend(q.mean_pool());
    c
}

/// Gradient of a loss with respect to E_g given its gradient with respect
/// to the condition vector.
pub fn condition_vector_backward(d_cond: &[f64], k: usize, d_v: usize) -> Matrix {
    let inv_k = 1.0 / k as f64;
    Matrix::from_fn(k, d_v, |_, j| d_cond[j] * inv_k)
}

fn check_cond(params: &DecoderParams, c: &[f64]) -> Result<DecoderDims> {
    let dims = params.dims_unchecked();
    if c.len() != dims.d_cond {
        return Err(CoeError::Dimension {
            op: "decoder condition",
            left: (c.len(), 1),
            right: (dims.d_cond, 1),
        });
    }
    Ok(dims)
}

/// Hidden pre-activation contribution of the condition vector, shared by
/// every step of a sequence.
fn cond_preactivation(params: &DecoderParams, dims: &DecoderDims, c: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dims.hidden];
    for (j, &cv) in c.iter().enumerate() {
        if cv == 0.0 {
            continue;
        }
        let row = params.w_h.row(dims.d_embed + j);
        for (o, &w) in out.iter_mut().zip(row) {
            *o += cv * w;
        }
    }
    out
}

/// Hidden activation and logits for one step.
fn step_core(
    params: &DecoderParams,
    dims: &DecoderDims,
    cond_pre: &[f64],
    prev: usize,
    pos: usize,
    hidden: &mut [f64],
    logits: &mut [f64],
) {
    hidden.copy_from_slice(cond_pre);
    for (j, &e) in params.embed.row(prev).iter().enumerate() {
        let row = params.w_h.row(j);
        for (h, &w) in hidden.iter_mut().zip(row) {
            *h += e * w;
        }
    }
    let pos_offset = dims.d_embed + dims.d_cond;
    for (j, &e) in params.pos.row(pos).iter().enumerate() {
        let row = params.w_h.row(pos_offset + j);
        for (h, &w) in hidden.iter_mut().zip(row) {
            *h += e * w;
        }
    }
    for h in hidden.iter_mut() {
        *h = h.tanh();
    }
    logits.fill(0.0);
    for (k, &h) in hidden.iter().enumerate() {
        let row = params.w_out.row(k);
        for (l, &w) in logits.iter_mut().zip(row) {
            *l += h * w;
        }
    }
}

fn check_step(dims: &DecoderDims, prev: usize, pos: usize) -> Result<()> {
    if pos >= dims.max_len {
        return Err(CoeError::SequenceLength {
            pos,
            max: dims.max_len,
        });
    }
    if prev >= dims.vocab {
        return Err(CoeError::TokenOutOfRange {
            id: prev,
            size: dims.vocab,
        });
    }
    Ok(())
}

pub fn step_logits(params: &DecoderParams, prev: usize, pos: usize, c: &[f64]) -> Result<Vec<f64>> {
    let dims = check_cond(params, c)?;
    check_step(&dims, prev, pos)?;
    let pre = cond_preactivation(params, &dims, c);
    let mut hidden = vec![0.0; dims.hidden];
    let mut logits = vec![0.0; dims.vocab];
    step_core(params, &dims, &pre, prev, pos, &mut hidden, &mut logits);
    Ok(logits)
}

/// Teacher-forced negative log-likelihood of `ids` with optional gradients.
struct Scored {
    nll: f64,
    grads: Option<(DecoderGrads, Vec<f64>)>,
}

fn score(params: &DecoderParams, c: &[f64], ids: &[usize], want_grad: bool) -> Result<Scored> {
    let dims = check_cond(params, c)?;
    if ids.len() > dims.max_len {
        return Err(CoeError::SequenceLength {
            pos: ids.len() - 1,
            max: dims.max_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= dims.vocab) {
        return Err(CoeError::TokenOutOfRange {
            id: bad,
            size: dims.vocab,
        });
    }
    let pre = cond_preactivation(params, &dims, c);
    let mut hidden = vec![0.0; dims.hidden];
    let mut logits = vec![0.0; dims.vocab];
    let mut probs = vec![0.0; dims.vocab];
    let mut d_hidden = vec![0.0; dims.hidden];
    let mut d_in = vec![0.0; dims.d_embed + dims.d_cond + dims.d_pos];
    let mut grads = want_grad.then(|| (DecoderGrads::zeros_like(params), vec![0.0; dims.d_cond]));
    let mut nll = 0.0;
    let mut prev = BOS;
    for (t, &target) in ids.iter().enumerate() {
        step_core(params, &dims, &pre, prev, t, &mut hidden, &mut logits);
        nll += log_sum_exp(&logits) - logits[target];
        if let Some((g, d_cond)) = grads.as_mut() {
            softmax_into(&logits, &mut probs);
            probs[target] -= 1.0;
            // W_out and hidden.
            for (k, (&h, dh)) in hidden.iter().zip(d_hidden.iter_mut()).enumerate() {
                let w_row = params.w_out.row(k);
                let g_row = g.w_out.row_mut(k);
                let mut acc = 0.0;
                for ((gw, &w), &dl) in g_row.iter_mut().zip(w_row).zip(&probs) {
                    *gw += h * dl;
                    acc += w * dl;
                }
                *dh = acc * (1.0 - h * h);
            }
            // W_h and its input.
            let emb = params.embed.row(prev);
            let pos_row = params.pos.row(t);
            for (j, di) in d_in.iter_mut().enumerate() {
                let x = if j < dims.d_embed {
                    emb[j]
                } else if j < dims.d_embed + dims.d_cond {
                    c[j - dims.d_embed]
                } else {
                    pos_row[j - dims.d_embed - dims.d_cond]
                };
                let w_row = params.w_h.row(j);
                let g_row = g.w_h.row_mut(j);
                let mut acc = 0.0;
                for ((gw, &w), &dh) in g_row.iter_mut().zip(w_row).zip(&d_hidden) {
                    if x != 0.0 {
                        *gw += x * dh;
                    }
                    acc += w * dh;
                }
                *di = acc;
            }
            for (ge, &d) in g.embed.row_mut(prev).iter_mut().zip(&d_in[..dims.d_embed]) {
                *ge += d;
            }
            for (gc, &d) in d_cond.iter_mut().zip(&d_in[dims.d_embed..dims.d_embed + dims.d_cond]) {
                *gc += d;
            }
            for (gp, &d) in g.pos.row_mut(t).iter_mut().zip(&d_in[dims.d_embed + dims.d_cond..]) {
                *gp += d;
            }
        }
        prev = target;
    }
    if !nll.is_finite() {
        return Err(CoeError::Divergence("non-finite sequence log-likelihood".into()));
    }
    Ok(Scored { nll, grads })
}

/// Output of [`reasoning_loss`].
#[derive(Debug, Clone)]
pub struct ReasoningLoss {
    pub loss: f64,
    pub grads: DecoderGrads,
    /// Gradient with respect to the condition vector.
    pub d_cond: Vec<f64>,
}

/// Summed teacher-forced NLL of `target` (which must end with EOS).
pub fn reasoning_loss(params: &DecoderParams, c: &[f64], target: &TokenSequence) -> Result<ReasoningLoss> {
    if !target.ends_with_eos() {
        return Err(CoeError::Schema("reasoning target must be nonempty and end with EOS".into()));
    }
    let s = score(params, c, &target.ids, true)?;
    let (grads, d_cond) = s.grads.expect("gradients requested");
    Ok(ReasoningLoss {
        loss: s.nll,
        grads,
        d_cond,
    })
}

/// `Σ_t log p(y_t | y_<t, c)`.
pub fn sequence_logprob(params: &DecoderParams, c: &[f64], y: &TokenSequence) -> Result<f64> {
    Ok(-score(params, c, &y.ids, false)?.nll)
}

/// Log-probability together with its gradient with respect to the decoder
/// parameters and the condition vector.
pub fn sequence_logprob_grad(
    params: &DecoderParams,
    c: &[f64],
    y: &TokenSequence,
) -> Result<(f64, DecoderGrads, Vec<f64>)> {
    let s = score(params, c, &y.ids, true)?;
    let (mut g, mut d_cond) = s.grads.expect("gradients requested");
    g.scale(-1.0);
    d_cond.iter_mut().for_each(|d| *d = -*d);
    Ok((-s.nll, g, d_cond))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Argmax decoding, the zero-temperature limit.
    Greedy,
    Temperature(f64),
}

/// Ancestral sampling until EOS or `max_len` tokens. The recorded log-prob
/// is under the temperature-1 policy.
pub fn sample_response(
    params: &DecoderParams,
    c: &[f64],
    sampling: Sampling,
    rng: &mut Rng,
    max_len: usize,
) -> Result<TokenSequence> {
    if let Sampling::Temperature(t) = sampling {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CoeError::Config(format!("temperature must be positive, got {t}")));
        }
    }
    let dims = check_cond(params, c)?;
    let max_len = max_len.min(dims.max_len);
    let pre = cond_preactivation(params, &dims, c);
    let mut hidden = vec![0.0; dims.hidden];
    let mut logits = vec![0.0; dims.vocab];
    let mut probs = vec![0.0; dims.vocab];
    let mut ids = Vec::new();
    let mut logprob = 0.0;
    let mut prev = BOS;
    for t in 0..max_len {
        step_core(params, &dims, &pre, prev, t, &mut hidden, &mut logits);
        let next = match sampling {
            Sampling::Greedy => argmax(&logits),
            Sampling::Temperature(temp) => {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temp).collect();
                softmax_into(&scaled, &mut probs);
                rng.categorical(&probs)
            }
        };
        logprob += logits[next] - log_sum_exp(&logits);
        ids.push(next);
        if next == EOS {
            return Ok(TokenSequence {
                ids,
                logprob: Some(logprob),
                truncated: false,
            });
        }
        prev = next;
    }
    Ok(TokenSequence {
        ids,
        logprob: Some(logprob),
        truncated: true,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
