//! Evidence grounding module: query-guided cross-attention over frame
//! features.
//!
//! K evidence queries are built from learnable base queries plus a projection
//! of the mean-pooled question. Each of the M layers attends over all N
//! frames, `A = softmax(Q Vᵀ / √D_v)`, aggregates `E = A V`, and refines the
//! queries residually, `Q ← Q + E`. The last layer's `A` and `E` are the
//! module's outputs; per-frame importance is the max over queries of `A`.

use serde::{Deserialize, Serialize};

use crate::error::{CoeError, Result};
use crate::numerics::{
    log_sigmoid, sigmoid, softmax_rows, softmax_rows_backward, Matrix, Rng,
};

/// N × D_v frame features with the frame rate used for time ↔ frame mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub features: Matrix,
    pub fps: f64,
}

impl FrameFeatures {
    pub fn new(features: Matrix, fps: f64) -> Result<Self> {
        if features.rows() == 0 {
            return Err(CoeError::Config("video must have at least one frame".into()));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(CoeError::Config(format!("fps must be positive, got {fps}")));
        }
        if !features.is_finite() {
            return Err(CoeError::Config("frame features must be finite".into()));
        }
        Ok(Self { features, fps })
    }

    pub fn n_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// L × D_l embedded question tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionEmbedding {
    pub tokens: Matrix,
}

impl QuestionEmbedding {
    pub fn new(tokens: Matrix) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(CoeError::Config("question must have at least one token".into()));
        }
        Ok(Self { tokens })
    }

    pub fn mean_pool(&self) -> Vec<f64> {
        self.tokens.column_mean()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgmParams {
    pub num_layers: usize,
    /// K × D_v.
    pub base_queries: Matrix,
    /// D_l × D_v.
    pub question_proj: Matrix,
}

impl EgmParams {
    pub fn new(num_layers: usize, base_queries: Matrix, question_proj: Matrix) -> Result<Self> {
        if num_layers == 0 {
            return Err(CoeError::Config("EGM needs at least one layer".into()));
        }
        if base_queries.rows() == 0 {
            return Err(CoeError::Config("EGM needs at least one evidence query".into()));
        }
        if base_queries.cols() != question_proj.cols() {
            return Err(CoeError::Dimension {
                op: "EgmParams::new",
                left: base_queries.shape(),
                right: question_proj.shape(),
            });
        }
        Ok(Self {
            num_layers,
            base_queries,
            question_proj,
        })
    }

    /// Gaussian initialization with standard deviation `scale`.
    pub fn init(
        num_queries: usize,
        num_layers: usize,
        d_v: usize,
        d_l: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let base = Matrix::from_fn(num_queries, d_v, |_, _| scale * rng.normal());
        let proj = Matrix::from_fn(d_l, d_v, |_, _| scale * rng.normal());
        Self::new(num_layers, base, proj)
    }

    pub fn num_queries(&self) -> usize {
        self.base_queries.rows()
    }

    pub fn d_v(&self) -> usize {
        self.base_queries.cols()
    }

    pub fn d_l(&self) -> usize {
        self.question_proj.rows()
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    /// K × N, rows on the probability simplex.
    pub attention: Matrix,
    /// K × D_v grounded evidence features.
    pub grounded: Matrix,
    /// Length-N frame importance (column max of `attention`).
    pub importance: Vec<f64>,
}

/// Per-frame binary key-frame target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyFrameTarget {
    target: Vec<u8>,
}

impl KeyFrameTarget {
    pub fn new(target: Vec<u8>) -> Result<Self> {
        if target.iter().any(|&t| t > 1) {
            return Err(CoeError::Config("key-frame target entries must be 0 or 1".into()));
        }
        if !target.contains(&1) {
            return Err(CoeError::Config("key-frame target needs at least one key frame".into()));
        }
        Ok(Self { target })
    }

    pub fn from_indices(indices: &[usize], n_frames: usize) -> Result<Self> {
        let mut target = vec![0u8; n_frames];
        for &i in indices {
            if i >= n_frames {
                return Err(CoeError::Config(format!(
                    "key frame {i} outside video of {n_frames} frames"
                )));
            }
            target[i] = 1;
        }
        Self::new(target)
    }

    pub fn values(&self) -> &[u8] {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundingLossMode {
    /// BCE with σ applied to the attention-derived importance scores.
    #[default]
    Literal,
    /// BCE on the column max of the final layer's scaled attention logits.
    Logit,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EgmTrace {
    pooled_question: Vec<f64>,
    attentions: Vec<Matrix>,
    final_logits: Matrix,
}

impl EgmTrace {
    /// Final-layer scaled logits `Q Vᵀ / √D_v`.
    pub fn final_logits(&self) -> &Matrix {
        &self.final_logits
    }
}

/// Gradients with respect to [`EgmParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EgmGrads {
    pub base_queries: Matrix,
    pub question_proj: Matrix,
}

impl EgmGrads {
    pub fn zeros_like(p: &EgmParams) -> Self {
        Self {
            base_queries: Matrix::zeros(p.base_queries.rows(), p.base_queries.cols()),
            question_proj: Matrix::zeros(p.question_proj.rows(), p.question_proj.cols()),
        }
    }

    pub fn add_assign(&mut self, other: &EgmGrads) -> Result<()> {
        self.base_queries.add_assign(&other.base_queries)?;
        self.question_proj.add_assign(&other.question_proj)
    }

    pub fn scale(&mut self, s: f64) {
        self.base_queries = self.base_queries.scale(s);
        self.question_proj = self.question_proj.scale(s);
    }
}

/// Upstream gradients flowing into the final EGM layer.
#[derive(Debug, Clone)]
pub struct EgmUpstream {
    /// d/dA of the final layer (K × N).
    pub attention: Matrix,
    /// d/dE_g (K × D_v).
    pub grounded: Matrix,
    /// d/d(final scaled logits) (K × N); used by the logit-mode loss.
    pub logits: Matrix,
}

impl EgmUpstream {
    pub fn zeros(k: usize, n: usize, d_v: usize) -> Self {
        Self {
            attention: Matrix::zeros(k, n),
            grounded: Matrix::zeros(k, d_v),
            logits: Matrix::zeros(k, n),
        }
    }
}

/// `Q_evidence[k] = base_queries[k] + mean_pool(q) · question_proj`.
pub fn project_queries(q: &QuestionEmbedding, p: &EgmParams) -> Result<Matrix> {
    if q.tokens.cols() != p.d_l() {
        return Err(CoeError::Dimension {
            op: "project_queries",
            left: q.tokens.shape(),
            right: p.question_proj.shape(),
        });
    }
    let pooled = q.mean_pool();
    Ok(project_pooled(&pooled, p))
}

fn project_pooled(pooled: &[f64], p: &EgmParams) -> Matrix {
    let shift = Matrix::row_vector(pooled)
        .matmul(&p.question_proj)
        .expect("pooled question width checked by caller");
    let mut out = p.base_queries.clone();
    for k in 0..out.rows() {
        for (o, s) in out.row_mut(k).iter_mut().zip(shift.data()) {
            *o += s;
        }
    }
    out
}

/// Column-wise max of an attention matrix.
pub fn frame_importance(a: &Matrix) -> Vec<f64> {
    a.column_max()
}

/// Routes an importance-score gradient back to the attention matrix: each
/// column's gradient goes to the first row attaining the max.
pub fn frame_importance_backward(a: &Matrix, d_scores: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for (i, &g) in d_scores.iter().enumerate() {
        let mut best = 0;
        for k in 1..a.rows() {
            if a.get(k, i) > a.get(best, i) {
                best = k;
            }
        }
        out.set(best, i, g);
    }
    out
}

pub fn egm_forward(
    v: &FrameFeatures,
    q: &QuestionEmbedding,
    p: &EgmParams,
) -> Result<AttentionState> {
    egm_forward_traced(v, q, p).map(|(s, _)| s)
}

pub fn egm_forward_traced(
    v: &FrameFeatures,
    q: &QuestionEmbedding,
    p: &EgmParams,
) -> Result<(AttentionState, EgmTrace)> {
    let n = v.n_frames();
    let k = p.num_queries();
    if v.dim() != p.d_v() {
        return Err(CoeError::Dimension {
            op: "egm_forward",
            left: v.features.shape(),
            right: p.base_queries.shape(),
        });
    }
    if k > n {
        return Err(CoeError::Config(format!(
            "cannot ground {k} evidence pieces in a video of {n} frames"
        )));
    }
    if q.tokens.cols() != p.d_l() {
        return Err(CoeError::Dimension {
            op: "egm_forward",
            left: q.tokens.shape(),
            right: p.question_proj.shape(),
        });
    }
    let pooled = q.mean_pool();
    let scale = 1.0 / (p.d_v() as f64).sqrt();

    let mut query = project_pooled(&pooled, p);
    let mut attentions = Vec::with_capacity(p.num_layers);
    let mut grounded = Matrix::zeros(k, p.d_v());
    let mut logits = Matrix::zeros(k, n);
    for _ in 0..p.num_layers {
        logits = query.matmul_t(&v.features)?.scale(scale);
        let attention = softmax_rows(&logits);
        grounded = attention.matmul(&v.features)?;
        query = query.add(&grounded)?;
        attentions.push(attention);
    }
    let attention = attentions.last().expect("at least one layer").clone();
    let importance = frame_importance(&attention);
    let state = AttentionState {
        attention,
        grounded,
        importance,
    };
    let trace = EgmTrace {
        pooled_question: pooled,
        attentions,
        final_logits: logits,
    };
    Ok((state, trace))
}

/// Reverse pass through all layers and the query projection.
pub fn egm_backward(
    v: &FrameFeatures,
    p: &EgmParams,
    trace: &EgmTrace,
    upstream: &EgmUpstream,
) -> Result<EgmGrads> {
    let scale = 1.0 / (p.d_v() as f64).sqrt();
    let k = p.num_queries();
    let mut d_next_query = Matrix::zeros(k, p.d_v());
    for layer in (0..p.num_layers).rev() {
        let last = layer + 1 == p.num_layers;
        let attention = &trace.attentions[layer];
        let mut d_grounded = d_next_query.clone();
        if last {
            d_grounded.add_assign(&upstream.grounded)?;
        }
        let mut d_attention = d_grounded.matmul_t(&v.features)?;
        if last {
            d_attention.add_assign(&upstream.attention)?;
        }
        let mut d_logits = softmax_rows_backward(attention, &d_attention)?;
        if last {
            d_logits.add_assign(&upstream.logits)?;
        }
        let d_query = d_logits.matmul(&v.features)?.scale(scale);
        d_next_query.add_assign(&d_query)?;
    }
    // d_next_query now holds d/dQ⁽¹⁾.
    let mut d_shift = vec![0.0; p.d_v()];
    for r in 0..k {
        for (s, g) in d_shift.iter_mut().zip(d_next_query.row(r)) {
            *s += g;
        }
    }
    let question_proj = Matrix::from_fn(p.d_l(), p.d_v(), |i, j| trace.pooled_question[i] * d_shift[j]);
    Ok(EgmGrads {
        base_queries: d_next_query,
        question_proj,
    })
}

/// Binary cross-entropy on σ(scores): returns the mean loss and its gradient
/// with respect to `scores`.
pub fn grounding_loss(scores: &[f64], y: &KeyFrameTarget) -> Result<(f64, Vec<f64>)> {
    if scores.len() != y.len() {
        return Err(CoeError::Dimension {
            op: "grounding_loss",
            left: (scores.len(), 1),
            right: (y.len(), 1),
        });
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&a, &t) in scores.iter().zip(y.values()) {
        let t = f64::from(t);
        loss -= t * log_sigmoid(a) + (1.0 - t) * log_sigmoid(-a);
        grad.push((sigmoid(a) - t) / n);
    }
    Ok((loss / n, grad))
}

/// Grounding loss for an attention state in the configured mode, with the
/// upstream gradient ready for [`egm_backward`].
pub fn grounding_objective(
    state: &AttentionState,
    trace: &EgmTrace,
    y: &KeyFrameTarget,
    mode: GroundingLossMode,
) -> Result<(f64, EgmUpstream)> {
    let (k, n) = state.attention.shape();
    let d_v = state.grounded.cols();
    let mut up = EgmUpstream::zeros(k, n, d_v);
    match mode {
        GroundingLossMode::Literal => {
            let (loss, d_scores) = grounding_loss(&state.importance, y)?;
            up.attention = frame_importance_backward(&state.attention, &d_scores);
            Ok((loss, up))
        }
        GroundingLossMode::Logit => {
            let logits = trace.final_logits();
            let pooled = frame_importance(logits);
            let (loss, d_scores) = grounding_loss(&pooled, y)?;
            up.logits = frame_importance_backward(logits, &d_scores);
            Ok((loss, up))
        }
    }
}
