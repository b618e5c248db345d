//! The full model: grounding module plus decoder, trained as one parameter set.

use serde::{Deserialize, Serialize};

use crate::decoder::{
    condition_vector, condition_vector_backward, sample_response, DecoderDims, DecoderGrads,
    DecoderParams, Sampling, TokenSequence,
};
use crate::egm::{
    egm_backward, egm_forward_traced, AttentionState, EgmGrads, EgmParams, EgmTrace, EgmUpstream,
    FrameFeatures, QuestionEmbedding,
};
use crate::error::{CoeError, Result};
use crate::numerics::{Matrix, Rng};

/// Parameter names in checkpoint and optimizer order.
pub const PARAM_NAMES: [&str; 6] = [
    "egm.base_queries",
    "egm.question_proj",
    "decoder.embed",
    "decoder.w_h",
    "decoder.w_out",
    "decoder.pos",
];

/// Architecture hyperparameters; everything needed to rebuild a model from
/// its parameter arrays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub num_layers: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub d_embed: usize,
    pub d_pos: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub vocab: usize,
    /// Standard deviation of the grounding parameters at initialization.
    pub egm_init_scale: f64,
}

impl ModelConfig {
    pub fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            vocab: self.vocab,
            d_embed: self.d_embed,
            d_cond: self.d_v + self.d_l,
            d_pos: self.d_pos,
            hidden: self.hidden,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_queries,
            self.num_layers,
            self.d_v,
            self.d_l,
            self.d_embed,
            self.hidden,
            self.max_len,
            self.vocab,
        ];
        if dims.contains(&0) {
            return Err(CoeError::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !(self.egm_init_scale >= 0.0 && self.egm_init_scale.is_finite()) {
            return Err(CoeError::Config("EGM init scale must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoeModel {
    pub egm: EgmParams,
    pub decoder: DecoderParams,
}

/// One prompt's forward state through the grounding module.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub state: AttentionState,
    pub trace: EgmTrace,
    pub cond: Vec<f64>,
}

impl CoeModel {
    pub fn new(egm: EgmParams, decoder: DecoderParams) -> Result<Self> {
        let dims = decoder.dims()?;
        if dims.d_cond != egm.d_v() + egm.d_l() {
            return Err(CoeError::Config(format!(
                "decoder condition width {} does not match D_v + D_l = {}",
                dims.d_cond,
                egm.d_v() + egm.d_l()
            )));
        }
        Ok(Self { egm, decoder })
    }

    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let egm = EgmParams::init(
            cfg.num_queries,
            cfg.num_layers,
            cfg.d_v,
            cfg.d_l,
            cfg.egm_init_scale,
            &mut rng.fork("egm"),
        )?;
        let decoder = DecoderParams::init(cfg.decoder_dims(), &mut rng.fork("decoder"))?;
        Self::new(egm, decoder)
    }

    pub fn params(&self) -> [&Matrix; 6] {
        [
            &self.egm.base_queries,
            &self.egm.question_proj,
            &self.decoder.embed,
            &self.decoder.w_h,
            &self.decoder.w_out,
            &self.decoder.pos,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.egm.base_queries,
            &mut self.egm.question_proj,
            &mut self.decoder.embed,
            &mut self.decoder.w_h,
            &mut self.decoder.w_out,
            &mut self.decoder.pos,
        ]
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Matrix)> {
        PARAM_NAMES.iter().copied().zip(self.params()).collect()
    }

    /// Rebuilds a model from matrices in [`PARAM_NAMES`] order.
    pub fn from_params(num_layers: usize, mut m: Vec<Matrix>) -> Result<Self> {
        if m.len() != PARAM_NAMES.len() {
            return Err(CoeError::Checkpoint(format!(
                "expected {} parameter arrays, got {}",
                PARAM_NAMES.len(),
                m.len()
            )));
        }
        let pos = m.pop().expect("len checked");
        let w_out = m.pop().expect("len checked");
        let w_h = m.pop().expect("len checked");
        let embed = m.pop().expect("len checked");
        let proj = m.pop().expect("len checked");
        let base = m.pop().expect("len checked");
        Self::new(
            EgmParams::new(num_layers, base, proj)?,
            DecoderParams::new(embed, w_h, w_out, pos)?,
        )
    }

    pub fn encode(&self, v: &FrameFeatures, q: &QuestionEmbedding) -> Result<Encoded> {
        let (state, trace) = egm_forward_traced(v, q, &self.egm)?;
        let cond = condition_vector(&state, q);
        Ok(Encoded { state, trace, cond })
    }

    pub fn generate(
        &self,
        v: &FrameFeatures,
        q: &QuestionEmbedding,
        sampling: Sampling,
        rng: &mut Rng,
        max_len: usize,
    ) -> Result<(TokenSequence, Encoded)> {
        let enc = self.encode(v, q)?;
        let seq = sample_response(&self.decoder, &enc.cond, sampling, rng, max_len)?;
        Ok((seq, enc))
    }

    /// Backpropagates EGM-side upstream gradients plus a condition-vector
    /// gradient into the grounding parameters.
    pub fn egm_grads(
        &self,
        v: &FrameFeatures,
        enc: &Encoded,
        mut upstream: EgmUpstream,
        d_cond: Option<&[f64]>,
    ) -> Result<EgmGrads> {
        if let Some(d) = d_cond {
            let d_grounded =
                condition_vector_backward(d, self.egm.num_queries(), self.egm.d_v());
            upstream.grounded.add_assign(&d_grounded)?;
        }
        egm_backward(v, &self.egm, &enc.trace, &upstream)
    }

    /// Order-stable content hash of all parameters (FNV-1a over the bits).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in self.params() {
            for v in m.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub egm: EgmGrads,
    pub decoder: DecoderGrads,
}

impl ModelGrads {
    pub fn zeros_like(m: &CoeModel) -> Self {
        Self {
            egm: EgmGrads::zeros_like(&m.egm),
            decoder: DecoderGrads::zeros_like(&m.decoder),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.egm.scale(s);
        self.decoder.scale(s);
    }

    pub fn into_vec(self) -> Vec<Matrix> {
        vec![
            self.egm.base_queries,
            self.egm.question_proj,
            self.decoder.embed,
            self.decoder.w_h,
            self.decoder.w_out,
            self.decoder.pos,
        ]
    }
}
