//! The gradient suite: finite-difference checks of every analytic gradient
//! the trainers rely on, over freshly drawn random instances.

use serde::Serialize;

use crate::decoder::{reasoning_loss, DecoderDims, DecoderParams, TokenSequence, EOS};
use crate::egm::{
    egm_backward, egm_forward_traced, grounding_objective, EgmParams, EgmUpstream, FrameFeatures,
    GroundingLossMode, KeyFrameTarget, QuestionEmbedding,
};
use crate::error::Result;
use crate::grpo::{grpo_loss, GrpoConfig, PairCondition, PreferencePair};
use crate::model::{CoeModel, ModelConfig};
use crate::numerics::{grad_check, Matrix, Rng};

const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub coordinates: usize,
    /// Worst relative error over all instances and coordinates.
    pub max_rel_error: f64,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

fn random_inputs(n: usize, d_v: usize, d_l: usize, rng: &mut Rng) -> Result<(FrameFeatures, QuestionEmbedding)> {
    let v = FrameFeatures::new(gaussian(n, d_v, 1.0, rng), 1.0)?;
    let len = rng.range_inclusive(1, 4);
    let q = QuestionEmbedding::new(gaussian(len, d_l, 1.0, rng))?;
    Ok((v, q))
}

fn random_target(n: usize, rng: &mut Rng) -> Result<KeyFrameTarget> {
    let mut y: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.3))).collect();
    y[rng.below(n)] = 1;
    KeyFrameTarget::new(y)
}

fn random_sequence(vocab: usize, max: usize, rng: &mut Rng) -> TokenSequence {
    let len = rng.below(max);
    let mut ids: Vec<usize> = (0..len).map(|_| 2 + rng.below(vocab - 2)).collect();
    ids.push(EOS);
    TokenSequence::new(ids)
}

/// Grounding loss (both modes) through max-pooling, softmax and every
/// attention layer into the query parameters.
pub fn check_grounding(instances: usize, rng: &mut Rng) -> Result<SuiteEntry> {
    let mut entry = SuiteEntry {
        name: "grounding",
        instances,
        coordinates: 0,
        max_rel_error: 0.0,
    };
    for i in 0..instances {
        let (k, n) = (rng.range_inclusive(1, 4), rng.range_inclusive(5, 9));
        let (d_v, d_l) = (rng.range_inclusive(2, 6), rng.range_inclusive(1, 4));
        let layers = rng.range_inclusive(1, 3);
        let mode = if i % 2 == 0 {
            GroundingLossMode::Literal
        } else {
            GroundingLossMode::Logit
        };
        let (v, q) = random_inputs(n, d_v, d_l, rng)?;
        let y = random_target(n, rng)?;
        let params = [gaussian(k, d_v, 0.7, rng), gaussian(d_l, d_v, 0.7, rng)];
        let report = grad_check(
            |m: &[Matrix]| {
                let p = EgmParams::new(layers, m[0].clone(), m[1].clone())?;
                let (state, trace) = egm_forward_traced(&v, &q, &p)?;
                let (loss, up) = grounding_objective(&state, &trace, &y, mode)?;
                let g = egm_backward(&v, &p, &trace, &up)?;
                Ok((loss, vec![g.base_queries, g.question_proj]))
            },
            &params,
            EPS,
        )?;
        entry.coordinates += report.coordinates_checked;
        entry.max_rel_error = entry.max_rel_error.max(report.max_rel_error);
    }
    Ok(entry)
}

/// Reasoning loss end to end: decoder parameters plus the grounding
/// parameters reached through the condition vector.
pub fn check_reasoning(instances: usize, rng: &mut Rng) -> Result<SuiteEntry> {
    let mut entry = SuiteEntry {
        name: "reasoning",
        instances,
        coordinates: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..instances {
        let cfg = ModelConfig {
            num_queries: rng.range_inclusive(1, 3),
            num_layers: rng.range_inclusive(1, 2),
            d_v: rng.range_inclusive(2, 4),
            d_l: rng.range_inclusive(1, 3),
            d_embed: 3,
            d_pos: 2,
            hidden: 4,
            max_len: 6,
            vocab: rng.range_inclusive(3, 6),
            egm_init_scale: 0.7,
        };
        let n = rng.range_inclusive(cfg.num_queries, 6);
        let (v, q) = random_inputs(n, cfg.d_v, cfg.d_l, rng)?;
        let target = random_sequence(cfg.vocab, cfg.max_len, rng);
        let mut model = CoeModel::init(&cfg, rng)?;
        for m in model.params_mut() {
            let noise = gaussian(m.rows(), m.cols(), 0.5, rng);
            m.add_assign(&noise)?;
        }
        let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
        let report = grad_check(
            |m: &[Matrix]| {
                let model = CoeModel::from_params(cfg.num_layers, m.to_vec())?;
                let enc = model.encode(&v, &q)?;
                let r = reasoning_loss(&model.decoder, &enc.cond, &target)?;
                let (k, n) = enc.state.attention.shape();
                let up = EgmUpstream::zeros(k, n, cfg.d_v);
                let g = model.egm_grads(&v, &enc, up, Some(&r.d_cond))?;
                let d = r.grads;
                Ok((r.loss, vec![g.base_queries, g.question_proj, d.embed, d.w_h, d.w_out, d.pos]))
            },
            &params,
            EPS,
        )?;
        entry.coordinates += report.coordinates_checked;
        entry.max_rel_error = entry.max_rel_error.max(report.max_rel_error);
    }
    Ok(entry)
}

/// Pairwise preference loss against a fixed reference policy.
pub fn check_grpo(instances: usize, rng: &mut Rng) -> Result<SuiteEntry> {
    let mut entry = SuiteEntry {
        name: "grpo",
        instances,
        coordinates: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..instances {
        let dims = DecoderDims {
            vocab: rng.range_inclusive(3, 6),
            d_embed: 3,
            d_cond: rng.range_inclusive(1, 4),
            d_pos: 2,
            hidden: 4,
            max_len: 6,
        };
        let reference = DecoderParams::init(dims, rng)?;
        let cfg = GrpoConfig {
            beta: rng.uniform_range(0.1, 2.0),
            ..GrpoConfig::default()
        };
        let n_pairs = rng.range_inclusive(1, 3);
        let mut pairs = Vec::new();
        let mut conds = Vec::new();
        for id in 0..n_pairs {
            pairs.push(PreferencePair {
                sample_id: id as u64,
                chosen: random_sequence(dims.vocab, dims.max_len, rng),
                rejected: random_sequence(dims.vocab, dims.max_len, rng),
                reward_gap: 1.0,
            });
            let c: Vec<f64> = (0..dims.d_cond).map(|_| rng.normal()).collect();
            conds.push(PairCondition {
                policy: c.clone(),
                reference: c,
            });
        }
        let params: Vec<Matrix> = [&reference.embed, &reference.w_h, &reference.w_out, &reference.pos]
            .iter()
            .map(|m| {
                let noise = gaussian(m.rows(), m.cols(), 0.5, rng);
                m.add(&noise)
            })
            .collect::<Result<_>>()?;
        let report = grad_check(
            |m: &[Matrix]| {
                let policy = DecoderParams::new(m[0].clone(), m[1].clone(), m[2].clone(), m[3].clone())?;
                let out = grpo_loss(&policy, &reference, &pairs, &conds, &cfg)?;
                let g = out.grads;
                Ok((out.loss, vec![g.embed, g.w_h, g.w_out, g.pos]))
            },
            &params,
            EPS,
        )?;
        entry.coordinates += report.coordinates_checked;
        entry.max_rel_error = entry.max_rel_error.max(report.max_rel_error);
    }
    Ok(entry)
}

/// All three checks with `instances` random instances each.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<SuiteEntry>> {
    let rng = Rng::derived(seed, "gradient-suite");
    Ok(vec![
        check_grounding(instances, &mut rng.fork("grounding"))?,
        check_reasoning(instances, &mut rng.fork("reasoning"))?,
        check_grpo(instances, &mut rng.fork("grpo"))?,
    ])
}
