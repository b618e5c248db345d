//! Preference refinement: two sampled responses per prompt are scored by the
//! composite reward, the better one becomes `y_w`, and the policy is pushed
//! away from the frozen reference along the pairwise logistic loss
//!
//! ```text
//! L = mean over pairs of  -ln σ(β · (Δ_w - Δ_l)),   Δ = log π_θ(y|x) - log π_ref(y|x)
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::{QuestionEncoder, TrainingSample};
use crate::decoder::{
    sample_response, sequence_logprob, sequence_logprob_grad, DecoderGrads, DecoderParams,
    Sampling, TokenSequence, Vocab,
};
use crate::egm::EgmUpstream;
use crate::error::{CoeError, Result};
use crate::model::{CoeModel, ModelGrads};
use crate::numerics::{log_sigmoid, sigmoid, Matrix, Optimizer, Rng};
use crate::reward::{score_text, RewardBreakdown, RewardWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub beta: f64,
    /// Pairs whose rewards differ by less than this are skipped as ties.
    pub tie_epsilon: f64,
    pub samples_per_prompt: usize,
    pub temperature: f64,
    /// Also update the grounding module during RL.
    pub update_egm: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            tie_epsilon: 1e-3,
            samples_per_prompt: 2,
            temperature: 0.8,
            update_egm: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CoeError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.tie_epsilon >= 0.0) {
            return Err(CoeError::Config("tie epsilon must be nonnegative".into()));
        }
        if self.samples_per_prompt != 2 {
            return Err(CoeError::Config(
                "exactly two samples per prompt are supported".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CoeError::Config("sampling temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub sample_id: u64,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
    pub reward_gap: f64,
}

/// Orders two scored responses into a pair, or `None` for a tie.
pub fn build_pair(
    sample_id: u64,
    first: (&TokenSequence, &RewardBreakdown),
    second: (&TokenSequence, &RewardBreakdown),
    cfg: &GrpoConfig,
) -> Option<PreferencePair> {
    let gap = first.1.total - second.1.total;
    if gap.abs() < cfg.tie_epsilon || gap == 0.0 {
        return None;
    }
    let (w, l) = if gap > 0.0 { (first, second) } else { (second, first) };
    Some(PreferencePair {
        sample_id,
        chosen: w.0.clone(),
        rejected: l.0.clone(),
        reward_gap: gap.abs(),
    })
}

/// `-ln σ(β(Δ_w - Δ_l))` and its derivative with respect to `Δ_w`
/// (the derivative with respect to `Δ_l` is the negation).
pub fn dpo_pair_loss(beta: f64, delta_w: f64, delta_l: f64) -> (f64, f64) {
    let margin = beta * (delta_w - delta_l);
    (-log_sigmoid(margin), -beta * sigmoid(-margin))
}

/// Condition vectors for one pair under the policy and the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCondition {
    pub policy: Vec<f64>,
    pub reference: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GrpoLoss {
    pub loss: f64,
    pub grads: DecoderGrads,
    /// Per-pair gradient with respect to the policy condition vector.
    pub d_cond: Vec<Vec<f64>>,
}

/// Mean pairwise loss over `pairs` with gradients with respect to the
/// policy decoder. Reference terms are constants.
pub fn grpo_loss(
    policy: &DecoderParams,
    reference: &DecoderParams,
    pairs: &[PreferencePair],
    conds: &[PairCondition],
    cfg: &GrpoConfig,
) -> Result<GrpoLoss> {
    if pairs.len() != conds.len() {
        return Err(CoeError::Dimension {
            op: "grpo_loss",
            left: (pairs.len(), 1),
            right: (conds.len(), 1),
        });
    }
    let mut grads = DecoderGrads::zeros_like(policy);
    let mut d_cond = Vec::with_capacity(pairs.len());
    if pairs.is_empty() {
        return Ok(GrpoLoss {
            loss: 0.0,
            grads,
            d_cond,
        });
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for (pair, c) in pairs.iter().zip(conds) {
        let (lp_w, g_w, dc_w) = sequence_logprob_grad(policy, &c.policy, &pair.chosen)?;
        let (lp_l, g_l, dc_l) = sequence_logprob_grad(policy, &c.policy, &pair.rejected)?;
        let ref_w = sequence_logprob(reference, &c.reference, &pair.chosen)?;
        let ref_l = sequence_logprob(reference, &c.reference, &pair.rejected)?;
        if ![lp_w, lp_l, ref_w, ref_l].iter().all(|x| x.is_finite()) {
            return Err(CoeError::Divergence(format!(
                "non-finite log-probability for sample {}",
                pair.sample_id
            )));
        }
        let (l, d_w) = dpo_pair_loss(cfg.beta, lp_w - ref_w, lp_l - ref_l);
        loss += l * inv;
        grads.axpy(d_w * inv, &g_w)?;
        grads.axpy(-d_w * inv, &g_l)?;
        d_cond.push(
            dc_w.iter()
                .zip(&dc_l)
                .map(|(a, b)| (d_w * a - d_w * b) * inv)
                .collect(),
        );
    }
    Ok(GrpoLoss {
        loss,
        grads,
        d_cond,
    })
}

/// Metrics of one RL step, one CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlStepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub answer_acc: f64,
    /// NaN when every pair tied and the step was skipped.
    pub grpo_loss: f64,
    pub pair_yield: f64,
}

pub const RL_LOG_HEADER: &str = "step,mean_reward,mean_f1,mean_iou,answer_acc,grpo_loss,pair_yield";

impl RlStepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.mean_f1,
            self.mean_iou,
            self.answer_acc,
            self.grpo_loss,
            self.pair_yield
        )
    }

    pub fn write_csv<W: Write>(rows: &[RlStepMetrics], mut w: W) -> std::io::Result<()> {
        writeln!(w, "{RL_LOG_HEADER}")?;
        for r in rows {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

/// Policy, frozen reference and optimizer state for the RL phase.
pub struct RlTrainer {
    pub policy: CoeModel,
    reference: CoeModel,
    reference_fingerprint: u64,
    optimizer: Optimizer,
    pub cfg: GrpoConfig,
    pub weights: RewardWeights,
    vocab: Vocab,
    encoder: QuestionEncoder,
    seed: u64,
    pub steps: usize,
    /// Steps in which every pair tied and no update happened.
    pub skipped_steps: usize,
}

impl RlTrainer {
    /// The starting policy doubles as the frozen reference.
    pub fn new(
        policy: CoeModel,
        vocab: Vocab,
        encoder: QuestionEncoder,
        cfg: GrpoConfig,
        weights: RewardWeights,
        optimizer: Optimizer,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        Ok(Self {
            reference_fingerprint: policy.fingerprint(),
            reference: policy.clone(),
            policy,
            optimizer,
            cfg,
            weights,
            vocab,
            encoder,
            seed,
            steps: 0,
            skipped_steps: 0,
        })
    }

    pub fn reference(&self) -> &CoeModel {
        &self.reference
    }

    /// Whether the reference is still bit-identical to the starting policy.
    pub fn reference_intact(&self) -> bool {
        self.reference.fingerprint() == self.reference_fingerprint
    }

    /// Samples, scores and pairs responses for `batch`, then takes one
    /// optimizer step. Prompts are processed in sample-id order and every
    /// prompt draws from its own `(seed, step, sample_id)` stream.
    pub fn step(&mut self, batch: &[&TrainingSample]) -> Result<RlStepMetrics> {
        let mut batch: Vec<&TrainingSample> = batch.to_vec();
        batch.sort_by_key(|s| s.sample_id);
        let max_len = self.policy.decoder.dims()?.max_len;

        let mut pairs = Vec::new();
        let mut conds = Vec::new();
        let mut contexts = Vec::new();
        let (mut reward, mut f1, mut iou, mut acc, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0f64);
        for s in &batch {
            let q = self.encoder.encode(&s.question)?;
            let enc = self.policy.encode(&s.features, &q)?;
            let mut rng = Rng::derived(self.seed, &format!("rl/{}/{}", self.steps, s.sample_id));
            let reference = s.reward_reference();
            let mut scored = Vec::with_capacity(2);
            for _ in 0..self.cfg.samples_per_prompt {
                let seq = sample_response(
                    &self.policy.decoder,
                    &enc.cond,
                    Sampling::Temperature(self.cfg.temperature),
                    &mut rng,
                    max_len,
                )?;
                let text = self.vocab.detokenize(&seq.ids);
                let r = score_text(&text, &reference, &self.weights);
                reward += r.total;
                f1 += r.f1_grounding;
                iou += r.iou_process;
                acc += f64::from(r.answer_correct);
                n += 1.0;
                scored.push((seq, r));
            }
            if let Some(pair) = build_pair(
                s.sample_id,
                (&scored[0].0, &scored[0].1),
                (&scored[1].0, &scored[1].1),
                &self.cfg,
            ) {
                let ref_cond = self.reference.encode(&s.features, &q)?.cond;
                conds.push(PairCondition {
                    policy: enc.cond.clone(),
                    reference: ref_cond,
                });
                pairs.push(pair);
                contexts.push((*s, enc));
            }
        }
        let n = n.max(1.0);
        let mut metrics = RlStepMetrics {
            step: self.steps,
            mean_reward: reward / n,
            mean_f1: f1 / n,
            mean_iou: iou / n,
            answer_acc: acc / n,
            grpo_loss: f64::NAN,
            pair_yield: pairs.len() as f64 / batch.len().max(1) as f64,
        };
        self.steps += 1;
        if pairs.is_empty() {
            self.skipped_steps += 1;
            return Ok(metrics);
        }

        let out = grpo_loss(
            &self.policy.decoder,
            &self.reference.decoder,
            &pairs,
            &conds,
            &self.cfg,
        )?;
        metrics.grpo_loss = out.loss;
        let mut grads = ModelGrads::zeros_like(&self.policy);
        grads.decoder = out.grads;
        if self.cfg.update_egm {
            let k = self.policy.egm.num_queries();
            for ((s, enc), d_cond) in contexts.iter().zip(&out.d_cond) {
                let up = EgmUpstream::zeros(k, s.n_frames(), self.policy.egm.d_v());
                let g = self.policy.egm_grads(&s.features, enc, up, Some(d_cond))?;
                grads.egm.add_assign(&g)?;
            }
        }
        let grads = grads.into_vec();
        if self.cfg.update_egm {
            let mut params = self.policy.params_mut();
            let mut refs: Vec<&mut Matrix> = params.iter_mut().map(|m| &mut **m).collect();
            self.optimizer.step(&mut refs, &grads)?;
        } else {
            let [_, _, embed, w_h, w_out, pos] = self.policy.params_mut();
            self.optimizer
                .step(&mut [embed, w_h, w_out, pos], &grads[2..])?;
        }
        Ok(metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecoderDims, EOS};
    use crate::numerics::grad_check;

    fn breakdown(total: f64) -> RewardBreakdown {
        RewardBreakdown {
            f1_grounding: 0.0,
            iou_process: 0.0,
            answer_correct: 0,
            total,
        }
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec())
    }

    #[test]
    fn pair_ordering_and_ties() {
        let cfg = GrpoConfig {
            tie_epsilon: 0.01,
            ..GrpoConfig::default()
        };
        let (a, b) = (seq(&[2, EOS]), seq(&[3, EOS]));
        let p = build_pair(0, (&a, &breakdown(0.9)), (&b, &breakdown(0.4)), &cfg).unwrap();
        assert_eq!(p.chosen, a);
        assert!((p.reward_gap - 0.5).abs() < 1e-15);
        let p = build_pair(0, (&a, &breakdown(0.4)), (&b, &breakdown(0.9)), &cfg).unwrap();
        assert_eq!(p.chosen, b);
        assert!(build_pair(0, (&a, &breakdown(0.5)), (&b, &breakdown(0.5)), &cfg).is_none());
        assert!(build_pair(0, (&a, &breakdown(0.505)), (&b, &breakdown(0.5)), &cfg).is_none());
    }

    #[test]
    fn pair_loss_values() {
        let (l, _) = dpo_pair_loss(0.1, 0.0, 0.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // -ln σ(0.2), evaluated at 50 digits.
        let (l, _) = dpo_pair_loss(0.1, 1.0, -1.0);
        assert!((l - 0.598_138_869_381_591_8).abs() < 1e-9);
        // Only the margin matters.
        let (a, da) = dpo_pair_loss(0.3, 0.7, -0.2);
        let (b, db) = dpo_pair_loss(0.3, 5.7, 4.8);
        assert!((a - b).abs() < 1e-12 && (da - db).abs() < 1e-12);
    }

    fn toy(seed: u64) -> (DecoderParams, Vec<PreferencePair>, Vec<PairCondition>) {
        let dims = DecoderDims {
            vocab: 7,
            d_embed: 3,
            d_cond: 4,
            d_pos: 2,
            hidden: 5,
            max_len: 8,
        };
        let mut rng = Rng::new(seed);
        let p = DecoderParams::init(dims, &mut rng).unwrap();
        let mut pairs = Vec::new();
        let mut conds = Vec::new();
        for i in 0..3 {
            let mut draw = |len: usize| {
                let mut ids: Vec<usize> = (0..len).map(|_| 2 + rng.below(5)).collect();
                ids.push(EOS);
                seq(&ids)
            };
            let (w, l) = (draw(3), draw(4));
            pairs.push(PreferencePair {
                sample_id: i,
                chosen: w,
                rejected: l,
                reward_gap: 0.1,
            });
            let c: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            conds.push(PairCondition {
                policy: c.clone(),
                reference: c,
            });
        }
        (p, pairs, conds)
    }

    #[test]
    fn loss_is_ln2_at_reference() {
        let (p, pairs, conds) = toy(1);
        let out = grpo_loss(&p, &p, &pairs, &conds, &GrpoConfig::default()).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = GrpoConfig {
            beta: 0.7,
            ..GrpoConfig::default()
        };
        for seed in 0..5 {
            let (p, pairs, conds) = toy(seed);
            let mut theta = p.clone();
            for m in [&mut theta.w_h, &mut theta.w_out] {
                *m = m.map(|x| x * 1.3 + 0.05);
            }
            let params = vec![
                theta.embed.clone(),
                theta.w_h.clone(),
                theta.w_out.clone(),
                theta.pos.clone(),
            ];
            let report = grad_check(
                |m: &[Matrix]| {
                    let d = DecoderParams::new(m[0].clone(), m[1].clone(), m[2].clone(), m[3].clone())?;
                    let out = grpo_loss(&d, &p, &pairs, &conds, &cfg)?;
                    let g = out.grads;
                    Ok((out.loss, vec![g.embed, g.w_h, g.w_out, g.pos]))
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn one_small_step_improves_the_pair() {
        let (p, pairs, conds) = toy(4);
        let pairs = &pairs[..1];
        let conds = &conds[..1];
        let cfg = GrpoConfig::default();
        let before = grpo_loss(&p, &p, pairs, conds, &cfg).unwrap();
        let mut theta = p.clone();
        theta.embed.axpy(-1e-2, &before.grads.embed).unwrap();
        theta.w_h.axpy(-1e-2, &before.grads.w_h).unwrap();
        theta.w_out.axpy(-1e-2, &before.grads.w_out).unwrap();
        theta.pos.axpy(-1e-2, &before.grads.pos).unwrap();
        let after = grpo_loss(&theta, &p, pairs, conds, &cfg).unwrap();
        assert!(after.loss < before.loss);
        let lp = |d: &DecoderParams, y: &TokenSequence| sequence_logprob(d, &conds[0].policy, y).unwrap();
        assert!(lp(&theta, &pairs[0].chosen) > lp(&p, &pairs[0].chosen));
        assert!(lp(&theta, &pairs[0].rejected) < lp(&p, &pairs[0].rejected));
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        let bad = GrpoConfig {
            beta: 0.0,
            ..GrpoConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
