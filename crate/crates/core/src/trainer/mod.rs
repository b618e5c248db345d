//! Two-phase training: supervised fine-tuning on fully annotated samples,
//! then preference refinement against the frozen SFT policy.

mod config;
mod eval;

pub use config::{Settings, TrainConfig};
pub use eval::{auroc, evaluate, score_response, topk_recall, EvalReport, SampleEval};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::datagen::{load_dataset, output_words, Dataset, QuestionEncoder, Split, TrainingSample};
use crate::decoder::{reasoning_loss, TokenSequence, Vocab, EOS};
use crate::egm::grounding_objective;
use crate::error::{CoeError, Result};
use crate::grpo::{RlStepMetrics, RlTrainer};
use crate::model::{CoeModel, ModelConfig, ModelGrads};
use crate::numerics::{Matrix, Optimizer, Rng};
use crate::reward::RewardWeights;

/// Output alphabet for a dataset: protocol tags, one token per second up to
/// the horizon, and the template words.
pub fn build_vocab(ds: &Dataset) -> Result<Vocab> {
    Vocab::for_protocol(ds.config().horizon_seconds(), &output_words())
}

pub fn model_config(ds: &Dataset, vocab: &Vocab, cfg: &TrainConfig) -> ModelConfig {
    ModelConfig {
        num_queries: cfg.num_queries,
        num_layers: cfg.num_layers,
        d_v: ds.meta.d_v,
        d_l: ds.config().d_question,
        d_embed: cfg.d_embed,
        d_pos: cfg.d_pos,
        hidden: cfg.hidden,
        max_len: cfg.max_len,
        vocab: vocab.len(),
        egm_init_scale: cfg.egm_init_scale,
    }
}

/// Target token ids for a sample's annotation, EOS appended.
pub fn target_sequence(sample: &TrainingSample, vocab: &Vocab) -> Result<TokenSequence> {
    let mut ids = vocab.tokenize(&sample.target_text()?)?;
    ids.push(EOS);
    Ok(TokenSequence::new(ids))
}

/// Batch means of the two supervised losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftMetrics {
    pub step: usize,
    pub grounding: f64,
    pub reasoning: f64,
    /// `grounding + λ · reasoning`.
    pub total: f64,
}

/// Loss and gradient of `mean over batch of (L_g + λ L_r)`.
pub fn sft_loss(
    model: &CoeModel,
    batch: &[&TrainingSample],
    vocab: &Vocab,
    encoder: &QuestionEncoder,
    cfg: &TrainConfig,
) -> Result<(SftMetrics, ModelGrads)> {
    if batch.is_empty() {
        return Err(CoeError::Config("empty SFT batch".into()));
    }
    let mut grads = ModelGrads::zeros_like(model);
    let (mut lg, mut lr) = (0.0, 0.0);
    for s in batch {
        if s.split == Split::Rl {
            return Err(CoeError::Schema(format!(
                "sample {} belongs to the RL split and has no supervised annotation",
                s.sample_id
            )));
        }
        let q = encoder.encode(&s.question)?;
        let enc = model.encode(&s.features, &q)?;
        let y = s.key_frame_target()?;
        let (g_loss, upstream) = grounding_objective(&enc.state, &enc.trace, &y, cfg.grounding_loss_mode)?;
        let target = target_sequence(s, vocab)?;
        let r = reasoning_loss(&model.decoder, &enc.cond, &target)?;
        let d_cond: Vec<f64> = r.d_cond.iter().map(|d| d * cfg.lambda).collect();
        let egm = model.egm_grads(&s.features, &enc, upstream, Some(&d_cond))?;
        grads.egm.add_assign(&egm)?;
        grads.decoder.axpy(cfg.lambda, &r.grads)?;
        lg += g_loss;
        lr += r.loss;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    let (grounding, reasoning) = (lg * inv, lr * inv);
    let metrics = SftMetrics {
        step: 0,
        grounding,
        reasoning,
        total: grounding + cfg.lambda * reasoning,
    };
    if !metrics.total.is_finite() {
        return Err(CoeError::Divergence("non-finite SFT loss".into()));
    }
    Ok((metrics, grads))
}

/// One joint optimizer step over all grounding and decoder parameters.
pub fn sft_step(
    model: &mut CoeModel,
    optimizer: &mut Optimizer,
    batch: &[&TrainingSample],
    vocab: &Vocab,
    encoder: &QuestionEncoder,
    cfg: &TrainConfig,
) -> Result<SftMetrics> {
    let (metrics, grads) = sft_loss(model, batch, vocab, encoder, cfg)?;
    let grads = grads.into_vec();
    let mut params = model.params_mut();
    let mut refs: Vec<&mut Matrix> = params.iter_mut().map(|m| &mut **m).collect();
    optimizer.step(&mut refs, &grads)?;
    Ok(metrics)
}

/// Cycles through shuffled epochs of `n` indices in fixed-size batches.
struct BatchSchedule {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSchedule {
    fn new(n: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Everything the two phases share.
pub struct Session<'a> {
    pub dataset: &'a Dataset,
    pub vocab: Vocab,
    pub encoder: QuestionEncoder,
    pub cfg: TrainConfig,
}

impl<'a> Session<'a> {
    pub fn new(dataset: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            vocab: build_vocab(dataset)?,
            encoder: dataset.question_encoder(),
            dataset,
            cfg,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        model_config(self.dataset, &self.vocab, &self.cfg)
    }

    pub fn init_model(&self) -> Result<CoeModel> {
        CoeModel::init(&self.model_config(), &mut Rng::derived(self.cfg.seed, "init"))
    }

    pub fn evaluate(&self, model: &CoeModel) -> Result<(EvalReport, Vec<SampleEval>)> {
        evaluate(
            model,
            &self.dataset.eval,
            &self.vocab,
            &self.encoder,
            &self.cfg.weights,
        )
    }

    /// Runs the SFT phase from `model`; `on_step` sees every step's losses.
    pub fn train_sft(
        &self,
        model: &mut CoeModel,
        mut on_step: impl FnMut(&SftMetrics),
    ) -> Result<()> {
        let samples = &self.dataset.sft;
        if samples.is_empty() && self.cfg.sft_steps > 0 {
            return Err(CoeError::Config("SFT split is empty".into()));
        }
        let mut opt = Optimizer::new(self.cfg.optimizer, self.cfg.sft_lr)?;
        let mut schedule = BatchSchedule::new(samples.len(), Rng::derived(self.cfg.seed, "sft-order"));
        for step in 0..self.cfg.sft_steps {
            let batch: Vec<&TrainingSample> = schedule
                .next(self.cfg.batch_size)
                .into_iter()
                .map(|i| &samples[i])
                .collect();
            let mut m = sft_step(model, &mut opt, &batch, &self.vocab, &self.encoder, &self.cfg)?;
            m.step = step;
            on_step(&m);
        }
        Ok(())
    }

    /// Runs the RL phase with `sft` as both the starting policy and the
    /// frozen reference, using weights `weights` for the training reward.
    pub fn train_rl(
        &self,
        sft: &CoeModel,
        weights: RewardWeights,
        mut on_step: impl FnMut(&RlStepMetrics),
    ) -> Result<CoeModel> {
        let samples = &self.dataset.rl;
        if samples.is_empty() && self.cfg.rl_steps > 0 {
            return Err(CoeError::Config("RL split is empty".into()));
        }
        let mut rl = RlTrainer::new(
            sft.clone(),
            self.vocab.clone(),
            self.encoder.clone(),
            self.cfg.grpo,
            weights,
            Optimizer::new(self.cfg.optimizer, self.cfg.rl_lr)?,
            Rng::derived(self.cfg.seed, "rl").next_u64(),
        )?;
        let mut schedule = BatchSchedule::new(samples.len(), Rng::derived(self.cfg.seed, "rl-order"));
        for _ in 0..self.cfg.rl_steps {
            let batch: Vec<&TrainingSample> = schedule
                .next(self.cfg.rl_batch_size)
                .into_iter()
                .map(|i| &samples[i])
                .collect();
            let m = rl.step(&batch)?;
            on_step(&m);
        }
        if !rl.reference_intact() {
            return Err(CoeError::Divergence("reference policy was modified during RL".into()));
        }
        Ok(rl.policy)
    }

    pub fn checkpoint(&self, model: &CoeModel, phase: &str) -> Checkpoint {
        Checkpoint::from_model(
            model,
            CheckpointMeta {
                model: self.model_config(),
                vocab: self.vocab.tokens().to_vec(),
                extra: serde_json::json!({
                    "phase": phase,
                    "train_config": self.cfg,
                    "dataset_seed": self.dataset.config().seed,
                }),
            },
        )
    }
}

/// Loads a checkpoint and checks it fits `ds`.
pub fn load_model(path: &Path, ds: &Dataset) -> Result<(CoeModel, Vocab)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model()?;
    let vocab = ck.vocab()?;
    if model.egm.d_v() != ds.meta.d_v || model.egm.d_l() != ds.config().d_question {
        return Err(CoeError::Checkpoint(format!(
            "{} was trained on features of width {} and questions of width {}, dataset has {} and {}",
            path.display(),
            model.egm.d_v(),
            model.egm.d_l(),
            ds.meta.d_v,
            ds.config().d_question
        )));
    }
    Ok((model, vocab))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CoeError::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| CoeError::json(path, e))?;
        w.write_all(b"\n").map_err(|e| CoeError::io(path, e))?;
    }
    w.flush().map_err(|e| CoeError::io(path, e))
}

pub fn write_sft_log(path: &Path, rows: &[SftMetrics]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| CoeError::io(path, e);
    writeln!(w, "step,grounding,reasoning,total").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.grounding, r.reasoning, r.total).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_rl_log(path: &Path, rows: &[RlStepMetrics]) -> Result<()> {
    let mut w = create(path)?;
    RlStepMetrics::write_csv(rows, &mut w).map_err(|e| CoeError::io(path, e))?;
    w.flush().map_err(|e| CoeError::io(path, e))
}

/// Phase tag plus report, one line of `reports.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub sft: EvalReport,
    pub rl: EvalReport,
    pub sft_fingerprint: u64,
    pub rl_fingerprint: u64,
}

/// SFT then RL on the dataset in `dataset_dir`. Writes `sft.ckpt`,
/// `rl.ckpt`, both training logs, per-sample eval files and
/// `reports.jsonl` into `out_dir`.
pub fn run_pipeline(dataset_dir: &Path, out_dir: &Path, cfg: &TrainConfig) -> Result<PipelineOutcome> {
    let ds = load_dataset(dataset_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| CoeError::io(out_dir, e))?;
    let session = Session::new(&ds, *cfg)?;

    let mut model = session.init_model()?;
    let mut sft_log = Vec::new();
    session.train_sft(&mut model, |m| sft_log.push(*m))?;
    session.checkpoint(&model, "sft").save(&out_dir.join("sft.ckpt"))?;
    write_sft_log(&out_dir.join("sft_log.csv"), &sft_log)?;
    let (sft_report, sft_rows) = session.evaluate(&model)?;
    write_jsonl(&out_dir.join("eval_sft.jsonl"), &sft_rows)?;

    let mut rl_log = Vec::new();
    let rl_model = session.train_rl(&model, cfg.weights, |m| rl_log.push(*m))?;
    session.checkpoint(&rl_model, "rl").save(&out_dir.join("rl.ckpt"))?;
    write_rl_log(&out_dir.join("rl_log.csv"), &rl_log)?;
    let (rl_report, rl_rows) = session.evaluate(&rl_model)?;
    write_jsonl(&out_dir.join("eval_rl.jsonl"), &rl_rows)?;

    write_jsonl(
        &out_dir.join("reports.jsonl"),
        &[
            PhaseReport {
                phase: "sft".into(),
                report: sft_report,
            },
            PhaseReport {
                phase: "rl".into(),
                report: rl_report,
            },
        ],
    )?;
    Ok(PipelineOutcome {
        sft: sft_report,
        rl: rl_report,
        sft_fingerprint: model.fingerprint(),
        rl_fingerprint: rl_model.fingerprint(),
    })
}

/// Held-out reports for RL with the given weights and with `w_p = 0`,
/// both started from `sft`. Both are evaluated under the session's weights.
pub fn process_reward_ablation(
    session: &Session<'_>,
    sft: &CoeModel,
) -> Result<(EvalReport, EvalReport)> {
    let with = session.train_rl(sft, session.cfg.weights, |_| {})?;
    let without_weights = RewardWeights {
        w_p: 0.0,
        ..session.cfg.weights
    };
    let without = session.train_rl(sft, without_weights, |_| {})?;
    Ok((session.evaluate(&with)?.0, session.evaluate(&without)?.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatagenConfig};

    fn toy(n_sft: usize) -> Dataset {
        generate_dataset(&DatagenConfig {
            n_sft,
            n_rl: 8,
            n_eval: 8,
            ..DatagenConfig::default()
        })
        .unwrap()
    }

    fn max_abs(m: &Matrix) -> f64 {
        m.data().iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    #[test]
    fn reported_total_recombines_exactly() {
        let ds = toy(8);
        for lambda in [0.0, 0.3, 1.0, 2.5] {
            let cfg = TrainConfig {
                lambda,
                ..TrainConfig::default()
            };
            let s = Session::new(&ds, cfg).unwrap();
            let model = s.init_model().unwrap();
            let batch: Vec<&TrainingSample> = ds.sft.iter().collect();
            let (m, _) = sft_loss(&model, &batch, &s.vocab, &s.encoder, &cfg).unwrap();
            assert_eq!(m.total, m.grounding + lambda * m.reasoning);
        }
    }

    #[test]
    fn zero_lambda_trains_only_through_grounding() {
        let ds = toy(8);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let s = Session::new(&ds, cfg).unwrap();
        let model = s.init_model().unwrap();
        let batch: Vec<&TrainingSample> = ds.sft.iter().collect();
        let (_, g) = sft_loss(&model, &batch, &s.vocab, &s.encoder, &cfg).unwrap();
        for m in [&g.decoder.embed, &g.decoder.w_h, &g.decoder.w_out, &g.decoder.pos] {
            assert_eq!(max_abs(m), 0.0);
        }
        assert!(max_abs(&g.egm.base_queries) > 0.0);

        let mut moved = model.clone();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.sft_lr).unwrap();
        sft_step(&mut moved, &mut opt, &batch, &s.vocab, &s.encoder, &cfg).unwrap();
        assert_ne!(moved.egm.base_queries, model.egm.base_queries);
        assert_eq!(moved.decoder, model.decoder);
    }

    #[test]
    fn rl_split_samples_are_rejected() {
        let ds = toy(4);
        let s = Session::new(&ds, TrainConfig::default()).unwrap();
        let model = s.init_model().unwrap();
        let batch = [&ds.sft[0], &ds.rl[0]];
        let err = sft_loss(&model, &batch, &s.vocab, &s.encoder, &s.cfg).unwrap_err();
        assert!(matches!(err, CoeError::Schema(_)), "{err}");
    }

    #[test]
    fn small_set_loss_drops_below_a_quarter() {
        let ds = toy(50);
        let cfg = TrainConfig {
            sft_steps: 500,
            ..TrainConfig::default()
        };
        let s = Session::new(&ds, cfg).unwrap();
        let mut model = s.init_model().unwrap();
        let all: Vec<&TrainingSample> = ds.sft.iter().collect();
        let before = sft_loss(&model, &all, &s.vocab, &s.encoder, &cfg).unwrap().0.total;
        s.train_sft(&mut model, |_| {}).unwrap();
        let after = sft_loss(&model, &all, &s.vocab, &s.encoder, &cfg).unwrap().0.total;
        assert!(after < 0.25 * before, "{before} -> {after}");
    }

    #[test]
    fn batch_schedule_visits_every_index_each_epoch() {
        let mut b = BatchSchedule::new(10, Rng::new(1));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
