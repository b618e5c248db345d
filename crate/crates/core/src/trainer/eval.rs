use serde::{Deserialize, Serialize};

use crate::datagen::{QuestionEncoder, TrainingSample};
use crate::decoder::{Sampling, Vocab};
use crate::error::Result;
use crate::model::CoeModel;
use crate::numerics::Rng;
use crate::protocol::parse_response;
use crate::reward::{score_text, RewardWeights};

/// Aggregate held-out metrics. Rates lie in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Frame-importance scores ranked against key-frame labels, pooled over
    /// all frames of all samples.
    pub grounding_auroc: f64,
    /// Mean fraction of key frames among the top-|GT| importance scores.
    pub topk_recall: f64,
    pub answer_accuracy: f64,
    pub mean_reward: f64,
    pub mean_f1: f64,
    pub mean_iou: f64,
    /// Mean generated length in tokens, EOS included.
    pub mean_length: f64,
    pub validity_rate: f64,
}

/// Per-sample breakdown, one line of the eval JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub sample_id: u64,
    pub f1: f64,
    pub iou: f64,
    pub answer: u8,
    pub reward: f64,
    pub valid: bool,
    pub length: usize,
    pub response: String,
}

/// Area under the ROC curve via the rank-sum statistic, ties counted half.
/// Returns 0.5 when either class is empty.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    (rank_sum - p * (p + 1.0) / 2.0) / (p * n)
}

/// Fraction of `key` frames among the `|key|` highest scores (lower index
/// wins ties).
pub fn topk_recall(scores: &[f64], key: &[usize]) -> f64 {
    if key.is_empty() {
        return 1.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let hits = order[..key.len().min(order.len())]
        .iter()
        .filter(|i| key.contains(i))
        .count();
    hits as f64 / key.len() as f64
}

/// Scores one generated response against the sample's annotation. A
/// truncated or unparseable response is invalid.
pub fn score_response(
    sample: &TrainingSample,
    text: String,
    truncated: bool,
    length: usize,
    weights: &RewardWeights,
) -> SampleEval {
    let valid = !truncated && parse_response(&text).is_ok();
    let r = score_text(&text, &sample.reward_reference(), weights);
    SampleEval {
        sample_id: sample.sample_id,
        f1: r.f1_grounding,
        iou: r.iou_process,
        answer: r.answer_correct,
        reward: r.total,
        valid,
        length,
        response: text,
    }
}

/// Greedy decoding over `samples`.
pub fn evaluate(
    model: &CoeModel,
    samples: &[TrainingSample],
    vocab: &Vocab,
    encoder: &QuestionEncoder,
    weights: &RewardWeights,
) -> Result<(EvalReport, Vec<SampleEval>)> {
    let max_len = model.decoder.dims()?.max_len;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut per = Vec::with_capacity(samples.len());
    let mut recall = 0.0;
    // Greedy decoding never draws from the stream.
    let mut rng = Rng::new(0);
    for s in samples {
        let q = encoder.encode(&s.question)?;
        let (seq, enc) = model.generate(&s.features, &q, Sampling::Greedy, &mut rng, max_len)?;
        let imp = &enc.state.importance;
        scores.extend_from_slice(imp);
        labels.extend((0..imp.len()).map(|i| s.key_frames.contains(i)));
        recall += topk_recall(imp, s.key_frames.indices());

        let text = vocab.detokenize(&seq.ids);
        per.push(score_response(s, text, seq.truncated, seq.ids.len(), weights));
    }
    let n = samples.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SampleEval) -> f64| per.iter().map(f).sum::<f64>() / n;
    let report = EvalReport {
        n_samples: samples.len(),
        grounding_auroc: auroc(&scores, &labels),
        topk_recall: recall / n,
        answer_accuracy: mean(&|e| f64::from(e.answer)),
        mean_reward: mean(&|e| e.reward),
        mean_f1: mean(&|e| e.f1),
        mean_iou: mean(&|e| e.iou),
        mean_length: mean(&|e| e.length as f64),
        validity_rate: mean(&|e| f64::from(u8::from(e.valid))),
    };
    Ok((report, per))
}
