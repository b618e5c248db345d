//! Composite evidence reward: grounding F1 of the predicted anchors against
//! the key frames, IoU between draft citations and the predicted anchors
//! (the process term), and exact answer match. Everything is computed over
//! discrete frame sets.

use serde::{Deserialize, Serialize};

use crate::error::{CoeError, Result};
use crate::protocol::{
    extract_draft_timestamps, intervals_to_frames, points_to_frames, CoeResponse, FrameSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_g: f64,
    pub w_p: f64,
    pub w_a: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_g: 0.3,
            w_p: 0.3,
            w_a: 0.4,
        }
    }
}

impl RewardWeights {
    pub fn new(w_g: f64, w_p: f64, w_a: f64) -> Result<Self> {
        let w = Self { w_g, w_p, w_a };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_g, self.w_p, self.w_a];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().sum::<f64>() <= 0.0 {
            return Err(CoeError::Config(format!(
                "reward weights must be nonnegative with a positive sum, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn max_reward(&self) -> f64 {
        self.w_g + self.w_p + self.w_a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub f1_grounding: f64,
    pub iou_process: f64,
    pub answer_correct: u8,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn assemble(f1: f64, iou: f64, answer_correct: u8, w: &RewardWeights) -> Self {
        Self {
            f1_grounding: f1,
            iou_process: iou,
            answer_correct,
            total: w.w_g * f1 + w.w_p * iou + w.w_a * f64::from(answer_correct),
        }
    }

    /// The score given to an unparseable response.
    pub fn protocol_violation() -> Self {
        Self {
            f1_grounding: 0.0,
            iou_process: 0.0,
            answer_correct: 0,
            total: 0.0,
        }
    }
}

/// Ground truth needed to score one response.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardReference {
    pub key_frames: FrameSet,
    pub answer: String,
}

/// `2|P ∩ G| / (|P| + |G|)`, zero when both are empty.
pub fn f1_frames(pred: &FrameSet, gt: &FrameSet) -> f64 {
    let denom = pred.len() + gt.len();
    if denom == 0 {
        return 0.0;
    }
    2.0 * pred.intersection_len(gt) as f64 / denom as f64
}

/// `|A ∩ B| / |A ∪ B|`, zero when the union is empty.
pub fn temporal_iou(cited: &FrameSet, anchored: &FrameSet) -> f64 {
    let inter = cited.intersection_len(anchored);
    let union = cited.len() + anchored.len() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

pub fn answer_indicator(pred: &str, gt: &str) -> u8 {
    let p = pred.trim();
    u8::from(!p.is_empty() && p.to_lowercase() == gt.trim().to_lowercase())
}

pub fn composite_reward(
    resp: &CoeResponse,
    gt: &RewardReference,
    w: &RewardWeights,
) -> RewardBreakdown {
    let fps = gt.key_frames.fps;
    let n = gt.key_frames.n_frames;
    let anchored = intervals_to_frames(&resp.anchors, fps, n);
    let cited = points_to_frames(&extract_draft_timestamps(&resp.draft), fps, n);
    RewardBreakdown::assemble(
        f1_frames(&anchored, &gt.key_frames),
        temporal_iou(&cited, &anchored),
        answer_indicator(&resp.answer, &gt.answer),
        w,
    )
}

/// Parses then scores; unparseable text gets [`RewardBreakdown::protocol_violation`].
pub fn score_text(text: &str, gt: &RewardReference, w: &RewardWeights) -> RewardBreakdown {
    match crate::protocol::parse_response(text) {
        Ok(r) => composite_reward(&r, gt, w),
        Err(_) => RewardBreakdown::protocol_violation(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::TimeInterval;

    fn fs(ix: &[usize]) -> FrameSet {
        FrameSet::new(ix.to_vec(), 1.0, 32)
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_frames(&fs(&[2, 3]), &fs(&[2, 3, 4])), 0.8);
        assert_eq!(f1_frames(&fs(&[1, 5]), &fs(&[1, 5])), 1.0);
        assert_eq!(f1_frames(&fs(&[1]), &fs(&[2])), 0.0);
        assert_eq!(f1_frames(&fs(&[]), &fs(&[])), 0.0);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(&fs(&[5]), &fs(&[5, 6, 7, 8, 9])), 0.2);
        assert_eq!(temporal_iou(&fs(&[3, 4]), &fs(&[3, 4])), 1.0);
        assert_eq!(temporal_iou(&fs(&[]), &fs(&[3, 4])), 0.0);
        assert_eq!(temporal_iou(&fs(&[]), &fs(&[])), 0.0);
    }

    #[test]
    fn answer_matching() {
        assert_eq!(answer_indicator("Yes", "yes"), 1);
        assert_eq!(answer_indicator("  yes ", "YES"), 1);
        assert_eq!(answer_indicator("A", "B"), 0);
        assert_eq!(answer_indicator("", "Yes"), 0);
    }

    #[test]
    fn worked_composite_value() {
        // 0.3·0.8 + 0.3·0.2 + 0.4·1
        let b = RewardBreakdown::assemble(0.8, 0.2, 1, &RewardWeights::default());
        assert!((b.total - 0.70).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_ungrounded_responses() {
        let w = RewardWeights::default();
        let gt = RewardReference {
            key_frames: fs(&[5, 12]),
            answer: "yes".into(),
        };
        let perfect = CoeResponse::new(
            vec![TimeInterval::new(5.0, 6.0).unwrap(), TimeInterval::new(12.0, 13.0).unwrap()],
            "collides at 00:05 and at 00:12",
            "Yes",
        );
        let b = composite_reward(&perfect, &gt, &w);
        assert_eq!(b.total, w.max_reward());

        let ungrounded = CoeResponse::new(vec![], "just trust me", "yes");
        let b = composite_reward(&ungrounded, &gt, &w);
        assert_eq!((b.f1_grounding, b.iou_process, b.answer_correct), (0.0, 0.0, 1));
        assert_eq!(b.total, w.w_a);

        assert_eq!(score_text("garbage", &gt, &w), RewardBreakdown::protocol_violation());
    }

    #[test]
    fn weights_validation() {
        assert!(RewardWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(RewardWeights::new(-0.1, 0.5, 0.5).is_err());
        assert!(RewardWeights::new(0.0, 0.0, 1.0).is_ok());
    }
}
