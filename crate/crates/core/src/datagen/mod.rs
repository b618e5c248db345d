//! Synthetic event worlds and fully annotated question/evidence/answer
//! samples generated from their ground-truth state.

pub mod audit;
mod io;
mod render;
mod templates;
mod world;

pub use io::{emit_dataset, load_dataset, read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION, read_reward_references};
pub use render::{cosine, render_features, EmbeddingTable, RenderConfig, MAX_KIND_COSINE};
pub use templates::{
    instantiate, instantiate_any, output_words, question_words, Instantiated, TemplateKind,
};
pub use world::{generate_world, Color, Event, EventKind, Object, Shape, WorldConfig, WorldSpec};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::egm::{FrameFeatures, KeyFrameTarget, QuestionEmbedding};
use crate::error::{CoeError, Result};
use crate::numerics::{Matrix, Rng};
use crate::protocol::{serialize_response, CoeResponse, FrameSet};
use crate::reward::RewardReference;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub seed: u64,
    pub n_sft: usize,
    pub n_rl: usize,
    pub n_eval: usize,
    pub world: WorldConfig,
    pub render: RenderConfig,
    /// Question embedding width D_l.
    pub d_question: usize,
    /// Largest number of key frames a question may have (the number of
    /// evidence queries K).
    pub max_evidence: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_sft: 2000,
            n_rl: 200,
            n_eval: 200,
            world: WorldConfig::default(),
            render: RenderConfig::default(),
            d_question: 16,
            max_evidence: 4,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.d_question == 0 || self.max_evidence == 0 {
            return Err(CoeError::Config(
                "question width and evidence bound must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Keys accepted by [`DatagenConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "seed", "n_sft", "n_rl", "n_eval", "n_frames", "fps", "min_objects", "max_objects", "min_events",
        "max_events", "d_content", "content_scale", "time_scale", "noise", "d_question", "max_evidence",
    ];

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| CoeError::Config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "n_sft" => self.n_sft = num(key, v)?,
            "n_rl" => self.n_rl = num(key, v)?,
            "n_eval" => self.n_eval = num(key, v)?,
            "n_frames" => self.world.n_frames = num(key, v)?,
            "fps" => self.world.fps = num(key, v)?,
            "min_objects" => self.world.min_objects = num(key, v)?,
            "max_objects" => self.world.max_objects = num(key, v)?,
            "min_events" => self.world.min_events = num(key, v)?,
            "max_events" => self.world.max_events = num(key, v)?,
            "d_content" => self.render.d_content = num(key, v)?,
            "content_scale" => self.render.content_scale = num(key, v)?,
            "time_scale" => self.render.time_scale = num(key, v)?,
            "noise" => self.render.noise = num(key, v)?,
            "d_question" => self.d_question = num(key, v)?,
            "max_evidence" => self.max_evidence = num(key, v)?,
            other => return Err(CoeError::Config(format!("unknown dataset key {other:?}"))),
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.render.d_content + self.world.n_frames
    }

    /// Last representable second of the video; anchors end at most here.
    pub fn horizon_seconds(&self) -> u32 {
        (self.world.n_frames as f64 / self.world.fps).ceil() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Sft,
    Rl,
    Eval,
}

/// Fixed random word embeddings for question text.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionEncoder {
    index: HashMap<String, usize>,
    table: Matrix,
}

impl QuestionEncoder {
    pub fn new(words: &[&str], dim: usize, rng: &mut Rng) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_string(), i))
            .collect();
        let table = Matrix::from_fn(words.len(), dim, |_, _| rng.normal());
        Self { index, table }
    }

    pub fn for_config(cfg: &DatagenConfig) -> Self {
        Self::new(
            &question_words(),
            cfg.d_question,
            &mut Rng::derived(cfg.seed, "question-embeddings"),
        )
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn words(question: &str) -> Vec<String> {
        question
            .to_lowercase()
            .replace('?', " ")
            .split_whitespace()
            .map(String::from)
            .collect()
    }

    pub fn encode(&self, question: &str) -> Result<QuestionEmbedding> {
        let words = Self::words(question);
        let mut rows = Vec::with_capacity(words.len());
        for w in &words {
            let i = self
                .index
                .get(w)
                .ok_or_else(|| CoeError::Schema(format!("unknown question word {w:?}")))?;
            rows.push(self.table.row(*i).to_vec());
        }
        QuestionEmbedding::new(Matrix::from_rows(&rows)?)
    }
}

/// One annotated sample with its rendered features.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub sample_id: u64,
    pub split: Split,
    pub template: TemplateKind,
    pub question: String,
    pub key_frames: FrameSet,
    pub reasoning_guidance: String,
    pub answer: String,
    pub features: FrameFeatures,
    pub world: WorldSpec,
}

impl TrainingSample {
    pub fn n_frames(&self) -> usize {
        self.features.n_frames()
    }

    /// The annotation as a protocol response: one anchor per key frame.
    pub fn target_response(&self) -> CoeResponse {
        CoeResponse::new(
            self.key_frames.to_intervals(),
            &self.reasoning_guidance,
            &self.answer,
        )
    }

    pub fn target_text(&self) -> Result<String> {
        Ok(serialize_response(&self.target_response())?)
    }

    pub fn key_frame_target(&self) -> Result<KeyFrameTarget> {
        KeyFrameTarget::from_indices(self.key_frames.indices(), self.n_frames())
    }

    pub fn reward_reference(&self) -> RewardReference {
        RewardReference {
            key_frames: self.key_frames.clone(),
            answer: self.answer.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub config: DatagenConfig,
    pub d_v: usize,
    pub question_words: Vec<String>,
    pub output_words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub sft: Vec<TrainingSample>,
    pub rl: Vec<TrainingSample>,
    pub eval: Vec<TrainingSample>,
}

impl Dataset {
    pub fn config(&self) -> &DatagenConfig {
        &self.meta.config
    }

    pub fn all(&self) -> impl Iterator<Item = &TrainingSample> {
        self.sft.iter().chain(&self.rl).chain(&self.eval)
    }

    pub fn find(&self, sample_id: u64) -> Option<&TrainingSample> {
        self.all().find(|s| s.sample_id == sample_id)
    }

    pub fn question_encoder(&self) -> QuestionEncoder {
        QuestionEncoder::for_config(&self.meta.config)
    }
}

pub fn embedding_table(cfg: &DatagenConfig) -> Result<EmbeddingTable> {
    EmbeddingTable::new(cfg.render, &mut Rng::derived(cfg.seed, "embedding-table"))
}

/// Generates the sample with id `sample_id`; a pure function of
/// `(cfg, table, sample_id, split)`.
pub fn generate_sample(
    cfg: &DatagenConfig,
    table: &EmbeddingTable,
    sample_id: u64,
    split: Split,
) -> Result<TrainingSample> {
    let mut rng = Rng::derived(cfg.seed, &format!("sample/{sample_id}"));
    for _ in 0..100 {
        let world = generate_world(&cfg.world, &mut rng)?;
        let Some(inst) = instantiate_any(&world, cfg.max_evidence, &mut rng) else {
            continue;
        };
        let features = render_features(&world, table, &mut rng.fork("render"))?;
        return Ok(TrainingSample {
            sample_id,
            split,
            template: inst.template,
            question: inst.question,
            key_frames: FrameSet::new(inst.key_frames, world.fps, world.n_frames),
            reasoning_guidance: inst.draft,
            answer: inst.answer,
            features,
            world,
        });
    }
    Err(CoeError::Config(format!(
        "no question template applies to sample {sample_id} after 100 worlds"
    )))
}

pub fn generate_dataset(cfg: &DatagenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let table = embedding_table(cfg)?;
    let mut next_id = 0u64;
    let mut make = |n: usize, split: Split| -> Result<Vec<TrainingSample>> {
        let out = (0..n as u64)
            .map(|i| generate_sample(cfg, &table, next_id + i, split))
            .collect();
        next_id += n as u64;
        out
    };
    let sft = make(cfg.n_sft, Split::Sft)?;
    let rl = make(cfg.n_rl, Split::Rl)?;
    let eval = make(cfg.n_eval, Split::Eval)?;
    Ok(Dataset {
        meta: DatasetMeta {
            format_version: 1,
            config: *cfg,
            d_v: cfg.feature_dim(),
            question_words: question_words().into_iter().map(String::from).collect(),
            output_words: output_words(),
        },
        sft,
        rl,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse_response;

    fn world_with(events: Vec<Event>, objects: Vec<Object>) -> WorldSpec {
        WorldSpec {
            n_frames: 32,
            fps: 1.0,
            objects,
            events,
        }
    }

    fn obj(color: Color, shape: Shape) -> Object {
        Object { color, shape }
    }

    fn ev(kind: EventKind, subject: usize, partner: Option<usize>, frame: usize) -> Event {
        Event {
            kind,
            subject,
            partner,
            frame,
        }
    }

    #[test]
    fn worlds_are_deterministic() {
        let cfg = WorldConfig::default();
        let a = generate_world(&cfg, &mut Rng::new(11)).unwrap();
        let b = generate_world(&cfg, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_events_gives_appearances_only() {
        let cfg = WorldConfig {
            min_events: 0,
            max_events: 0,
            ..WorldConfig::default()
        };
        for seed in 0..50 {
            let w = generate_world(&cfg, &mut Rng::new(seed)).unwrap();
            assert!(w.events.iter().all(|e| e.kind == EventKind::Appear));
            assert_eq!(w.events.len(), w.objects.len());
        }
    }

    #[test]
    fn generated_scripts_satisfy_invariants() {
        let cfg = WorldConfig::default();
        for seed in 0..10_000 {
            let w = generate_world(&cfg, &mut Rng::new(seed)).unwrap();
            w.validate().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            let others = w.events.len() - w.objects.len();
            assert!((2..=6).contains(&others));
            assert!((3..=5).contains(&w.objects.len()));
        }
    }

    #[test]
    fn validation_catches_broken_scripts() {
        let objs = vec![obj(Color::Red, Shape::Square), obj(Color::Blue, Shape::Circle)];
        let early = world_with(
            vec![ev(EventKind::Move, 0, None, 1), ev(EventKind::Appear, 0, None, 2)],
            objs.clone(),
        );
        assert!(early.validate().is_err());
        let self_hit = world_with(
            vec![
                ev(EventKind::Appear, 0, None, 0),
                ev(EventKind::Appear, 1, None, 1),
                ev(EventKind::Collide, 0, Some(0), 2),
            ],
            objs.clone(),
        );
        assert!(self_hit.validate().is_err());
        let clash = world_with(
            vec![
                ev(EventKind::Appear, 0, None, 0),
                ev(EventKind::Appear, 1, None, 1),
                ev(EventKind::Move, 0, None, 3),
                ev(EventKind::Collide, 1, Some(0), 3),
            ],
            objs,
        );
        assert!(clash.validate().is_err());
    }

    #[test]
    fn first_appear_template() {
        let w = world_with(
            vec![
                ev(EventKind::Appear, 1, None, 2),
                ev(EventKind::Appear, 0, None, 7),
            ],
            vec![obj(Color::Red, Shape::Square), obj(Color::Green, Shape::Circle)],
        );
        let mut rng = Rng::new(0);
        let inst = loop {
            let i = instantiate(&w, TemplateKind::FirstAppear, 4, &mut rng).unwrap();
            if i.question.contains("red square") {
                break i;
            }
        };
        assert_eq!(inst.question, "When does the red square first appear?");
        assert_eq!(inst.key_frames, vec![7]);
        assert_eq!(crate::protocol::extract_draft_timestamps(&inst.draft), vec![7]);
        assert_eq!(inst.answer, "00:07");
    }

    #[test]
    fn collide_template_needs_a_collision() {
        let w = world_with(
            vec![ev(EventKind::Appear, 0, None, 0), ev(EventKind::Move, 0, None, 3)],
            vec![obj(Color::Red, Shape::Square)],
        );
        assert!(instantiate(&w, TemplateKind::Collide, 4, &mut Rng::new(0)).is_none());
    }

    #[test]
    fn count_template_over_moves() {
        let w = world_with(
            vec![
                ev(EventKind::Appear, 0, None, 0),
                ev(EventKind::Move, 0, None, 3),
                ev(EventKind::Move, 0, None, 9),
                ev(EventKind::Move, 0, None, 20),
            ],
            vec![obj(Color::Red, Shape::Square)],
        );
        let mut rng = Rng::new(0);
        let inst = loop {
            let i = instantiate(&w, TemplateKind::Count, 4, &mut rng).unwrap();
            if i.question.contains("move") {
                break i;
            }
        };
        assert_eq!(inst.answer, "3");
        assert_eq!(inst.key_frames, vec![3, 9, 20]);
    }

    #[test]
    fn zero_noise_features_depend_only_on_content() {
        let cfg = RenderConfig {
            noise: 0.0,
            ..RenderConfig::default()
        };
        let table = EmbeddingTable::new(cfg, &mut Rng::new(1)).unwrap();
        let w = world_with(
            vec![ev(EventKind::Appear, 0, None, 3), ev(EventKind::Move, 0, None, 5)],
            vec![obj(Color::Red, Shape::Square)],
        );
        let f = render_features(&w, &table, &mut Rng::new(2)).unwrap();
        // Two background frames share content; only the time code differs.
        let d = cfg.d_content;
        assert_eq!(f.features.row(0)[..d], f.features.row(1)[..d]);
        assert_eq!(f.features.row(0)[..d], table.background[..]);
        assert_eq!(f.features.row(3).to_vec(), table.clean_row(&w, 3));
    }

    #[test]
    fn noisy_features_stay_near_event_embeddings() {
        let cfg = RenderConfig::default();
        let table = EmbeddingTable::new(cfg, &mut Rng::new(3)).unwrap();
        let w = generate_world(&WorldConfig::default(), &mut Rng::new(4)).unwrap();
        let f = render_features(&w, &table, &mut Rng::new(5)).unwrap();
        let d = f.dim() as f64;
        // ‖noise‖ concentrates at σ√d; 2σ√d bounds it with overwhelming probability.
        let radius = 2.0 * cfg.noise * d.sqrt();
        for i in 0..w.n_frames {
            let clean = table.clean_row(&w, i);
            let dist: f64 = f
                .features
                .row(i)
                .iter()
                .zip(&clean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist < radius, "frame {i}: {dist}");
        }
    }

    #[test]
    fn kind_embeddings_are_nearly_orthogonal() {
        for seed in 0..20 {
            let t = EmbeddingTable::new(RenderConfig::default(), &mut Rng::new(seed)).unwrap();
            for i in 0..4 {
                for j in i + 1..4 {
                    assert!(cosine(&t.kinds[i], &t.kinds[j]) < MAX_KIND_COSINE);
                }
            }
        }
    }

    #[test]
    fn samples_are_sound() {
        let cfg = DatagenConfig {
            n_sft: 300,
            n_rl: 30,
            n_eval: 30,
            ..DatagenConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let enc = ds.question_encoder();
        let mut seen = std::collections::HashSet::new();
        for s in ds.all() {
            seen.insert(s.template);
            let q = audit::parse_question(&s.world, &s.question).expect("question parses");
            let (answer, mut frames) = audit::derive(&s.world, &q).expect("derivable");
            frames.sort_unstable();
            assert_eq!(answer, s.answer, "{}", s.question);
            assert_eq!(frames, s.key_frames.indices());
            assert!(!s.key_frames.is_empty() && s.key_frames.len() <= cfg.max_evidence);
            for &f in s.key_frames.indices() {
                assert!(s.world.events.iter().any(|e| e.frame == f));
            }
            let text = s.target_text().unwrap();
            let parsed = parse_response(&text).unwrap();
            let cited = crate::protocol::extract_draft_timestamps(&parsed.draft);
            let cited: Vec<usize> = cited.iter().map(|&t| t as usize).collect();
            assert_eq!(cited, s.key_frames.indices());
            enc.encode(&s.question).unwrap();
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn dataset_is_a_pure_function_of_config() {
        let cfg = DatagenConfig {
            n_sft: 20,
            n_rl: 5,
            n_eval: 5,
            seed: 99,
            ..DatagenConfig::default()
        };
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
    }
}
