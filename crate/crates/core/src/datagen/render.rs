//! Seeded event embeddings standing in for a video encoder.
//!
//! A frame's feature row is `[content ; time code]`. The content block is the
//! sum of the embeddings of the frame's events (kind + subject attributes,
//! plus partner attributes for collisions), or a background embedding when
//! nothing happens. The time code is `time_scale · onehot(frame)`. Gaussian
//! noise is added to every coordinate.

use serde::{Deserialize, Serialize};

use super::world::{Color, Event, EventKind, Shape, WorldSpec};
use crate::egm::FrameFeatures;
use crate::error::{CoeError, Result};
use crate::numerics::{dot, Matrix, Rng};

/// Kind embeddings are re-drawn until every pair has cosine below this.
pub const MAX_KIND_COSINE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub d_content: usize,
    pub content_scale: f64,
    pub time_scale: f64,
    pub noise: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            d_content: 32,
            content_scale: 0.5,
            time_scale: 2.0,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub kinds: Vec<Vec<f64>>,
    pub colors: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub config: RenderConfig,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn max_pairwise_cosine(vs: &[Vec<f64>]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            worst = worst.max(cosine(&vs[i], &vs[j]));
        }
    }
    worst
}

impl EmbeddingTable {
    pub fn new(config: RenderConfig, rng: &mut Rng) -> Result<Self> {
        if config.d_content == 0 {
            return Err(CoeError::Config("content width must be positive".into()));
        }
        let draw = |rng: &mut Rng| -> Vec<f64> {
            (0..config.d_content)
                .map(|_| config.content_scale * rng.normal())
                .collect()
        };
        let mut kinds = Vec::new();
        for attempt in 0.. {
            kinds = (0..EventKind::ALL.len()).map(|_| draw(rng)).collect();
            if max_pairwise_cosine(&kinds) < MAX_KIND_COSINE {
                break;
            }
            if attempt > 10_000 {
                return Err(CoeError::Config(format!(
                    "could not draw kind embeddings with cosine < {MAX_KIND_COSINE} at width {}",
                    config.d_content
                )));
            }
        }
        let colors = (0..Color::ALL.len()).map(|_| draw(rng)).collect();
        let shapes = (0..Shape::ALL.len()).map(|_| draw(rng)).collect();
        let background = draw(rng);
        Ok(Self {
            kinds,
            colors,
            shapes,
            background,
            config,
        })
    }

    pub fn event_content(&self, w: &WorldSpec, e: &Event) -> Vec<f64> {
        let mut out = self.kinds[e.kind.index()].clone();
        for o in std::iter::once(e.subject).chain(e.partner) {
            let obj = w.objects[o];
            for ((x, c), s) in out
                .iter_mut()
                .zip(&self.colors[obj.color.index()])
                .zip(&self.shapes[obj.shape.index()])
            {
                *x += c + s;
            }
        }
        out
    }

    /// Noise-free feature row for `frame`.
    pub fn clean_row(&self, w: &WorldSpec, frame: usize) -> Vec<f64> {
        let mut content = vec![0.0; self.config.d_content];
        let mut any = false;
        for e in w.events.iter().filter(|e| e.frame == frame) {
            any = true;
            for (c, v) in content.iter_mut().zip(self.event_content(w, e)) {
                *c += v;
            }
        }
        if !any {
            content.copy_from_slice(&self.background);
        }
        let mut time = vec![0.0; w.n_frames];
        time[frame] = self.config.time_scale;
        content.extend(time);
        content
    }

    pub fn feature_dim(&self, n_frames: usize) -> usize {
        self.config.d_content + n_frames
    }
}

pub fn render_features(w: &WorldSpec, table: &EmbeddingTable, rng: &mut Rng) -> Result<FrameFeatures> {
    let d = table.feature_dim(w.n_frames);
    let noise = table.config.noise;
    let mut m = Matrix::zeros(w.n_frames, d);
    for i in 0..w.n_frames {
        let clean = table.clean_row(w, i);
        for (x, c) in m.row_mut(i).iter_mut().zip(clean) {
            *x = if noise > 0.0 { c + noise * rng.normal() } else { c };
        }
    }
    FrameFeatures::new(m, w.fps)
}
