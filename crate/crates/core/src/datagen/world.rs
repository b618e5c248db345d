use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoeError, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Appear,
    Disappear,
    Move,
    Collide,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [
        EventKind::Appear,
        EventKind::Disappear,
        EventKind::Move,
        EventKind::Collide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Appear => "appear",
            EventKind::Disappear => "disappear",
            EventKind::Move => "move",
            EventKind::Collide => "collide",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
}

impl fmt::Display for Object {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.shape.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub subject: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<usize>,
    pub frame: usize,
}

impl Event {
    pub fn involves(&self, object: usize) -> bool {
        self.subject == object || self.partner == Some(object)
    }
}

/// Ground-truth state of one synthetic video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_frames: usize,
    pub fps: f64,
    pub objects: Vec<Object>,
    /// Sorted by frame.
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_frames: usize,
    pub fps: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Bounds on events other than the initial appearances.
    pub min_events: usize,
    pub max_events: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_frames: 32,
            fps: 1.0,
            min_objects: 3,
            max_objects: 5,
            min_events: 2,
            max_events: 6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let distinct_objects = Color::ALL.len() * Shape::ALL.len();
        let err = |m: String| Err(CoeError::Config(m));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return err(format!("fps must be positive, got {}", self.fps));
        }
        let period = 1.0 / self.fps;
        if (period - period.round()).abs() > 1e-12 {
            return err(format!(
                "1/fps must be a whole number of seconds so frames map to MM:SS anchors, got fps {}",
                self.fps
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return err("object bounds must satisfy 1 <= min <= max".into());
        }
        if self.max_objects > distinct_objects {
            return err(format!("at most {distinct_objects} distinct objects are available"));
        }
        if self.min_events > self.max_events {
            return err("event bounds must satisfy min <= max".into());
        }
        if self.max_objects + self.max_events > self.n_frames {
            return err("every event needs its own frame: too many events for the video".into());
        }
        Ok(())
    }
}

impl WorldSpec {
    pub fn horizon_seconds(&self) -> f64 {
        self.n_frames as f64 / self.fps
    }

    pub fn appear_frame(&self, object: usize) -> Option<usize> {
        self.events
            .iter()
            .find(|e| e.kind == EventKind::Appear && e.subject == object)
            .map(|e| e.frame)
    }

    /// Checks every structural invariant of the event script.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoeError::Schema(format!("invalid world: {m}")));
        for (i, a) in self.objects.iter().enumerate() {
            if self.objects[..i].contains(a) {
                return bad(format!("duplicate object {a}"));
            }
        }
        let mut appeared = vec![false; self.objects.len()];
        let mut gone = vec![false; self.objects.len()];
        for (i, e) in self.events.iter().enumerate() {
            if e.frame >= self.n_frames {
                return bad(format!("event frame {} outside video", e.frame));
            }
            if i > 0 && self.events[i - 1].frame > e.frame {
                return bad("events not sorted by frame".into());
            }
            let mut actors = vec![e.subject];
            match (e.kind, e.partner) {
                (EventKind::Collide, Some(p)) if p != e.subject => actors.push(p),
                (EventKind::Collide, _) => return bad("collide needs a distinct partner".into()),
                (_, Some(_)) => return bad("only collisions have partners".into()),
                (_, None) => {}
            }
            for &o in &actors {
                if o >= self.objects.len() {
                    return bad(format!("unknown object {o}"));
                }
                if self.events[..i]
                    .iter()
                    .any(|prev| prev.frame == e.frame && prev.involves(o))
                {
                    return bad(format!("object {o} has two events at frame {}", e.frame));
                }
                if e.kind == EventKind::Appear {
                    if appeared[o] {
                        return bad(format!("object {o} appears twice"));
                    }
                } else if !appeared[o] {
                    return bad(format!("object {o} acts before appearing"));
                }
                if gone[o] {
                    return bad(format!("object {o} acts after disappearing"));
                }
            }
            match e.kind {
                EventKind::Appear => appeared[e.subject] = true,
                EventKind::Disappear => gone[e.subject] = true,
                _ => {}
            }
        }
        if appeared.iter().any(|a| !a) {
            return bad("every object must appear".into());
        }
        Ok(())
    }
}

const MAX_RETRIES: usize = 1000;

/// Random event script: every object appears once, then `min..=max` further
/// events, each on its own frame.
pub fn generate_world(cfg: &WorldConfig, rng: &mut Rng) -> Result<WorldSpec> {
    cfg.validate()?;
    let n_objects = rng.range_inclusive(cfg.min_objects, cfg.max_objects);
    let n_events = rng.range_inclusive(cfg.min_events, cfg.max_events);

    let mut pool: Vec<Object> = Color::ALL
        .iter()
        .flat_map(|&color| Shape::ALL.iter().map(move |&shape| Object { color, shape }))
        .collect();
    rng.shuffle(&mut pool);
    pool.truncate(n_objects);
    let objects = pool;

    for _ in 0..MAX_RETRIES {
        if let Some(events) = try_script(cfg, n_objects, n_events, rng) {
            let w = WorldSpec {
                n_frames: cfg.n_frames,
                fps: cfg.fps,
                objects: objects.clone(),
                events,
            };
            debug_assert!(w.validate().is_ok());
            return Ok(w);
        }
    }
    Err(CoeError::Config(
        "could not generate a consistent event script; loosen the world bounds".into(),
    ))
}

fn try_script(cfg: &WorldConfig, n_objects: usize, n_events: usize, rng: &mut Rng) -> Option<Vec<Event>> {
    let total = n_objects + n_events;
    let mut frames: Vec<usize> = (0..cfg.n_frames).collect();
    rng.shuffle(&mut frames);
    frames.truncate(total);
    frames.sort_unstable();

    let mut slots = vec![true; n_objects];
    slots.extend(std::iter::repeat_n(false, n_events));
    rng.shuffle(&mut slots);

    let mut unseen: Vec<usize> = (0..n_objects).collect();
    rng.shuffle(&mut unseen);
    let mut visible: Vec<usize> = Vec::new();
    let mut events = Vec::with_capacity(total);
    for (&frame, &is_appear) in frames.iter().zip(&slots) {
        if is_appear {
            let o = unseen.pop()?;
            visible.push(o);
            events.push(Event {
                kind: EventKind::Appear,
                subject: o,
                partner: None,
                frame,
            });
            continue;
        }
        let mut kinds = Vec::new();
        if !visible.is_empty() {
            kinds.extend([EventKind::Move, EventKind::Disappear]);
        }
        if visible.len() >= 2 {
            kinds.push(EventKind::Collide);
        }
        let kind = *rng.choose(&kinds)?;
        let si = rng.below(visible.len());
        let subject = visible[si];
        let partner = if kind == EventKind::Collide {
            let others: Vec<usize> = visible.iter().copied().filter(|&o| o != subject).collect();
            Some(*rng.choose(&others)?)
        } else {
            None
        };
        if kind == EventKind::Disappear {
            visible.remove(si);
        }
        events.push(Event {
            kind,
            subject,
            partner,
            frame,
        });
    }
    Some(events)
}
