//! Question templates. Each family derives its key frames, reasoning draft
//! and answer directly from the event script.

use serde::{Deserialize, Serialize};

use super::world::{Color, EventKind, Shape, WorldSpec};
use crate::numerics::Rng;
use crate::protocol::format_timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    /// "When does the red square first appear?"
    FirstAppear,
    /// "Does the red square collide with the blue circle?"
    Collide,
    /// "How many move events happen?"
    Count,
    /// "What happens to the red square after it appears?"
    After,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::FirstAppear,
        TemplateKind::Collide,
        TemplateKind::Count,
        TemplateKind::After,
    ];
}

/// Template output before features are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Instantiated {
    pub template: TemplateKind,
    pub question: String,
    pub key_frames: Vec<usize>,
    pub draft: String,
    pub answer: String,
}

/// Words used in questions; the question encoder's table.
pub fn question_words() -> Vec<&'static str> {
    let mut w = vec![
        "when", "does", "the", "first", "appear", "collide", "with", "how", "many", "events",
        "happen", "what", "happens", "to", "after", "it", "appears", "disappear", "move",
    ];
    w.extend(Color::ALL.iter().map(|c| c.name()));
    w.extend(Shape::ALL.iter().map(|s| s.name()));
    w
}

/// Words that can appear in drafts and answers (besides time tokens).
pub fn output_words() -> Vec<String> {
    let mut w: Vec<String> = Color::ALL.iter().map(|c| c.name().to_string()).collect();
    w.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
    w.extend(["appears", "at", "and", "then", "yes", "no"].map(String::from));
    w.extend(EventKind::ALL.iter().map(|k| k.name().to_string()));
    w.extend((1..=9).map(|i| i.to_string()));
    w
}

fn time_of(w: &WorldSpec, frame: usize) -> String {
    format_timestamp((frame as f64 / w.fps).floor() as u32)
}

fn cite_all(w: &WorldSpec, frames: &[usize]) -> String {
    frames
        .iter()
        .map(|&f| format!("at {}", time_of(w, f)))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Fills `template` from `w`, or `None` when the template does not apply.
/// `max_evidence` bounds the number of key frames (the number of evidence
/// queries).
pub fn instantiate(
    w: &WorldSpec,
    template: TemplateKind,
    max_evidence: usize,
    rng: &mut Rng,
) -> Option<Instantiated> {
    let out = match template {
        TemplateKind::FirstAppear => first_appear(w, rng),
        TemplateKind::Collide => collide(w, rng),
        TemplateKind::Count => count(w, max_evidence, rng),
        TemplateKind::After => after(w, rng),
    }?;
    (out.key_frames.len() <= max_evidence).then_some(out)
}

fn first_appear(w: &WorldSpec, rng: &mut Rng) -> Option<Instantiated> {
    let o = rng.below(w.objects.len());
    let frame = w.appear_frame(o)?;
    let name = w.objects[o].to_string();
    let t = time_of(w, frame);
    Some(Instantiated {
        template: TemplateKind::FirstAppear,
        question: format!("When does the {name} first appear?"),
        key_frames: vec![frame],
        draft: format!("{name} appears at {t}"),
        answer: t,
    })
}

/// "Yes" cites the collisions between the two objects; "no" cites both
/// objects' appearances, showing both present but never in contact.
fn collide(w: &WorldSpec, rng: &mut Rng) -> Option<Instantiated> {
    let collisions: Vec<_> = w
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Collide)
        .collect();
    let e = **rng.choose(&collisions)?;
    let partner = e.partner?;
    let subject = if rng.bernoulli(0.5) { e.subject } else { partner };
    let never_hit: Vec<usize> = (0..w.objects.len())
        .filter(|&o| {
            o != subject
                && !collisions
                    .iter()
                    .any(|c| c.involves(subject) && c.involves(o))
        })
        .collect();
    let ask_no = !never_hit.is_empty() && rng.bernoulli(0.5);
    let asked = if ask_no {
        *rng.choose(&never_hit)?
    } else if subject == e.subject {
        partner
    } else {
        e.subject
    };
    let (kind, mut key_frames): (EventKind, Vec<usize>) = if ask_no {
        let frames = [subject, asked].iter().map(|&o| w.appear_frame(o)).collect::<Option<_>>()?;
        (EventKind::Appear, frames)
    } else {
        let frames = collisions
            .iter()
            .filter(|c| c.involves(subject) && c.involves(asked))
            .map(|c| c.frame)
            .collect();
        (EventKind::Collide, frames)
    };
    key_frames.sort_unstable();
    Some(Instantiated {
        template: TemplateKind::Collide,
        question: format!(
            "Does the {} collide with the {}?",
            w.objects[subject], w.objects[asked]
        ),
        draft: format!("{} {}", kind.name(), cite_all(w, &key_frames)),
        key_frames,
        answer: if ask_no { "no" } else { "yes" }.into(),
    })
}

fn count(w: &WorldSpec, max_evidence: usize, rng: &mut Rng) -> Option<Instantiated> {
    let candidates: Vec<(EventKind, Vec<usize>)> = EventKind::ALL
        .iter()
        .map(|&k| {
            let frames = w.events.iter().filter(|e| e.kind == k).map(|e| e.frame).collect();
            (k, frames)
        })
        .filter(|(_, f): &(EventKind, Vec<usize>)| !f.is_empty() && f.len() <= max_evidence)
        .collect();
    let (kind, frames) = rng.choose(&candidates)?.clone();
    Some(Instantiated {
        template: TemplateKind::Count,
        question: format!("How many {} events happen?", kind.name()),
        draft: format!("{} {}", kind.name(), cite_all(w, &frames)),
        answer: frames.len().to_string(),
        key_frames: frames,
    })
}

fn after(w: &WorldSpec, rng: &mut Rng) -> Option<Instantiated> {
    let candidates: Vec<(usize, usize, usize, EventKind)> = (0..w.objects.len())
        .filter_map(|o| {
            let appear = w.appear_frame(o)?;
            let next = w
                .events
                .iter()
                .find(|e| e.frame > appear && e.involves(o))?;
            Some((o, appear, next.frame, next.kind))
        })
        .collect();
    let &(o, appear, next, kind) = rng.choose(&candidates)?;
    let name = w.objects[o].to_string();
    Some(Instantiated {
        template: TemplateKind::After,
        question: format!("What happens to the {name} after it appears?"),
        key_frames: vec![appear, next],
        draft: format!(
            "{name} appears at {} then {} at {}",
            time_of(w, appear),
            kind.name(),
            time_of(w, next)
        ),
        answer: kind.name().into(),
    })
}

/// Tries the families in random order and returns the first that applies.
pub fn instantiate_any(w: &WorldSpec, max_evidence: usize, rng: &mut Rng) -> Option<Instantiated> {
    let mut order = TemplateKind::ALL;
    rng.shuffle(&mut order);
    order
        .into_iter()
        .find_map(|t| instantiate(w, t, max_evidence, rng))
}
