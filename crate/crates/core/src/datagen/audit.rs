//! Independent re-derivation of answers and evidence frames from the world
//! state. Works from the question text alone, sharing no code with the
//! templates, so it can audit every emitted annotation.

use super::world::{EventKind, WorldSpec};

/// What the question asks, recovered from its wording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    FirstAppear { object: usize },
    Collide { subject: usize, other: usize },
    Count { kind: EventKind },
    After { object: usize },
}

fn find_object(w: &WorldSpec, words: &[&str]) -> Option<usize> {
    let [color, shape] = words else {
        return None;
    };
    w.objects
        .iter()
        .position(|o| o.color.name() == *color && o.shape.name() == *shape)
}

pub fn parse_question(w: &WorldSpec, question: &str) -> Option<Query> {
    let cleaned = question.trim().trim_end_matches('?').to_lowercase();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    match words.as_slice() {
        ["when", "does", "the", c, s, "first", "appear"] => Some(Query::FirstAppear {
            object: find_object(w, &[c, s])?,
        }),
        ["does", "the", c1, s1, "collide", "with", "the", c2, s2] => Some(Query::Collide {
            subject: find_object(w, &[c1, s1])?,
            other: find_object(w, &[c2, s2])?,
        }),
        ["how", "many", kind, "events", "happen"] => Some(Query::Count {
            kind: EventKind::from_name(kind)?,
        }),
        ["what", "happens", "to", "the", c, s, "after", "it", "appears"] => Some(Query::After {
            object: find_object(w, &[c, s])?,
        }),
        _ => None,
    }
}

/// Answer and evidence frames implied by the world state.
pub fn derive(w: &WorldSpec, q: &Query) -> Option<(String, Vec<usize>)> {
    let fmt_time = |frame: usize| {
        let s = (frame as f64 / w.fps) as u32;
        format!("{:02}:{:02}", s / 60, s % 60)
    };
    match *q {
        Query::FirstAppear { object } => {
            let mut frames: Vec<usize> = w
                .events
                .iter()
                .filter(|e| e.subject == object && e.kind == EventKind::Appear)
                .map(|e| e.frame)
                .collect();
            frames.sort_unstable();
            let first = *frames.first()?;
            Some((fmt_time(first), vec![first]))
        }
        Query::Collide { subject, other } => {
            let hits: Vec<usize> = w
                .events
                .iter()
                .filter(|e| {
                    e.kind == EventKind::Collide
                        && [subject, other]
                            .iter()
                            .all(|&o| e.subject == o || e.partner == Some(o))
                })
                .map(|e| e.frame)
                .collect();
            if hits.is_empty() {
                let mut frames = Vec::new();
                for o in [subject, other] {
                    frames.push(
                        w.events
                            .iter()
                            .find(|e| e.kind == EventKind::Appear && e.subject == o)?
                            .frame,
                    );
                }
                Some(("no".into(), frames))
            } else {
                Some(("yes".into(), hits))
            }
        }
        Query::Count { kind } => {
            let frames: Vec<usize> = w
                .events
                .iter()
                .filter(|e| e.kind == kind)
                .map(|e| e.frame)
                .collect();
            Some((frames.len().to_string(), frames))
        }
        Query::After { object } => {
            let mut mine: Vec<_> = w
                .events
                .iter()
                .filter(|e| e.subject == object || e.partner == Some(object))
                .collect();
            mine.sort_by_key(|e| e.frame);
            let appear = mine.iter().position(|e| e.kind == EventKind::Appear)?;
            let next = mine.get(appear + 1)?;
            Some((next.kind.name().into(), vec![mine[appear].frame, next.frame]))
        }
    }
}
