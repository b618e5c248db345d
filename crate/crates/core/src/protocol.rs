//! The evidence-anchoring response grammar.
//!
//! A response is exactly three tagged sections, in order:
//!
//! ```text
//! <Temporal Anchors> 00:05-00:10; 00:45-00:50 </Temporal Anchors>
//! <Reasoning Draft> Based on the entry at 00:05 and the result at 00:45 </Reasoning Draft>
//! <Answer> Yes </Answer>
//! ```
//!
//! Only whitespace may appear outside the sections. Anchors are half-open
//! `[start, end)` ranges in whole seconds written as `MM:SS-MM:SS`; they are
//! canonicalized on parse (sorted by start, overlapping ranges merged). The
//! full grammar is in `docs/protocol.md`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ANCHORS_OPEN: &str = "<Temporal Anchors>";
pub const ANCHORS_CLOSE: &str = "</Temporal Anchors>";
pub const DRAFT_OPEN: &str = "<Reasoning Draft>";
pub const DRAFT_CLOSE: &str = "</Reasoning Draft>";
pub const ANSWER_OPEN: &str = "<Answer>";
pub const ANSWER_CLOSE: &str = "</Answer>";

/// Largest representable timestamp, 59:59.
pub const MAX_SECONDS: u32 = 59 * 60 + 59;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    TemporalAnchors,
    ReasoningDraft,
    Answer,
}

impl Section {
    fn tags(self) -> (&'static str, &'static str) {
        match self {
            Section::TemporalAnchors => (ANCHORS_OPEN, ANCHORS_CLOSE),
            Section::ReasoningDraft => (DRAFT_OPEN, DRAFT_CLOSE),
            Section::Answer => (ANSWER_OPEN, ANSWER_CLOSE),
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Section::TemporalAnchors => "TemporalAnchors",
            Section::ReasoningDraft => "ReasoningDraft",
            Section::Answer => "Answer",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("missing section {0}")]
    MissingSection(Section),
    #[error("sections out of order or repeated")]
    SectionOrderViolation,
    #[error("unexpected text outside sections: {0:?}")]
    UnexpectedText(String),
    #[error("malformed timestamp range {0:?}")]
    MalformedTimestamp(String),
    #[error("empty or reversed interval {0:?}")]
    DegenerateInterval(String),
    #[error("empty answer")]
    EmptyAnswer,
    #[error("cannot serialize: {0}")]
    Unrepresentable(String),
}

/// Half-open time range `[start_s, end_s)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    start_s: f64,
    end_s: f64,
}

impl TimeInterval {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, ProtocolError> {
        if !(start_s.is_finite() && end_s.is_finite() && start_s >= 0.0 && start_s < end_s) {
            return Err(ProtocolError::DegenerateInterval(format!("{start_s}-{end_s}")));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn start_s(&self) -> f64 {
        self.start_s
    }

    pub fn end_s(&self) -> f64 {
        self.end_s
    }
}

/// A parsed response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeResponse {
    pub anchors: Vec<TimeInterval>,
    pub draft: String,
    pub answer: String,
    /// Set by the decoder when generation hit the length limit.
    #[serde(default)]
    pub truncated: bool,
}

impl CoeResponse {
    pub fn new(anchors: Vec<TimeInterval>, draft: &str, answer: &str) -> Self {
        Self {
            anchors: canonicalize(anchors),
            draft: normalize_ws(draft),
            answer: normalize_ws(answer),
            truncated: false,
        }
    }
}

/// Sorts by start and merges overlapping (not merely touching) intervals.
pub fn canonicalize(mut anchors: Vec<TimeInterval>) -> Vec<TimeInterval> {
    anchors.sort_by(|a, b| {
        a.start_s
            .total_cmp(&b.start_s)
            .then(a.end_s.total_cmp(&b.end_s))
    });
    let mut out: Vec<TimeInterval> = Vec::with_capacity(anchors.len());
    for iv in anchors {
        match out.last_mut() {
            Some(last) if iv.start_s < last.end_s => {
                last.end_s = last.end_s.max(iv.end_s);
            }
            _ => out.push(iv),
        }
    }
    out
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn format_timestamp(seconds: u32) -> String {
    format!("{:02}:{:02}", seconds / 60, seconds % 60)
}

/// Parses exactly `MM:SS` (two digits each, seconds below 60).
pub fn parse_timestamp(s: &str) -> Option<u32> {
    let b = s.as_bytes();
    if b.len() != 5 || b[2] != b':' {
        return None;
    }
    let digits = [b[0], b[1], b[3], b[4]];
    if !digits.iter().all(u8::is_ascii_digit) {
        return None;
    }
    let minutes = u32::from(b[0] - b'0') * 10 + u32::from(b[1] - b'0');
    let seconds = u32::from(b[3] - b'0') * 10 + u32::from(b[4] - b'0');
    if seconds >= 60 {
        return None;
    }
    Some(minutes * 60 + seconds)
}

fn parse_range(raw: &str) -> Result<TimeInterval, ProtocolError> {
    let malformed = || ProtocolError::MalformedTimestamp(raw.to_string());
    let (a, b) = raw.split_once('-').ok_or_else(malformed)?;
    let start = parse_timestamp(a.trim()).ok_or_else(malformed)?;
    let end = parse_timestamp(b.trim()).ok_or_else(malformed)?;
    if start >= end {
        return Err(ProtocolError::DegenerateInterval(raw.to_string()));
    }
    TimeInterval::new(f64::from(start), f64::from(end))
}

fn find_unique(text: &str, tag: &str) -> Result<Option<usize>, ProtocolError> {
    let mut it = text.match_indices(tag);
    let first = it.next().map(|(i, _)| i);
    if it.next().is_some() {
        return Err(ProtocolError::SectionOrderViolation);
    }
    Ok(first)
}

fn require_blank(gap: &str) -> Result<(), ProtocolError> {
    if gap.trim().is_empty() {
        Ok(())
    } else {
        Err(ProtocolError::UnexpectedText(gap.trim().to_string()))
    }
}

pub fn parse_response(text: &str) -> Result<CoeResponse, ProtocolError> {
    let sections = [Section::TemporalAnchors, Section::ReasoningDraft, Section::Answer];
    let mut spans = Vec::with_capacity(3);
    for section in sections {
        let (open, close) = section.tags();
        let o = find_unique(text, open)?;
        let c = find_unique(text, close)?;
        match (o, c) {
            (Some(o), Some(c)) => spans.push((o, o + open.len(), c, c + close.len())),
            _ => return Err(ProtocolError::MissingSection(section)),
        }
    }
    let mut cursor = 0;
    for &(open_at, body_start, close_at, close_end) in &spans {
        if open_at < cursor || close_at < body_start {
            return Err(ProtocolError::SectionOrderViolation);
        }
        cursor = close_end;
    }
    cursor = 0;
    for &(open_at, _, _, close_end) in &spans {
        require_blank(&text[cursor..open_at])?;
        cursor = close_end;
    }
    require_blank(&text[cursor..])?;

    let body = |i: usize| &text[spans[i].1..spans[i].2];

    let anchors_text = body(0).trim();
    let mut anchors = Vec::new();
    if !anchors_text.is_empty() {
        for item in anchors_text.split(';') {
            anchors.push(parse_range(item.trim())?);
        }
    }
    let answer = normalize_ws(body(2));
    if answer.is_empty() {
        return Err(ProtocolError::EmptyAnswer);
    }
    Ok(CoeResponse {
        anchors: canonicalize(anchors),
        draft: normalize_ws(body(1)),
        answer,
        truncated: false,
    })
}

fn whole_seconds(x: f64) -> Result<u32, ProtocolError> {
    if x.fract() != 0.0 || x < 0.0 || x > f64::from(MAX_SECONDS) {
        return Err(ProtocolError::Unrepresentable(format!(
            "{x} is not a whole number of seconds in 00:00..59:59"
        )));
    }
    Ok(x as u32)
}

/// Canonical single-space form. Anchors are written sorted and merged.
pub fn serialize_response(r: &CoeResponse) -> Result<String, ProtocolError> {
    let mut parts = Vec::with_capacity(r.anchors.len());
    for iv in canonicalize(r.anchors.clone()) {
        let s = whole_seconds(iv.start_s)?;
        let e = whole_seconds(iv.end_s)?;
        if s >= e {
            return Err(ProtocolError::DegenerateInterval(format!("{s}-{e}")));
        }
        parts.push(format!("{}-{}", format_timestamp(s), format_timestamp(e)));
    }
    let draft = normalize_ws(&r.draft);
    let answer = normalize_ws(&r.answer);
    if answer.is_empty() {
        return Err(ProtocolError::EmptyAnswer);
    }
    for tag in [ANCHORS_OPEN, ANCHORS_CLOSE, DRAFT_OPEN, DRAFT_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
        if draft.contains(tag) || answer.contains(tag) {
            return Err(ProtocolError::Unrepresentable(format!(
                "section text contains the tag {tag}"
            )));
        }
    }
    let section = |open: &str, body: &str, close: &str| {
        if body.is_empty() {
            format!("{open} {close}")
        } else {
            format!("{open} {body} {close}")
        }
    };
    Ok([
        section(ANCHORS_OPEN, &parts.join("; "), ANCHORS_CLOSE),
        section(DRAFT_OPEN, &draft, DRAFT_CLOSE),
        section(ANSWER_OPEN, &answer, ANSWER_CLOSE),
    ]
    .join(" "))
}

/// Finds `MM:SS` at `i` that is not glued to other digits or colons.
fn timestamp_at(b: &[u8], i: usize) -> Option<u32> {
    if i + 5 > b.len() {
        return None;
    }
    let glued = |c: u8| c.is_ascii_digit() || c == b':';
    if i > 0 && glued(b[i - 1]) {
        return None;
    }
    if i + 5 < b.len() && glued(b[i + 5]) {
        return None;
    }
    std::str::from_utf8(&b[i..i + 5]).ok().and_then(parse_timestamp)
}

fn skip_spaces_forward(b: &[u8], mut i: usize) -> usize {
    while i < b.len() && b[i].is_ascii_whitespace() {
        i += 1;
    }
    i
}

/// Point timestamps cited in a draft, in order, duplicates kept. Timestamps
/// that form an `MM:SS-MM:SS` range are not points and are skipped.
pub fn extract_draft_timestamps(draft: &str) -> Vec<u32> {
    let b = draft.as_bytes();
    let mut found: Vec<(usize, u32)> = Vec::new();
    let mut i = 0;
    while i + 5 <= b.len() {
        if let Some(t) = timestamp_at(b, i) {
            found.push((i, t));
            i += 5;
        } else {
            i += 1;
        }
    }
    let mut in_range = vec![false; found.len()];
    for j in 0..found.len().saturating_sub(1) {
        let after_first = skip_spaces_forward(b, found[j].0 + 5);
        if after_first < b.len() && b[after_first] == b'-' {
            let second = skip_spaces_forward(b, after_first + 1);
            if second == found[j + 1].0 {
                in_range[j] = true;
                in_range[j + 1] = true;
            }
        }
    }
    found
        .into_iter()
        .zip(in_range)
        .filter(|(_, r)| !r)
        .map(|((_, t), _)| t)
        .collect()
}

/// Sorted set of frame indices in `[0, n_frames)` with its timing context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSet {
    indices: Vec<usize>,
    pub fps: f64,
    pub n_frames: usize,
}

impl FrameSet {
    /// Sorts, dedups, and drops indices outside the video.
    pub fn new(mut indices: Vec<usize>, fps: f64, n_frames: usize) -> Self {
        indices.retain(|&i| i < n_frames);
        indices.sort_unstable();
        indices.dedup();
        Self {
            indices,
            fps,
            n_frames,
        }
    }

    pub fn empty(fps: f64, n_frames: usize) -> Self {
        Self::new(Vec::new(), fps, n_frames)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn intersection_len(&self, other: &FrameSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.indices, &other.indices);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// One single-frame interval `[i/fps, (i+1)/fps)` per index.
    pub fn to_intervals(&self) -> Vec<TimeInterval> {
        self.indices
            .iter()
            .map(|&i| TimeInterval {
                start_s: i as f64 / self.fps,
                end_s: (i + 1) as f64 / self.fps,
            })
            .collect()
    }
}

/// Frame `i` covers `[i/fps, (i+1)/fps)`; it is included when that span
/// intersects any interval.
pub fn intervals_to_frames(ts: &[TimeInterval], fps: f64, n_frames: usize) -> FrameSet {
    let mut out = Vec::new();
    for iv in ts {
        let lo = ((iv.start_s * fps).floor() as i64 - 1).max(0) as usize;
        let hi = ((iv.end_s * fps).ceil() as i64 + 1).clamp(0, n_frames as i64) as usize;
        for i in lo..hi {
            if (i as f64) / fps < iv.end_s && iv.start_s < ((i + 1) as f64) / fps {
                out.push(i);
            }
        }
    }
    FrameSet::new(out, fps, n_frames)
}

/// Frame containing time point `t`.
pub fn point_to_frame(t: f64, fps: f64) -> usize {
    (t * fps).floor().max(0.0) as usize
}

pub fn points_to_frames(points: &[u32], fps: f64, n_frames: usize) -> FrameSet {
    FrameSet::new(
        points.iter().map(|&t| point_to_frame(f64::from(t), fps)).collect(),
        fps,
        n_frames,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOX: &str = "<Temporal Anchors> 00:05-00:10; 00:45-00:50 </Temporal Anchors>\n\
        <Reasoning Draft> Based on the entry at 00:05 and the result at 00:45... </Reasoning Draft>\n\
        <Answer> Yes </Answer>";

    fn iv(s: f64, e: f64) -> TimeInterval {
        TimeInterval::new(s, e).unwrap()
    }

    #[test]
    fn parses_reference_response() {
        let r = parse_response(BOX).unwrap();
        assert_eq!(r.anchors, vec![iv(5.0, 10.0), iv(45.0, 50.0)]);
        assert_eq!(r.answer, "Yes");
        assert!(!r.truncated);
    }

    #[test]
    fn empty_anchors_are_allowed() {
        let r = parse_response(
            "<Temporal Anchors></Temporal Anchors><Reasoning Draft>x</Reasoning Draft><Answer>A</Answer>",
        )
        .unwrap();
        assert!(r.anchors.is_empty());
        assert_eq!(r.draft, "x");
        assert_eq!(r.answer, "A");
    }

    #[test]
    fn missing_sections_are_named() {
        assert_eq!(
            parse_response("<Answer>Yes</Answer>"),
            Err(ProtocolError::MissingSection(Section::TemporalAnchors))
        );
        assert_eq!(
            parse_response("<Temporal Anchors></Temporal Anchors><Answer>Yes</Answer>"),
            Err(ProtocolError::MissingSection(Section::ReasoningDraft))
        );
    }

    #[test]
    fn section_order_is_enforced() {
        let s = "<Reasoning Draft>x</Reasoning Draft><Temporal Anchors></Temporal Anchors><Answer>A</Answer>";
        assert_eq!(parse_response(s), Err(ProtocolError::SectionOrderViolation));
        let s = "</Temporal Anchors><Temporal Anchors><Reasoning Draft>x</Reasoning Draft><Answer>A</Answer>";
        assert_eq!(parse_response(s), Err(ProtocolError::SectionOrderViolation));
        let dup = format!("{BOX} <Answer> No </Answer>");
        assert_eq!(parse_response(&dup), Err(ProtocolError::SectionOrderViolation));
    }

    #[test]
    fn rejects_stray_text_and_bad_timestamps() {
        let s = format!("hello {BOX}");
        assert!(matches!(parse_response(&s), Err(ProtocolError::UnexpectedText(_))));
        for bad in ["0:05-00:10", "00:05-00:61", "00:05 00:10", "00:05-00:10;", "aa:bb-cc:dd"] {
            let s = format!(
                "<Temporal Anchors>{bad}</Temporal Anchors><Reasoning Draft></Reasoning Draft><Answer>A</Answer>"
            );
            assert!(
                matches!(parse_response(&s), Err(ProtocolError::MalformedTimestamp(_))),
                "{bad}"
            );
        }
        let s = "<Temporal Anchors>00:05-00:05</Temporal Anchors><Reasoning Draft></Reasoning Draft><Answer>A</Answer>";
        assert!(matches!(parse_response(s), Err(ProtocolError::DegenerateInterval(_))));
        let s = "<Temporal Anchors></Temporal Anchors><Reasoning Draft></Reasoning Draft><Answer> </Answer>";
        assert_eq!(parse_response(s), Err(ProtocolError::EmptyAnswer));
    }

    #[test]
    fn anchors_are_canonicalized() {
        let s = "<Temporal Anchors>00:45-00:50;00:05-00:10; 00:08-00:12</Temporal Anchors>\
                 <Reasoning Draft>d</Reasoning Draft><Answer>A</Answer>";
        let r = parse_response(s).unwrap();
        assert_eq!(r.anchors, vec![iv(5.0, 12.0), iv(45.0, 50.0)]);
        // Touching ranges stay separate.
        let touching = canonicalize(vec![iv(1.0, 2.0), iv(2.0, 3.0)]);
        assert_eq!(touching.len(), 2);
    }

    #[test]
    fn serialization_is_sorted_and_round_trips() {
        let r = CoeResponse {
            anchors: vec![iv(45.0, 50.0), iv(5.0, 10.0)],
            draft: "Based on the entry at 00:05 and the result at 00:45...".into(),
            answer: "Yes".into(),
            truncated: false,
        };
        let s = serialize_response(&r).unwrap();
        assert!(s.contains("<Temporal Anchors> 00:05-00:10; 00:45-00:50 </Temporal Anchors>"), "{s}");
        let back = parse_response(&s).unwrap();
        assert_eq!(back.anchors, canonicalize(r.anchors.clone()));
        assert_eq!(back.draft, r.draft);

        let boxed = parse_response(BOX).unwrap();
        assert_eq!(parse_response(&serialize_response(&boxed).unwrap()).unwrap(), boxed);
    }

    #[test]
    fn degenerate_and_fractional_intervals() {
        assert!(TimeInterval::new(5.0, 5.0).is_err());
        assert!(TimeInterval::new(-1.0, 5.0).is_err());
        let r = CoeResponse {
            anchors: vec![iv(0.5, 2.0)],
            draft: String::new(),
            answer: "A".into(),
            truncated: false,
        };
        assert!(matches!(serialize_response(&r), Err(ProtocolError::Unrepresentable(_))));
    }

    #[test]
    fn draft_timestamps() {
        assert_eq!(
            extract_draft_timestamps("Based on the entry at 00:05 and the result at 00:45..."),
            vec![5, 45]
        );
        assert!(extract_draft_timestamps("nothing to see").is_empty());
        assert_eq!(extract_draft_timestamps("at 00:05, then 00:05 again"), vec![5, 5]);
        assert_eq!(extract_draft_timestamps("span 00:05-00:10 then 00:12"), vec![12]);
        assert_eq!(extract_draft_timestamps("span 00:05 - 00:10"), Vec::<u32>::new());
        assert!(extract_draft_timestamps("100:05 00:05:00 00:75").is_empty());
    }

    #[test]
    fn interval_frames() {
        let f = intervals_to_frames(&[iv(5.0, 10.0)], 1.0, 32);
        assert_eq!(f.indices(), &[5, 6, 7, 8, 9]);
        assert_eq!(points_to_frames(&[5], 1.0, 32).indices(), &[5]);
        let clipped = intervals_to_frames(&[iv(30.0, 40.0)], 1.0, 32);
        assert_eq!(clipped.indices(), &[30, 31]);
        assert!(intervals_to_frames(&[iv(40.0, 50.0)], 1.0, 32).is_empty());
        // At 2 fps, [1.25, 2) touches frames 2 ([1, 1.5)) and 3 ([1.5, 2)).
        assert_eq!(intervals_to_frames(&[iv(1.25, 2.0)], 2.0, 10).indices(), &[2, 3]);
    }

    #[test]
    fn timestamp_formatting() {
        assert_eq!(format_timestamp(0), "00:00");
        assert_eq!(format_timestamp(65), "01:05");
        assert_eq!(parse_timestamp("01:05"), Some(65));
        assert_eq!(parse_timestamp("1:05"), None);
    }
}
