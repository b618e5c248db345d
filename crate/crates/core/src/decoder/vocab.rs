use std::collections::HashMap;

use crate::error::{CoeError, Result};
use crate::protocol::{
    format_timestamp, ANCHORS_CLOSE, ANCHORS_OPEN, ANSWER_CLOSE, ANSWER_OPEN, DRAFT_CLOSE,
    DRAFT_OPEN,
};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const MAX_VOCAB: usize = 256;

const TAGS: [&str; 6] = [
    ANCHORS_OPEN,
    ANCHORS_CLOSE,
    DRAFT_OPEN,
    DRAFT_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
];

/// Output alphabet. Ids 0 and 1 are always BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// BOS and EOS are prepended; the remaining tokens must be unique.
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut all = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string()];
        all.extend(tokens.iter().map(|t| t.as_ref().to_string()));
        if all.len() > MAX_VOCAB {
            return Err(CoeError::Config(format!(
                "vocabulary of {} tokens exceeds {MAX_VOCAB}",
                all.len()
            )));
        }
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) && !TAGS.contains(&t.as_str()) {
                return Err(CoeError::Config(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(CoeError::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Protocol tags, separators, one time token per second in
    /// `[0, horizon_s]`, then `words`.
    pub fn for_protocol<S: AsRef<str>>(horizon_s: u32, words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = TAGS.iter().map(|t| t.to_string()).collect();
        tokens.push("-".into());
        tokens.push(";".into());
        tokens.extend((0..=horizon_s).map(format_timestamp));
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::new(&tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Splits protocol text into vocabulary ids (no BOS/EOS added).
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let next_tag = TAGS
                .iter()
                .filter_map(|t| rest.find(t).map(|i| (i, *t)))
                .min_by_key(|&(i, _)| i);
            let (plain, tag) = match next_tag {
                Some((i, t)) => (&rest[..i], Some(t)),
                None => (rest, None),
            };
            for chunk in plain.split_whitespace() {
                self.tokenize_chunk(chunk, &mut out)?;
            }
            match tag {
                Some(t) => {
                    out.push(self.lookup(t)?);
                    rest = &rest[plain.len() + t.len()..];
                }
                None => break,
            }
        }
        Ok(out)
    }

    fn tokenize_chunk(&self, chunk: &str, out: &mut Vec<usize>) -> Result<()> {
        let mut start = 0;
        for (i, ch) in chunk.char_indices() {
            if ch == '-' || ch == ';' {
                if start < i {
                    out.push(self.lookup(&chunk[start..i])?);
                }
                out.push(self.lookup(&chunk[i..i + 1])?);
                start = i + 1;
            }
        }
        if start < chunk.len() {
            out.push(self.lookup(&chunk[start..])?);
        }
        Ok(())
    }

    fn lookup(&self, token: &str) -> Result<usize> {
        self.id(token)
            .ok_or_else(|| CoeError::Schema(format!("token {token:?} not in vocabulary")))
    }

    /// Inverse of [`Vocab::tokenize`] for canonical text: `-` binds tightly,
    /// `;` attaches to the left, everything else is space separated. BOS and
    /// EOS are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        let mut glue_next = true;
        for &id in ids {
            if id == BOS || id == EOS {
                continue;
            }
            let tok = self.token(id).unwrap_or("<unk>");
            match tok {
                "-" => {
                    s.push('-');
                    glue_next = true;
                    continue;
                }
                ";" => {
                    s.push(';');
                    glue_next = false;
                    continue;
                }
                _ => {}
            }
            if !glue_next {
                s.push(' ');
            }
            s.push_str(tok);
            glue_next = false;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::for_protocol(60, &["Yes", "No", "at", "red", "cube"]).unwrap()
    }

    #[test]
    fn canonical_text_round_trips() {
        let v = vocab();
        let text = "<Temporal Anchors> 00:05-00:10; 00:45-00:50 </Temporal Anchors> \
                    <Reasoning Draft> red cube at 00:05 </Reasoning Draft> <Answer> Yes </Answer>";
        let ids = v.tokenize(text).unwrap();
        assert_eq!(v.token(ids[0]), Some(ANCHORS_OPEN));
        assert_eq!(v.detokenize(&ids), text);
    }

    #[test]
    fn empty_sections_round_trip() {
        let v = vocab();
        let text = "<Temporal Anchors> </Temporal Anchors> <Reasoning Draft> </Reasoning Draft> <Answer> No </Answer>";
        assert_eq!(v.detokenize(&v.tokenize(text).unwrap()), text);
    }

    #[test]
    fn unknown_words_and_duplicates_are_rejected() {
        let v = vocab();
        assert!(v.tokenize("<Answer> Maybe </Answer>").is_err());
        assert!(Vocab::new(&["a", "a"]).is_err());
        assert!(Vocab::new(&[EOS_TOKEN]).is_err());
        let many: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        assert!(Vocab::new(&many).is_err());
    }

    #[test]
    fn reserved_ids() {
        let v = vocab();
        assert_eq!(v.id(BOS_TOKEN), Some(BOS));
        assert_eq!(v.id(EOS_TOKEN), Some(EOS));
        assert_eq!(v.len(), 2 + 6 + 2 + 61 + 5);
    }
}
