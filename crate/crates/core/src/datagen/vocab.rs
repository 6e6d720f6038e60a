use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

/// Whole-word vocabulary: reserved tokens first (pad, bos, eos, separator,
/// one token per keyword), then the words in the order given.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    keywords: Vec<String>,
}

pub fn keyword_token(keyword: &str) -> String {
    format!("<kw:{keyword}>")
}

impl Vocab {
    pub fn new(words: &[String], keywords: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, SEP].iter().map(|s| s.to_string()).collect();
        tokens.extend(keywords.iter().map(|k| keyword_token(k)));
        tokens.extend(words.iter().cloned());
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!("bad vocabulary entry {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate vocabulary entry {t:?}"
                )));
            }
        }
        Ok(Self {
            tokens,
            index,
            keywords: keywords.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn sep(&self) -> usize {
        3
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < 4 + self.keywords.len()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.tokens.len(),
            })
    }

    /// Reserved attribute token for a keyword.
    pub fn keyword_id(&self, keyword: &str) -> Result<usize> {
        match self.keywords.iter().position(|k| k == keyword) {
            Some(i) => Ok(4 + i),
            None => Err(Error::UnknownKeyword {
                word: keyword.to_string(),
                valid: self.keywords.clone(),
            }),
        }
    }

    /// Keyword whose reserved token is `id`, if any.
    pub fn keyword_of(&self, id: usize) -> Option<&str> {
        id.checked_sub(4)
            .and_then(|i| self.keywords.get(i))
            .map(String::as_str)
    }

    /// Id of the keyword's ordinary surface word.
    pub fn surface_id(&self, keyword: &str) -> Result<usize> {
        self.id(keyword)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        self.encode(&text.split_whitespace().collect::<Vec<_>>())
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    /// Space-joined words, stopping at end-of-sequence and skipping padding.
    pub fn decode_text(&self, ids: &[usize]) -> Result<String> {
        let mut out = Vec::new();
        for &id in ids {
            if id == self.eos() {
                break;
            }
            if id != self.pad() {
                out.push(self.token(id)?);
            }
        }
        Ok(out.join(" "))
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("keywords {}\n", self.keywords.join(" "));
        for t in &self.tokens[4 + self.keywords.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().ok_or(Error::Empty("vocabulary file"))?;
        let keywords = first
            .strip_prefix("keywords")
            .ok_or(Error::Parse {
                line: 1,
                msg: "expected keywords line".into(),
            })?
            .split_whitespace()
            .map(str::to_string)
            .collect::<Vec<_>>();
        let words: Vec<String> = lines.map(str::to_string).collect();
        Self::new(&words, &keywords)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v() -> Vocab {
        let words: Vec<String> = ["hello", "world", "however"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Vocab::new(&words, &["however".to_string()]).unwrap()
    }

    #[test]
    fn reserved_layout_and_lookup() {
        let v = v();
        assert_eq!(v.len(), 8);
        assert_eq!(v.token(v.bos()).unwrap(), BOS);
        assert_eq!(v.keyword_id("however").unwrap(), 4);
        assert_eq!(v.token(4).unwrap(), "<kw:however>");
        assert_eq!(v.keyword_of(4), Some("however"));
        assert_eq!(v.keyword_of(5), None);
        assert_eq!(v.surface_id("however").unwrap(), 7);
        assert!(v.is_reserved(4) && !v.is_reserved(5));
    }

    #[test]
    fn unknown_entries() {
        let v = v();
        assert!(matches!(v.id("nope"), Err(Error::UnknownWord(w)) if w == "nope"));
        let err = v.keyword_id("because").unwrap_err().to_string();
        assert!(err.contains("however"), "{err}");
    }

    #[test]
    fn encode_decode_and_text_round_trip() {
        let v = v();
        let ids = v.encode_text("hello world however").unwrap();
        assert_eq!(v.decode(&ids).unwrap().join(" "), "hello world however");
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert_eq!(v.decode_text(&[5, 6, 2, 5]).unwrap(), "hello world");
    }

    #[test]
    fn duplicates_rejected() {
        let words = vec!["a".to_string(), "a".to_string()];
        assert!(Vocab::new(&words, &[]).is_err());
    }
}
