use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{ParseError, SmilesError};
use crate::tokenize::tokenize;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const SEP: usize = 3;

/// Reserved token strings, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<mask>", "<sep>"];

/// Token string to id mapping. Ids below 4 are the reserved tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Builds from a corpus, keeping tokens seen at least `min_count` times,
    /// ordered by descending frequency and then by token text.
    pub fn build<'a, I>(corpus: I, min_count: u64) -> Result<Self, SmilesError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: BTreeMap<String, u64> = BTreeMap::new();
        let mut any = false;
        for s in corpus {
            any = true;
            for t in tokenize(s)? {
                *freq.entry(t).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(SmilesError::EmptyCorpus);
        }
        let mut kept: Vec<(String, u64)> = freq
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; RESERVED.len()];
        for (t, c) in kept {
            tokens.push(t);
            counts.push(c);
        }
        Ok(Self::from_tokens(tokens, counts))
    }

    fn from_tokens(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index, counts }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Corpus frequency of a token; zero for reserved tokens and for
    /// vocabularies read from disk.
    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn encode(&self, s: &str) -> Result<Vec<usize>, ParseError> {
        Ok(tokenize(s)?.iter().map(|t| self.id(t)).collect())
    }

    /// Text form: the four reserved tokens, then one token per line in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SmilesError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() {
            return Err(SmilesError::VocabFormat("missing reserved header".into()));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if lines[i] != *r {
                return Err(SmilesError::VocabFormat(format!(
                    "line {} should be {r:?}, found {:?}",
                    i + 1,
                    lines[i]
                )));
            }
        }
        let tokens: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(SmilesError::VocabFormat(format!("empty token on line {}", i + 1)));
            }
            if let Some(first) = seen.insert(t.as_str(), i) {
                return Err(SmilesError::VocabFormat(format!(
                    "token {t:?} repeated on lines {} and {}",
                    first + 1,
                    i + 1
                )));
            }
        }
        let counts = vec![0; tokens.len()];
        Ok(Self::from_tokens(tokens, counts))
    }

    pub fn save(&self, path: &Path) -> Result<(), SmilesError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SmilesError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// A fixed-length encoded drug pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// 0 up to and including the separator, 1 after it.
    pub segments: Vec<u8>,
    /// True on real tokens, false on padding.
    pub mask: Vec<bool>,
    /// Layout length before truncation.
    pub full_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.full_len.min(self.ids.len())
    }

    pub fn truncated(&self) -> bool {
        self.full_len > self.ids.len()
    }
}

/// Lays out `a SEP b`, truncates from the right to `max_len` and pads with
/// PAD up to `max_len`.
pub fn encode_pair(a: &str, b: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence, ParseError> {
    let ta = vocab.encode(a)?;
    let tb = vocab.encode(b)?;
    let full_len = ta.len() + 1 + tb.len();
    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    let layout = ta
        .iter()
        .map(|&t| (t, 0u8))
        .chain(std::iter::once((SEP, 0u8)))
        .chain(tb.iter().map(|&t| (t, 1u8)));
    for (t, s) in layout.take(max_len) {
        ids.push(t);
        segments.push(s);
    }
    let real = ids.len();
    let pad_segment = segments.last().copied().unwrap_or(0);
    ids.resize(max_len, PAD);
    segments.resize(max_len, pad_segment);
    let mut mask = vec![true; real];
    mask.resize(max_len, false);
    Ok(TokenSequence {
        ids,
        segments,
        mask,
        full_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_corpus() {
        let v = Vocabulary::build(["CC"], 1).unwrap();
        assert_eq!(v.tokens(), ["<pad>", "<unk>", "<mask>", "<sep>", "C"]);
        assert_eq!(v.count(4), 2);
    }

    #[test]
    fn frequency_then_text_order() {
        let v = Vocabulary::build(["CCO", "CO"], 1).unwrap();
        assert!(v.id("C") < v.id("O"));
        let v = Vocabulary::build(["ON", "NO"], 1).unwrap();
        assert_eq!(v.id("N"), 4);
        assert_eq!(v.id("O"), 5);
    }

    #[test]
    fn min_count_drops_rare_tokens() {
        let v = Vocabulary::build(["CCO"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("O"), UNK);
    }

    #[test]
    fn unseen_tokens_are_unk() {
        let v = Vocabulary::build(["CC"], 1).unwrap();
        assert_eq!(v.encode("CN").unwrap(), vec![4, UNK]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(empty, 1), Err(SmilesError::EmptyCorpus)));
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(["c1ccccc1Cl", "[nH]1cccc1", "C%10CC%10"], 1).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert!(Vocabulary::from_text("<pad>\n<unk>\n<sep>\n<mask>\n").is_err());
        assert!(Vocabulary::from_text("<pad>\n<unk>\n<mask>\n<sep>\nC\nC\n").is_err());
    }

    #[test]
    fn short_pair_layout() {
        let v = Vocabulary::build(["CO"], 1).unwrap();
        let seq = encode_pair("C", "O", &v, 500).unwrap();
        assert_eq!(seq.len(), 500);
        assert_eq!(&seq.ids[..3], &[v.id("C"), SEP, v.id("O")]);
        assert!(seq.ids[3..].iter().all(|&t| t == PAD));
        assert_eq!(seq.mask.iter().filter(|&&m| m).count(), 3);
        assert_eq!(&seq.segments[..3], &[0, 0, 1]);
        assert!(seq.segments[3..].iter().all(|&s| s == 1));
        assert!(!seq.truncated());
    }

    #[test]
    fn truncation_drops_tail_of_second_drug() {
        let v = Vocabulary::build(["CO"], 1).unwrap();
        let a = "C".repeat(250);
        let b = "O".repeat(349);
        let seq = encode_pair(&a, &b, &v, 500).unwrap();
        assert_eq!(seq.full_len, 600);
        assert_eq!(seq.len(), 500);
        assert!(seq.truncated());
        assert_eq!(seq.ids[250], SEP);
        assert_eq!(seq.ids[251..].iter().filter(|&&t| t == v.id("O")).count(), 249);
        assert!(seq.mask.iter().all(|&m| m));
    }
}
