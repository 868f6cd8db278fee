//! Whitespace vocabulary, tokenization, and subject localization.
//!
//! The tokenizer is a lowercase whitespace splitter over a fixed word list.
//! Unknown words map to the UNK id. Every sequence is wrapped in BOS/EOS.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
    pub pad: u32,
}

impl Vocabulary {
    /// Build from an ordered token list. The four special tokens must appear
    /// in the list; ids are list positions.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocab token {tok:?}")));
            }
        }
        let lookup = |name: &str| -> Result<u32> {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Validation(format!("vocabulary missing special {name:?}")))
        };
        let vocab = Self {
            bos: lookup(BOS_TOKEN)?,
            eos: lookup(EOS_TOKEN)?,
            unk: lookup(UNK_TOKEN)?,
            pad: lookup(PAD_TOKEN)?,
            tokens,
            ids,
        };
        let mut specials = vec![vocab.bos, vocab.eos, vocab.unk, vocab.pad];
        specials.sort_unstable();
        specials.dedup();
        if specials.len() != 4 {
            return Err(Error::Validation("special token ids must be distinct".into()));
        }
        Ok(vocab)
    }

    /// Build from corpus text: specials first, then distinct words ranked by
    /// descending frequency (ties broken lexicographically), capped at
    /// `cap` total entries including the specials.
    pub fn build_from_corpus(corpus: &str, cap: usize) -> Result<Self> {
        if cap < 5 {
            return Err(Error::Validation(format!(
                "vocab cap {cap} leaves no room for corpus tokens"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for line in corpus.lines() {
            for word in normalize_words(line) {
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Validation("corpus contains no tokens".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = vec![
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            PAD_TOKEN.to_string(),
        ];
        tokens.extend(
            ranked
                .into_iter()
                .take(cap - 4)
                .map(|(w, _)| w.to_string()),
        );
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.bos || id == self.eos || id == self.unk || id == self.pad
    }

    /// On-disk format: a `#specials` header line naming the four special
    /// tokens, then one token per line; the id of a token is its position
    /// in the list.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "#specials bos={} eos={} unk={} pad={}",
            BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, PAD_TOKEN
        );
        for tok in &self.tokens {
            let _ = writeln!(out, "{tok}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text).map_err(|e| match e {
            Error::Validation(msg) => Error::parse(path, msg),
            other => other,
        })
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Validation("empty vocabulary file".into()))?;
        if !header.starts_with("#specials") {
            return Err(Error::Validation(
                "vocabulary file must start with a #specials header line".into(),
            ));
        }
        let tokens: Vec<String> = lines.map(|l| l.to_string()).collect();
        Self::new(tokens)
    }

    /// FNV-1a digest of the canonical file form, recorded in weight
    /// containers so mismatched model/vocabulary pairs are detectable.
    pub fn digest(&self) -> String {
        fnv1a_hex(self.to_file_string().as_bytes())
    }
}

pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

fn normalize_words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().filter(|w| !w.is_empty())
}

/// A tokenized input: BOS ... EOS, with an optional located subject span.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Inclusive (start, end) indices of the subject tokens; `end` is the
    /// key/substitution position.
    pub subject_span: Option<(usize, usize)>,
    pub source_text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of the EOS token (always the last position).
    pub fn eos_position(&self) -> usize {
        self.ids.len() - 1
    }
}

/// Lowercase, whitespace-split, map through the vocabulary (unknown words
/// become UNK), wrap in BOS/EOS. Errors on empty text and on sequences
/// longer than `max_seq_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_seq_len: usize) -> Result<TokenSequence> {
    let lowered = text.to_lowercase();
    let words: Vec<&str> = normalize_words(&lowered).collect();
    if words.is_empty() {
        return Err(Error::Tokenize(format!(
            "text {text:?} is empty after whitespace normalization"
        )));
    }
    let mut ids = Vec::with_capacity(words.len() + 2);
    ids.push(vocab.bos);
    for word in words {
        ids.push(vocab.id_of(word).unwrap_or(vocab.unk));
    }
    ids.push(vocab.eos);
    if ids.len() > max_seq_len {
        return Err(Error::Tokenize(format!(
            "sequence of length {} exceeds max_seq_len {max_seq_len}",
            ids.len()
        )));
    }
    Ok(TokenSequence {
        ids,
        subject_span: None,
        source_text: text.to_string(),
    })
}

/// Find the LAST occurrence of the subject's token ids as a contiguous span
/// inside the sequence interior and record it on the returned sequence.
/// The span's end index is the key/substitution token.
pub fn locate_subject(
    seq: &TokenSequence,
    subject: &str,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    let lowered = subject.to_lowercase();
    let needle: Vec<u32> = normalize_words(&lowered)
        .map(|w| vocab.id_of(w).unwrap_or(vocab.unk))
        .collect();
    if needle.is_empty() {
        return Err(Error::Tokenize(format!(
            "subject {subject:?} tokenizes to an empty id list"
        )));
    }
    // Interior positions only: BOS and EOS can never be part of a subject.
    let interior = &seq.ids[1..seq.ids.len() - 1];
    let mut found = None;
    if needle.len() <= interior.len() {
        for start in (0..=interior.len() - needle.len()).rev() {
            if interior[start..start + needle.len()] == needle[..] {
                found = Some((start + 1, start + needle.len()));
                break;
            }
        }
    }
    match found {
        Some(span) => Ok(TokenSequence {
            ids: seq.ids.clone(),
            subject_span: Some(span),
            source_text: seq.source_text.clone(),
        }),
        None => Err(Error::Tokenize(format!(
            "subject {subject:?} not found in {:?}",
            seq.source_text
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocabulary {
        let mut tokens: Vec<String> = [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, PAD_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for w in ["a", "cat", "and", "the", "prince", "of", "wales", "joe", "biden", "dog"] {
            tokens.push(w.to_string());
        }
        Vocabulary::new(tokens).unwrap()
    }

    #[test]
    fn single_known_word() {
        let v = toy_vocab();
        let seq = tokenize("a", &v, 16).unwrap();
        assert_eq!(seq.ids, vec![v.bos, v.id_of("a").unwrap(), v.eos]);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = toy_vocab();
        let seq = tokenize("zzz", &v, 16).unwrap();
        assert_eq!(seq.ids, vec![v.bos, v.unk, v.eos]);
    }

    #[test]
    fn lowercases_and_splits() {
        let v = toy_vocab();
        let seq = tokenize("Joe Biden", &v, 16).unwrap();
        assert_eq!(
            seq.ids,
            vec![v.bos, v.id_of("joe").unwrap(), v.id_of("biden").unwrap(), v.eos]
        );
    }

    #[test]
    fn empty_text_is_an_error() {
        let v = toy_vocab();
        assert!(tokenize("   ", &v, 16).is_err());
    }

    #[test]
    fn over_length_is_an_error() {
        let v = toy_vocab();
        assert!(tokenize("a cat and a dog", &v, 4).is_err());
    }

    #[test]
    fn locates_multiword_subject() {
        let v = toy_vocab();
        let seq = tokenize("the prince of wales", &v, 16).unwrap();
        let located = locate_subject(&seq, "prince of wales", &v).unwrap();
        assert_eq!(located.subject_span, Some((2, 4)));
        assert_eq!(seq.ids[4], v.id_of("wales").unwrap());
    }

    #[test]
    fn picks_last_occurrence() {
        let v = toy_vocab();
        let seq = tokenize("a cat and a cat", &v, 16).unwrap();
        let located = locate_subject(&seq, "cat", &v).unwrap();
        assert_eq!(located.subject_span, Some((5, 5)));
    }

    #[test]
    fn missing_subject_is_an_error() {
        let v = toy_vocab();
        let seq = tokenize("a dog", &v, 16).unwrap();
        assert!(locate_subject(&seq, "cat", &v).is_err());
    }

    #[test]
    fn corpus_vocab_ranks_by_frequency_then_lexicographically() {
        let vocab = Vocabulary::build_from_corpus("b a a\nc b a", 8).unwrap();
        // a:3 b:2 c:1
        assert_eq!(vocab.id_of("a"), Some(4));
        assert_eq!(vocab.id_of("b"), Some(5));
        assert_eq!(vocab.id_of("c"), Some(6));
        assert_eq!(vocab.len(), 7);
    }

    #[test]
    fn file_round_trip() {
        let v = toy_vocab();
        let text = v.to_file_string();
        let back = Vocabulary::from_file_string(&text).unwrap();
        assert_eq!(back.to_file_string(), text);
        assert_eq!(back.digest(), v.digest());
    }
}
