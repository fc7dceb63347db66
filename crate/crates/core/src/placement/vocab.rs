//! Word-level tokenizer with quantised coordinate tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dequantize_coord, quantize_coord, NormalizedBBox, COORD_BINS};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;
const SPECIALS: [&str; 5] = ["<PAD>", "<BOS>", "<EOS>", "<SEP>", "<UNK>"];
const COORD_BASE: u32 = SPECIALS.len() as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    W,
    H,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::X, Axis::Y, Axis::W, Axis::H];

    fn index(self) -> u32 {
        self as u32
    }

    fn letter(self) -> char {
        ['X', 'Y', 'W', 'H'][self as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Reasoning,
    Coordinate,
    Control,
}

/// Token ids with a role per position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Specials at 0..5, then `<X_00>..<X_bb>`, `<Y_..>`, `<W_..>`, `<H_..>` as four
/// contiguous ranges, then the sorted word list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    bins: usize,
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    bins: usize,
    words: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Self::from_words(r.words, r.bins)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self { bins: v.bins, words: v.words }
    }
}

/// Splits on whitespace and detaches trailing `.,;:!?` as separate tokens.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let trimmed = raw.trim_end_matches(['.', ',', ';', ':', '!', '?']);
        if !trimmed.is_empty() {
            out.push(trimmed);
        }
        let tail = &raw[trimmed.len()..];
        for (i, _) in tail.char_indices() {
            out.push(&tail[i..i + 1]);
        }
    }
    out
}

impl Vocabulary {
    fn from_words(words: Vec<String>, bins: usize) -> Self {
        let base = COORD_BASE + 4 * bins as u32;
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), base + i as u32)).collect();
        Self { bins, words, index }
    }

    /// Builds the word list from a corpus; ids depend only on the set of words.
    pub fn from_corpus<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::from_corpus_with_bins(texts, COORD_BINS)
    }

    pub fn from_corpus_with_bins<'a, I>(texts: I, bins: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let set: BTreeSet<String> =
            texts.into_iter().flat_map(|t| split_words(t).into_iter().map(str::to_string)).collect();
        Self::from_words(set.into_iter().collect(), bins)
    }

    pub fn len(&self) -> usize {
        COORD_BASE as usize + 4 * self.bins + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn coord_token(&self, axis: Axis, bin: usize) -> Result<u32> {
        if bin >= self.bins {
            return Err(Error::BinOutOfRange { idx: bin, bins: self.bins });
        }
        Ok(COORD_BASE + axis.index() * self.bins as u32 + bin as u32)
    }

    pub fn parse_coord(&self, id: u32) -> Option<(Axis, usize)> {
        let rel = id.checked_sub(COORD_BASE)? as usize;
        if rel >= 4 * self.bins {
            return None;
        }
        Some((Axis::ALL[rel / self.bins], rel % self.bins))
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token_str(&self, id: u32) -> String {
        if let Some(s) = SPECIALS.get(id as usize) {
            return s.to_string();
        }
        if let Some((axis, bin)) = self.parse_coord(id) {
            return format!("<{}_{bin:02}>", axis.letter());
        }
        let base = COORD_BASE as usize + 4 * self.bins;
        self.words.get(id as usize - base).cloned().unwrap_or_else(|| SPECIALS[UNK as usize].to_string())
    }

    /// Word ids for `text`; unknown words become UNK unless `strict`.
    pub fn encode_text(&self, text: &str, strict: bool) -> Result<Vec<u32>> {
        split_words(text)
            .into_iter()
            .map(|w| match self.word_id(w) {
                Some(id) => Ok(id),
                None if strict => Err(Error::UnknownWord(w.to_string())),
                None => Ok(UNK),
            })
            .collect()
    }

    /// Joins word tokens with spaces; specials and coordinates are skipped.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        let base = COORD_BASE + 4 * self.bins as u32;
        ids.iter().filter(|&&id| id >= base).map(|&id| self.token_str(id)).collect::<Vec<_>>().join(" ")
    }

    /// Prompt tokens followed by BOS, the start of the response.
    pub fn encode_prompt(&self, prompt: &str) -> Result<TokenSequence> {
        let mut ids = self.encode_text(prompt, false)?;
        let mut roles = vec![Role::Prompt; ids.len()];
        ids.push(BOS);
        roles.push(Role::Control);
        Ok(TokenSequence { ids, roles })
    }
}

/// `[reasoning words, SEP, X, Y, W, H, EOS]`; unknown reasoning words are rejected.
pub fn encode_response(reasoning: &str, bbox: &NormalizedBBox, vocab: &Vocabulary) -> Result<TokenSequence> {
    let mut ids = vocab.encode_text(reasoning, true)?;
    let mut roles = vec![Role::Reasoning; ids.len()];
    ids.push(SEP);
    roles.push(Role::Control);
    for (axis, v) in Axis::ALL.into_iter().zip(bbox.to_array()) {
        ids.push(vocab.coord_token(axis, quantize_coord(v, vocab.bins())?)?);
        roles.push(Role::Coordinate);
    }
    ids.push(EOS);
    roles.push(Role::Control);
    Ok(TokenSequence { ids, roles })
}

/// The last run of four consecutive coordinate tokens ordered X, Y, W, H,
/// dequantised to bin centres.
pub fn parse_bbox(ids: &[u32], vocab: &Vocabulary) -> Option<NormalizedBBox> {
    ids.windows(4).rev().find_map(|w| {
        let mut vals = [0f64; 4];
        for (k, (&id, axis)) in w.iter().zip(Axis::ALL).enumerate() {
            let (a, bin) = vocab.parse_coord(id)?;
            if a != axis {
                return None;
            }
            vals[k] = dequantize_coord(bin, vocab.bins()).ok()?;
        }
        NormalizedBBox::new(vals[0], vals[1], vals[2], vals[3]).ok()
    })
}

/// Reasoning text (word tokens before the first SEP) and the parsed box.
pub fn decode_response(ids: &[u32], vocab: &Vocabulary) -> (String, Option<NormalizedBBox>) {
    let end = ids.iter().position(|&t| t == SEP || t == EOS).unwrap_or(ids.len());
    (vocab.decode_text(&ids[..end]), parse_bbox(ids, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::grammar_words;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_corpus(grammar_words())
    }

    #[test]
    fn coordinate_ranges_are_contiguous_and_disjoint() {
        let v = vocab();
        assert_eq!(v.coord_token(Axis::X, 0).unwrap(), 5);
        assert_eq!(v.coord_token(Axis::X, 99).unwrap() + 1, v.coord_token(Axis::Y, 0).unwrap());
        assert_eq!(v.coord_token(Axis::H, 99).unwrap(), 404);
        assert_eq!(v.token_str(v.coord_token(Axis::W, 7).unwrap()), "<W_07>");
        assert_eq!(v.parse_coord(4), None);
        assert_eq!(v.parse_coord(405), None);
        assert!(v.coord_token(Axis::X, 100).is_err());
        assert_eq!(v.len(), 405 + grammar_words().len());
    }

    #[test]
    fn ids_depend_only_on_the_word_set() {
        let a = Vocabulary::from_corpus(["b a c", "a"]);
        let b = Vocabulary::from_corpus(["c", "a b"]);
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), a);
    }

    #[test]
    fn encode_response_fixture() {
        let v = vocab();
        let bbox = NormalizedBBox::new(0.5, 0.5, 0.4, 0.4).unwrap();
        let seq = encode_response("place it near the top left", &bbox, &v).unwrap();
        let names: Vec<String> = seq.ids.iter().map(|&i| v.token_str(i)).collect();
        assert_eq!(&names[names.len() - 6..], ["<SEP>", "<X_50>", "<Y_50>", "<W_40>", "<H_40>", "<EOS>"]);
        assert_eq!(seq.roles.iter().filter(|r| **r == Role::Coordinate).count(), 4);
        let empty = encode_response("", &bbox, &v).unwrap();
        assert_eq!(empty.len(), 6);
        assert!(matches!(encode_response("add a zebra", &bbox, &v), Err(Error::UnknownWord(_))));
    }

    #[test]
    fn parse_rule_takes_last_ordered_quadruple() {
        let v = vocab();
        let t = |a, b| v.coord_token(a, b).unwrap();
        let ids = [t(Axis::X, 50), t(Axis::Y, 50), t(Axis::W, 40), t(Axis::H, 40)];
        let b = parse_bbox(&ids, &v).unwrap();
        assert_eq!(b.to_array(), [0.505, 0.505, 0.405, 0.405]);
        let ids = [
            t(Axis::X, 10),
            t(Axis::Y, 10),
            t(Axis::W, 10),
            t(Axis::H, 10),
            SEP,
            t(Axis::X, 20),
            t(Axis::Y, 20),
            t(Axis::W, 20),
            t(Axis::H, 20),
            t(Axis::X, 90),
        ];
        assert_eq!(parse_bbox(&ids, &v).unwrap().x_c(), 0.205);
        let disordered = [t(Axis::Y, 1), t(Axis::X, 1), t(Axis::W, 1), t(Axis::H, 1)];
        assert!(parse_bbox(&disordered, &v).is_none());
        assert!(parse_bbox(&[EOS], &v).is_none());
    }

    #[test]
    fn punctuation_is_split() {
        assert_eq!(split_words("add a cat. now!"), ["add", "a", "cat", ".", "now", "!"]);
    }

    proptest! {
        #[test]
        fn response_round_trip(bins in proptest::array::uniform4(0usize..100), pick in proptest::collection::vec(0usize..100, 0..8)) {
            let v = vocab();
            let words = grammar_words();
            let reasoning = pick.iter().map(|&i| words[i % words.len()]).collect::<Vec<_>>().join(" ");
            let vals = bins.map(|b| dequantize_coord(b, 100).unwrap());
            let bbox = NormalizedBBox::new(vals[0], vals[1], vals[2], vals[3]).unwrap();
            let seq = encode_response(&reasoning, &bbox, &v).unwrap();
            let (text, parsed) = decode_response(&seq.ids, &v);
            prop_assert_eq!(text, reasoning);
            prop_assert_eq!(parsed.unwrap(), bbox);
        }
    }
}
