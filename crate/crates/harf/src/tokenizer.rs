//! Character-level vocabulary with special tokens and per-language
//! conditioning tokens.
//!
//! Sequences are laid out `[LANG, c1..ck, EOS, PAD...]` and always padded or
//! truncated to exactly `max_len` ids. The language token occupies the first
//! position of both encoder inputs and decoder prefixes, conditioning the
//! model on the script it should read or produce.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SentencePair;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;

const SPECIAL_SYMBOLS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"];
const UNK_GLYPH: char = '\u{fffd}';

/// A language tag such as `roman-ur` or `ur`. The corresponding vocabulary
/// symbol is spelled `__{tag}__`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LangTag(pub String);

impl LangTag {
    pub fn new(tag: impl Into<String>) -> Self {
        Self(tag.into())
    }

    pub fn roman_urdu() -> Self {
        Self("roman-ur".into())
    }

    pub fn urdu() -> Self {
        Self("ur".into())
    }

    pub fn symbol(&self) -> String {
        format!("__{}__", self.0)
    }
}

impl fmt::Display for LangTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("language {0:?} is not registered in the vocabulary")]
    UnknownLanguage(String),
    #[error("token id {id} out of range (vocabulary size {size})")]
    IdOutOfRange { id: u32, size: usize },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad vocabulary file: {0}")]
    BadFile(String),
}

/// Character-level symbol table. Ids are dense `0..size`, with the five
/// special tokens first (PAD is always 0), then one conditioning token per
/// registered language, then every character sorted by codepoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    langs: Vec<LangTag>,
}

impl Vocabulary {
    /// Builds a vocabulary over every distinct character on both sides of
    /// the corpus, plus specials and one token per language.
    pub fn build(corpus: &[SentencePair], langs: &[LangTag]) -> Result<Self, VocabError> {
        if corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut chars: Vec<char> = corpus
            .iter()
            .flat_map(|p| p.source.chars().chain(p.target.chars()))
            .collect();
        chars.sort_unstable();
        chars.dedup();

        let mut symbols: Vec<String> = SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
        symbols.extend(langs.iter().map(|l| l.symbol()));
        symbols.extend(chars.iter().map(|c| c.to_string()));
        Ok(Self::from_symbols(symbols, langs.to_vec()))
    }

    fn from_symbols(symbols: Vec<String>, langs: Vec<LangTag>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        Self { symbols, index, langs }
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn langs(&self) -> &[LangTag] {
        &self.langs
    }

    /// Id of the conditioning token for `lang`.
    pub fn lang_id(&self, lang: &LangTag) -> Result<u32, VocabError> {
        self.index
            .get(&lang.symbol())
            .copied()
            .ok_or_else(|| VocabError::UnknownLanguage(lang.0.clone()))
    }

    pub fn is_lang_id(&self, id: u32) -> bool {
        let first = SPECIAL_SYMBOLS.len() as u32;
        id >= first && id < first + self.langs.len() as u32
    }

    /// True for PAD/BOS/EOS/UNK/MASK and language tokens; false for
    /// character symbols.
    pub fn is_special_or_lang(&self, id: u32) -> bool {
        id < SPECIAL_SYMBOLS.len() as u32 + self.langs.len() as u32
    }

    /// Id of the first character symbol.
    pub fn first_char_id(&self) -> u32 {
        (SPECIAL_SYMBOLS.len() + self.langs.len()) as u32
    }

    pub fn char_id(&self, c: char) -> Option<u32> {
        self.index.get(c.to_string().as_str()).copied().filter(|id| !self.is_special_or_lang(*id))
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Encodes text as `[LANG, chars..., EOS, PAD...]`, exactly `max_len`
    /// ids. Characters beyond `max_len - 2` are truncated so EOS always
    /// fits; out-of-vocabulary characters map to UNK.
    pub fn encode(&self, text: &str, lang: &LangTag, max_len: usize) -> Result<EncodedSequence, VocabError> {
        let lang_id = self.lang_id(lang)?;
        assert!(max_len >= 2, "max_len must fit LANG and EOS");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(lang_id);
        for c in text.chars().take(max_len - 2) {
            ids.push(self.char_id(c).unwrap_or(UNK));
        }
        ids.push(EOS);
        let used = ids.len();
        ids.resize(max_len, PAD);
        let mut attention_mask = vec![1u8; used];
        attention_mask.resize(max_len, 0);
        Ok(EncodedSequence { ids, attention_mask, lang: lang.clone() })
    }

    /// Decodes ids back to text, dropping PAD/BOS/EOS/MASK and language
    /// tokens. UNK renders as U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String, VocabError> {
        let mut out = String::new();
        for &id in ids {
            if id as usize >= self.size() {
                return Err(VocabError::IdOutOfRange { id, size: self.size() });
            }
            if id == UNK {
                out.push(UNK_GLYPH);
            } else if !self.is_special_or_lang(id) {
                out.push_str(&self.symbols[id as usize]);
            }
        }
        Ok(out)
    }

    /// Serializes as UTF-8 text, one symbol per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut body = String::new();
        for s in &self.symbols {
            body.push_str(s);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| VocabError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let body = fs::read_to_string(path).map_err(|e| VocabError::Io { path: path.display().to_string(), source: e })?;
        let mut symbols: Vec<String> = body.split('\n').map(str::to_string).collect();
        if symbols.last().is_some_and(String::is_empty) {
            symbols.pop();
        }
        if symbols.len() < SPECIAL_SYMBOLS.len() {
            return Err(VocabError::BadFile("fewer lines than special tokens".into()));
        }
        for (i, expected) in SPECIAL_SYMBOLS.iter().enumerate() {
            if symbols[i] != *expected {
                return Err(VocabError::BadFile(format!(
                    "line {} is {:?}, expected {expected:?}",
                    i + 1,
                    symbols[i]
                )));
            }
        }
        let mut langs = Vec::new();
        for s in &symbols[SPECIAL_SYMBOLS.len()..] {
            if s.len() > 4 && s.starts_with("__") && s.ends_with("__") {
                langs.push(LangTag::new(&s[2..s.len() - 2]));
            } else {
                break;
            }
        }
        for s in &symbols[SPECIAL_SYMBOLS.len() + langs.len()..] {
            if s.chars().count() != 1 {
                return Err(VocabError::BadFile(format!("expected single-character symbol, found {s:?}")));
            }
        }
        Ok(Self::from_symbols(symbols, langs))
    }
}

/// An encoded sequence: ids plus an attention mask that is 1 on non-PAD
/// positions. Length is always exactly the `max_len` given at encode time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub lang: LangTag,
}

impl EncodedSequence {
    /// Number of non-PAD positions (LANG + characters + EOS).
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Origin;

    fn pair(s: &str, t: &str) -> SentencePair {
        SentencePair::new(s, t, Origin::Other, 1)
    }

    fn two_langs() -> Vec<LangTag> {
        vec![LangTag::roman_urdu(), LangTag::urdu()]
    }

    #[test]
    fn vocab_size_counts_specials_langs_chars() {
        let v = Vocabulary::build(&[pair("ab", "ba")], &two_langs()).unwrap();
        // 5 specials + 2 langs + 2 chars
        assert_eq!(v.size(), 9);
        assert_eq!(v.symbol(PAD), Some("<pad>"));
        assert_eq!(v.symbol(5), Some("__roman-ur__"));
        assert_eq!(v.symbol(6), Some("__ur__"));
        assert_eq!(v.symbol(7), Some("a"));
        assert_eq!(v.symbol(8), Some("b"));
    }

    #[test]
    fn vocab_is_deterministic_and_order_independent() {
        let a = Vocabulary::build(&[pair("ab", "cd"), pair("ef", "gh")], &two_langs()).unwrap();
        let b = Vocabulary::build(&[pair("ef", "gh"), pair("ab", "cd")], &two_langs()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_character_corpus() {
        let v = Vocabulary::build(&[pair("x", "x")], &two_langs()).unwrap();
        assert_eq!(v.size(), 8);
        assert_eq!(v.symbol(7), Some("x"));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Vocabulary::build(&[], &two_langs()), Err(VocabError::EmptyCorpus)));
    }

    #[test]
    fn encode_layout_and_mask() {
        let v = Vocabulary::build(&[pair("ab", "ba")], &two_langs()).unwrap();
        let enc = v.encode("ab", &LangTag::roman_urdu(), 6).unwrap();
        assert_eq!(enc.ids, vec![5, 7, 8, EOS, PAD, PAD]);
        assert_eq!(enc.attention_mask, vec![1, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn encode_truncates_to_max_len_with_terminal_eos() {
        let v = Vocabulary::build(&[pair("a", "a")], &two_langs()).unwrap();
        let long: String = std::iter::repeat('a').take(200).collect();
        let enc = v.encode(&long, &LangTag::urdu(), 128).unwrap();
        assert_eq!(enc.ids.len(), 128);
        assert_eq!(enc.ids[127], EOS);
        assert!(enc.ids[..127].iter().all(|&id| id != EOS && id != PAD));
    }

    #[test]
    fn unknown_language_is_an_error() {
        let v = Vocabulary::build(&[pair("a", "a")], &two_langs()).unwrap();
        assert!(matches!(
            v.encode("a", &LangTag::new("hi"), 8),
            Err(VocabError::UnknownLanguage(_))
        ));
    }

    #[test]
    fn oov_maps_to_unk_and_decodes_to_placeholder() {
        let v = Vocabulary::build(&[pair("ab", "ba")], &two_langs()).unwrap();
        let enc = v.encode("aQb", &LangTag::urdu(), 8).unwrap();
        assert_eq!(enc.ids[2], UNK);
        let text = v.decode(&enc.ids).unwrap();
        assert_eq!(text, format!("a{UNK_GLYPH}b"));
        assert_eq!(text.matches(UNK_GLYPH).count(), 1);
    }

    #[test]
    fn round_trip_identity() {
        let v = Vocabulary::build(&[pair("کیا", "kya")], &two_langs()).unwrap();
        let enc = v.encode("kya", &LangTag::urdu(), 128).unwrap();
        assert_eq!(v.decode(&enc.ids).unwrap(), "kya");
    }

    #[test]
    fn decode_of_pads_is_empty() {
        let v = Vocabulary::build(&[pair("a", "a")], &two_langs()).unwrap();
        assert_eq!(v.decode(&[PAD, PAD]).unwrap(), "");
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let v = Vocabulary::build(&[pair("a", "a")], &two_langs()).unwrap();
        assert!(matches!(v.decode(&[99]), Err(VocabError::IdOutOfRange { id: 99, .. })));
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::build(&[pair("کیا حال", "kya hal")], &two_langs()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded, v);
        // space is an ordinary symbol and survives the round trip
        assert!(loaded.char_id(' ').is_some());
    }
}
