//! Vocabulary and tokenizers.
//!
//! The built-in tokenizer splits on whitespace and punctuation and looks
//! pieces up in a corpus-built vocabulary. External pretrained models bring
//! a subword vocabulary (`vocab.txt`) which [`WordPieceTokenizer`] consumes.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

/// Surface strings of the special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecialTokenNames {
    pub pad: String,
    pub unk: String,
    pub cls: String,
    pub sep: String,
    pub mask: String,
    pub bos: String,
    pub eos: String,
}

impl Default for SpecialTokenNames {
    fn default() -> Self {
        Self {
            pad: "[PAD]".into(),
            unk: "[UNK]".into(),
            cls: "[CLS]".into(),
            sep: "[SEP]".into(),
            mask: "[MASK]".into(),
            bos: "[BOS]".into(),
            eos: "[EOS]".into(),
        }
    }
}

impl SpecialTokenNames {
    fn all(&self) -> [&str; 7] {
        [
            &self.pad, &self.unk, &self.cls, &self.sep, &self.mask, &self.bos, &self.eos,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
}

/// Surface form of the tag token for `language`.
pub fn language_tag(language: &str) -> String {
    format!("<{}>", language.to_ascii_lowercase())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    #[serde(default)]
    special_tokens: SpecialTokenNames,
    #[serde(default)]
    languages: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    names: SpecialTokenNames,
    special: SpecialIds,
    languages: BTreeMap<String, TokenId>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.id_to_token == other.id_to_token
            && self.names == other.names
            && self.languages == other.languages
    }
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list. Every special token
    /// and every `<language>` tag must be present exactly once.
    pub fn new(
        tokens: Vec<String>,
        names: SpecialTokenNames,
        languages: &[String],
    ) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        let lookup = |name: &str| {
            token_to_id.get(name).copied().ok_or_else(|| {
                Error::Config(format!("vocabulary is missing special token `{name}`"))
            })
        };
        let special = SpecialIds {
            pad: lookup(&names.pad)?,
            unk: lookup(&names.unk)?,
            cls: lookup(&names.cls)?,
            sep: lookup(&names.sep)?,
            mask: lookup(&names.mask)?,
            bos: lookup(&names.bos)?,
            eos: lookup(&names.eos)?,
        };
        let mut seen: Vec<TokenId> = names.all().iter().map(|n| token_to_id[*n]).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != 7 {
            return Err(Error::Config("special token ids must be distinct".into()));
        }
        let mut langs = BTreeMap::new();
        for lang in languages {
            let tag = language_tag(lang);
            let id = token_to_id.get(&tag).copied().ok_or_else(|| {
                Error::Config(format!("vocabulary is missing language tag `{tag}`"))
            })?;
            langs.insert(lang.to_ascii_lowercase(), id);
        }
        Ok(Self {
            id_to_token: tokens,
            token_to_id,
            names,
            special,
            languages: langs,
        })
    }

    /// Corpus-built vocabulary: specials, language tags, `reserved` words,
    /// then corpus pieces by descending frequency (ties lexicographic) up to
    /// `max_size` entries in total.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        languages: &[String],
        reserved: &[&str],
        max_size: usize,
    ) -> Result<Self> {
        let names = SpecialTokenNames::default();
        let mut tokens: Vec<String> = names.all().iter().map(|s| s.to_string()).collect();
        for lang in languages {
            let tag = language_tag(lang);
            if !tokens.contains(&tag) {
                tokens.push(tag);
            }
        }
        for r in reserved {
            if !tokens.iter().any(|t| t == r) {
                tokens.push(r.to_string());
            }
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for piece in split_pieces(text) {
                *counts.entry(piece).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        for (piece, _) in ranked {
            if tokens.len() >= max_size {
                break;
            }
            if !tokens.iter().any(|t| t == piece) {
                tokens.push(piece.to_string());
            }
        }
        if tokens.len() > max_size {
            return Err(Error::Config(format!(
                "max vocabulary size {max_size} cannot hold the {} reserved entries",
                tokens.len()
            )));
        }
        Self::new(tokens, names, languages)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn special_names(&self) -> &SpecialTokenNames {
        &self.names
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(self.special.unk)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn language_id(&self, language: &str) -> Result<TokenId> {
        self.languages
            .get(&language.to_ascii_lowercase())
            .copied()
            .ok_or_else(|| {
                Error::Config(format!("language tag `{}` is not registered", language_tag(language)))
            })
    }

    pub fn languages(&self) -> impl Iterator<Item = (&str, TokenId)> {
        self.languages.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        let s = self.special;
        [s.pad, s.unk, s.cls, s.sep, s.mask, s.bos, s.eos].contains(&id)
    }

    pub fn sha256(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.id_to_token {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokens: self.id_to_token.clone(),
            special_tokens: self.names.clone(),
            languages: self.languages.keys().cloned().collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::new(file.tokens, file.special_tokens, &file.languages)
    }

    /// One token per line, as shipped with subword models.
    pub fn from_lines(text: &str, names: SpecialTokenNames, languages: &[String]) -> Result<Self> {
        let tokens = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Self::new(tokens, names, languages)
    }
}

/// Splits code or prose into maximal identifier-like runs and single
/// punctuation characters. Whitespace only separates.
pub fn split_pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() || ch == '_' {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !ch.is_whitespace() {
            out.push(&text[i..i + ch.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

pub trait Tokenizer: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    fn tokenize(&self, text: &str) -> TokenSequence;

    fn detokenize(&self, ids: &[TokenId]) -> String;

    /// Number of tokens `text` occupies.
    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Whitespace + punctuation splitting over a corpus-built vocabulary.
#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    vocab: Vocabulary,
}

impl WhitespaceTokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Self { vocab }
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        split_pieces(text)
            .into_iter()
            .map(|p| self.vocab.id_or_unk(p))
            .collect()
    }

    fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.vocab.token(id).unwrap_or(&self.vocab.names.unk))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn count(&self, text: &str) -> usize {
        split_pieces(text).len()
    }
}

/// Greedy longest-match-first subword tokenizer (`##` marks continuations).
#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    vocab: Vocabulary,
    max_chars_per_word: usize,
}

impl WordPieceTokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            max_chars_per_word: 100,
        }
    }

    fn word_pieces(&self, word: &str, out: &mut TokenSequence) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.len() > self.max_chars_per_word {
            out.push(self.vocab.special.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let from = chars[start].0;
                let to = chars.get(end).map_or(word.len(), |c| c.0);
                let candidate = if start == 0 {
                    word[from..to].to_string()
                } else {
                    format!("##{}", &word[from..to])
                };
                if let Some(id) = self.vocab.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.vocab.special.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }
}

impl Tokenizer for WordPieceTokenizer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        let mut out = Vec::new();
        for word in split_pieces(text) {
            self.word_pieces(word, &mut out);
        }
        out
    }

    fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut text = String::new();
        for &id in ids {
            let tok = self.vocab.token(id).unwrap_or(&self.vocab.names.unk);
            match tok.strip_prefix("##") {
                Some(rest) => text.push_str(rest),
                None => {
                    if !text.is_empty() {
                        text.push(' ');
                    }
                    text.push_str(tok);
                }
            }
        }
        text
    }
}
