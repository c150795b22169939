//! Whole-word vocabulary, tokenisation with CLS/SEP framing, and sentence
//! embeddings (token + position + modal type, then layer norm).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Bindings, ParamId, ParamStore, Real, Tape, Var};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const NUM_RESERVED: usize = 5;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Lower-cased words, splitting on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Word types by descending frequency (ties broken lexicographically),
    /// truncated so that the vocabulary including reserved tokens has at most
    /// `max_size` entries.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        if max_size < NUM_RESERVED {
            return Err(Error::Invalid(format!(
                "vocabulary size {max_size} cannot hold the {NUM_RESERVED} reserved tokens"
            )));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in split_words(line.as_ref()) {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(max_size - NUM_RESERVED);
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// `token<TAB>id` lines in id order.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocabulary", format!("line {} lacks a tab", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::format("vocabulary", format!("line {}: bad id {id:?}", n + 1)))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        if entries.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::format("vocabulary", "ids are not dense from zero"));
        }
        let tokens: Vec<String> = entries.into_iter().map(|(_, t)| t).collect();
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED_TOKENS {
            return Err(Error::format("vocabulary", "reserved tokens missing or misplaced"));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// `[CLS] w1 … wm [SEP] [PAD]…`, always `max_text_len + 2` long.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of CLS/word/SEP positions.
    pub fn real_len(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Positions holding words (excluding CLS, SEP and padding).
    pub fn word_positions(&self) -> std::ops::Range<usize> {
        1..self.real_len().saturating_sub(1).max(1)
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_text_len: usize) -> TokenSequence {
    let total = max_text_len + 2;
    let mut ids = Vec::with_capacity(total);
    ids.push(CLS);
    ids.extend(
        split_words(text)
            .iter()
            .take(max_text_len)
            .map(|w| vocab.id(w).unwrap_or(UNK)),
    );
    ids.push(SEP);
    let real = ids.len();
    ids.resize(total, PAD);
    let valid = (0..total).map(|i| i < real).collect();
    TokenSequence { ids, valid }
}

/// Per-position text states `[len, d]` and their validity.
#[derive(Clone, Debug)]
pub struct SentenceEmbeddings {
    pub states: Var,
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TextEmbeddingTables {
    pub token: ParamId,
    pub position: ParamId,
    pub modal: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub width: usize,
}

impl TextEmbeddingTables {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        max_positions: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            token: store.add_normal("text.token", &[vocab_size, width], 0.02, rng)?,
            position: store.add_normal("text.position", &[max_positions, width], 0.02, rng)?,
            modal: store.add_normal("text.modal", &[width], 0.02, rng)?,
            ln_gamma: store.add_full("text.ln.gamma", &[width], 1.0)?,
            ln_beta: store.add_full("text.ln.beta", &[width], 0.0)?,
            vocab_size,
            max_positions,
            width,
        })
    }

    pub fn embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Bindings,
        tokens: &TokenSequence,
        eps: f64,
    ) -> Result<SentenceEmbeddings> {
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(crate::tensor::TensorError::IndexOutOfRange {
                op: "embed_sentence",
                index: bad,
                extent: self.vocab_size,
            }
            .into());
        }
        if tokens.len() > self.max_positions {
            return Err(Error::Invalid(format!(
                "{} tokens exceed {} positions",
                tokens.len(),
                self.max_positions
            )));
        }
        let tok = tape.gather_rows(params[self.token], &tokens.ids)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(params[self.position], &positions)?;
        let sum = tape.add(tok, pos)?;
        let sum = tape.add_row(sum, params[self.modal])?;
        let states = tape.layer_norm(
            sum,
            params[self.ln_gamma],
            params[self.ln_beta],
            T::from_f64_lossy(eps),
        )?;
        Ok(SentenceEmbeddings {
            states,
            valid: tokens.valid.clone(),
        })
    }
}
