//! Word-level tokenizer and a small trainable transformer text encoder with
//! a projection to the visual width.

use std::collections::HashMap;
use std::ops::Range;

use crate::attention::{add_position, MhsaStack, PositionEmbedding};
use crate::config::RunConfig;
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Graph, Initializer, ParamStore, Var};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const CLS: usize = 3;
pub const SEP: usize = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED: [&str; NUM_RESERVED] = ["[PAD]", "[MASK]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercased words, split on whitespace and punctuation.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Reserved tokens only.
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t.to_string());
        }
        v
    }

    fn push(&mut self, token: String) -> usize {
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Every word of `texts`, ids assigned in order of first occurrence.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for t in texts {
            v.add_text(t);
        }
        v
    }

    pub fn add_text(&mut self, text: &str) {
        for w in words(text) {
            if !self.index.contains_key(&w) {
                self.push(w);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a (lowercased) word; unknown words map to [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < NUM_RESERVED
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED || lines[..NUM_RESERVED] != RESERVED {
            return Err(Error::Config("vocabulary does not start with the reserved tokens".into()));
        }
        let mut v = Self::new();
        for (i, line) in lines.iter().enumerate().skip(NUM_RESERVED) {
            if line.is_empty() || v.index.contains_key(*line) {
                return Err(Error::Config(format!("bad vocabulary entry on line {}", i + 1)));
            }
            v.push(line.to_string());
        }
        Ok(v)
    }

    /// Word ids without any special tokens.
    pub fn word_ids(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.id(w)).collect()
    }
}

/// `[CLS] w_1 .. w_m`; the empty string gives `[CLS]` alone.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    let mut ids = vec![CLS];
    ids.extend(vocab.word_ids(text));
    ids
}

/// `[CLS] q [SEP] a` and the position range of the answer words.
pub fn tokenize_pair(question: &str, answer: &str, vocab: &Vocab) -> Result<(Vec<usize>, Range<usize>)> {
    let answer_ids = vocab.word_ids(answer);
    if answer_ids.is_empty() {
        return invalid(format!("candidate answer `{answer}` has no words"));
    }
    let mut ids = tokenize(question, vocab);
    ids.push(SEP);
    let start = ids.len();
    ids.extend(answer_ids);
    let span = start..ids.len();
    Ok((ids, span))
}

/// Positions of the words after the leading `[CLS]`, or the `[CLS]` itself
/// for an empty text.
pub fn word_span(ids: &[usize]) -> Range<usize> {
    if ids.len() > 1 {
        1..ids.len()
    } else {
        0..ids.len()
    }
}

/// Right-padded id matrix of `batch` sequences of length `len`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TextBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return invalid("text batch needs non-empty sequences");
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        Self::padded_to(seqs, len)
    }

    /// Pads every sequence to exactly `len` positions.
    pub fn padded_to(seqs: &[Vec<usize>], len: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.len() > len {
                return invalid(format!("sequence of {} tokens exceeds pad length {len}", s.len()));
            }
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
            mask.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Ok(Self {
            ids,
            mask,
            batch: seqs.len(),
            len,
        })
    }

    /// Row mask selecting `span` positions of sequence `seq`.
    pub fn span_mask(&self, seq: usize, span: Range<usize>) -> Vec<bool> {
        let mut m = vec![false; self.ids.len()];
        for p in span {
            m[seq * self.len + p] = true;
        }
        m
    }

    pub fn seq_mask(&self, seq: usize) -> &[bool] {
        &self.mask[seq * self.len..(seq + 1) * self.len]
    }
}

/// Parameter layout: `text.embed` (V x d_text), `text.pos`, `text.layer.*`,
/// `text.proj` (d_text -> d).
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub d_text: usize,
    pub d: usize,
    pub vocab_size: usize,
    pub pos: PositionEmbedding,
    pub stack: MhsaStack,
}

impl TextEncoder {
    pub fn register(store: &mut ParamStore, init: &mut Initializer, cfg: &RunConfig, vocab_size: usize) -> Result<Self> {
        if vocab_size < NUM_RESERVED {
            return invalid(format!("vocabulary of {vocab_size} lacks reserved tokens"));
        }
        store.insert("text.embed", init.uniform(&[vocab_size, cfg.d_text], 1.0))?;
        let pos = PositionEmbedding::register(store, "text.pos", cfg.max_text_len, cfg.d_text)?;
        let stack = MhsaStack::register(store, init, "text.layer", cfg.d_text, cfg.text_heads, cfg.text_layers)?;
        init.linear(store, "text.proj", cfg.d_text, cfg.d, true)?;
        Ok(Self {
            d_text: cfg.d_text,
            d: cfg.d,
            vocab_size,
            pos,
            stack,
        })
    }

    /// Contextual token outputs (batch * len x d_text) with padding keys
    /// masked out of attention.
    pub fn contextual(&self, g: &mut Graph<'_>, batch: &TextBatch) -> Result<Var> {
        if batch.len > self.pos.len {
            return invalid(format!(
                "text of {} tokens exceeds the position table ({})",
                batch.len, self.pos.len
            ));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= self.vocab_size) {
            return shape_err("encode_text", format!("token id {bad} outside vocabulary of {}", self.vocab_size));
        }
        let table = g.param("text.embed")?;
        let x = g.gather_rows(table, &batch.ids)?;
        let x = add_position(g, x, &self.pos, batch.len)?;
        self.stack.forward(g, x, batch.len, Some(&batch.mask))
    }

    /// `phi(X) = X W_Q + b` applied to contextual outputs.
    pub fn project(&self, g: &mut Graph<'_>, contextual: Var) -> Result<Var> {
        let (w, b) = (g.param("text.proj.w")?, g.param("text.proj.b")?);
        let y = g.matmul(contextual, w)?;
        g.add_row(y, b)
    }

    /// Projected token features, batch * len x d.
    pub fn encode(&self, g: &mut Graph<'_>, batch: &TextBatch) -> Result<Var> {
        let c = self.contextual(g, batch)?;
        self.project(g, c)
    }
}

/// Mean over the rows selected by `mask` (1 x d).
pub fn pool_text(g: &mut Graph<'_>, x: Var, mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return invalid("pooling over an all-padding sequence");
    }
    g.masked_mean_rows(x, mask)
}
