//! Prompt rendering, a closed word vocabulary and the small text encoder
//! that yields one token per class label.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::encoders::{Modality, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{run_blocks, Linear, Session, TransformerBlock};
use crate::params::{ParamId, ParamInit};

pub const NONE_SENTINEL: &str = "NONE";
pub const PLACEHOLDER: &str = "{}";

/// Sentence with one `{}` slot, or the bare-label sentinel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptTemplate {
    Sentence(String),
    None,
}

impl PromptTemplate {
    pub fn parse(s: &str) -> Result<Self> {
        if s == NONE_SENTINEL {
            return Ok(PromptTemplate::None);
        }
        let n = s.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::Config(format!(
                "prompt template must contain exactly one {PLACEHOLDER}, found {n} in {s:?}"
            )));
        }
        Ok(PromptTemplate::Sentence(s.to_string()))
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptTemplate::parse(s)
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptTemplate::Sentence(s) => f.write_str(s),
            PromptTemplate::None => f.write_str(NONE_SENTINEL),
        }
    }
}

pub fn render_prompt(tpl: &PromptTemplate, label: &str) -> Result<String> {
    if label.is_empty() {
        return Err(Error::contract("label must be non-empty"));
    }
    Ok(match tpl {
        PromptTemplate::Sentence(s) => s.replacen(PLACEHOLDER, label, 1),
        PromptTemplate::None => label.to_string(),
    })
}

/// Lowercased words with punctuation removed.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first (`PAD` = 0, `UNK` = 1), then the sorted distinct words.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let distinct: BTreeSet<String> = texts.iter().flat_map(|t| normalize_words(t.as_ref())).collect();
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        words.extend(distinct);
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

/// Word ids truncated or padded to exactly `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = normalize_words(text).iter().map(|w| vocab.id(w)).take(max_len).collect();
    ids.resize(max_len, PAD);
    ids
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Template string with `{}`, or `NONE`.
    pub template: String,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub trainable: bool,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            template: "The action of the human is {}".into(),
            depth: 1,
            heads: 4,
            mlp_ratio: 4,
            max_len: 16,
            trainable: true,
        }
    }
}

impl TextConfig {
    pub fn prompt_template(&self) -> Result<PromptTemplate> {
        PromptTemplate::parse(&self.template)
    }
}

#[derive(Clone, Debug)]
pub struct TextBranchParams {
    pub embedding: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub proj: Linear,
}

impl TextBranchParams {
    pub fn new(init: &mut ParamInit, cfg: &TextConfig, vocab_size: usize, dim: usize) -> Result<Self> {
        if cfg.max_len == 0 {
            return Err(Error::Config("text.max_len must be at least 1".into()));
        }
        let frozen = !cfg.trainable;
        Ok(TextBranchParams {
            embedding: init.normal("text.embedding", &[vocab_size, dim], frozen)?,
            positions: init.normal("text.positions", &[cfg.max_len, dim], frozen)?,
            blocks: TransformerBlock::stack(init, "text.blocks", cfg.depth, dim, cfg.heads, cfg.mlp_ratio, frozen)?,
            proj: Linear::new(init, "text.proj", dim, dim, true, frozen)?,
        })
    }
}

/// Embeds one prompt's ids, runs the text blocks over its word positions
/// only, mean-pools them and projects. Returns a `1 × dim` row.
pub fn encode_prompt_ids(s: &mut Session, ids: &[usize], params: &TextBranchParams) -> Result<Var> {
    let words = ids.iter().take_while(|&&id| id != PAD).count();
    if words == 0 {
        return Err(Error::contract("prompt has no words to encode"));
    }
    let max_len = s.binder.store().get(params.positions).rows();
    if words > max_len {
        return Err(Error::contract(format!(
            "prompt has {words} words, positional table holds {max_len}"
        )));
    }
    let table = s.param(params.embedding);
    let emb = s.graph.gather_rows(table, &ids[..words])?;
    let pos_table = s.param(params.positions);
    let pos = s.graph.slice_rows(pos_table, 0, words)?;
    let x = s.graph.add(emb, pos)?;
    let x = run_blocks(s, &params.blocks, x)?;
    let pooled = s.graph.mean_rows(x)?;
    params.proj.forward(s, pooled)
}

/// Reads a labels file: one label per line, line index = class index.
/// Surrounding whitespace is trimmed; blank lines and duplicates are
/// rejected.
pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    let labels = match labels.last() {
        Some(l) if l.is_empty() => labels[..labels.len() - 1].to_vec(),
        _ => labels,
    };
    let mut seen = BTreeSet::new();
    for (i, l) in labels.iter().enumerate() {
        let bad = |message: String| Error::Parse { record: i + 1, message };
        if l.is_empty() {
            return Err(bad("empty label".into()));
        }
        if !seen.insert(l) {
            return Err(bad(format!("duplicate label `{l}`")));
        }
    }
    Ok(labels)
}

/// One text token per label: row `i` encodes `render_prompt(tpl, labels[i])`.
pub fn encode_labels(
    s: &mut Session,
    labels: &[String],
    tpl: &PromptTemplate,
    vocab: &Vocabulary,
    max_len: usize,
    params: &TextBranchParams,
) -> Result<TokenSequence> {
    if labels.len() < 2 {
        return Err(Error::contract("at least two labels are required"));
    }
    let distinct: BTreeSet<&String> = labels.iter().collect();
    if distinct.len() != labels.len() {
        return Err(Error::contract("labels must be distinct"));
    }
    let rows = labels
        .iter()
        .map(|label| {
            let prompt = render_prompt(tpl, label)?;
            let ids = tokenize(&prompt, vocab, max_len);
            encode_prompt_ids(s, &ids, params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenSequence {
        tokens: s.graph.concat_rows(&rows)?,
        modality: Modality::Text,
    })
}
