//! Synthetic branching-grammar corpora with exact ground-truth next-token
//! distributions, plus a character-level ingestion path for real text.
//!
//! A grammar is a set of templates over deterministic literal spans and slots.
//! Each slot is filled uniformly at random from B fillers that are pairwise
//! distinct at their first token, so branch identity is decidable at the
//! branch position and every sequence parses back to exactly one
//! (template, choices) tuple. Templates may end with an answer span whose
//! content is a deterministic function of the slot choices.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub type Token = u32;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotDef {
    pub fillers: Vec<Vec<Token>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Item {
    Lit(Vec<Token>),
    Slot(usize),
}

/// Terminal answer span: one token sequence per combination of the listed
/// slots' choices, indexed row-major (first slot varies slowest).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerSpec {
    pub slots: Vec<usize>,
    pub table: Vec<Vec<Token>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub items: Vec<Item>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<AnswerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub vocab_size: usize,
    pub slots: Vec<SlotDef>,
    pub templates: Vec<Template>,
}

/// Role of a prediction position: label `t` describes the distribution of
/// token `t + 1` given the prefix up to and including token `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// Unique legal continuation.
    #[serde(rename = "D")]
    Det,
    /// B-way equiprobable branch.
    #[serde(rename = "B")]
    Branch(u32),
    /// Inside a multi-token filler, after its identifying first token.
    #[serde(rename = "F")]
    FillerInterior,
    /// Ingested text with no grammar behind it.
    #[serde(rename = "U")]
    Unknown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tokens: Vec<Token>,
    /// labels.len() == tokens.len() - 1
    pub labels: Vec<Label>,
    /// Half-open token index range of the answer span, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_span: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub sequences: Vec<LabeledSequence>,
    pub vocab_size: usize,
}

impl GrammarSpec {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: GrammarSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("grammar spec {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("grammar has no templates".into()));
        }
        for (si, slot) in self.slots.iter().enumerate() {
            if slot.fillers.is_empty() {
                return Err(Error::Config(format!("slot {si} has no fillers")));
            }
            let mut firsts = std::collections::HashSet::new();
            for f in &slot.fillers {
                if f.is_empty() {
                    return Err(Error::Config(format!("slot {si} has an empty filler")));
                }
                if !firsts.insert(f[0]) {
                    return Err(Error::Config(format!(
                        "slot {si}: fillers must be pairwise distinct at their first token"
                    )));
                }
                for &t in f {
                    self.check_token(t)?;
                }
            }
        }
        for (ti, tpl) in self.templates.iter().enumerate() {
            for item in &tpl.items {
                match item {
                    Item::Lit(ts) => {
                        for &t in ts {
                            self.check_token(t)?;
                        }
                    }
                    Item::Slot(s) => {
                        if *s >= self.slots.len() {
                            return Err(Error::Config(format!(
                                "template {ti} references undefined slot {s}"
                            )));
                        }
                    }
                }
            }
            if let Some(ans) = &tpl.answer {
                let mut combos = 1usize;
                for &s in &ans.slots {
                    if s >= self.slots.len() {
                        return Err(Error::Config(format!(
                            "template {ti} answer references undefined slot {s}"
                        )));
                    }
                    if !tpl.items.iter().any(|it| matches!(it, Item::Slot(x) if *x == s)) {
                        return Err(Error::Config(format!(
                            "template {ti} answer references slot {s} not present in items"
                        )));
                    }
                    combos *= self.slots[s].fillers.len();
                }
                if ans.table.len() != combos {
                    return Err(Error::Config(format!(
                        "template {ti} answer table has {} entries, expected {combos}",
                        ans.table.len()
                    )));
                }
                for seq in &ans.table {
                    if seq.is_empty() {
                        return Err(Error::Config("empty answer entry".into()));
                    }
                    for &t in seq {
                        self.check_token(t)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn check_token(&self, t: Token) -> Result<()> {
        if (t as usize) >= self.vocab_size {
            return Err(Error::Config(format!(
                "token {t} out of vocab (V = {})",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Maximum emitted sequence length over all templates and choices.
    pub fn max_sequence_length(&self) -> usize {
        self.templates
            .iter()
            .map(|tpl| {
                let body: usize = tpl
                    .items
                    .iter()
                    .map(|it| match it {
                        Item::Lit(ts) => ts.len(),
                        Item::Slot(s) => self.slots[*s]
                            .fillers
                            .iter()
                            .map(Vec::len)
                            .max()
                            .unwrap_or(0),
                    })
                    .sum();
                let ans = tpl
                    .answer
                    .as_ref()
                    .map(|a| a.table.iter().map(Vec::len).max().unwrap_or(0))
                    .unwrap_or(0);
                body + ans
            })
            .max()
            .unwrap_or(0)
    }

    fn answer_index(&self, ans: &AnswerSpec, choices: &[usize], tpl: &Template) -> usize {
        // choices is indexed by occurrence order of slots in the template
        let slot_choice = |slot: usize| -> usize {
            let mut k = 0;
            for item in &tpl.items {
                if let Item::Slot(s) = item {
                    if *s == slot {
                        return choices[k];
                    }
                    k += 1;
                }
            }
            unreachable!("validated: answer slot occurs in items")
        };
        let mut idx = 0usize;
        for &s in &ans.slots {
            idx = idx * self.slots[s].fillers.len() + slot_choice(s);
        }
        idx
    }

    fn emit(&self, tpl_idx: usize, choices: &[usize]) -> LabeledSequence {
        let tpl = &self.templates[tpl_idx];
        let mut tokens: Vec<Token> = Vec::new();
        // token_label[t] describes how token t itself is determined; shifted
        // into prediction labels below.
        let mut token_label: Vec<Label> = Vec::new();
        let mut k = 0usize;
        for item in &tpl.items {
            match item {
                Item::Lit(ts) => {
                    for &t in ts {
                        tokens.push(t);
                        token_label.push(Label::Det);
                    }
                }
                Item::Slot(s) => {
                    let slot = &self.slots[*s];
                    let filler = &slot.fillers[choices[k]];
                    k += 1;
                    for (j, &t) in filler.iter().enumerate() {
                        tokens.push(t);
                        token_label.push(if j == 0 {
                            Label::Branch(slot.fillers.len() as u32)
                        } else {
                            Label::FillerInterior
                        });
                    }
                }
            }
        }
        let answer_span = tpl.answer.as_ref().map(|ans| {
            let seq = &ans.table[self.answer_index(ans, choices, tpl)];
            let start = tokens.len();
            for &t in seq {
                tokens.push(t);
                token_label.push(Label::Det);
            }
            (start, tokens.len())
        });
        // prediction label at position t describes token t+1
        let labels = token_label[1..].to_vec();
        LabeledSequence {
            tokens,
            labels,
            answer_span,
        }
    }

    pub fn generate_corpus(&self, n_sequences: usize, seed: u64) -> Result<LabeledCorpus> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sequences = Vec::with_capacity(n_sequences);
        for _ in 0..n_sequences {
            let tpl_idx = rng.gen_range(0..self.templates.len());
            let tpl = &self.templates[tpl_idx];
            let choices: Vec<usize> = tpl
                .items
                .iter()
                .filter_map(|it| match it {
                    Item::Slot(s) => Some(rng.gen_range(0..self.slots[*s].fillers.len())),
                    Item::Lit(_) => None,
                })
                .collect();
            sequences.push(self.emit(tpl_idx, &choices));
        }
        Ok(LabeledCorpus {
            sequences,
            vocab_size: self.vocab_size,
        })
    }

    /// Parse a complete sequence back to its (template, choices) tuple.
    pub fn parse(&self, tokens: &[Token]) -> Option<(usize, Vec<usize>)> {
        for tpl_idx in 0..self.templates.len() {
            if let Some(ParseState::Complete { choices }) = self.parse_against(tpl_idx, tokens) {
                return Some((tpl_idx, choices));
            }
        }
        None
    }

    /// Exact conditional next-token distribution under the grammar, by
    /// parsing the prefix against every template and mixing continuations
    /// weighted by template prior and consumed branch probabilities.
    pub fn true_next_distribution(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::Contract("true_next_distribution: empty prefix".into()));
        }
        let mut dist = vec![0.0f64; self.vocab_size];
        let mut total_weight = 0.0f64;
        for tpl_idx in 0..self.templates.len() {
            let Some(state) = self.parse_against(tpl_idx, prefix) else {
                continue;
            };
            let ParseState::Partial {
                weight,
                next: continuations,
            } = state
            else {
                continue; // complete sequence: no next token from this parse
            };
            total_weight += weight;
            for (tok, p) in continuations {
                dist[tok as usize] += weight * p;
            }
        }
        if total_weight == 0.0 {
            return Err(Error::Data(
                "prefix is not a prefix of any grammar sequence (or is already complete)".into(),
            ));
        }
        for v in dist.iter_mut() {
            *v /= total_weight;
        }
        Ok(dist)
    }
}

enum ParseState {
    Complete {
        choices: Vec<usize>,
    },
    /// Prefix consumed mid-sequence: likelihood weight of the consumed prefix
    /// under this template, and the distribution over the next token.
    Partial {
        weight: f64,
        next: Vec<(Token, f64)>,
    },
}

impl GrammarSpec {
    /// Walk `tokens` along template `tpl_idx`. Fillers are identified by
    /// their first token, so the walk never branches.
    fn parse_against(&self, tpl_idx: usize, tokens: &[Token]) -> Option<ParseState> {
        let tpl = &self.templates[tpl_idx];
        let mut pos = 0usize;
        let mut weight = 1.0f64 / self.templates.len() as f64;
        let mut choices: Vec<usize> = Vec::new();
        for item in &tpl.items {
            match item {
                Item::Lit(ts) => {
                    for &expected in ts {
                        if pos == tokens.len() {
                            return Some(ParseState::Partial {
                                weight,
                                next: vec![(expected, 1.0)],
                            });
                        }
                        if tokens[pos] != expected {
                            return None;
                        }
                        pos += 1;
                    }
                }
                Item::Slot(s) => {
                    let slot = &self.slots[*s];
                    let b = slot.fillers.len();
                    if pos == tokens.len() {
                        return Some(ParseState::Partial {
                            weight,
                            next: slot
                                .fillers
                                .iter()
                                .map(|f| (f[0], 1.0 / b as f64))
                                .collect(),
                        });
                    }
                    let choice = slot.fillers.iter().position(|f| f[0] == tokens[pos])?;
                    weight /= b as f64;
                    choices.push(choice);
                    let filler = &slot.fillers[choice];
                    for &expected in filler {
                        if pos == tokens.len() {
                            return Some(ParseState::Partial {
                                weight,
                                next: vec![(expected, 1.0)],
                            });
                        }
                        if tokens[pos] != expected {
                            return None;
                        }
                        pos += 1;
                    }
                }
            }
        }
        if let Some(ans) = &tpl.answer {
            let seq = &ans.table[self.answer_index(ans, &choices, tpl)];
            for &expected in seq {
                if pos == tokens.len() {
                    return Some(ParseState::Partial {
                        weight,
                        next: vec![(expected, 1.0)],
                    });
                }
                if tokens[pos] != expected {
                    return None;
                }
                pos += 1;
            }
        }
        if pos == tokens.len() {
            Some(ParseState::Complete { choices })
        } else {
            None
        }
    }
}

impl LabeledCorpus {
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for seq in &self.sequences {
            serde_json::to_writer(&mut f, seq)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &std::path::Path, vocab_size: usize) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut sequences = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let seq: LabeledSequence = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("corpus line {}: {e}", i + 1)))?;
            if seq.tokens.len() < 2 {
                return Err(Error::Data(format!(
                    "corpus line {}: sequence shorter than 2 tokens",
                    i + 1
                )));
            }
            if seq.labels.len() != seq.tokens.len() - 1 {
                return Err(Error::Data(format!(
                    "corpus line {}: {} labels for {} tokens",
                    i + 1,
                    seq.labels.len(),
                    seq.tokens.len()
                )));
            }
            if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Data(format!(
                    "corpus line {}: token {t} out of vocab {vocab_size}",
                    i + 1
                )));
            }
            sequences.push(seq);
        }
        if sequences.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        Ok(LabeledCorpus {
            sequences,
            vocab_size,
        })
    }

    pub fn n_positions(&self) -> usize {
        self.sequences.iter().map(|s| s.labels.len()).sum()
    }

    pub fn label_counts(&self) -> (usize, usize, usize, usize) {
        let (mut det, mut branch, mut filler, mut unknown) = (0, 0, 0, 0);
        for seq in &self.sequences {
            for l in &seq.labels {
                match l {
                    Label::Det => det += 1,
                    Label::Branch(_) => branch += 1,
                    Label::FillerInterior => filler += 1,
                    Label::Unknown => unknown += 1,
                }
            }
        }
        (det, branch, filler, unknown)
    }
}

/// Character-level ingestion over a declared charset. Token 0 is a BOS
/// marker; character i of the charset maps to token i + 1.
pub struct Charset {
    chars: Vec<char>,
    index: std::collections::HashMap<char, Token>,
}

pub const BOS: Token = 0;

impl Charset {
    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        if chars.is_empty() {
            return Err(Error::Config("empty charset".into()));
        }
        let mut index = std::collections::HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, (i + 1) as Token).is_some() {
                return Err(Error::Config(format!("duplicate charset character {c:?}")));
            }
        }
        Ok(Charset { chars, index })
    }

    /// Charset size plus the BOS special token.
    pub fn vocab_size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn tokenize(&self, text: &str, substitute: Option<char>) -> Result<Vec<Token>> {
        let sub = match substitute {
            Some(c) => Some(*self.index.get(&c).ok_or_else(|| {
                Error::Config(format!("substitution character {c:?} not in charset"))
            })?),
            None => None,
        };
        let mut out = vec![BOS];
        for (pos, c) in text.chars().enumerate() {
            match self.index.get(&c) {
                Some(&t) => out.push(t),
                None => match sub {
                    Some(t) => out.push(t),
                    None => {
                        return Err(Error::Data(format!(
                            "character {c:?} at position {pos} outside charset"
                        )))
                    }
                },
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, tokens: &[Token]) -> Result<String> {
        let mut out = String::new();
        for &t in tokens {
            if t == BOS {
                continue;
            }
            let i = t as usize - 1;
            if i >= self.chars.len() {
                return Err(Error::Data(format!("token {t} outside charset vocab")));
            }
            out.push(self.chars[i]);
        }
        Ok(out)
    }
}

/// Ingest a text file as one character-level sequence per line. Labels are
/// `Unknown`; there is no grammar behind real text.
pub fn ingest_text(
    path: &std::path::Path,
    charset: &Charset,
    substitute: Option<char>,
) -> Result<LabeledCorpus> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut sequences = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let tokens = charset.tokenize(line, substitute)?;
        if tokens.len() < 2 {
            continue;
        }
        let labels = vec![Label::Unknown; tokens.len() - 1];
        sequences.push(LabeledSequence {
            tokens,
            labels,
            answer_span: None,
        });
    }
    if sequences.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    Ok(LabeledCorpus {
        sequences,
        vocab_size: charset.vocab_size(),
    })
}
