//! Deterministic word-level vocabulary with structural control tokens and one
//! token per item id. A `Vocab` is frozen by construction: both maps are
//! built once and never mutated, so sharing across threads is safe.

use std::collections::{BTreeMap, HashMap};

use crate::corpus::ItemRecord;
use crate::error::{Error, Result};
use crate::promptgen::{item_token, TrainingSample};
use crate::templates;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const THINK_OPEN: u32 = 4;
pub const THINK_CLOSE: u32 = 5;
pub const REC_OPEN: u32 = 6;
pub const REC_CLOSE: u32 = 7;
pub const NUM_SPECIALS: usize = 8;

pub const SPECIAL_LITERALS: [&str; NUM_SPECIALS] = [
    "<pad>", "<bos>", "<eos>", "<unk>", "<think>", "</think>", "<rec>", "</rec>",
];

pub const DEFAULT_MIN_WORD_FREQ: usize = 2;

#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    num_item_tokens: usize,
    num_word_tokens: usize,
}

fn is_item_literal(tok: &str) -> bool {
    tok.len() > "<item:>".len() && tok.starts_with("<item:") && tok.ends_with('>')
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn num_item_tokens(&self) -> usize {
        self.num_item_tokens
    }

    pub fn num_word_tokens(&self) -> usize {
        self.num_word_tokens
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Token id for an item id, if the item is in the vocabulary.
    pub fn item_id_token(&self, item_id: &str) -> Option<u32> {
        self.id_of(&item_token(item_id))
    }

    /// Inverse of `item_id_token`: the item id carried by a token, if any.
    pub fn item_of(&self, id: u32) -> Option<&str> {
        if !self.is_item(id) {
            return None;
        }
        let tok = self.token_of(id)?;
        Some(&tok["<item:".len()..tok.len() - 1])
    }

    pub fn is_item(&self, id: u32) -> bool {
        let id = id as usize;
        id >= NUM_SPECIALS && id < NUM_SPECIALS + self.num_item_tokens
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// One `token<TAB>id` line per entry, id order.
    pub fn to_lines(&self) -> Vec<String> {
        self.id_to_token
            .iter()
            .enumerate()
            .map(|(id, tok)| format!("{tok}\t{id}"))
            .collect()
    }

    pub fn from_lines<'a>(lines: impl Iterator<Item = &'a str>) -> Result<Vocab> {
        let mut entries: Vec<(String, u32)> = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Data(format!("vocab line {} lacks a tab", n + 1)))?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::Data(format!("vocab line {}: bad id {id:?}", n + 1)))?;
            entries.push((tok.to_string(), id));
        }
        entries.sort_by_key(|(_, id)| *id);
        let mut id_to_token = Vec::with_capacity(entries.len());
        let mut token_to_id = HashMap::with_capacity(entries.len());
        for (expect, (tok, id)) in entries.into_iter().enumerate() {
            if id as usize != expect {
                return Err(Error::Data(format!(
                    "vocab ids not dense: expected {expect}, found {id}"
                )));
            }
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocab token {tok:?}")));
            }
            id_to_token.push(tok);
        }
        if id_to_token.len() < NUM_SPECIALS {
            return Err(Error::Data("vocab missing special tokens".into()));
        }
        for (i, lit) in SPECIAL_LITERALS.iter().enumerate() {
            if id_to_token[i] != *lit {
                return Err(Error::Data(format!(
                    "vocab special slot {i} holds {:?}, expected {lit:?}",
                    id_to_token[i]
                )));
            }
        }
        let num_item_tokens = id_to_token
            .iter()
            .skip(NUM_SPECIALS)
            .take_while(|t| is_item_literal(t))
            .count();
        let num_word_tokens = id_to_token.len() - NUM_SPECIALS - num_item_tokens;
        Ok(Vocab {
            token_to_id,
            id_to_token,
            num_item_tokens,
            num_word_tokens,
        })
    }
}

/// Build the vocabulary: fixed specials, one token per item (item-id order),
/// then words at or above `min_word_freq`, lexicographic. Template words are
/// seeded so structured targets always encode without UNK.
pub fn build_vocab(
    samples: &[TrainingSample],
    items: &BTreeMap<String, ItemRecord>,
    min_word_freq: usize,
) -> Vocab {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut bump = |text: &str, by_min: bool| {
        for raw in text.split_whitespace() {
            let word = raw.to_lowercase();
            if SPECIAL_LITERALS.contains(&word.as_str()) || is_item_literal(&word) {
                continue;
            }
            let e = counts.entry(word).or_insert(0);
            if by_min {
                *e = (*e).max(min_word_freq);
            } else {
                *e += 1;
            }
        }
    };
    for s in samples {
        bump(&s.prompt_text, false);
    }
    for item in items.values() {
        for tag in &item.tags {
            bump(tag, false);
        }
    }
    for text in templates::seed_texts() {
        bump(&text, true);
    }

    let mut id_to_token: Vec<String> =
        SPECIAL_LITERALS.iter().map(|s| s.to_string()).collect();
    for item_id in items.keys() {
        id_to_token.push(item_token(item_id));
    }
    let num_item_tokens = items.len();
    let mut num_word_tokens = 0;
    for (word, count) in &counts {
        if *count >= min_word_freq {
            id_to_token.push(word.clone());
            num_word_tokens += 1;
        }
    }
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(id, tok)| (tok.clone(), id as u32))
        .collect();
    Vocab {
        token_to_id,
        id_to_token,
        num_item_tokens,
        num_word_tokens,
    }
}

/// Whitespace-split, lowercase words; control markers and item mentions map
/// to single tokens; anything unknown maps to UNK.
pub fn encode(text: &str, vocab: &Vocab) -> Vec<u32> {
    text.split_whitespace()
        .map(|raw| {
            if let Some(pos) = SPECIAL_LITERALS.iter().position(|lit| *lit == raw) {
                return pos as u32;
            }
            if is_item_literal(raw) {
                return vocab.id_of(raw).unwrap_or(UNK);
            }
            vocab.id_of(&raw.to_lowercase()).unwrap_or(UNK)
        })
        .collect()
}

/// Inverse of `encode` modulo UNK substitution and whitespace normalization.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab
            .token_of(id)
            .ok_or_else(|| Error::Data(format!("token id {id} out of range")))?;
        words.push(tok);
    }
    Ok(words.join(" "))
}
