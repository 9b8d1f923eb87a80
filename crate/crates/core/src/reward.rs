//! Composite rollout reward: normalized position-weighted LCS against the
//! label sequence, a binary format bonus, optional diversity and novelty
//! terms, and capped per-violation penalties.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, EOS, REC_CLOSE, REC_OPEN, THINK_CLOSE, THINK_OPEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    MalformedStructure,
    DuplicateItem,
    InvalidItemToken,
    OutOfPoolItem,
    OverlongThink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRollout {
    pub raw: Vec<u32>,
    pub well_formed: bool,
    pub think_len: usize,
    /// Items in the rec span, order preserved, first occurrence kept.
    pub rec_items: Vec<String>,
    /// Violation multiset: one count per occurrence.
    pub violations: BTreeMap<Violation, u32>,
}

impl ParsedRollout {
    pub fn total_violations(&self) -> u32 {
        self.violations.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub w_lcs: f64,
    pub w_fmt: f64,
    pub w_div: f64,
    pub w_nov: f64,
    /// Penalty per violation occurrence, capped at `penalty_cap` total.
    pub violation_penalty: f64,
    pub penalty_cap: f64,
    /// Exponent on the 1/log2(i+1) position weight.
    pub lcs_position_exponent: f64,
    pub think_limit: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            w_lcs: 1.0,
            w_fmt: 0.2,
            w_div: 0.0,
            w_nov: 0.0,
            violation_penalty: 0.1,
            penalty_cap: 0.5,
            lcs_position_exponent: 1.0,
            think_limit: 32,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_lcs", self.w_lcs),
            ("w_fmt", self.w_fmt),
            ("w_div", self.w_div),
            ("w_nov", self.w_nov),
            ("lcs_position_exponent", self.lcs_position_exponent),
        ] {
            if !w.is_finite() {
                return Err(Error::Config(format!("reward weight {name} must be finite")));
            }
        }
        if !(self.violation_penalty >= 0.0) || !(self.penalty_cap >= 0.0) {
            return Err(Error::Config(
                "violation_penalty and penalty_cap must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Structure scan of a generated sequence. Never fails: malformed input
/// yields `well_formed = false` and whatever rec items could be salvaged.
pub fn parse_rollout(
    ids: &[u32],
    vocab: &Vocab,
    candidate_pool: &[String],
    think_limit: usize,
) -> ParsedRollout {
    enum Phase {
        Start,
        Think,
        AfterThink,
        Rec,
        AfterRec,
        AfterEos,
    }
    let pool: BTreeSet<&str> = candidate_pool.iter().map(String::as_str).collect();
    let mut violations: BTreeMap<Violation, u32> = BTreeMap::new();
    fn bump(violations: &mut BTreeMap<Violation, u32>, v: Violation) {
        *violations.entry(v).or_insert(0) += 1;
    }
    let mut well_formed = true;
    let mut think_len = 0usize;
    let mut rec_items: Vec<String> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut trailing_flagged = false;
    let mut phase = Phase::Start;

    for &id in ids {
        match phase {
            Phase::Start => {
                if id == THINK_OPEN {
                    phase = Phase::Think;
                } else {
                    well_formed = false;
                    bump(&mut violations, Violation::MalformedStructure);
                    if id == REC_OPEN {
                        phase = Phase::Rec;
                    }
                }
            }
            Phase::Think => match id {
                THINK_CLOSE => phase = Phase::AfterThink,
                REC_OPEN => {
                    well_formed = false;
                    bump(&mut violations, Violation::MalformedStructure);
                    phase = Phase::Rec;
                }
                // PAD, BOS, EOS or a stray marker inside the think span
                0 | 1 | EOS | THINK_OPEN | REC_CLOSE => {
                    well_formed = false;
                    bump(&mut violations, Violation::MalformedStructure);
                    think_len += 1;
                }
                _ => think_len += 1,
            },
            Phase::AfterThink => {
                if id == REC_OPEN {
                    phase = Phase::Rec;
                } else {
                    well_formed = false;
                    bump(&mut violations, Violation::MalformedStructure);
                }
            }
            Phase::Rec => {
                if id == REC_CLOSE {
                    phase = Phase::AfterRec;
                } else if let Some(item) = vocab.item_of(id) {
                    if !pool.contains(item) {
                        bump(&mut violations, Violation::OutOfPoolItem);
                    }
                    if seen.insert(item.to_string()) {
                        rec_items.push(item.to_string());
                    } else {
                        bump(&mut violations, Violation::DuplicateItem);
                    }
                } else if vocab.is_special(id) {
                    well_formed = false;
                    bump(&mut violations, Violation::MalformedStructure);
                } else {
                    bump(&mut violations, Violation::InvalidItemToken);
                }
            }
            Phase::AfterRec => {
                if id == EOS {
                    phase = Phase::AfterEos;
                } else if !trailing_flagged {
                    well_formed = false;
                    bump(&mut violations, Violation::MalformedStructure);
                    trailing_flagged = true;
                }
            }
            Phase::AfterEos => {
                if !trailing_flagged {
                    well_formed = false;
                    bump(&mut violations, Violation::MalformedStructure);
                    trailing_flagged = true;
                }
            }
        }
    }
    if !matches!(phase, Phase::AfterRec | Phase::AfterEos) {
        well_formed = false;
        bump(&mut violations, Violation::MalformedStructure);
    }
    if think_len > think_limit {
        bump(&mut violations, Violation::OverlongThink);
    }
    ParsedRollout {
        raw: ids.to_vec(),
        well_formed,
        think_len,
        rec_items,
        violations,
    }
}

/// Position weight for 1-based position `i`.
pub fn position_weight(i: usize, exponent: f64) -> f64 {
    let base = 1.0 / ((i as f64) + 1.0).log2();
    if exponent == 1.0 {
        base
    } else {
        base.powf(exponent)
    }
}

/// Best common subsequence of `pred` and `target`, scored by the sum of
/// position weights at the matched `pred` positions, normalized so a
/// prediction starting with the whole target scores exactly 1. Dynamic
/// program in O(|pred| * |target|).
pub fn lcs_reward(pred: &[String], target: &[String], exponent: f64) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Data("lcs target must be nonempty".into()));
    }
    let norm: f64 = (1..=target.len())
        .map(|i| position_weight(i, exponent))
        .sum();
    if pred.is_empty() {
        return Ok(0.0);
    }
    let m = pred.len();
    let n = target.len();
    let mut dp = vec![vec![0.0f64; n + 1]; m + 1];
    for i in 1..=m {
        let w = position_weight(i, exponent);
        for j in 1..=n {
            let mut best = dp[i - 1][j].max(dp[i][j - 1]);
            if pred[i - 1] == target[j - 1] {
                best = best.max(dp[i - 1][j - 1] + w);
            }
            dp[i][j] = best;
        }
    }
    Ok(dp[m][n] / norm)
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// 1 minus the mean pairwise Jaccard similarity of item tag sets; 0 for
/// fewer than two items. Unknown items count as tagless.
pub fn diversity_reward(rec_items: &[String], corpus: &Corpus) -> f64 {
    if rec_items.len() < 2 {
        return 0.0;
    }
    let tag_sets: Vec<BTreeSet<String>> = rec_items
        .iter()
        .map(|id| {
            corpus
                .item(id)
                .map(|it| it.tags.clone())
                .unwrap_or_default()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..tag_sets.len() {
        for j in i + 1..tag_sets.len() {
            total += jaccard(&tag_sets[i], &tag_sets[j]);
            pairs += 1;
        }
    }
    1.0 - total / pairs as f64
}

/// Mean over items of one minus the popularity percentile, where the
/// percentile of an item is (number of corpus items with strictly smaller
/// interaction count) / (corpus size - 1). Items missing from the corpus
/// count as zero-interaction (maximally novel); empty lists score 0.
pub fn novelty_reward(rec_items: &[String], corpus: &Corpus) -> f64 {
    if rec_items.is_empty() {
        return 0.0;
    }
    let mut counts: Vec<u64> = corpus.popularity().values().copied().collect();
    counts.sort_unstable();
    let n = counts.len();
    if n <= 1 {
        return 1.0;
    }
    rec_items
        .iter()
        .map(|id| {
            let count = corpus.popularity().get(id).copied().unwrap_or(0);
            let rank = counts.partition_point(|&c| c < count);
            1.0 - rank as f64 / (n - 1) as f64
        })
        .sum::<f64>()
        / rec_items.len() as f64
}

/// Per-component reward values for one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub lcs: f64,
    pub format: f64,
    pub diversity: f64,
    pub novelty: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Weighted component sum minus the capped violation penalty. Malformed
/// rollouts still score the lcs term on whatever items were salvaged.
pub fn reward_breakdown(
    parsed: &ParsedRollout,
    target: &[String],
    corpus: &Corpus,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let lcs = if target.is_empty() {
        0.0
    } else {
        lcs_reward(&parsed.rec_items, target, cfg.lcs_position_exponent).expect("nonempty target")
    };
    let format = if parsed.well_formed { 1.0 } else { 0.0 };
    let diversity = diversity_reward(&parsed.rec_items, corpus);
    let novelty = novelty_reward(&parsed.rec_items, corpus);
    let penalty =
        (cfg.violation_penalty * parsed.total_violations() as f64).min(cfg.penalty_cap);
    let total = cfg.w_lcs * lcs + cfg.w_fmt * format + cfg.w_div * diversity
        + cfg.w_nov * novelty
        - penalty;
    RewardBreakdown {
        lcs,
        format,
        diversity,
        novelty,
        penalty,
        total,
    }
}

pub fn composite_reward(
    parsed: &ParsedRollout,
    target: &[String],
    corpus: &Corpus,
    cfg: &RewardConfig,
) -> f64 {
    reward_breakdown(parsed, target, corpus, cfg).total
}
