//! Synthetic recommendation environment with known latent preferences.
//! Users draw tag-preference vectors from a Dirichlet; items carry random
//! tag sets; events pick items by a softmax over user-item tag affinity, and
//! high-affinity picks produce deep interactions and long dwell. The latent
//! truth file lets tests compute the ceiling an ideal policy approaches.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::{Action, AgeBand, Corpus, Gender, InteractionEvent, ItemRecord, UserRecord};
use crate::error::{Error, Result};
use crate::promptgen::TrainingSample;
use crate::rng::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_tags: usize,
    pub tags_per_item: usize,
    /// Dirichlet concentration for user tag preferences; small values give
    /// near-one-hot users.
    pub affinity_concentration: f64,
    pub events_per_user: usize,
    /// Softmax sharpness of item choice in the affinity.
    pub choice_sharpness: f64,
    /// Logistic slope/midpoint mapping affinity to deep-interaction odds.
    pub deep_slope: f64,
    pub deep_mid: f64,
    /// Dwell seconds scale: mean = dwell_base + dwell_gain * affinity.
    pub dwell_base: f64,
    pub dwell_gain: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_users: 200,
            num_items: 300,
            num_tags: 12,
            tags_per_item: 2,
            affinity_concentration: 0.2,
            events_per_user: 40,
            choice_sharpness: 8.0,
            deep_slope: 8.0,
            deep_mid: 0.45,
            dwell_base: 5.0,
            dwell_gain: 60.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0
            || self.num_items == 0
            || self.num_tags == 0
            || self.tags_per_item == 0
            || self.events_per_user == 0
        {
            return Err(Error::Config("sim counts must be >= 1".into()));
        }
        if self.tags_per_item > self.num_tags {
            return Err(Error::Config("tags_per_item cannot exceed num_tags".into()));
        }
        if !(self.affinity_concentration > 0.0) {
            return Err(Error::Config("affinity_concentration must be > 0".into()));
        }
        Ok(())
    }
}

/// Ground truth behind a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub tags: Vec<String>,
    /// Per-user preference vector over `tags`, nonnegative, sums to 1.
    pub user_prefs: BTreeMap<String, Vec<f64>>,
    pub item_tags: BTreeMap<String, BTreeSet<String>>,
}

impl LatentTruth {
    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    /// Sum of the user's preference mass over the item's tags.
    pub fn affinity(&self, user_id: &str, item_id: &str) -> f64 {
        let Some(prefs) = self.user_prefs.get(user_id) else {
            return 0.0;
        };
        let Some(tags) = self.item_tags.get(item_id) else {
            return 0.0;
        };
        tags.iter()
            .filter_map(|t| self.tag_index(t))
            .map(|i| prefs[i])
            .sum()
    }
}

const TAG_WORDS: [&str; 24] = [
    "food", "travel", "fitness", "gaming", "fashion", "music", "movies", "tech", "sports",
    "parenting", "finance", "art", "books", "pets", "diy", "nature", "science", "history",
    "comedy", "cars", "beauty", "gardening", "photography", "cooking",
];

const TITLE_NOUNS: [&str; 8] = [
    "notes", "guide", "stories", "tips", "ideas", "diary", "review", "picks",
];

fn tag_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            if i < TAG_WORDS.len() {
                TAG_WORDS[i].to_string()
            } else {
                format!("topic{i}")
            }
        })
        .collect()
}

fn dirichlet(rng: &mut ChaCha8Rng, dim: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= f64::MIN_POSITIVE {
        // extreme concentrations can underflow every gamma draw
        let hot = rng.gen_range(0..dim);
        draws = vec![0.0; dim];
        draws[hot] = 1.0;
        return draws;
    }
    draws.iter_mut().for_each(|d| *d /= sum);
    draws
}

/// Softmax choice over `sharpness * affinity` scores.
pub(crate) fn sample_item_index(
    affinities: &[f64],
    sharpness: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let m = affinities
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = affinities
        .iter()
        .map(|a| (sharpness * (a - m)).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * z;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    affinities.len() - 1
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const DEEP_ACTIONS: [Action; 6] = [
    Action::Like,
    Action::Save,
    Action::Comment,
    Action::Share,
    Action::Follow,
    Action::Purchase,
];
const SHALLOW_ACTIONS: [Action; 2] = [Action::View, Action::Click];

fn sample_truth(cfg: &SimConfig) -> LatentTruth {
    let tags = tag_names(cfg.num_tags);
    let mut item_tags = BTreeMap::new();
    for idx in 0..cfg.num_items {
        let item_id = format!("i{idx:04}");
        let mut rng = derive_rng(cfg.seed, "sim-item", &[idx as u64]);
        let mut order: Vec<usize> = (0..cfg.num_tags).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let chosen: BTreeSet<String> = order
            .into_iter()
            .take(cfg.tags_per_item)
            .map(|t| tags[t].clone())
            .collect();
        item_tags.insert(item_id, chosen);
    }
    let mut user_prefs = BTreeMap::new();
    for idx in 0..cfg.num_users {
        let user_id = format!("u{idx:04}");
        let mut rng = derive_rng(cfg.seed, "sim-user", &[idx as u64]);
        user_prefs.insert(
            user_id,
            dirichlet(&mut rng, cfg.num_tags, cfg.affinity_concentration),
        );
    }
    LatentTruth {
        tags,
        user_prefs,
        item_tags,
    }
}

/// Corpus generation from an explicit truth; exposed for tests that inject
/// hand-built preference vectors.
pub fn generate_from_truth(cfg: &SimConfig, truth: &LatentTruth) -> Result<(Corpus, LatentTruth)> {
    cfg.validate()?;
    let mut items = Vec::with_capacity(cfg.num_items);
    for (idx, (item_id, tags)) in truth.item_tags.iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, "sim-item-text", &[idx as u64]);
        let first_tag = tags.iter().next().expect("tags nonempty").clone();
        let noun = TITLE_NOUNS[rng.gen_range(0..TITLE_NOUNS.len())];
        let tag_list: Vec<String> = tags.iter().cloned().collect();
        let mut stats = BTreeMap::new();
        stats.insert(Action::Like, rng.gen_range(0..500));
        stats.insert(Action::Comment, rng.gen_range(0..50));
        stats.insert(Action::Share, rng.gen_range(0..30));
        items.push(ItemRecord {
            item_id: item_id.clone(),
            title: format!("{first_tag} {noun}"),
            body: format!("a short piece about {}", tag_list.join(" and ")),
            tags: tags.clone(),
            stats,
        });
    }

    let item_ids: Vec<&String> = truth.item_tags.keys().collect();
    let mut users = Vec::with_capacity(cfg.num_users);
    let mut events = Vec::new();
    for (uidx, (user_id, prefs)) in truth.user_prefs.iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, "sim-profile", &[uidx as u64]);
        let mut ranked: Vec<usize> = (0..cfg.num_tags).collect();
        ranked.sort_by(|&a, &b| {
            prefs[b]
                .partial_cmp(&prefs[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let interest_tags: BTreeSet<String> = ranked
            .iter()
            .take(3)
            .map(|&t| truth.tags[t].clone())
            .collect();
        let age = [
            AgeBand::Teen,
            AgeBand::YoungAdult,
            AgeBand::Adult,
            AgeBand::MiddleAged,
            AgeBand::Senior,
        ][rng.gen_range(0..5)];
        let gender = [Gender::Female, Gender::Male, Gender::Other][rng.gen_range(0..3)];
        users.push(UserRecord {
            user_id: user_id.clone(),
            age_band: age,
            gender,
            city_tier: rng.gen_range(1..=5),
            interest_tags,
        });

        let affinities: Vec<f64> = item_ids
            .iter()
            .map(|id| truth.affinity(user_id, id))
            .collect();
        let mut erng = derive_rng(cfg.seed, "sim-events", &[uidx as u64]);
        let mut ts: i64 = 1_000_000;
        for _ in 0..cfg.events_per_user {
            ts += erng.gen_range(3_600..=86_400);
            let choice = sample_item_index(&affinities, cfg.choice_sharpness, &mut erng);
            let affinity = affinities[choice];
            let deep = erng.gen::<f64>() < sigmoid(cfg.deep_slope * (affinity - cfg.deep_mid));
            let action = if deep {
                DEEP_ACTIONS[erng.gen_range(0..DEEP_ACTIONS.len())]
            } else {
                SHALLOW_ACTIONS[erng.gen_range(0..SHALLOW_ACTIONS.len())]
            };
            let mean = cfg.dwell_base + cfg.dwell_gain * affinity;
            let dwell = -(1.0 - erng.gen::<f64>()).ln() * mean;
            events.push(InteractionEvent {
                user_id: user_id.clone(),
                item_id: item_ids[choice].clone(),
                action,
                timestamp: ts,
                dwell,
            });
        }
    }
    let corpus = Corpus::new(users, items, events)?;
    Ok((corpus, truth.clone()))
}

/// Generate a corpus and its latent truth from the config seed.
pub fn generate(cfg: &SimConfig) -> Result<(Corpus, LatentTruth)> {
    cfg.validate()?;
    let truth = sample_truth(cfg);
    generate_from_truth(cfg, &truth)
}

/// Fraction of samples whose affinity-argmax candidate lands in the label:
/// the ceiling an ideal policy approaches. Ties break toward the smaller
/// item id.
pub fn oracle_label_rate(truth: &LatentTruth, samples: &[TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("oracle rate needs samples".into()));
    }
    let mut hits = 0usize;
    for sample in samples {
        let best = sample
            .candidate_pool
            .iter()
            .map(|id| (truth.affinity(&sample.user_id, id), id))
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.cmp(a.1)))
            .map(|(_, id)| id.clone());
        if let Some(best) = best {
            if sample.label_items.contains(&best) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
