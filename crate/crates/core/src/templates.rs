//! Versioned text templates shared by prompt generation and rationale
//! synthesis. Byte-determinism of prompts is part of the contract, so every
//! emitted fragment is assembled from these constants. `seed_texts` feeds the
//! vocabulary builder so template words always encode without UNK.

pub const TEMPLATE_VERSION: &str = "t1";

pub const PROMPT_HEADER: &str = "instruction: recommend the best items for this user.";
pub const CANDIDATES_HEADING: &str = "candidate items:";
/// `{n}` is replaced by the maximum recommendation length.
pub const TASK_SENTENCE: &str =
    "task: think about the user first, then output an ordered recommendation of up to {n} items chosen from the candidates.";

pub const NO_RECENT_ACTIVITY: &str = "No recent activity.";
pub const NO_LONG_TERM_ACTIVITY: &str = "no long-term activity.";
pub const RECENT_PREFIX: &str = "recent activity:";
pub const LONG_TERM_PREFIX: &str = "long-term, the user engaged most with:";
pub const PROFILE_PREFIX: &str = "user profile:";

pub const RATIONALE_FALLBACK: &str = "based on overall engagement";

/// Past-tense verb for each interaction kind, indexed like `corpus::Action`.
pub const ACTION_VERBS: [&str; 8] = [
    "viewed",
    "clicked",
    "liked",
    "saved",
    "commented on",
    "shared",
    "followed",
    "purchased",
];

/// Fixed fragments used by rationale synthesis.
pub const RATIONALE_ENGAGED: &str = "the user engaged with tag";
pub const RATIONALE_SHARE: &str = "share tag";
pub const RATIONALE_CANDIDATES: &str = "candidates";

/// All template text whose words must be representable in the vocabulary.
/// Small count literals are included because activity sentences embed them.
pub fn seed_texts() -> Vec<String> {
    let mut texts: Vec<String> = vec![
        PROMPT_HEADER.to_string(),
        CANDIDATES_HEADING.to_string(),
        TASK_SENTENCE.replace("{n}", "5"),
        NO_RECENT_ACTIVITY.to_string(),
        NO_LONG_TERM_ACTIVITY.to_string(),
        RECENT_PREFIX.to_string(),
        LONG_TERM_PREFIX.to_string(),
        PROFILE_PREFIX.to_string(),
        RATIONALE_FALLBACK.to_string(),
        RATIONALE_ENGAGED.to_string(),
        RATIONALE_SHARE.to_string(),
        RATIONALE_CANDIDATES.to_string(),
        "age gender city tier long-term interests: none ; tags: item items times stats: likes"
            .to_string(),
    ];
    for verb in ACTION_VERBS {
        texts.push(verb.to_string());
    }
    for n in 0..=64u32 {
        texts.push(n.to_string());
        texts.push(format!("{n},"));
        texts.push(format!("{n}."));
    }
    texts
}
