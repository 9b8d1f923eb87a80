//! Stage orchestration and artifact I/O.
//!
//! Every artifact starts with a `#` header line carrying the code version,
//! the resolved config hash and the seed; writers stage to a temp file and
//! atomically rename so no artifact is ever half-written. Readers skip `#`
//! lines. Each stage installs a worker pool sized by `workers`; results are
//! identical for any worker count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{load_corpus, preprocess, Corpus};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::grpo::{train_grpo, IterationMetrics};
use crate::policy::PolicyParams;
use crate::promptgen::{generate_samples, Split, TrainingSample};
use crate::reward::{parse_rollout, reward_breakdown};
use crate::sft::{prepare_examples, train_sft, SftExample};
use crate::simenv::{generate, oracle_label_rate, LatentTruth};
use crate::tokenizer::{build_vocab, Vocab};

pub const USERS_FILE: &str = "users.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const TRUTH_FILE: &str = "truth.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const SFT_CHECKPOINT_FILE: &str = "sft_checkpoint.json";
pub const SFT_LOSS_FILE: &str = "sft_loss.csv";
pub const GRPO_CHECKPOINT_FILE: &str = "grpo_checkpoint.json";
pub const GRPO_METRICS_FILE: &str = "grpo_metrics.csv";
pub const ROLLOUTS_FILE: &str = "rollouts.jsonl";
pub const EVAL_REPORT_FILE: &str = "eval_report.txt";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.json";
pub const SCORE_FILE: &str = "score.jsonl";

fn header_line(cfg: &RunConfig) -> String {
    format!(
        "# recrl v{} config_hash={} seed={}",
        env!("CARGO_PKG_VERSION"),
        cfg.hash(),
        cfg.seed
    )
}

/// Write via a temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, content: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(content.as_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_artifact(cfg: &RunConfig, name: &str, body: &str) -> Result<PathBuf> {
    let path = cfg.out_dir.join(name);
    let mut content = header_line(cfg);
    content.push('\n');
    content.push_str(body);
    atomic_write(&path, &content)?;
    Ok(path)
}

fn write_jsonl<T: Serialize>(cfg: &RunConfig, name: &str, items: &[T]) -> Result<PathBuf> {
    let mut body = String::new();
    for item in items {
        body.push_str(&serde_json::to_string(item).expect("artifact serializes"));
        body.push('\n');
    }
    write_artifact(cfg, name, &body)
}

/// All non-header lines of a file.
pub fn read_data_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(str::to_string)
        .collect())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_data_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(f)
}

/// Generate the synthetic corpus files plus the latent-truth file.
pub fn stage_simulate(cfg: &RunConfig) -> Result<String> {
    let mut sim = cfg.sim.clone();
    sim.seed = crate::rng::derive_seed(cfg.seed, "simulate", &[sim.seed]);
    let (corpus, truth) = generate(&sim)?;
    let users: Vec<_> = corpus.users().values().collect();
    let items: Vec<_> = corpus.items().values().collect();
    let events: Vec<_> = corpus.events_by_user().values().flatten().collect();
    write_jsonl(cfg, USERS_FILE, &users)?;
    write_jsonl(cfg, ITEMS_FILE, &items)?;
    write_jsonl(cfg, EVENTS_FILE, &events)?;
    let truth_json = serde_json::to_string(&truth).expect("truth serializes");
    write_artifact(cfg, TRUTH_FILE, &format!("{truth_json}\n"))?;
    Ok(format!(
        "simulate: wrote {} users, {} items, {} events",
        users.len(),
        items.len(),
        events.len()
    ))
}

pub fn load_raw_corpus(cfg: &RunConfig) -> Result<Corpus> {
    load_corpus(&cfg.users_path(), &cfg.items_path(), &cfg.events_path())
}

pub fn load_preprocessed(cfg: &RunConfig) -> Result<Corpus> {
    Ok(preprocess(&load_raw_corpus(cfg)?, cfg.min_interactions))
}

pub fn load_truth(cfg: &RunConfig) -> Result<LatentTruth> {
    let lines = read_data_lines(&cfg.out_dir.join(TRUTH_FILE))?;
    let text = lines.join("");
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad truth file: {e}")))
}

/// Validate the corpus files and report what survives preprocessing.
pub fn stage_ingest(cfg: &RunConfig) -> Result<String> {
    let raw = load_raw_corpus(cfg)?;
    let pre = preprocess(&raw, cfg.min_interactions);
    Ok(format!(
        "ingest: {} users, {} items, {} events; {} users with >= {} interactions",
        raw.users().len(),
        raw.items().len(),
        raw.num_events(),
        pre.users().len(),
        cfg.min_interactions
    ))
}

pub fn stage_prompts(cfg: &RunConfig) -> Result<String> {
    let corpus = load_preprocessed(cfg)?;
    let samples = generate_samples(&corpus, &cfg.promptgen, cfg.seed)?;
    if samples.is_empty() {
        return Err(Error::Data("no samples survived prompt generation".into()));
    }
    write_jsonl(cfg, SAMPLES_FILE, &samples)?;
    let (mut train, mut valid, mut test) = (0, 0, 0);
    for s in &samples {
        match s.split {
            Split::Train => train += 1,
            Split::Validation => valid += 1,
            Split::Test => test += 1,
        }
    }
    Ok(format!(
        "prompts: {} samples ({train} train / {valid} validation / {test} test)",
        samples.len()
    ))
}

pub fn load_samples(cfg: &RunConfig) -> Result<Vec<TrainingSample>> {
    read_jsonl(&cfg.out_dir.join(SAMPLES_FILE))
}

pub fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    let lines = read_data_lines(&cfg.out_dir.join(VOCAB_FILE))?;
    Vocab::from_lines(lines.iter().map(String::as_str))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let lines = read_data_lines(path)?;
    PolicyParams::from_checkpoint_json(&lines.join(""))
}

fn write_checkpoint(cfg: &RunConfig, name: &str, params: &PolicyParams) -> Result<PathBuf> {
    write_artifact(cfg, name, &format!("{}\n", params.to_checkpoint_json()))
}

fn split_examples<'a>(
    samples: &'a [TrainingSample],
    split: Split,
) -> Vec<&'a TrainingSample> {
    samples.iter().filter(|s| s.split == split).collect()
}

fn owned(samples: Vec<&TrainingSample>) -> Vec<TrainingSample> {
    samples.into_iter().cloned().collect()
}

/// Build the vocabulary, train the supervised stage, and write the vocab,
/// checkpoint and loss-curve artifacts.
pub fn stage_sft(cfg: &RunConfig) -> Result<String> {
    let corpus = load_preprocessed(cfg)?;
    let samples = load_samples(cfg)?;
    let vocab = build_vocab(&samples, corpus.items(), cfg.min_word_freq);
    write_artifact(cfg, VOCAB_FILE, &format!("{}\n", vocab.to_lines().join("\n")))?;

    let train = owned(split_examples(&samples, Split::Train));
    let valid = owned(split_examples(&samples, Split::Validation));
    if train.is_empty() {
        return Err(Error::Data("no training samples in the train split".into()));
    }
    let (curve, params) = with_pool(cfg, || {
        let train_ex: Vec<SftExample> = prepare_examples(&train, &corpus, &vocab)?;
        let valid_ex: Vec<SftExample> = prepare_examples(&valid, &corpus, &vocab)?;
        let policy_cfg = cfg.policy.to_policy_config(vocab.size());
        policy_cfg.validate()?;
        let init = PolicyParams::init(policy_cfg, crate::rng::derive_seed(cfg.seed, "sft-init", &[]));
        let outcome = train_sft(&init, &train_ex, &valid_ex, &cfg.sft, cfg.seed)?;
        Ok((outcome.curve, outcome.params))
    })?;

    let mut csv = String::from("epoch,train_nll,valid_nll\n");
    for e in &curve {
        csv.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.train_nll, e.valid_nll));
    }
    write_artifact(cfg, SFT_LOSS_FILE, &csv)?;
    write_checkpoint(cfg, SFT_CHECKPOINT_FILE, &params)?;
    let last = curve.last();
    Ok(format!(
        "sft: {} train samples, vocab {}, final train nll {}",
        train.len(),
        vocab.size(),
        last.map(|e| format!("{:.4}", e.train_nll))
            .unwrap_or_else(|| "n/a".into())
    ))
}

/// GRPO stage. On divergence the last good checkpoint and the metrics so far
/// are still written, then the error propagates (exit code 4).
pub fn stage_grpo(cfg: &RunConfig) -> Result<String> {
    let corpus = load_preprocessed(cfg)?;
    let samples = load_samples(cfg)?;
    let vocab = load_vocab(cfg)?;
    let sft_params = load_checkpoint(&cfg.out_dir.join(SFT_CHECKPOINT_FILE))?;
    let train = owned(split_examples(&samples, Split::Train));

    let outcome = with_pool(cfg, || {
        train_grpo(
            &sft_params,
            &train,
            &corpus,
            &vocab,
            &cfg.reward,
            &cfg.grpo,
            cfg.seed,
        )
    })?;

    let mut csv = String::from(IterationMetrics::CSV_HEADER);
    csv.push('\n');
    for m in &outcome.metrics {
        csv.push_str(&m.csv_line());
        csv.push('\n');
    }
    write_artifact(cfg, GRPO_METRICS_FILE, &csv)?;
    write_checkpoint(cfg, GRPO_CHECKPOINT_FILE, &outcome.params)?;
    if cfg.grpo.dump_rollouts {
        write_jsonl(cfg, ROLLOUTS_FILE, &outcome.rollout_dump)?;
    }
    if let Some(reason) = outcome.divergence {
        return Err(Error::Numeric(format!(
            "grpo diverged (last good checkpoint written): {reason}"
        )));
    }
    let (first, last) = (outcome.metrics.first(), outcome.metrics.last());
    Ok(format!(
        "grpo: {} iterations, mean reward {} -> {}",
        outcome.metrics.len(),
        first
            .map(|m| format!("{:.4}", m.mean_reward))
            .unwrap_or_else(|| "n/a".into()),
        last.map(|m| format!("{:.4}", m.mean_reward))
            .unwrap_or_else(|| "n/a".into()),
    ))
}

/// Evaluate a checkpoint on the test split.
pub fn stage_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let corpus = load_preprocessed(cfg)?;
    let samples = load_samples(cfg)?;
    let vocab = load_vocab(cfg)?;
    let checkpoint_path = match &cfg.eval.checkpoint {
        Some(p) => p.clone(),
        None => {
            let grpo = cfg.out_dir.join(GRPO_CHECKPOINT_FILE);
            if grpo.exists() {
                grpo
            } else {
                cfg.out_dir.join(SFT_CHECKPOINT_FILE)
            }
        }
    };
    let params = load_checkpoint(&checkpoint_path)?;
    let test = owned(split_examples(&samples, Split::Test));
    if test.is_empty() {
        return Err(Error::Data("no samples in the test split".into()));
    }
    let report = with_pool(cfg, || {
        evaluate(
            &params,
            &test,
            &vocab,
            &corpus,
            &cfg.eval.k_list,
            cfg.eval.max_new,
        )
    })?;
    write_artifact(
        cfg,
        EVAL_REPORT_FILE,
        &format!(
            "checkpoint: {}\n{}",
            checkpoint_path.display(),
            report.render_text()
        ),
    )?;
    write_artifact(
        cfg,
        EVAL_SUMMARY_FILE,
        &format!("{}\n", report.render_summary_line()),
    )?;
    Ok(report)
}

#[derive(Debug, serde::Deserialize)]
struct ScoreInput {
    sample_id: String,
    #[serde(default)]
    iteration: Option<usize>,
    #[serde(default)]
    k: Option<usize>,
    tokens: Vec<u32>,
}

#[derive(Debug, serde::Serialize)]
struct ScoreOutput {
    sample_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    iteration: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    well_formed: bool,
    violations: u32,
    lcs: f64,
    format: f64,
    diversity: f64,
    novelty: f64,
    penalty: f64,
    total: f64,
}

/// Offline reward audit of a rollout dump: one component breakdown per line.
pub fn stage_score(cfg: &RunConfig, rollouts: &Path) -> Result<String> {
    let corpus = load_preprocessed(cfg)?;
    let samples = load_samples(cfg)?;
    let vocab = load_vocab(cfg)?;
    let inputs: Vec<ScoreInput> = read_jsonl(rollouts)?;
    let mut outputs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let sample = samples
            .iter()
            .find(|s| s.sample_id == input.sample_id)
            .ok_or_else(|| {
                Error::Data(format!("unknown sample_id {:?} in rollout file", input.sample_id))
            })?;
        let parsed = parse_rollout(
            &input.tokens,
            &vocab,
            &sample.candidate_pool,
            cfg.reward.think_limit,
        );
        let bd = reward_breakdown(&parsed, &sample.label_items, &corpus, &cfg.reward);
        outputs.push(ScoreOutput {
            sample_id: input.sample_id,
            iteration: input.iteration,
            k: input.k,
            well_formed: parsed.well_formed,
            violations: parsed.total_violations(),
            lcs: bd.lcs,
            format: bd.format,
            diversity: bd.diversity,
            novelty: bd.novelty,
            penalty: bd.penalty,
            total: bd.total,
        });
    }
    let n = outputs.len();
    write_jsonl(cfg, SCORE_FILE, &outputs)?;
    Ok(format!("score: {n} rollouts scored"))
}

/// All stages in order; returns the final eval report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<(Vec<String>, EvalReport)> {
    let mut log = Vec::new();
    log.push(stage_simulate(cfg)?);
    log.push(stage_ingest(cfg)?);
    log.push(stage_prompts(cfg)?);
    log.push(stage_sft(cfg)?);
    log.push(stage_grpo(cfg)?);
    let report = stage_eval(cfg)?;
    log.push(format!("eval: {}", report.render_summary_line()));
    Ok((log, report))
}

/// Context line for the full-scale reference results that this desk-scale
/// artifact deliberately does not reproduce.
pub fn reference_results_note() -> String {
    let mut s = String::new();
    s.push_str("reference results from the original full-scale experiments (context only, NOT REPRODUCED at desk scale):\n");
    s.push_str("  amazon-beauty recall@5 = 0.0541 [NOT REPRODUCED]\n");
    s.push_str("  amazon-sports ndcg@10 = 0.0302 [NOT REPRODUCED]\n");
    s.push_str("  industrial recall@10 = 0.5311 [NOT REPRODUCED]\n");
    s.push_str("these require the full-scale base model, proprietary data, and a GPU cluster; this artifact validates the algorithms with oracles and synthetic-environment experiments instead.\n");
    s
}

/// Oracle ceiling for a generated corpus, for experiment readouts.
pub fn oracle_ceiling(cfg: &RunConfig) -> Result<f64> {
    let truth = load_truth(cfg)?;
    let samples = load_samples(cfg)?;
    let test = owned(split_examples(&samples, Split::Test));
    oracle_label_rate(&truth, &test)
}
