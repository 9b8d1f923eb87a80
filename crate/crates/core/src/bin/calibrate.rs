// temporary calibration harness; not part of the deliverable
use std::time::Instant;

use recrl::config::RunConfig;
use recrl::corpus::preprocess;
use recrl::eval::{evaluate, random_baseline};
use recrl::grpo::train_grpo;
use recrl::policy::PolicyParams;
use recrl::promptgen::{generate_samples, Split};
use recrl::sft::{prepare_examples, train_sft};
use recrl::simenv::{generate, oracle_label_rate};
use recrl::tokenizer::build_vocab;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);
    let grpo_iters: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);

    let cfg = RunConfig::default();
    let t0 = Instant::now();
    let mut sim = cfg.sim.clone();
    sim.seed = 42;
    let (corpus, truth) = generate(&sim).unwrap();
    let corpus = preprocess(&corpus, cfg.min_interactions);
    let samples = generate_samples(&corpus, &cfg.promptgen, 42).unwrap();
    let vocab = build_vocab(&samples, corpus.items(), cfg.min_word_freq);
    println!(
        "corpus: {} users, {} samples, vocab {} ({:.1?})",
        corpus.users().len(),
        samples.len(),
        vocab.size(),
        t0.elapsed()
    );

    let train: Vec<_> = samples.iter().filter(|s| s.split == Split::Train).cloned().collect();
    let valid: Vec<_> = samples
        .iter()
        .filter(|s| s.split == Split::Validation)
        .cloned()
        .collect();
    let test: Vec<_> = samples.iter().filter(|s| s.split == Split::Test).cloned().collect();
    println!("splits: {} train {} valid {} test", train.len(), valid.len(), test.len());
    println!("oracle label rate (test): {:.3}", oracle_label_rate(&truth, &test).unwrap());

    let train_ex = prepare_examples(&train, &corpus, &vocab).unwrap();
    let valid_ex = prepare_examples(&valid, &corpus, &vocab).unwrap();
    let max_len = train_ex
        .iter()
        .map(|e| e.context.len() + e.target.len())
        .max()
        .unwrap();
    println!("max ctx+target length: {max_len}");

    let policy_cfg = cfg.policy.to_policy_config(vocab.size());
    let init = PolicyParams::init(policy_cfg, 1);
    let t1 = Instant::now();
    let sft_cfg = recrl::sft::SftConfig {
        epochs,
        batch_size: batch,
        lr,
    };
    let out = train_sft(&init, &train_ex, &valid_ex, &sft_cfg, 42).unwrap();
    println!(
        "sft {} epochs lr {lr} batch {batch}: {:.1?} ({:.2?}/epoch)",
        epochs,
        t1.elapsed(),
        t1.elapsed() / epochs.max(1) as u32
    );
    for e in out.curve.iter().step_by(4.max(epochs / 8)) {
        println!("  epoch {}: train {:.4} valid {:.4}", e.epoch, e.train_nll, e.valid_nll);
    }
    if let Some(e) = out.curve.last() {
        println!("  final: train {:.4} valid {:.4}", e.train_nll, e.valid_nll);
    }

    let t2 = Instant::now();
    let report = evaluate(&out.params, &test, &vocab, &corpus, &[5, 10], cfg.eval.max_new).unwrap();
    println!("eval ({:.1?}):\n{}", t2.elapsed(), report.render_text());
    let base = random_baseline(&test, &corpus, &[5, 10], 200, 7).unwrap();
    println!(
        "baseline recall@5 {:.4}; 3x = {:.4}",
        base.metric(5).unwrap().recall,
        3.0 * base.metric(5).unwrap().recall
    );

    if grpo_iters > 0 {
        let mut gcfg = cfg.grpo.clone();
        gcfg.iterations = grpo_iters;
        gcfg.prompts_per_batch = 4;
        let t3 = Instant::now();
        let outcome =
            train_grpo(&out.params, &train, &corpus, &vocab, &cfg.reward, &gcfg, 1).unwrap();
        println!(
            "grpo {} iters: {:.1?} ({:.2?}/iter), divergence: {:?}",
            grpo_iters,
            t3.elapsed(),
            t3.elapsed() / grpo_iters as u32,
            outcome.divergence
        );
        for m in outcome.metrics.iter().step_by(1.max(grpo_iters / 10)) {
            println!(
                "  it {}: reward {:.4} kl {:.6} fmt {:.3} lcs {:.4}",
                m.iteration, m.mean_reward, m.mean_kl, m.format_rate, m.lcs
            );
        }
        if let Some(m) = outcome.metrics.last() {
            println!("  last: reward {:.4} fmt {:.3} lcs {:.4}", m.mean_reward, m.format_rate, m.lcs);
        }
        let report2 =
            evaluate(&outcome.params, &test, &vocab, &corpus, &[5, 10], cfg.eval.max_new).unwrap();
        println!("post-grpo eval:\n{}", report2.render_text());
    }
}
