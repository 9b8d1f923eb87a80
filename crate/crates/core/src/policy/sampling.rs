//! Ancestral sampling and greedy decoding. Returned log-probs are always
//! taken from the untempered distribution: the importance ratios downstream
//! are defined on the raw policy, not on a tempered proposal.

use rand::Rng;

use super::math::logsumexp;
use super::net::SeqState;
use super::PolicyParams;
use crate::error::{Error, Result};
use crate::tokenizer::EOS;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub tokens: Vec<u32>,
    /// log pi(token | prefix) at temperature 1 for each emitted token.
    pub logprobs: Vec<f64>,
}

/// Context pushed through the network once, reusable across a group of
/// rollouts sharing the same prompt.
#[derive(Debug, Clone)]
pub struct Prefill<'a> {
    state: SeqState<'a>,
    last_y: Vec<f64>,
    budget: usize,
}

pub fn prefill<'a>(params: &'a PolicyParams, context: &[u32]) -> Result<Prefill<'a>> {
    if context.is_empty() {
        return Err(Error::Data("context must be nonempty".into()));
    }
    if context.len() > params.cfg.max_len {
        return Err(Error::Data(format!(
            "sequence too long: context {} exceeds window {}",
            context.len(),
            params.cfg.max_len
        )));
    }
    let budget = params.cfg.max_len - context.len();
    let mut state = SeqState::new(params, false);
    let mut last_y = Vec::new();
    if budget > 0 {
        for &id in context {
            last_y = state.push_token(id)?;
        }
    }
    Ok(Prefill {
        state,
        last_y,
        budget,
    })
}

enum Decode {
    Greedy,
    Temperature(f64),
}

fn run_decode(
    prefill: &Prefill,
    decode: Decode,
    max_new: usize,
    mut rng: Option<&mut dyn FnMut() -> f64>,
) -> Result<SampleOutput> {
    let steps = max_new.min(prefill.budget);
    let mut tokens = Vec::with_capacity(steps);
    let mut lps = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok(SampleOutput {
            tokens,
            logprobs: lps,
        });
    }
    let mut state = prefill.state.clone();
    let mut y = prefill.last_y.clone();
    for step in 0..steps {
        let logits = state.logits(&y);
        let logz = logsumexp(&logits);
        let tok = match &decode {
            Decode::Greedy => {
                let mut best = 0usize;
                for (i, &l) in logits.iter().enumerate() {
                    if l > logits[best] {
                        best = i;
                    }
                }
                best as u32
            }
            Decode::Temperature(temp) => {
                let u = rng.as_mut().expect("sampler needs an rng")();
                let probs: Vec<f64> = if *temp == 1.0 {
                    logits.iter().map(|l| (l - logz).exp()).collect()
                } else {
                    let scaled: Vec<f64> = logits.iter().map(|l| l / temp).collect();
                    let z = logsumexp(&scaled);
                    scaled.iter().map(|l| (l - z).exp()).collect()
                };
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen as u32
            }
        };
        tokens.push(tok);
        lps.push(logits[tok as usize] - logz);
        if tok == EOS {
            break;
        }
        if step + 1 < steps {
            y = state.push_token(tok)?;
        }
    }
    Ok(SampleOutput {
        tokens,
        logprobs: lps,
    })
}

/// One rollout from a shared prefill.
pub fn sample_from(
    prefill: &Prefill,
    temperature: f64,
    max_new: usize,
    rng: &mut impl Rng,
) -> Result<SampleOutput> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "sampling temperature must be > 0, got {temperature}"
        )));
    }
    let mut draw = || rng.gen::<f64>();
    run_decode(
        prefill,
        Decode::Temperature(temperature),
        max_new,
        Some(&mut draw),
    )
}

/// Ancestral sampling; stops at EOS, `max_new` tokens, or the window edge.
pub fn sample(
    params: &PolicyParams,
    context: &[u32],
    temperature: f64,
    max_new: usize,
    rng: &mut impl Rng,
) -> Result<SampleOutput> {
    let pf = prefill(params, context)?;
    sample_from(&pf, temperature, max_new, rng)
}

/// Argmax decoding (the temperature-to-zero limit); deterministic.
pub fn greedy_decode(
    params: &PolicyParams,
    context: &[u32],
    max_new: usize,
) -> Result<SampleOutput> {
    let pf = prefill(params, context)?;
    run_decode(&pf, Decode::Greedy, max_new, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::rng::derive_rng;

    fn tiny() -> PolicyParams {
        PolicyParams::init(
            PolicyConfig {
                vocab_size: 8,
                dim: 4,
                max_len: 16,
            },
            21,
        )
    }

    #[test]
    fn same_seed_gives_identical_rollout() {
        let params = tiny();
        let a = sample(&params, &[1, 4], 1.0, 8, &mut derive_rng(5, "s", &[])).unwrap();
        let b = sample(&params, &[1, 4], 1.0, 8, &mut derive_rng(5, "s", &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_is_deterministic_and_zero_budget_is_empty() {
        let params = tiny();
        let a = greedy_decode(&params, &[1, 4], 8).unwrap();
        let b = greedy_decode(&params, &[1, 4], 8).unwrap();
        assert_eq!(a, b);
        let c = sample(&params, &[1, 4], 1.0, 0, &mut derive_rng(5, "s", &[])).unwrap();
        assert!(c.tokens.is_empty() && c.logprobs.is_empty());
    }

    #[test]
    fn generation_respects_window() {
        let params = tiny();
        let ctx = vec![1u32; 10];
        let out = sample(&params, &ctx, 1.0, 100, &mut derive_rng(5, "s", &[])).unwrap();
        assert!(ctx.len() + out.tokens.len() <= params.cfg.max_len);
    }

    #[test]
    fn temperature_must_be_positive() {
        let params = tiny();
        assert!(sample(&params, &[1], 0.0, 4, &mut derive_rng(5, "s", &[])).is_err());
    }

    #[test]
    fn sampled_logprobs_match_scoring_bitwise() {
        let params = tiny();
        let ctx = [1u32, 4, 2, 6];
        let out = sample(&params, &ctx, 1.0, 10, &mut derive_rng(9, "s", &[])).unwrap();
        assert!(!out.tokens.is_empty());
        let (lps, _) = crate::policy::logprobs(&params, &ctx, &out.tokens).unwrap();
        assert_eq!(lps.len(), out.logprobs.len());
        for (a, b) in lps.iter().zip(&out.logprobs) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empirical_frequency_matches_logprob() {
        let params = tiny();
        let pf = prefill(&params, &[1, 4]).unwrap();
        let (lps, _) = crate::policy::logprobs(&params, &[1, 4], &[0]).unwrap();
        let n = 10_000usize;
        let mut rng = derive_rng(31, "freq", &[]);
        let mut count0 = 0usize;
        for _ in 0..n {
            let out = sample_from(&pf, 1.0, 1, &mut rng).unwrap();
            if out.tokens[0] == 0 {
                count0 += 1;
            }
        }
        let p = lps[0].exp();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let freq = count0 as f64 / n as f64;
        assert!(
            (freq - p).abs() <= 3.0 * sigma + 1e-9,
            "freq {freq} vs p {p} (sigma {sigma})"
        );
    }
}
