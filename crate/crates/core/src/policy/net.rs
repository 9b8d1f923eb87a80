//! Incremental forward pass, activation trace, and exact reverse-mode
//! backward pass.
//!
//! `SeqState` appends one token at a time and serves both rollout sampling
//! (no trace) and log-prob scoring (with trace). Both paths run the exact
//! same floating-point operations, so a continuation scored under the same
//! parameters it was sampled from reproduces its log-probs bit-for-bit.

use super::math::{axpy, dot, gelu, gelu_grad, logsumexp, matvec, matvec_t, outer_acc};
use super::{PolicyParams, Tensors};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
struct PosTrace {
    xhat1: Vec<f64>,
    inv1: f64,
    q: Vec<f64>,
    att: Vec<f64>,
    ctx: Vec<f64>,
    xhat2: Vec<f64>,
    inv2: f64,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    xhatf: Vec<f64>,
    invf: f64,
}

/// Cached activations sufficient for exact backprop of a weighted
/// sequence log-likelihood.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub ids: Vec<u32>,
    pub ctx_len: usize,
    positions: Vec<PosTrace>,
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    /// Softmax distribution at each scored position
    /// (positions `ctx_len-1 ..= ids.len()-2`).
    probs: Vec<Vec<f64>>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv).collect();
    let out: Vec<f64> = xhat
        .iter()
        .zip(g.iter().zip(b))
        .map(|(xh, (gi, bi))| gi * xh + bi)
        .collect();
    (out, xhat, inv)
}

fn layer_norm_backward(
    dout: &[f64],
    xhat: &[f64],
    inv: f64,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let d = dout.len() as f64;
    let du: Vec<f64> = dout.iter().zip(g).map(|(o, gi)| o * gi).collect();
    let mean_du = du.iter().sum::<f64>() / d;
    let mean_du_xhat = du.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
    for ((dgi, dbi), (o, xh)) in dg.iter_mut().zip(db.iter_mut()).zip(dout.iter().zip(xhat)) {
        *dgi += o * xh;
        *dbi += o;
    }
    du.iter()
        .zip(xhat)
        .map(|(u, xh)| (u - mean_du - xh * mean_du_xhat) * inv)
        .collect()
}

/// Incremental sequence evaluation with KV cache.
#[derive(Debug, Clone)]
pub struct SeqState<'a> {
    params: &'a PolicyParams,
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    ids: Vec<u32>,
    positions: Vec<PosTrace>,
    record: bool,
}

impl<'a> SeqState<'a> {
    pub fn new(params: &'a PolicyParams, record_trace: bool) -> SeqState<'a> {
        SeqState {
            params,
            keys: Vec::new(),
            vals: Vec::new(),
            ids: Vec::new(),
            positions: Vec::new(),
            record: record_trace,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Append one token; returns the final-norm output for its position.
    /// Errors when the context window or vocabulary is exceeded.
    pub fn push_token(&mut self, id: u32) -> Result<Vec<f64>> {
        let cfg = &self.params.cfg;
        let t = &self.params.t;
        let d = cfg.dim;
        let pos = self.ids.len();
        if pos >= cfg.max_len {
            return Err(Error::Data(format!(
                "sequence too long: position {pos} exceeds window {}",
                cfg.max_len
            )));
        }
        if id as usize >= cfg.vocab_size {
            return Err(Error::Data(format!(
                "token id {id} out of vocabulary ({})",
                cfg.vocab_size
            )));
        }

        let mut x = vec![0.0; d];
        axpy(&mut x, 1.0, &t.tok_emb[id as usize * d..(id as usize + 1) * d]);
        axpy(&mut x, 1.0, &t.pos_emb[pos * d..(pos + 1) * d]);

        let (a_in, xhat1, inv1) = layer_norm(&x, &t.ln1_g, &t.ln1_b);
        let q = matvec(&a_in, &t.wq, d);
        let k = matvec(&a_in, &t.wk, d);
        let v = matvec(&a_in, &t.wv, d);
        self.keys.push(k);
        self.vals.push(v);

        let scale = 1.0 / (d as f64).sqrt();
        let mut scores: Vec<f64> = (0..=pos)
            .map(|s| dot(&q, &self.keys[s]) * scale)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        let att: Vec<f64> = scores.iter().map(|s| s / z).collect();
        let mut ctx = vec![0.0; d];
        for (s, w) in att.iter().enumerate() {
            axpy(&mut ctx, *w, &self.vals[s]);
        }
        let ao = matvec(&ctx, &t.wo, d);
        let r1: Vec<f64> = x.iter().zip(&ao).map(|(a, b)| a + b).collect();

        let (f_in, xhat2, inv2) = layer_norm(&r1, &t.ln2_g, &t.ln2_b);
        let mut h_pre = matvec(&f_in, &t.w1, cfg.ffn_dim());
        for (hi, bi) in h_pre.iter_mut().zip(&t.b1) {
            *hi += bi;
        }
        let h_act: Vec<f64> = h_pre.iter().map(|&u| gelu(u)).collect();
        let mut fo = matvec(&h_act, &t.w2, d);
        for (fi, bi) in fo.iter_mut().zip(&t.b2) {
            *fi += bi;
        }
        let r2: Vec<f64> = r1.iter().zip(&fo).map(|(a, b)| a + b).collect();
        let (y, xhatf, invf) = layer_norm(&r2, &t.lnf_g, &t.lnf_b);

        self.ids.push(id);
        if self.record {
            self.positions.push(PosTrace {
                xhat1,
                inv1,
                q,
                att,
                ctx,
                xhat2,
                inv2,
                h_pre,
                h_act,
                xhatf,
                invf,
            });
        }
        Ok(y)
    }

    /// Logits over the vocabulary from a final-norm output (tied embeddings).
    pub fn logits(&self, y: &[f64]) -> Vec<f64> {
        let cfg = &self.params.cfg;
        let d = cfg.dim;
        (0..cfg.vocab_size)
            .map(|v| dot(y, &self.params.t.tok_emb[v * d..(v + 1) * d]))
            .collect()
    }

    fn into_trace(self, ctx_len: usize, full_ids: Vec<u32>, probs: Vec<Vec<f64>>) -> ForwardTrace {
        ForwardTrace {
            ids: full_ids,
            ctx_len,
            positions: self.positions,
            keys: self.keys,
            vals: self.vals,
            probs,
        }
    }
}

/// Per-token log-probabilities of `continuation` after `context`, plus the
/// activation trace for backprop. Entry `t` is
/// `log softmax(logits at position ctx_len-1+t)[continuation[t]]`.
pub fn logprobs(
    params: &PolicyParams,
    context: &[u32],
    continuation: &[u32],
) -> Result<(Vec<f64>, ForwardTrace)> {
    logprobs_impl(params, context, continuation, true)
}

/// Log-probabilities without the backprop trace. Runs the exact same
/// floating-point path as `logprobs`, so values agree bit-for-bit.
pub fn logprobs_values(
    params: &PolicyParams,
    context: &[u32],
    continuation: &[u32],
) -> Result<Vec<f64>> {
    Ok(logprobs_impl(params, context, continuation, false)?.0)
}

fn logprobs_impl(
    params: &PolicyParams,
    context: &[u32],
    continuation: &[u32],
    record: bool,
) -> Result<(Vec<f64>, ForwardTrace)> {
    if context.is_empty() {
        return Err(Error::Data("context must be nonempty".into()));
    }
    if context.len() + continuation.len() > params.cfg.max_len {
        return Err(Error::Data(format!(
            "sequence too long: {} + {} exceeds window {}",
            context.len(),
            continuation.len(),
            params.cfg.max_len
        )));
    }
    let mut state = SeqState::new(params, record);
    let mut y = Vec::new();
    for &id in context {
        y = state.push_token(id)?;
    }
    let mut full_ids = context.to_vec();
    let mut lps = Vec::with_capacity(continuation.len());
    let mut probs = Vec::with_capacity(continuation.len());
    for (i, &id) in continuation.iter().enumerate() {
        if id as usize >= params.cfg.vocab_size {
            return Err(Error::Data(format!(
                "token id {id} out of vocabulary ({})",
                params.cfg.vocab_size
            )));
        }
        let logits = state.logits(&y);
        let logz = logsumexp(&logits);
        lps.push(logits[id as usize] - logz);
        if record {
            probs.push(logits.iter().map(|l| (l - logz).exp()).collect());
        }
        full_ids.push(id);
        // the last continuation token predicts nothing, so it is never
        // pushed through the network (matches the sampling path)
        if i + 1 < continuation.len() {
            y = state.push_token(id)?;
        }
    }
    Ok((lps, state.into_trace(context.len(), full_ids, probs)))
}

/// Gradient of `sum_t weights[t] * log pi(continuation[t] | prefix)` with
/// respect to every parameter tensor, from a recorded trace.
pub fn backward_weighted(
    params: &PolicyParams,
    trace: &ForwardTrace,
    weights: &[f64],
) -> Tensors {
    let cfg = &params.cfg;
    let t = &params.t;
    let d = cfg.dim;
    let cont_len = trace.ids.len() - trace.ctx_len;
    assert_eq!(
        weights.len(),
        cont_len,
        "one weight per continuation token"
    );
    let mut g = Tensors::zeros(cfg);
    if cont_len == 0 {
        return g;
    }
    let scale = 1.0 / (d as f64).sqrt();
    let pmax = trace.ids.len() - 2; // last scored position
    let mut dq: Vec<Option<Vec<f64>>> = vec![None; pmax + 1];
    let mut dk: Vec<Option<Vec<f64>>> = vec![None; pmax + 1];
    let mut dv: Vec<Option<Vec<f64>>> = vec![None; pmax + 1];
    let mut dx: Vec<Vec<f64>> = vec![vec![0.0; d]; pmax + 1];

    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let p = trace.ctx_len - 1 + i;
        let target = trace.ids[p + 1] as usize;
        let pt = &trace.positions[p];
        let probs = &trace.probs[i];

        // d objective / d logits = w * (onehot(target) - probs)
        let mut dlogits: Vec<f64> = probs.iter().map(|pr| -w * pr).collect();
        dlogits[target] += w;

        // tied output projection: logits[v] = y . tok_emb[v]
        let y: Vec<f64> = pt
            .xhatf
            .iter()
            .zip(t.lnf_g.iter().zip(&t.lnf_b))
            .map(|(xh, (gi, bi))| gi * xh + bi)
            .collect();
        let mut dy = vec![0.0; d];
        for (v, &dl) in dlogits.iter().enumerate() {
            if dl != 0.0 {
                axpy(&mut dy, dl, &t.tok_emb[v * d..(v + 1) * d]);
                axpy(&mut g.tok_emb[v * d..(v + 1) * d], dl, &y);
            }
        }

        let dr2 =
            layer_norm_backward(&dy, &pt.xhatf, pt.invf, &t.lnf_g, &mut g.lnf_g, &mut g.lnf_b);

        // FFN branch: r2 = r1 + W2 gelu(W1 f_in + b1) + b2
        let dh_act = matvec_t(&dr2, &t.w2, cfg.ffn_dim());
        outer_acc(&mut g.w2, &pt.h_act, &dr2);
        axpy(&mut g.b2, 1.0, &dr2);
        let dh_pre: Vec<f64> = dh_act
            .iter()
            .zip(&pt.h_pre)
            .map(|(dh, &u)| dh * gelu_grad(u))
            .collect();
        let f_in: Vec<f64> = pt
            .xhat2
            .iter()
            .zip(t.ln2_g.iter().zip(&t.ln2_b))
            .map(|(xh, (gi, bi))| gi * xh + bi)
            .collect();
        let df_in = matvec_t(&dh_pre, &t.w1, d);
        outer_acc(&mut g.w1, &f_in, &dh_pre);
        axpy(&mut g.b1, 1.0, &dh_pre);
        let mut dr1 =
            layer_norm_backward(&df_in, &pt.xhat2, pt.inv2, &t.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
        axpy(&mut dr1, 1.0, &dr2);

        // attention branch: r1 = x + Wo ctx
        let dctx = matvec_t(&dr1, &t.wo, d);
        outer_acc(&mut g.wo, &pt.ctx, &dr1);
        let mut datt = vec![0.0; p + 1];
        for s in 0..=p {
            datt[s] = dot(&dctx, &trace.vals[s]);
            let dvs = dv[s].get_or_insert_with(|| vec![0.0; d]);
            axpy(dvs, pt.att[s], &dctx);
        }
        let att_dot: f64 = pt.att.iter().zip(&datt).map(|(a, b)| a * b).sum();
        let mut dq_p = vec![0.0; d];
        for s in 0..=p {
            let ds = pt.att[s] * (datt[s] - att_dot) * scale;
            if ds != 0.0 {
                axpy(&mut dq_p, ds, &trace.keys[s]);
                let dks = dk[s].get_or_insert_with(|| vec![0.0; d]);
                axpy(dks, ds, &pt.q);
            }
        }
        match &mut dq[p] {
            Some(acc) => axpy(acc, 1.0, &dq_p),
            slot => *slot = Some(dq_p),
        }

        axpy(&mut dx[p], 1.0, &dr1);
    }

    // projections into q/k/v and the shared input layer norm
    for s in 0..=pmax {
        let mut d_a_in = vec![0.0; d];
        let pt = &trace.positions[s];
        let a_in: Vec<f64> = pt
            .xhat1
            .iter()
            .zip(t.ln1_g.iter().zip(&t.ln1_b))
            .map(|(xh, (gi, bi))| gi * xh + bi)
            .collect();
        let mut touched = false;
        if let Some(dq_s) = &dq[s] {
            axpy(&mut d_a_in, 1.0, &matvec_t(dq_s, &t.wq, d));
            outer_acc(&mut g.wq, &a_in, dq_s);
            touched = true;
        }
        if let Some(dk_s) = &dk[s] {
            axpy(&mut d_a_in, 1.0, &matvec_t(dk_s, &t.wk, d));
            outer_acc(&mut g.wk, &a_in, dk_s);
            touched = true;
        }
        if let Some(dv_s) = &dv[s] {
            axpy(&mut d_a_in, 1.0, &matvec_t(dv_s, &t.wv, d));
            outer_acc(&mut g.wv, &a_in, dv_s);
            touched = true;
        }
        if touched {
            let dxs = layer_norm_backward(
                &d_a_in,
                &pt.xhat1,
                pt.inv1,
                &t.ln1_g,
                &mut g.ln1_g,
                &mut g.ln1_b,
            );
            axpy(&mut dx[s], 1.0, &dxs);
        }
        let dxs = &dx[s];
        if dxs.iter().any(|&v| v != 0.0) {
            let id = trace.ids[s] as usize;
            axpy(&mut g.tok_emb[id * d..(id + 1) * d], 1.0, dxs);
            axpy(&mut g.pos_emb[s * d..(s + 1) * d], 1.0, dxs);
        }
    }
    g
}

/// Convenience wrapper: forward then backward in one call.
pub fn grad_weighted_logprob(
    params: &PolicyParams,
    context: &[u32],
    continuation: &[u32],
    weights: &[f64],
) -> Result<(Vec<f64>, Tensors)> {
    let (lps, trace) = logprobs(params, context, continuation)?;
    let grads = backward_weighted(params, &trace, weights);
    Ok((lps, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    fn tiny() -> PolicyParams {
        PolicyParams::init(
            PolicyConfig {
                vocab_size: 8,
                dim: 4,
                max_len: 10,
            },
            11,
        )
    }

    #[test]
    fn zero_params_give_uniform_logprobs() {
        let params = PolicyParams::zeros(PolicyConfig {
            vocab_size: 8,
            dim: 4,
            max_len: 10,
        });
        let (lps, _) = logprobs(&params, &[1], &[2, 3, 4]).unwrap();
        for lp in lps {
            assert!((lp - (1.0f64 / 8.0).ln()).abs() < 1e-12, "{lp}");
        }
    }

    #[test]
    fn softmax_normalizes_at_every_position() {
        let params = tiny();
        let (_, trace) = logprobs(&params, &[1, 2], &[3, 4, 5]).unwrap();
        for probs in &trace.probs {
            let s: f64 = probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn logprobs_are_nonpositive_and_length_checked() {
        let params = tiny();
        let (lps, _) = logprobs(&params, &[1, 2, 3], &[4, 5]).unwrap();
        assert_eq!(lps.len(), 2);
        assert!(lps.iter().all(|&lp| lp <= 0.0));
        assert!(logprobs(&params, &[1; 9], &[1, 1]).is_err());
        assert!(logprobs(&params, &[], &[1]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let params = tiny();
        let (_, g) = grad_weighted_logprob(&params, &[1, 2], &[3, 4], &[0.0, 0.0]).unwrap();
        for (_, v) in g.fields() {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gradient_is_linear_in_samples() {
        let params = tiny();
        let (_, g1) = grad_weighted_logprob(&params, &[1, 2], &[3, 4], &[1.0, 1.0]).unwrap();
        let (_, g2) = grad_weighted_logprob(&params, &[2, 5], &[6], &[1.0]).unwrap();
        let mut summed = params.grads_zero();
        summed.accumulate(&g1, 1.0);
        summed.accumulate(&g2, 1.0);

        let mut again = params.grads_zero();
        let (_, h1) = grad_weighted_logprob(&params, &[1, 2], &[3, 4], &[1.0, 1.0]).unwrap();
        again.accumulate(&h1, 1.0);
        let (_, h2) = grad_weighted_logprob(&params, &[2, 5], &[6], &[1.0]).unwrap();
        again.accumulate(&h2, 1.0);
        assert_eq!(summed, again);
    }

    #[test]
    fn scoring_reproduces_incremental_values_bitwise() {
        // the sampling path and the scoring path must agree exactly
        let params = tiny();
        let ctx = [1u32, 2, 3];
        let cont = [4u32, 5, 6];
        let (lps, _) = logprobs(&params, &ctx, &cont).unwrap();

        let mut state = SeqState::new(&params, false);
        let mut y = Vec::new();
        for &id in &ctx {
            y = state.push_token(id).unwrap();
        }
        for (i, &id) in cont.iter().enumerate() {
            let logits = state.logits(&y);
            let logz = logsumexp(&logits);
            let lp = logits[id as usize] - logz;
            assert_eq!(lp.to_bits(), lps[i].to_bits());
            if i + 1 < cont.len() {
                y = state.push_token(id).unwrap();
            }
        }
    }
}
