//! Tiny autoregressive policy: token + learned positional embeddings, one
//! causal single-head self-attention block, a two-layer GELU feed-forward,
//! and an output projection tied to the token embeddings. All math is f64
//! and every operation is a pure function of (params, inputs, seed).

pub mod adamw;
pub mod math;
mod net;
mod sampling;

pub use adamw::{adamw_step, AdamWConfig, OptState};
pub use net::{
    backward_weighted, grad_weighted_logprob, logprobs, logprobs_values, ForwardTrace, SeqState,
};
pub use sampling::{greedy_decode, prefill, sample, sample_from, Prefill, SampleOutput};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Vocabulary size (token and output dimension).
    pub vocab_size: usize,
    /// Model width d; the feed-forward hidden width is 4d.
    pub dim: usize,
    /// Context window: maximum total sequence length.
    pub max_len: usize,
}

impl PolicyConfig {
    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.max_len == 0 {
            return Err(Error::Config("policy dims must be nonzero".into()));
        }
        Ok(())
    }
}

/// All learnable tensors, row-major. Linear layers are stored `[in][out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensors {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
}

macro_rules! tensor_fields {
    ($self:ident, $m:ident) => {
        [
            ("tok_emb", $m!($self.tok_emb)),
            ("pos_emb", $m!($self.pos_emb)),
            ("wq", $m!($self.wq)),
            ("wk", $m!($self.wk)),
            ("wv", $m!($self.wv)),
            ("wo", $m!($self.wo)),
            ("w1", $m!($self.w1)),
            ("b1", $m!($self.b1)),
            ("w2", $m!($self.w2)),
            ("b2", $m!($self.b2)),
            ("ln1_g", $m!($self.ln1_g)),
            ("ln1_b", $m!($self.ln1_b)),
            ("ln2_g", $m!($self.ln2_g)),
            ("ln2_b", $m!($self.ln2_b)),
            ("lnf_g", $m!($self.lnf_g)),
            ("lnf_b", $m!($self.lnf_b)),
        ]
    };
}

impl Tensors {
    pub fn zeros(cfg: &PolicyConfig) -> Tensors {
        let d = cfg.dim;
        let f = cfg.ffn_dim();
        Tensors {
            tok_emb: vec![0.0; cfg.vocab_size * d],
            pos_emb: vec![0.0; cfg.max_len * d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            w1: vec![0.0; d * f],
            b1: vec![0.0; f],
            w2: vec![0.0; f * d],
            b2: vec![0.0; d],
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
        }
    }

    pub fn fields(&self) -> [(&'static str, &Vec<f64>); 16] {
        macro_rules! r {
            ($f:expr) => {
                &$f
            };
        }
        tensor_fields!(self, r)
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 16] {
        macro_rules! m {
            ($f:expr) => {
                &mut $f
            };
        }
        tensor_fields!(self, m)
    }

    pub fn num_params(&self) -> usize {
        self.fields().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for (_, v) in self.fields() {
            if idx < v.len() {
                return v[idx];
            }
            idx -= v.len();
        }
        panic!("flat index out of range");
    }

    pub fn add_flat(&mut self, mut idx: usize, delta: f64) {
        for (_, v) in self.fields_mut() {
            if idx < v.len() {
                v[idx] += delta;
                return;
            }
            idx -= v.len();
        }
        panic!("flat index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.fields()
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// self += scale * other, field by field.
    pub fn accumulate(&mut self, other: &Tensors, scale: f64) {
        for ((_, dst), (_, src)) in self.fields_mut().into_iter().zip(other.fields()) {
            math::axpy(dst, scale, src);
        }
    }
}

/// Learnable parameters of the policy plus its shape config. Frozen
/// snapshots for the old/reference policies are plain clones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub cfg: PolicyConfig,
    pub t: Tensors,
}

pub const INIT_STD: f64 = 0.02;

impl PolicyParams {
    /// Zero weights: uniform next-token distribution everywhere.
    pub fn zeros(cfg: PolicyConfig) -> PolicyParams {
        PolicyParams {
            cfg,
            t: Tensors::zeros(&cfg),
        }
    }

    /// Gaussian(0, 0.02) weights, zero biases and positional embeddings,
    /// unit layer-norm gains.
    pub fn init(cfg: PolicyConfig, seed: u64) -> PolicyParams {
        let mut rng = derive_rng(seed, "policy-init", &[]);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut t = Tensors::zeros(&cfg);
        for (name, v) in t.fields_mut() {
            match name {
                "tok_emb" | "wq" | "wk" | "wv" | "wo" | "w1" | "w2" => {
                    for x in v.iter_mut() {
                        *x = normal.sample(&mut rng);
                    }
                }
                "ln1_g" | "ln2_g" | "lnf_g" => {
                    for x in v.iter_mut() {
                        *x = 1.0;
                    }
                }
                _ => {}
            }
        }
        PolicyParams { cfg, t }
    }

    pub fn grads_zero(&self) -> Tensors {
        Tensors::zeros(&self.cfg)
    }

    /// Versioned checkpoint payload; f64 values survive the JSON round trip
    /// bit-exactly.
    pub fn to_checkpoint_json(&self) -> String {
        serde_json::to_string(&CheckpointFile {
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        })
        .expect("checkpoint serialization cannot fail")
    }

    pub fn from_checkpoint_json(json: &str) -> Result<PolicyParams> {
        let file: CheckpointFile = serde_json::from_str(json)
            .map_err(|e| Error::Data(format!("bad checkpoint: {e}")))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        file.params.cfg.validate()?;
        let expected = Tensors::zeros(&file.params.cfg);
        for ((name, got), (_, want)) in file
            .params
            .t
            .fields()
            .into_iter()
            .zip(expected.fields())
        {
            if got.len() != want.len() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} has length {}, expected {}",
                    got.len(),
                    want.len()
                )));
            }
        }
        Ok(file.params)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    params: PolicyParams,
}
