//! A compact encoder–decoder transformer with explicit parameter names,
//! per-parameter freeze masks, and portable checkpoints.
//!
//! Parameters live in a flat, ordered name → tensor table (see
//! [`ModelState::tensor_names`]); every name sits in exactly one of the
//! `shared.`, `encoder.`, or `decoder.` namespaces. The sinusoidal positional
//! encoding is a non-learned buffer: it is stored and checkpointed like a
//! parameter and honored by the freeze mask, but never receives gradient.
//!
//! Arithmetic runs in f64 over f32-representable values (see [`crate::tensor`]),
//! which makes single-threaded training bit-reproducible and keeps the
//! checkpoint payload at 32-bit width.

mod checkpoint;
mod decode;
mod net;
mod optim;

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use checkpoint::CHECKPOINT_VERSION;
pub use decode::{decode_beam, decode_greedy, BeamConfig};
pub use net::{forward, forward_backward, forward_eval, loss, Logits, Mode};
pub use optim::OptimizerConfig;

/// Architecture hyperparameters. `max_len` must match the tokenizer's
/// encode length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            n_heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            ffn_dim: 256,
            max_len: 128,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 6 {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size {} is too small to hold the special tokens",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_dim == 0 || self.max_len < 2 {
            return Err(ModelError::InvalidConfig("layer counts, ffn_dim, and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which tensors are exempt from optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Everything trainable.
    None,
    /// Embeddings, positional encodings, and the first two encoder and
    /// decoder layers frozen; deeper layers adapt.
    MlmPolicy,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("freeze policy violation: {0}")]
    FreezeViolation(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint format version {found} is not supported (this build reads up to {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint payload checksum mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Vocab(#[from] crate::tokenizer::VocabError),
}

/// Model parameters, freeze mask, optimizer moments, and the training RNG.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    buffers: HashSet<usize>,
    frozen: HashSet<usize>,
    freeze_policy: FreezePolicy,
    opt_m: Vec<Tensor>,
    opt_v: Vec<Tensor>,
    pub step: u64,
    pub(crate) rng: ChaCha8Rng,
}

impl ModelState {
    /// Deterministic seeded initialization: Xavier-uniform weights, zero
    /// biases, unit layer-norm gains, sinusoidal positional table. The
    /// freeze mask starts all-false.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut buffers = HashSet::new();

        let d = config.d_model;
        let v = config.vocab_size;
        let f = config.ffn_dim;

        struct Builder<'a> {
            rng: &'a mut ChaCha8Rng,
            names: Vec<String>,
            tensors: Vec<Tensor>,
            d: usize,
        }
        impl Builder<'_> {
            fn push(&mut self, name: String, t: Tensor) {
                self.names.push(name);
                self.tensors.push(t);
            }
            fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
                let w = xavier(self.rng, din, dout);
                self.push(format!("{prefix}.w"), w);
                self.push(format!("{prefix}.b"), Tensor::zeros(&[dout]));
            }
            fn layer_norm(&mut self, prefix: &str) {
                let d = self.d;
                self.push(format!("{prefix}.gamma"), Tensor::from_vec(&[d], vec![1.0; d]));
                self.push(format!("{prefix}.beta"), Tensor::zeros(&[d]));
            }
            fn attention(&mut self, prefix: &str) {
                let d = self.d;
                for proj in ["wq", "wk", "wv", "wo"] {
                    self.linear(&format!("{prefix}.{proj}"), d, d);
                }
            }
        }

        let mut b = Builder { rng: &mut rng, names: Vec::new(), tensors: Vec::new(), d };
        let embed = xavier(b.rng, v, d);
        b.push("shared.embed".into(), embed);
        buffers.insert(b.names.len());
        b.push("shared.pos_enc".into(), sinusoid(config.max_len, d));

        for i in 0..config.enc_layers {
            let p = format!("encoder.layer{i}");
            b.layer_norm(&format!("{p}.ln1"));
            b.attention(&format!("{p}.attn"));
            b.layer_norm(&format!("{p}.ln2"));
            b.linear(&format!("{p}.ffn.w1"), d, f);
            b.linear(&format!("{p}.ffn.w2"), f, d);
        }
        b.layer_norm("encoder.final_ln");

        for i in 0..config.dec_layers {
            let p = format!("decoder.layer{i}");
            b.layer_norm(&format!("{p}.ln1"));
            b.attention(&format!("{p}.self_attn"));
            b.layer_norm(&format!("{p}.ln2"));
            b.attention(&format!("{p}.cross_attn"));
            b.layer_norm(&format!("{p}.ln3"));
            b.linear(&format!("{p}.ffn.w1"), d, f);
            b.linear(&format!("{p}.ffn.w2"), f, d);
        }
        b.layer_norm("decoder.final_ln");
        b.linear("decoder.output", d, v);
        let Builder { names: built_names, tensors: built_tensors, .. } = b;
        names.extend(built_names);
        tensors.extend(built_tensors);

        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let opt_m = tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        let opt_v = tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        Ok(Self {
            config,
            names,
            tensors,
            index,
            buffers,
            frozen: HashSet::new(),
            freeze_policy: FreezePolicy::None,
            opt_m,
            opt_v,
            step: 0,
            rng,
        })
    }

    pub fn tensor_names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Test hook: mutate a tensor in place (keeping the f32 invariant is the
    /// caller's responsibility).
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.tensors[i])
    }

    pub(crate) fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    pub(crate) fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.idx(name)]
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.index.get(name).is_some_and(|i| self.buffers.contains(i))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.index.get(name).is_some_and(|i| self.frozen.contains(i))
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.frozen.iter().map(|&i| self.names[i].as_str()).collect();
        out.sort_unstable();
        out
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        self.freeze_policy
    }

    /// Trainable parameter count (buffers excluded).
    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.buffers.contains(i))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Applies a freeze policy. `MlmPolicy` freezes the embedding table, the
    /// positional encodings, and layers 0–1 of both the encoder and decoder;
    /// `None` clears all freezing.
    pub fn set_freeze(&mut self, policy: FreezePolicy) -> Result<(), ModelError> {
        match policy {
            FreezePolicy::None => self.frozen.clear(),
            FreezePolicy::MlmPolicy => {
                if self.config.enc_layers < 2 || self.config.dec_layers < 2 {
                    return Err(ModelError::FreezeViolation(format!(
                        "mlm policy freezes two layers per stack; model has {}+{}",
                        self.config.enc_layers, self.config.dec_layers
                    )));
                }
                self.frozen.clear();
                let prefixes = [
                    "shared.embed",
                    "shared.pos_enc",
                    "encoder.layer0.",
                    "encoder.layer1.",
                    "decoder.layer0.",
                    "decoder.layer1.",
                ];
                for (i, name) in self.names.iter().enumerate() {
                    if prefixes.iter().any(|p| name == p || name.starts_with(p)) {
                        self.frozen.insert(i);
                    }
                }
            }
        }
        self.freeze_policy = policy;
        Ok(())
    }

}

fn xavier(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Tensor {
    let bound = (6.0 / (din + dout) as f64).sqrt();
    let data = (0..din * dout).map(|_| (rng.gen_range(-bound..bound) as f32) as f64).collect();
    Tensor::from_vec(&[din, dout], data)
}

fn sinusoid(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f64; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = (angle.sin() as f32) as f64;
            data[pos * d + 2 * i + 1] = (angle.cos() as f32) as f64;
        }
    }
    Tensor::from_vec(&[max_len, d], data)
}

/// Per-tensor gradients, parallel to the model's tensor table. Training
/// loops accumulate token-sum gradients here and divide by the token count
/// before stepping.
#[derive(Debug, Clone)]
pub struct GradStore {
    pub(crate) tensors: Vec<Tensor>,
    pub token_count: usize,
}

impl GradStore {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            tensors: model.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            token_count: 0,
        }
    }

    pub fn get<'a>(&'a self, model: &ModelState, name: &str) -> Option<&'a Tensor> {
        model.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Adds another accumulator into this one (gradient accumulation across
    /// micro-batches).
    pub fn add_assign(&mut self, other: &GradStore) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.token_count += other.token_count;
    }

    /// Returns mean gradients: token sums divided by the accumulated token
    /// count.
    pub fn mean(&self) -> GradStore {
        let inv = if self.token_count == 0 { 0.0 } else { 1.0 / self.token_count as f64 };
        let tensors = self
            .tensors
            .iter()
            .map(|t| Tensor::from_vec(&t.shape, t.data.iter().map(|x| x * inv).collect()))
            .collect();
        GradStore { tensors, token_count: self.token_count }
    }
}
