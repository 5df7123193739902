//! The repairable testbed: a small pre-norm decoder-only transformer with
//! rotary attention, GELU feed-forward blocks and an untied LM head.

mod backward;
pub mod checkpoint;
mod forward;
pub mod tokenizer;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;

pub use backward::{GradScope, GradientTrace};
pub use forward::ForwardTrace;
pub(crate) use backward::{backward_cache, Gradients};
pub(crate) use forward::{forward_cache, Cache};

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const ROPE_BASE: f64 = 10_000.0;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: tokenizer::BYTE_VOCAB,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 256,
            max_seq: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid("d_model must be divisible by n_heads"));
        }
        // rotary embeddings rotate coordinate pairs within a head
        if self.head_dim() % 2 != 0 {
            return Err(invalid("head dimension must be even"));
        }
        if self.d_ffn < self.d_model {
            return Err(invalid("d_ffn must be at least d_model"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of FFN hidden units across all layers.
    pub fn neuron_count(&self) -> usize {
        self.n_layers * self.d_ffn
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    /// d_model × d_ffn
    pub ffn_w1: Matrix,
    /// d_ffn × d_model; row `u` is the weight vector of hidden unit `u`.
    pub ffn_w2: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    /// vocab_size × d_model
    pub embedding: Matrix,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Vec<f64>,
    /// d_model × vocab_size
    pub lm_head: Matrix,
}

fn mat(name: String, m: &Matrix) -> TensorRef<'_> {
    TensorRef {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice(),
    }
}

fn vec1(name: String, v: &[f64]) -> TensorRef<'_> {
    TensorRef {
        name,
        shape: vec![v.len()],
        data: v,
    }
}

/// A named, shaped view of one parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let block = BlockParams {
            attn_norm: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: vec![0.0; d],
            ffn_w1: Matrix::zeros(d, cfg.d_ffn),
            ffn_w2: Matrix::zeros(cfg.d_ffn, d),
        };
        Self {
            embedding: Matrix::zeros(cfg.vocab_size, d),
            blocks: vec![block; cfg.n_layers],
            final_norm: vec![0.0; d],
            lm_head: Matrix::zeros(d, cfg.vocab_size),
        }
    }

    /// Every tensor in canonical order with its checkpoint name.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(3 + 8 * self.blocks.len());
        out.push(mat("embedding".into(), &self.embedding));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(vec1(format!("blocks.{i}.attn_norm"), &b.attn_norm));
            out.push(mat(format!("blocks.{i}.wq"), &b.wq));
            out.push(mat(format!("blocks.{i}.wk"), &b.wk));
            out.push(mat(format!("blocks.{i}.wv"), &b.wv));
            out.push(mat(format!("blocks.{i}.wo"), &b.wo));
            out.push(vec1(format!("blocks.{i}.ffn_norm"), &b.ffn_norm));
            out.push(mat(format!("blocks.{i}.ffn_w1"), &b.ffn_w1));
            out.push(mat(format!("blocks.{i}.ffn_w2"), &b.ffn_w2));
        }
        out.push(vec1("final_norm".into(), &self.final_norm));
        out.push(mat("lm_head".into(), &self.lm_head));
        out
    }

    /// Mutable slices in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(3 + 8 * self.blocks.len());
        out.push(self.embedding.as_mut_slice());
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm);
            out.push(b.wq.as_mut_slice());
            out.push(b.wk.as_mut_slice());
            out.push(b.wv.as_mut_slice());
            out.push(b.wo.as_mut_slice());
            out.push(&mut b.ffn_norm);
            out.push(b.ffn_w1.as_mut_slice());
            out.push(b.ffn_w2.as_mut_slice());
        }
        out.push(&mut self.final_norm);
        out.push(self.lm_head.as_mut_slice());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// FNV-1a over the bit patterns of `data`; equal fingerprints mean
/// bit-identical tensors for all practical purposes.
pub fn fingerprint(data: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in data {
        for b in x.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug)]
pub struct TinyLM {
    config: ModelConfig,
    params: Params,
    version: u64,
}

impl TinyLM {
    /// Seeded GPT-2 style initialization: N(0, 0.02) weights, residual
    /// output projections scaled by 1/√(2·n_layers), unit norm gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt())
            .expect("valid std");
        let mut params = Params::zeros(&config);
        let mut fill = |m: &mut Matrix, dist: &Normal<f64>| {
            m.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = dist.sample(&mut rng));
        };
        fill(&mut params.embedding, &normal);
        for b in &mut params.blocks {
            b.attn_norm.iter_mut().for_each(|g| *g = 1.0);
            b.ffn_norm.iter_mut().for_each(|g| *g = 1.0);
            fill(&mut b.wq, &normal);
            fill(&mut b.wk, &normal);
            fill(&mut b.wv, &normal);
            fill(&mut b.wo, &resid);
            fill(&mut b.ffn_w1, &normal);
            fill(&mut b.ffn_w2, &resid);
        }
        params.final_norm.iter_mut().for_each(|g| *g = 1.0);
        fill(&mut params.lm_head, &normal);
        Ok(Self {
            config,
            params,
            version: 0,
        })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros(&config);
        for (e, p) in expected.tensors().iter().zip(params.tensors()) {
            if e.name != p.name || e.shape != p.shape {
                return Err(invalid(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name, p.shape, e.shape
                )));
            }
        }
        if expected.blocks.len() != params.blocks.len() {
            return Err(invalid("block count does not match config"));
        }
        if !params.is_finite() {
            return Err(crate::Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            config,
            params,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable access; bumps the model version so that traces and priors
    /// computed earlier are recognised as stale.
    pub fn params_mut(&mut self) -> &mut Params {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn into_params(self) -> Params {
        self.params
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("token sequence is empty"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(invalid(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        tokenizer::check_ids(tokens, self.config.vocab_size)
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        Ok(forward_cache(self, tokens, None).trace(self))
    }

    /// Forward pass with block `layer` replaced by a residual passthrough.
    pub fn forward_with_layer_disabled(
        &self,
        tokens: &[usize],
        layer: usize,
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        if layer >= self.config.n_layers {
            return Err(invalid(format!(
                "layer {layer} out of range for {} layers",
                self.config.n_layers
            )));
        }
        Ok(forward_cache(self, tokens, Some(layer)).trace(self))
    }

    /// Cross-entropy of the last position against `target`, with analytic
    /// gradients for every FFN output matrix, the FFN intermediates and the
    /// input embeddings.
    pub fn backward(&self, tokens: &[usize], target: usize) -> Result<GradientTrace> {
        self.check_tokens(tokens)?;
        tokenizer::check_ids(&[target], self.config.vocab_size)?;
        let cache = forward_cache(self, tokens, None);
        Ok(GradientTrace::from_cache(self, &cache, target, GradScope::Repair))
    }

    /// Forward and backward from one shared activation cache.
    pub fn forward_backward(
        &self,
        tokens: &[usize],
        target: usize,
    ) -> Result<(ForwardTrace, GradientTrace)> {
        self.check_tokens(tokens)?;
        tokenizer::check_ids(&[target], self.config.vocab_size)?;
        let cache = forward_cache(self, tokens, None);
        let grads = GradientTrace::from_cache(self, &cache, target, GradScope::Repair);
        Ok((cache.trace(self), grads))
    }

    /// Mean next-token cross-entropy over a full sequence.
    pub fn sequence_loss(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(invalid("sequence loss needs at least two tokens"));
        }
        self.check_tokens(tokens)?;
        let cache = forward_cache(self, &tokens[..tokens.len() - 1], None);
        let (loss, _) = train::sequence_loss_and_dlogits(&cache, &tokens[1..], 0);
        Ok(loss)
    }
}
