//! Frozen GPT-2-style transformer over token sequences with low-rank
//! adapters on the attention projections.

pub mod blocks;
pub mod gpt2;
pub mod lora;

pub use blocks::{backbone_forward, block_forward};
pub use gpt2::import_gpt2;
pub use lora::{
    init_lora_params, lora_forward, lora_merge, lora_param_count, LoraConfig, Projection,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Tensor};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward width; defaults to 4 * d_model.
    pub d_ff: Option<usize>,
    pub max_positions: usize,
    pub causal: bool,
    /// Token-embedding rows of the pretrained geometry. Counted in parameter
    /// totals, never instantiated: inputs arrive as embeddings.
    pub vocab_size: Option<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::gpt2_small()
    }
}

impl BackboneConfig {
    pub fn gpt2_small() -> Self {
        BackboneConfig {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: None,
            max_positions: 1024,
            causal: true,
            vocab_size: Some(50257),
        }
    }

    pub fn ff_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_positions == 0 {
            return Err(Error::config("backbone dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "width {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.ff_width() == 0 {
            return Err(Error::config("feed-forward width must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count, including the accounting-only embedding
    /// table when `vocab_size` is set.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.ff_width());
        let per_layer = 2 * d          // ln1
            + 4 * (d * d + d)          // q, k, v, output projections
            + 2 * d                    // ln2
            + (d * f + f) + (f * d + d); // feed-forward up and down
        self.vocab_size.unwrap_or(0) * d
            + self.max_positions * d
            + self.n_layers * per_layer
            + 2 * d
    }
}

/// Registers all base transformer tensors, every one frozen. Toy mode:
/// weights from normal(0, 0.02), biases zero, norm gains one.
pub fn init_backbone_params<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) {
    let std = 0.02;
    let d = cfg.d_model;
    let f = cfg.ff_width();
    store.insert(
        "backbone.positions",
        Tensor::randn(&[cfg.max_positions, d], 0.0, std, rng),
        false,
    );
    for i in 0..cfg.n_layers {
        let p = format!("backbone.layers.{i}");
        store.insert(&format!("{p}.ln1.gamma"), Tensor::full(&[d], T::one()), false);
        store.insert(&format!("{p}.ln1.beta"), Tensor::zeros(&[d]), false);
        for proj in ["q", "k", "v", "out"] {
            store.insert(
                &format!("{p}.attn.{proj}.weight"),
                Tensor::randn(&[d, d], 0.0, std, rng),
                false,
            );
            store.insert(&format!("{p}.attn.{proj}.bias"), Tensor::zeros(&[d]), false);
        }
        store.insert(&format!("{p}.ln2.gamma"), Tensor::full(&[d], T::one()), false);
        store.insert(&format!("{p}.ln2.beta"), Tensor::zeros(&[d]), false);
        store.insert(&format!("{p}.ff.up.weight"), Tensor::randn(&[d, f], 0.0, std, rng), false);
        store.insert(&format!("{p}.ff.up.bias"), Tensor::zeros(&[f]), false);
        store.insert(&format!("{p}.ff.down.weight"), Tensor::randn(&[f, d], 0.0, std, rng), false);
        store.insert(&format!("{p}.ff.down.bias"), Tensor::zeros(&[d]), false);
    }
    store.insert("backbone.ln_f.gamma", Tensor::full(&[d], T::one()), false);
    store.insert("backbone.ln_f.beta", Tensor::zeros(&[d]), false);
}
