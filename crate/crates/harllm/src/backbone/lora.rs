//! Low-rank adapters on attention projections.
//!
//! A projection stores its base weight as (d_in, d_out) acting on row
//! vectors. The adapter factors the update as down (d_in, r) times
//! up (r, d_out), scaled by alpha/r; up starts at zero so a fresh adapter
//! changes nothing.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::tape::matmul_forward;
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn key(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            r: 16,
            alpha: 32.0,
            dropout_p: 0.05,
            targets: Projection::ALL.to_vec(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r > 0 && !(self.alpha > 0.0) {
            return Err(Error::config(format!("adapter scaling {} must be positive", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "adapter dropout {} not in [0, 1)",
                self.dropout_p
            )));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if self.targets[..i].contains(t) {
                return Err(Error::config("duplicate adapter target"));
            }
        }
        Ok(())
    }

    pub fn has(&self, p: Projection) -> bool {
        self.r > 0 && self.targets.contains(&p)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

/// Sum over layers and targeted projections of r * (d_in + d_out).
pub fn lora_param_count(backbone: &super::BackboneConfig, lora: &LoraConfig) -> usize {
    let d = backbone.d_model;
    backbone.n_layers * lora.targets.len() * lora.r * (d + d)
}

/// Registers one trainable (down, up) pair per layer and targeted
/// projection. Rank 0 registers nothing.
pub fn init_lora_params<T: Scalar>(
    store: &mut ParamStore<T>,
    backbone: &super::BackboneConfig,
    lora: &LoraConfig,
    rng: &mut ChaCha8Rng,
) {
    if lora.r == 0 {
        return;
    }
    let d = backbone.d_model;
    for i in 0..backbone.n_layers {
        for proj in Projection::ALL {
            if !lora.targets.contains(&proj) {
                continue;
            }
            store.insert(
                &format!("lora.layers.{i}.{}.down", proj.key()),
                Tensor::randn(&[d, lora.r], 0.0, 0.02, rng),
                true,
            );
            store.insert(
                &format!("lora.layers.{i}.{}.up", proj.key()),
                Tensor::zeros(&[lora.r, d]),
                true,
            );
        }
    }
}

/// Projects x through the frozen base weight plus the scaled adapter path.
/// Dropout applies to the adapter input only.
pub fn lora_forward<T: Scalar>(
    tape: &mut Tape<T>,
    lora: &LoraConfig,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    adapter: Option<(NodeId, NodeId)>,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let mut y = tape.matmul(x, weight)?;
    if let Some(b) = bias {
        y = tape.add(y, b)?;
    }
    let Some((down, up)) = adapter else {
        return Ok(y);
    };
    if lora.r == 0 {
        return Err(Error::config("adapter tensors present with rank 0"));
    }
    let dx = tape.dropout(x, lora.dropout_p, training, rng)?;
    let low = tape.matmul(dx, down)?;
    let delta = tape.matmul(low, up)?;
    let scaled = tape.scale(delta, T::cast_from(lora.scale()));
    tape.add(y, scaled)
}

/// Base weight plus the fully materialized scaled update. The base tensor is
/// left untouched.
pub fn lora_merge<T: Scalar>(
    base: &Tensor<T>,
    down: &Tensor<T>,
    up: &Tensor<T>,
    lora: &LoraConfig,
) -> Result<Tensor<T>> {
    if lora.r == 0 {
        return Err(Error::config("cannot merge a rank-0 adapter"));
    }
    let (d_in, d_out) = match *base.shape() {
        [a, b] => (a, b),
        _ => return Err(Error::shape("lora_merge", base.shape(), &[0, 0])),
    };
    if down.shape() != [d_in, lora.r] || up.shape() != [lora.r, d_out] {
        return Err(Error::shape("lora_merge", down.shape(), &[d_in, lora.r]));
    }
    let delta = matmul_forward(down, up)?;
    let scale = T::cast_from(lora.scale());
    let data: Vec<T> = base
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&w, &dw)| w + dw * scale)
        .collect();
    Tensor::new(base.shape().to_vec(), data)
}
