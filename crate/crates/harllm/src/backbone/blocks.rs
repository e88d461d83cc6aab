//! Pre-norm transformer blocks and the full backbone pass.

use rand_chacha::ChaCha8Rng;

use crate::backbone::lora::{lora_forward, LoraConfig, Projection};
use crate::backbone::BackboneConfig;
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::params::StagedParams;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

fn projection<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedParams,
    lora: &LoraConfig,
    layer: usize,
    proj: Projection,
    x: NodeId,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let prefix = format!("backbone.layers.{layer}.attn.{}", proj.key());
    let w = staged.node(&format!("{prefix}.weight"));
    let b = staged.node(&format!("{prefix}.bias"));
    let down_name = format!("lora.layers.{layer}.{}.down", proj.key());
    let adapter = staged.has(&down_name).then(|| {
        let up_name = format!("lora.layers.{layer}.{}.up", proj.key());
        (staged.node(&down_name), staged.node(&up_name))
    });
    lora_forward(tape, lora, x, w, Some(b), adapter, training, rng)
}

/// (B, N, d) -> (B, H, N, d/H).
fn split_heads<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    x: NodeId,
) -> Result<NodeId> {
    let s = tape.value(x).shape().to_vec();
    let (b, n) = (s[0], s[1]);
    let r = tape.reshape(x, &[b, n, cfg.n_heads, cfg.head_width()])?;
    tape.permute(r, &[0, 2, 1, 3])
}

fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = T::cast_from(MASKED);
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// One pre-norm block: x + Attn(LN(x)), then + FF(LN(.)).
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedParams,
    cfg: &BackboneConfig,
    lora: &LoraConfig,
    layer: usize,
    x: NodeId,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(Error::shape("block_forward", &shape, &[0, 0, cfg.d_model]));
    }
    let (b, n) = (shape[0], shape[1]);
    if n > cfg.max_positions {
        return Err(Error::SequenceLength { n, max: cfg.max_positions });
    }
    let p = format!("backbone.layers.{layer}");

    let g1 = staged.node(&format!("{p}.ln1.gamma"));
    let b1 = staged.node(&format!("{p}.ln1.beta"));
    let normed = tape.layer_norm(x, g1, b1, LN_EPS)?;

    let q = projection(tape, staged, lora, layer, Projection::Query, normed, training, rng)?;
    let k = projection(tape, staged, lora, layer, Projection::Key, normed, training, rng)?;
    let v = projection(tape, staged, lora, layer, Projection::Value, normed, training, rng)?;

    let qh = split_heads(tape, cfg, q)?;
    let kh = split_heads(tape, cfg, k)?;
    let vh = split_heads(tape, cfg, v)?;
    let kt = tape.permute(kh, &[0, 1, 3, 2])?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, T::cast_from(1.0 / (cfg.head_width() as f64).sqrt()));
    let scores = if cfg.causal {
        let mask = tape.constant(causal_mask::<T>(n));
        tape.add(scores, mask)?
    } else {
        scores
    };
    let attn = tape.softmax_last(scores)?;
    let ctx = tape.matmul(attn, vh)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, n, cfg.d_model])?;

    let ow = staged.node(&format!("{p}.attn.out.weight"));
    let ob = staged.node(&format!("{p}.attn.out.bias"));
    let proj = tape.matmul(ctx, ow)?;
    let proj = tape.add(proj, ob)?;
    let x = tape.add(x, proj)?;

    let g2 = staged.node(&format!("{p}.ln2.gamma"));
    let b2 = staged.node(&format!("{p}.ln2.beta"));
    let normed = tape.layer_norm(x, g2, b2, LN_EPS)?;
    let uw = staged.node(&format!("{p}.ff.up.weight"));
    let ub = staged.node(&format!("{p}.ff.up.bias"));
    let h = tape.matmul(normed, uw)?;
    let h = tape.add(h, ub)?;
    let h = tape.gelu_tanh(h);
    let dw = staged.node(&format!("{p}.ff.down.weight"));
    let db = staged.node(&format!("{p}.ff.down.bias"));
    let h = tape.matmul(h, dw)?;
    let h = tape.add(h, db)?;
    tape.add(x, h)
}

/// Adds position embeddings, applies every block, applies the final norm.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedParams,
    cfg: &BackboneConfig,
    lora: &LoraConfig,
    e: NodeId,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    cfg.validate()?;
    let shape = tape.value(e).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(Error::shape("backbone_forward", &shape, &[0, 0, cfg.d_model]));
    }
    let n = shape[1];
    if n > cfg.max_positions {
        return Err(Error::SequenceLength { n, max: cfg.max_positions });
    }
    let positions = staged.node("backbone.positions");
    let pos = tape.slice_axis(positions, 0, 0, n)?;
    let mut x = tape.add(e, pos)?;
    for layer in 0..cfg.n_layers {
        x = block_forward(tape, staged, cfg, lora, layer, x, training, rng)?;
    }
    let g = staged.node("backbone.ln_f.gamma");
    let b = staged.node("backbone.ln_f.beta");
    tape.layer_norm(x, g, b, LN_EPS)
}
