//! Translation of published GPT-2 tensor names into this crate's backbone
//! namespace, including the split of the fused attention matrix into
//! separate query/key/value projections.
//!
//! Name mapping (layer index i):
//!   wpe.weight                 -> backbone.positions
//!   h.{i}.ln_1.{weight,bias}   -> backbone.layers.{i}.ln1.{gamma,beta}
//!   h.{i}.attn.c_attn.*        -> backbone.layers.{i}.attn.{q,k,v}.* (split)
//!   h.{i}.attn.c_proj.*        -> backbone.layers.{i}.attn.out.*
//!   h.{i}.ln_2.{weight,bias}   -> backbone.layers.{i}.ln2.{gamma,beta}
//!   h.{i}.mlp.c_fc.*           -> backbone.layers.{i}.ff.up.*
//!   h.{i}.mlp.c_proj.*         -> backbone.layers.{i}.ff.down.*
//!   ln_f.{weight,bias}         -> backbone.ln_f.{gamma,beta}
//! The token embedding (wte.weight), tied head, and attention mask buffers
//! are skipped. A leading `transformer.` prefix is tolerated.

use std::collections::BTreeMap;

use crate::backbone::BackboneConfig;
use crate::numerics::Tensor;
use crate::{Error, Result};

fn is_skipped(name: &str) -> bool {
    name == "wte.weight"
        || name == "lm_head.weight"
        || (name.starts_with("h.") && (name.ends_with(".attn.bias") || name.ends_with(".attn.masked_bias")))
}

/// Splits (d, 3d) columns into three (d, d) blocks in q, k, v order.
fn split_columns(t: &Tensor<f32>, d: usize) -> Result<[Tensor<f32>; 3]> {
    if t.shape() != [d, 3 * d] {
        return Err(Error::shape("split fused attention", t.shape(), &[d, 3 * d]));
    }
    let data = t.data();
    let mut blocks: [Vec<f32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for b in &mut blocks {
        b.reserve(d * d);
    }
    for row in 0..d {
        for (j, block) in blocks.iter_mut().enumerate() {
            let start = row * 3 * d + j * d;
            block.extend_from_slice(&data[start..start + d]);
        }
    }
    let [q, k, v] = blocks;
    Ok([
        Tensor::new(vec![d, d], q)?,
        Tensor::new(vec![d, d], k)?,
        Tensor::new(vec![d, d], v)?,
    ])
}

fn split_bias(t: &Tensor<f32>, d: usize) -> Result<[Tensor<f32>; 3]> {
    if t.shape() != [3 * d] {
        return Err(Error::shape("split fused attention bias", t.shape(), &[3 * d]));
    }
    let data = t.data();
    Ok([
        Tensor::new(vec![d], data[..d].to_vec())?,
        Tensor::new(vec![d], data[d..2 * d].to_vec())?,
        Tensor::new(vec![d], data[2 * d..].to_vec())?,
    ])
}

struct Mapper<'a> {
    cfg: &'a BackboneConfig,
    out: BTreeMap<String, Tensor<f32>>,
}

impl Mapper<'_> {
    fn put(&mut self, source: &str, name: String, t: Tensor<f32>, shape: &[usize]) -> Result<()> {
        if t.shape() != shape {
            return Err(Error::checkpoint(
                source,
                format!("shape {:?} does not match expected {:?}", t.shape(), shape),
            ));
        }
        self.out.insert(name, t);
        Ok(())
    }

    fn layer(&mut self, source: &str, i: usize, rest: &str, t: &Tensor<f32>) -> Result<()> {
        if i >= self.cfg.n_layers {
            return Err(Error::checkpoint(
                source,
                format!("layer {i} outside configured {} layers", self.cfg.n_layers),
            ));
        }
        let d = self.cfg.d_model;
        let f = self.cfg.ff_width();
        let p = format!("backbone.layers.{i}");
        match rest {
            "ln_1.weight" => self.put(source, format!("{p}.ln1.gamma"), t.clone(), &[d]),
            "ln_1.bias" => self.put(source, format!("{p}.ln1.beta"), t.clone(), &[d]),
            "ln_2.weight" => self.put(source, format!("{p}.ln2.gamma"), t.clone(), &[d]),
            "ln_2.bias" => self.put(source, format!("{p}.ln2.beta"), t.clone(), &[d]),
            "attn.c_attn.weight" => {
                let [q, k, v] = split_columns(t, d)
                    .map_err(|e| Error::checkpoint(source, e.to_string()))?;
                for (key, block) in [("q", q), ("k", k), ("v", v)] {
                    self.out.insert(format!("{p}.attn.{key}.weight"), block);
                }
                Ok(())
            }
            "attn.c_attn.bias" => {
                let [q, k, v] =
                    split_bias(t, d).map_err(|e| Error::checkpoint(source, e.to_string()))?;
                for (key, block) in [("q", q), ("k", k), ("v", v)] {
                    self.out.insert(format!("{p}.attn.{key}.bias"), block);
                }
                Ok(())
            }
            "attn.c_proj.weight" => self.put(source, format!("{p}.attn.out.weight"), t.clone(), &[d, d]),
            "attn.c_proj.bias" => self.put(source, format!("{p}.attn.out.bias"), t.clone(), &[d]),
            "mlp.c_fc.weight" => self.put(source, format!("{p}.ff.up.weight"), t.clone(), &[d, f]),
            "mlp.c_fc.bias" => self.put(source, format!("{p}.ff.up.bias"), t.clone(), &[f]),
            "mlp.c_proj.weight" => self.put(source, format!("{p}.ff.down.weight"), t.clone(), &[f, d]),
            "mlp.c_proj.bias" => self.put(source, format!("{p}.ff.down.bias"), t.clone(), &[d]),
            _ => Err(Error::checkpoint(source, "unrecognized layer tensor")),
        }
    }
}

/// Maps a published GPT-2 tensor set onto `backbone.*` names for `cfg`.
/// Position embeddings longer than `max_positions` are truncated; every
/// backbone tensor must end up present.
pub fn import_gpt2(
    tensors: &BTreeMap<String, Tensor<f32>>,
    cfg: &BackboneConfig,
) -> Result<BTreeMap<String, Tensor<f32>>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut m = Mapper { cfg, out: BTreeMap::new() };
    for (full_name, t) in tensors {
        let name = full_name.strip_prefix("transformer.").unwrap_or(full_name);
        if is_skipped(name) {
            continue;
        }
        if name == "wpe.weight" {
            let shape = t.shape();
            if shape.len() != 2 || shape[1] != d || shape[0] < cfg.max_positions {
                return Err(Error::checkpoint(
                    full_name,
                    format!(
                        "shape {:?} cannot provide {} positions of width {d}",
                        shape, cfg.max_positions
                    ),
                ));
            }
            let rows = t.data()[..cfg.max_positions * d].to_vec();
            m.out.insert(
                "backbone.positions".to_string(),
                Tensor::new(vec![cfg.max_positions, d], rows)?,
            );
        } else if name == "ln_f.weight" {
            m.put(full_name, "backbone.ln_f.gamma".into(), t.clone(), &[d])?;
        } else if name == "ln_f.bias" {
            m.put(full_name, "backbone.ln_f.beta".into(), t.clone(), &[d])?;
        } else if let Some(rest) = name.strip_prefix("h.") {
            let (index, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::checkpoint(full_name, "unrecognized tensor name"))?;
            let i: usize = index
                .parse()
                .map_err(|_| Error::checkpoint(full_name, "unrecognized layer index"))?;
            m.layer(full_name, i, field, t)?;
        } else {
            return Err(Error::checkpoint(full_name, "unrecognized tensor name"));
        }
    }
    let expected = expected_names(cfg);
    for name in &expected {
        if !m.out.contains_key(name) {
            return Err(Error::checkpoint(name, "missing from checkpoint"));
        }
    }
    if m.out.len() != expected.len() {
        return Err(Error::checkpoint("<import>", "unexpected extra tensors after mapping"));
    }
    Ok(m.out)
}

fn expected_names(cfg: &BackboneConfig) -> Vec<String> {
    let mut names = vec![
        "backbone.positions".to_string(),
        "backbone.ln_f.gamma".to_string(),
        "backbone.ln_f.beta".to_string(),
    ];
    for i in 0..cfg.n_layers {
        let p = format!("backbone.layers.{i}");
        for suffix in [
            "ln1.gamma",
            "ln1.beta",
            "ln2.gamma",
            "ln2.beta",
            "attn.q.weight",
            "attn.q.bias",
            "attn.k.weight",
            "attn.k.bias",
            "attn.v.weight",
            "attn.v.bias",
            "attn.out.weight",
            "attn.out.bias",
            "ff.up.weight",
            "ff.up.bias",
            "ff.down.weight",
            "ff.down.bias",
        ] {
            names.push(format!("{p}.{suffix}"));
        }
    }
    names
}
