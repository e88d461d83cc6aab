//! Convolutional projection from sensor frames to token embeddings.
//!
//! Each L-sample frame becomes one token: the acc and gyro triples are
//! encoded separately, three conv branches (acc, gyro, fused union) extract
//! temporal features, each branch projects to a third of the token width,
//! and the concatenated token is layer-normalized. All computation is
//! frame-local, so tokens inherit the frame order.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::params::{ParamStore, StagedParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// Samples per frame.
    pub l: usize,
    /// Token width; must be divisible by 3.
    pub d_llm: usize,
    /// Conv kernel size; must be odd.
    pub k: usize,
    /// Channels produced by each modality encoder.
    pub f_enc: usize,
    /// Channels produced by each branch stack.
    pub f_branch: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig { l: 16, d_llm: 768, k: 3, f_enc: 32, f_branch: 64 }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_llm == 0 || self.d_llm % 3 != 0 {
            return Err(Error::config(format!(
                "token width {} is not divisible by 3",
                self.d_llm
            )));
        }
        if self.k % 2 == 0 || self.k == 0 {
            return Err(Error::config(format!("kernel size {} must be odd", self.k)));
        }
        if self.l == 0 || self.f_enc == 0 || self.f_branch == 0 {
            return Err(Error::config("frame length and channel counts must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (k, fe, fb, l) = (self.k, self.f_enc, self.f_branch, self.l);
        let d3 = self.d_llm / 3;
        let encoders = 2 * (fe * 3 * k + fe);
        let stack = |c_in: usize| (fb * c_in * k + fb) + (fb * fb * k + fb);
        let branches = stack(fe) + stack(fe) + stack(2 * fe);
        let projections = 3 * (fb * l * d3 + d3);
        let norm = 2 * self.d_llm;
        encoders + branches + projections + norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Acc,
    Gyro,
}

impl Modality {
    fn key(self) -> &'static str {
        match self {
            Modality::Acc => "acc",
            Modality::Gyro => "gyro",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Acc,
    Gyro,
    Union,
}

impl Branch {
    fn key(self) -> &'static str {
        match self {
            Branch::Acc => "acc",
            Branch::Gyro => "gyro",
            Branch::Union => "union",
        }
    }

    fn in_channels(self, cfg: &FrontendConfig) -> usize {
        match self {
            Branch::Acc | Branch::Gyro => cfg.f_enc,
            Branch::Union => 2 * cfg.f_enc,
        }
    }
}

const BRANCHES: [Branch; 3] = [Branch::Acc, Branch::Gyro, Branch::Union];

/// Registers all frontend parameters (every one trainable).
pub fn init_frontend_params<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &FrontendConfig,
    rng: &mut ChaCha8Rng,
) {
    let std = 0.02;
    for m in [Modality::Acc, Modality::Gyro] {
        store.insert(
            &format!("frontend.enc.{}.weight", m.key()),
            Tensor::randn(&[cfg.f_enc, 3, cfg.k], 0.0, std, rng),
            true,
        );
        store.insert(
            &format!("frontend.enc.{}.bias", m.key()),
            Tensor::zeros(&[cfg.f_enc]),
            true,
        );
    }
    for b in BRANCHES {
        let c_in = b.in_channels(cfg);
        store.insert(
            &format!("frontend.branch.{}.conv1.weight", b.key()),
            Tensor::randn(&[cfg.f_branch, c_in, cfg.k], 0.0, std, rng),
            true,
        );
        store.insert(
            &format!("frontend.branch.{}.conv1.bias", b.key()),
            Tensor::zeros(&[cfg.f_branch]),
            true,
        );
        store.insert(
            &format!("frontend.branch.{}.conv2.weight", b.key()),
            Tensor::randn(&[cfg.f_branch, cfg.f_branch, cfg.k], 0.0, std, rng),
            true,
        );
        store.insert(
            &format!("frontend.branch.{}.conv2.bias", b.key()),
            Tensor::zeros(&[cfg.f_branch]),
            true,
        );
    }
    let d3 = cfg.d_llm / 3;
    for b in BRANCHES {
        store.insert(
            &format!("frontend.proj.{}.weight", b.key()),
            Tensor::randn(&[cfg.f_branch * cfg.l, d3], 0.0, std, rng),
            true,
        );
        store.insert(&format!("frontend.proj.{}.bias", b.key()), Tensor::zeros(&[d3]), true);
    }
    store.insert("frontend.ln.gamma", Tensor::full(&[cfg.d_llm], T::one()), true);
    store.insert("frontend.ln.beta", Tensor::zeros(&[cfg.d_llm]), true);
}

/// (B, N, L, 3) frames of one modality -> (B, N, F_enc, L) features.
/// Conv runs along the frame's own time axis, so frames stay independent.
pub fn modality_encode<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedParams,
    cfg: &FrontendConfig,
    frames: NodeId,
    modality: Modality,
) -> Result<NodeId> {
    let shape = tape.value(frames).shape().to_vec();
    if shape.len() != 4 || shape[3] != 3 || shape[2] != cfg.l {
        return Err(Error::shape("modality_encode", &shape, &[0, 0, cfg.l, 3]));
    }
    let (b, n) = (shape[0], shape[1]);
    let x = tape.permute(frames, &[0, 1, 3, 2])?;
    let x = tape.reshape(x, &[b * n, 3, cfg.l])?;
    let w = staged.node(&format!("frontend.enc.{}.weight", modality.key()));
    let bias = staged.node(&format!("frontend.enc.{}.bias", modality.key()));
    let h = tape.conv1d_same(x, w, Some(bias))?;
    let h = tape.silu(h);
    tape.reshape(h, &[b, n, cfg.f_enc, cfg.l])
}

/// (B, N, C_in, L) -> (B, N, F_branch, L): conv, ReLU, conv.
pub fn branch_process<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedParams,
    cfg: &FrontendConfig,
    h0: NodeId,
    branch: Branch,
) -> Result<NodeId> {
    let shape = tape.value(h0).shape().to_vec();
    let c_in = branch.in_channels(cfg);
    if shape.len() != 4 || shape[2] != c_in || shape[3] != cfg.l {
        return Err(Error::shape("branch_process", &shape, &[0, 0, c_in, cfg.l]));
    }
    let (b, n) = (shape[0], shape[1]);
    let x = tape.reshape(h0, &[b * n, c_in, cfg.l])?;
    let w1 = staged.node(&format!("frontend.branch.{}.conv1.weight", branch.key()));
    let b1 = staged.node(&format!("frontend.branch.{}.conv1.bias", branch.key()));
    let h = tape.conv1d_same(x, w1, Some(b1))?;
    let h = tape.relu(h);
    let w2 = staged.node(&format!("frontend.branch.{}.conv2.weight", branch.key()));
    let b2 = staged.node(&format!("frontend.branch.{}.conv2.bias", branch.key()));
    let h = tape.conv1d_same(h, w2, Some(b2))?;
    tape.reshape(h, &[b, n, cfg.f_branch, cfg.l])
}

fn project<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedParams,
    cfg: &FrontendConfig,
    h1: NodeId,
    branch: Branch,
) -> Result<NodeId> {
    let shape = tape.value(h1).shape().to_vec();
    let (b, n) = (shape[0], shape[1]);
    let flat = tape.reshape(h1, &[b, n, cfg.f_branch * cfg.l])?;
    let w = staged.node(&format!("frontend.proj.{}.weight", branch.key()));
    let bias = staged.node(&format!("frontend.proj.{}.bias", branch.key()));
    let y = tape.matmul(flat, w)?;
    tape.add(y, bias)
}

/// (B, N, L, 6) frames -> (B, N, d_llm) tokens.
pub fn frontend_forward<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedParams,
    cfg: &FrontendConfig,
    frames: NodeId,
) -> Result<NodeId> {
    cfg.validate()?;
    let shape = tape.value(frames).shape().to_vec();
    if shape.len() != 4 || shape[3] != 6 || shape[2] != cfg.l {
        return Err(Error::shape("frontend_forward", &shape, &[0, 0, cfg.l, 6]));
    }
    let acc_frames = tape.slice_axis(frames, 3, 0, 3)?;
    let gyro_frames = tape.slice_axis(frames, 3, 3, 3)?;
    let h0_acc = modality_encode(tape, staged, cfg, acc_frames, Modality::Acc)?;
    let h0_gyro = modality_encode(tape, staged, cfg, gyro_frames, Modality::Gyro)?;
    let h0_union = tape.concat(&[h0_acc, h0_gyro], 2)?;

    let h1_acc = branch_process(tape, staged, cfg, h0_acc, Branch::Acc)?;
    let h1_gyro = branch_process(tape, staged, cfg, h0_gyro, Branch::Gyro)?;
    let h1_union = branch_process(tape, staged, cfg, h0_union, Branch::Union)?;

    let t_acc = project(tape, staged, cfg, h1_acc, Branch::Acc)?;
    let t_gyro = project(tape, staged, cfg, h1_gyro, Branch::Gyro)?;
    let t_union = project(tape, staged, cfg, h1_union, Branch::Union)?;
    let tokens = tape.concat(&[t_acc, t_gyro, t_union], 2)?;

    let gamma = staged.node("frontend.ln.gamma");
    let beta = staged.node("frontend.ln.beta");
    // Pre-norm activations sit orders of magnitude below 1 under the 0.02
    // init; eps stays far beneath their variance so tokens leave
    // standardized, guarding only exact-zero variance.
    tape.layer_norm(tokens, gamma, beta, 1e-20)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_diff_grads, max_rel_err};
    use crate::rng::SeedStream;

    fn toy_cfg() -> FrontendConfig {
        FrontendConfig { l: 4, d_llm: 12, k: 3, f_enc: 3, f_branch: 4 }
    }

    fn build_store(cfg: &FrontendConfig, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(seed).stream("init");
        init_frontend_params(&mut store, cfg, &mut rng);
        store
    }

    fn forward_values(cfg: &FrontendConfig, store: &ParamStore<f64>, frames: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let x = tape.constant(frames.clone());
        let out = frontend_forward(&mut tape, &staged, cfg, x).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn output_shape_and_token_statistics() {
        let cfg = FrontendConfig { l: 16, d_llm: 48, k: 3, f_enc: 4, f_branch: 5 };
        let store = build_store(&cfg, 1);
        let mut rng = SeedStream::new(2).stream("x");
        let frames = Tensor::<f64>::randn(&[2, 8, 16, 6], 0.0, 1.0, &mut rng);
        let out = forward_values(&cfg, &store, &frames);
        assert_eq!(out.shape(), &[2, 8, 48]);
        // gamma=1, beta=0 at init, so each token is standardized
        for token in out.data().chunks_exact(48) {
            let mean = token.iter().sum::<f64>() / 48.0;
            let var = token.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0;
            assert!(mean.abs() <= 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-3, "var {var}");
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let cfg = toy_cfg();
        let store = build_store(&cfg, 3);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let frames = tape.constant(Tensor::zeros(&[1, 2, cfg.l, 3]));
        let h0 = modality_encode(&mut tape, &staged, &cfg, frames, Modality::Acc).unwrap();
        assert!(tape.value(h0).data().iter().all(|&v| v == 0.0));
        let h1 = branch_process(&mut tape, &staged, &cfg, h0, Branch::Acc).unwrap();
        assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_permutation_permutes_tokens() {
        let cfg = toy_cfg();
        let store = build_store(&cfg, 4);
        let mut rng = SeedStream::new(5).stream("x");
        let frames = Tensor::<f64>::randn(&[1, 3, cfg.l, 6], 0.0, 1.0, &mut rng);
        let out = forward_values(&cfg, &store, &frames);

        // swap frames 0 and 2
        let fl = cfg.l * 6;
        let mut swapped = frames.data().to_vec();
        for j in 0..fl {
            swapped.swap(j, 2 * fl + j);
        }
        let swapped = Tensor::new(frames.shape().to_vec(), swapped).unwrap();
        let out_sw = forward_values(&cfg, &store, &swapped);

        let d = cfg.d_llm;
        let token = |t: &Tensor<f64>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
        assert_eq!(token(&out, 0), token(&out_sw, 2));
        assert_eq!(token(&out, 2), token(&out_sw, 0));
        assert_eq!(token(&out, 1), token(&out_sw, 1));
    }

    #[test]
    fn frame_perturbation_stays_local() {
        let cfg = toy_cfg();
        let store = build_store(&cfg, 6);
        let mut rng = SeedStream::new(7).stream("x");
        let frames = Tensor::<f64>::randn(&[1, 3, cfg.l, 3], 0.0, 1.0, &mut rng);

        let encode = |f: &Tensor<f64>| {
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let x = tape.constant(f.clone());
            let h = modality_encode(&mut tape, &staged, &cfg, x, Modality::Gyro).unwrap();
            tape.value(h).clone()
        };
        let base = encode(&frames);
        let mut bumped = frames.data().to_vec();
        bumped[cfg.l * 3 + 2] += 1.0; // inside frame 1
        let out = encode(&Tensor::new(frames.shape().to_vec(), bumped).unwrap());

        let per_frame = cfg.f_enc * cfg.l;
        for frame in 0..3 {
            let a = &base.data()[frame * per_frame..(frame + 1) * per_frame];
            let b = &out.data()[frame * per_frame..(frame + 1) * per_frame];
            if frame == 1 {
                assert!(a.iter().zip(b).any(|(x, y)| x != y));
            } else {
                assert_eq!(a, b, "frame {frame} leaked");
            }
        }
    }

    #[test]
    fn branch_receptive_field_is_two_kernels_wide() {
        let cfg = FrontendConfig { l: 12, ..toy_cfg() };
        let store = build_store(&cfg, 8);
        let run = |h0: &Tensor<f64>| {
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let x = tape.constant(h0.clone());
            let h1 = branch_process(&mut tape, &staged, &cfg, x, Branch::Acc).unwrap();
            tape.value(h1).clone()
        };
        let mut rng = SeedStream::new(9).stream("x");
        let h0 = Tensor::<f64>::randn(&[1, 1, cfg.f_enc, cfg.l], 0.0, 1.0, &mut rng);
        let base = run(&h0);
        let t = 6usize;
        let mut bumped = h0.data().to_vec();
        bumped[t] += 1.0; // channel 0, sample t
        let out = run(&Tensor::new(h0.shape().to_vec(), bumped).unwrap());
        for ch in 0..cfg.f_branch {
            for s in 0..cfg.l {
                let i = ch * cfg.l + s;
                let changed = base.data()[i] != out.data()[i];
                if s + 2 < t || s > t + 2 {
                    assert!(!changed, "sample {s} outside t±2 changed");
                }
            }
        }
        // some sample within the receptive field must change
        assert!((t - 2..=t + 2).any(|s| base.data()[s] != out.data()[s]));
    }

    #[test]
    fn acc_block_ignores_gyro_before_the_union_branch() {
        let cfg = toy_cfg();
        let store = build_store(&cfg, 10);
        let mut rng = SeedStream::new(11).stream("x");
        let frames = Tensor::<f64>::randn(&[1, 2, cfg.l, 6], 0.0, 1.0, &mut rng);
        let mut zeroed = frames.data().to_vec();
        for f in 0..2 {
            for s in 0..cfg.l {
                for c in 3..6 {
                    zeroed[(f * cfg.l + s) * 6 + c] = 0.0;
                }
            }
        }
        let zeroed = Tensor::new(frames.shape().to_vec(), zeroed).unwrap();

        let acc_projection = |f: &Tensor<f64>| {
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let x = tape.constant(f.clone());
            let acc = tape.slice_axis(x, 3, 0, 3).unwrap();
            let h0 = modality_encode(&mut tape, &staged, &cfg, acc, Modality::Acc).unwrap();
            let h1 = branch_process(&mut tape, &staged, &cfg, h0, Branch::Acc).unwrap();
            let p = project(&mut tape, &staged, &cfg, h1, Branch::Acc).unwrap();
            tape.value(p).clone()
        };
        assert_eq!(acc_projection(&frames), acc_projection(&zeroed));
    }

    #[test]
    fn rejects_wrong_channel_counts_and_widths() {
        let cfg = toy_cfg();
        let store = build_store(&cfg, 12);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let four = tape.constant(Tensor::zeros(&[1, 2, cfg.l, 4]));
        assert!(modality_encode(&mut tape, &staged, &cfg, four, Modality::Acc).is_err());
        assert!(frontend_forward(&mut tape, &staged, &cfg, four).is_err());

        let bad = FrontendConfig { d_llm: 10, ..toy_cfg() };
        assert!(bad.validate().is_err());
        let even = FrontendConfig { k: 4, ..toy_cfg() };
        assert!(even.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_the_store() {
        for cfg in [toy_cfg(), FrontendConfig::default()] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SeedStream::new(13).stream("init");
            init_frontend_params(&mut store, &cfg, &mut rng);
            assert_eq!(store.numel_where("frontend.", None), cfg.param_count());
            assert_eq!(store.numel_where("frontend.", Some(false)), 0);
        }
    }

    #[test]
    fn full_frontend_gradient_check() {
        let cfg = toy_cfg();
        let store = build_store(&cfg, 14);
        let mut rng = SeedStream::new(15).stream("x");
        let frames = Tensor::<f64>::randn(&[1, 2, cfg.l, 6], 0.0, 1.0, &mut rng);
        let names = store.trainable_names();

        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let x = tape.constant(frames.clone());
        let out = frontend_forward(&mut tape, &staged, &cfg, x).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        let analytic: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| tape.take_grad(staged.node(n)).expect("grad"))
            .collect();

        let params: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
        let numeric = central_diff_grads(&params, |ps| {
            let mut s = ParamStore::new();
            let mut rng = SeedStream::new(14).stream("init");
            init_frontend_params(&mut s, &cfg, &mut rng);
            for (n, p) in names.iter().zip(ps) {
                s.set(n, p.clone());
            }
            let mut tape = Tape::new();
            let staged = s.stage(&mut tape);
            let x = tape.constant(frames.clone());
            let out = frontend_forward(&mut tape, &staged, &cfg, x)?;
            let loss = tape.sum_all(out);
            Ok(tape.value(loss).item())
        }, 1e-5)
        .unwrap();
        let report = max_rel_err(&analytic, &numeric);
        assert!(report.max_rel_err <= 1e-3, "{report:?}");
    }
}
