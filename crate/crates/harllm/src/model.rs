//! Full classifier: frontend, frozen backbone with adapters, mean pooling,
//! linear head. Owns the trainable/frozen partition and checkpoint layout.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, save_archive};
use crate::backbone::{
    backbone_forward, import_gpt2, init_backbone_params, init_lora_params, BackboneConfig,
    LoraConfig,
};
use crate::data::recording::LabelVocab;
use crate::data::windows::frame_batch;
use crate::frontend::{frontend_forward, init_frontend_params, FrontendConfig};
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::params::{ParamStore, StagedParams};
use crate::rng::SeedStream;
use crate::{Error, Result};

pub const TENSORS_FILE: &str = "model.tensors";
pub const SIDECAR_FILE: &str = "model.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    frontend: FrontendConfig,
    backbone: BackboneConfig,
    lora: LoraConfig,
    labels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub frontend: FrontendConfig,
    pub backbone: BackboneConfig,
    pub lora: LoraConfig,
    pub labels: LabelVocab,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model. Each component draws from its own
    /// seed stream, so changing one component's size leaves the others'
    /// initial values untouched.
    pub fn new(
        frontend: FrontendConfig,
        backbone: BackboneConfig,
        lora: LoraConfig,
        labels: LabelVocab,
        seeds: &SeedStream,
    ) -> Result<Self> {
        frontend.validate()?;
        backbone.validate()?;
        lora.validate()?;
        if frontend.d_llm != backbone.d_model {
            return Err(Error::config(format!(
                "token width {} does not match backbone width {}",
                frontend.d_llm, backbone.d_model
            )));
        }
        let mut params = ParamStore::new();
        init_frontend_params(&mut params, &frontend, &mut seeds.stream("init/frontend"));
        init_backbone_params(&mut params, &backbone, &mut seeds.stream("init/backbone"));
        init_lora_params(&mut params, &backbone, &lora, &mut seeds.stream("init/lora"));
        let k = labels.len();
        let mut head_rng = seeds.stream("init/head");
        params.insert(
            "head.weight",
            Tensor::randn(&[frontend.d_llm, k], 0.0, 0.02, &mut head_rng),
            true,
        );
        params.insert("head.bias", Tensor::zeros(&[k]), true);
        Ok(Model { frontend, backbone, lora, labels, params })
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn stage(&self, tape: &mut Tape<T>) -> StagedParams {
        self.params.stage(tape)
    }

    /// (B, W, C) windows -> (B, K) logits on an already staged tape.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedParams,
        windows: &Tensor<T>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let frames = frame_batch(windows, self.frontend.l)?;
        let x = tape.constant(frames);
        let tokens = frontend_forward(tape, staged, &self.frontend, x)?;
        let hidden =
            backbone_forward(tape, staged, &self.backbone, &self.lora, tokens, training, rng)?;
        let pooled = mean_pool(tape, hidden)?;
        let w = staged.node("head.weight");
        let b = staged.node("head.bias");
        let logits = tape.matmul(pooled, w)?;
        tape.add(logits, b)
    }

    /// Eval-mode logits on a throwaway tape.
    pub fn logits(&self, windows: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape);
        let mut rng = SeedStream::new(0).stream("eval");
        let out = self.forward(&mut tape, &staged, windows, false, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, windows: &Tensor<T>) -> Result<Vec<u32>> {
        Ok(argmax_rows(&self.logits(windows)?))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.trainable_names()
    }

    /// Per-component parameter counts for reporting.
    pub fn param_table(&self) -> Vec<(&'static str, usize, bool)> {
        vec![
            ("frontend", self.params.numel_where("frontend.", None), true),
            ("adapters", self.params.numel_where("lora.", None), true),
            ("head", self.params.numel_where("head.", None), true),
            ("backbone", self.params.numel_where("backbone.", None), false),
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_archive(&dir.join(TENSORS_FILE), &self.params.to_f32_map())?;
        let sidecar = Sidecar {
            frontend: self.frontend.clone(),
            backbone: self.backbone.clone(),
            lora: self.lora.clone(),
            labels: self.labels.names().to_vec(),
        };
        std::fs::write(dir.join(SIDECAR_FILE), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(dir.join(SIDECAR_FILE))?)?;
        let labels = LabelVocab::new(&sidecar.labels)?;
        let mut model = Model::new(
            sidecar.frontend,
            sidecar.backbone,
            sidecar.lora,
            labels,
            &SeedStream::new(0),
        )?;
        let tensors = load_archive(&dir.join(TENSORS_FILE))?;
        model.params.load_f32_map(&tensors)?;
        Ok(model)
    }

    /// Overwrites the frozen base with a published GPT-2 tensor set.
    pub fn load_gpt2_backbone(&mut self, path: &Path) -> Result<()> {
        let raw = load_archive(path)?;
        let mapped = import_gpt2(&raw, &self.backbone)?;
        self.params.load_f32_entries(&mapped)
    }
}

/// (B, N, d) -> (B, d), arithmetic mean over tokens.
pub fn mean_pool<T: Scalar>(tape: &mut Tape<T>, hidden: NodeId) -> Result<NodeId> {
    let shape = tape.value(hidden).shape();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::shape("mean_pool", shape, &[0, 1, 0]));
    }
    tape.mean_axis(hidden, 1)
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<u32> {
    let k = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}
