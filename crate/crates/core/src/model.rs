//! Assembles the trainable pieces of one method into a single unit: one
//! MLP encoder per modality, the optional gate, and the learned logit
//! scale gamma. Owns the parameter table so the trainer and the
//! checkpoint format see a flat named list.

use std::path::Path;

use crate::encoders::{DropoutMode, EmbeddingBatch, MlpEncoder, MlpEncoderConfig};
use crate::error::{Error, Result};
use crate::gate::{GateConfig, GateMode, GateModule};
use crate::mip::MipConfig;
use crate::objective::Method;
use crate::params::{ParamBinding, ParamId, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub method: Method,
    pub num_modalities: usize,
    pub target_modality: usize,
    /// One encoder per modality, all built from this shape.
    pub encoder: MlpEncoderConfig,
    pub gate: GateConfig,
    pub logit_scale_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            method: Method::GatedSymile,
            num_modalities: 3,
            target_modality: 0,
            encoder: MlpEncoderConfig::default(),
            gate: GateConfig::default(),
            logit_scale_init: -0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_modalities < 2 {
            return Err(Error::config("need at least 2 modalities"));
        }
        if self.target_modality >= self.num_modalities {
            return Err(Error::config(format!(
                "target modality {} out of {}",
                self.target_modality, self.num_modalities
            )));
        }
        if !self.logit_scale_init.is_finite() {
            return Err(Error::config("logit_scale_init must be finite"));
        }
        self.encoder.validate()
    }

    pub fn mip(&self) -> Result<MipConfig> {
        MipConfig::new(self.encoder.embedding_dim, self.num_modalities)
    }

    /// A gate module is only built for `gated_symile` with an active mode;
    /// `gate_mode = none` deliberately degrades to plain symile scoring.
    pub fn wants_gate(&self) -> bool {
        self.method == Method::GatedSymile && self.gate.gate_mode != GateMode::Off
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoders: Vec<MlpEncoder>,
    pub gate: Option<GateModule>,
    pub logit_scale: ParamId,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64, lr_gate_mul: f64) -> Result<Model> {
        config.validate()?;
        let mut params = ParamSet::new();
        let encoders = (0..config.num_modalities)
            .map(|m| MlpEncoder::build(&config.encoder, m, &mut params, &format!("enc.{m}"), seed))
            .collect::<Result<Vec<_>>>()?;
        let gate = if config.wants_gate() {
            Some(GateModule::build(
                &config.gate,
                config.target_modality,
                config.num_modalities,
                config.encoder.embedding_dim,
                &mut params,
                lr_gate_mul,
                seed,
            )?)
        } else {
            None
        };
        let logit_scale =
            params.add("logit_scale", Tensor::vector(vec![config.logit_scale_init]), 1.0, true)?;
        Ok(Model { config: config.clone(), params, encoders, gate, logit_scale })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.encoder.embedding_dim
    }

    /// Encoder forward inside a graph; `inputs` is a `[rows x input_dim]` node.
    pub fn encode(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        modality: usize,
        inputs: Var,
        mode: DropoutMode,
    ) -> Result<Var> {
        self.encoder(modality)?.forward(g, binding, inputs, mode)
    }

    /// Gradient-free encoder forward for evaluation.
    pub fn encode_values(&self, modality: usize, inputs: &[f64], rows: usize) -> Result<EmbeddingBatch> {
        self.encoder(modality)?.forward_values(&self.params, inputs, rows)
    }

    fn encoder(&self, modality: usize) -> Result<&MlpEncoder> {
        self.encoders
            .get(modality)
            .ok_or_else(|| Error::Index(format!("modality {modality} out of {}", self.encoders.len())))
    }

    pub fn logit_scale_value(&self) -> f64 {
        self.params.value(self.logit_scale).data()[0]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    /// Rebuilds the architecture from `config` and installs checkpointed
    /// values. Names and shapes must match the checkpoint exactly.
    pub fn load(config: &ModelConfig, lr_gate_mul: f64, path: &Path) -> Result<Model> {
        let mut model = Model::build(config, 0, lr_gate_mul)?;
        let stored = ParamSet::load(path)?;
        model.params.adopt_values(&stored)?;
        Ok(model)
    }
}
