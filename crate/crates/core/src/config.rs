//! Run configuration: one TOML file, pre-populated with the reference
//! defaults. Every value that differs from its default is reported as an
//! override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cim::SplitActivation;
use crate::data::DataSource;
use crate::engine::graph::Precision;
use crate::engine::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::ser::MAX_ORDER;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden size.
    pub d: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Number of spectral decoder blocks.
    pub cbd_blocks: usize,
    pub heads: usize,
    /// Embedding kernel and stride.
    pub window: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ff_mult: usize,
    /// Bernstein order `K`.
    pub order: usize,
    pub per_channel_gating: bool,
    pub activation: SplitActivation,
    /// Uniform modulation weights instead of the bias-only start.
    pub uniform_cim: bool,
    pub use_cim: bool,
    pub use_ser: bool,
    /// Build the spectral decoder branch at all.
    pub cbd_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            encoder_layers: 8,
            decoder_layers: 2,
            cbd_blocks: 2,
            heads: 4,
            window: 8,
            ff_mult: 4,
            order: 12,
            per_channel_gating: false,
            activation: SplitActivation::Relu,
            uniform_cim: false,
            use_cim: true,
            use_ser: true,
            cbd_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { ratio: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub probe_epochs: usize,
    /// Learning rate of the linear probe; the optimizer's rate when unset.
    pub probe_lr: Option<f64>,
    pub precision: Precision,
    /// Z-score every channel with training-split statistics.
    pub normalize: bool,
    /// Test samples used by `diagnose`.
    pub diagnose_samples: usize,
    pub diagnose_bands: usize,
    pub diagnose_per_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 20,
            finetune_epochs: 10,
            probe_epochs: 100,
            probe_lr: None,
            precision: Precision::F64,
            normalize: true,
            diagnose_samples: 16,
            diagnose_bands: 10,
            diagnose_per_head: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSource,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataSource::default(),
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            loss: LossWeights::default(),
            optimizer: AdamWConfig {
                lr: 1e-4,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 3e-4,
            },
            train: TrainConfig::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad(e.to_string()))
    }

    /// Checks every constraint that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d == 0 || m.heads == 0 || !m.d.is_multiple_of(m.heads) {
            return Err(bad(format!(
                "model.d ({}) must be a positive multiple of model.heads ({})",
                m.d, m.heads
            )));
        }
        if m.encoder_layers == 0 {
            return Err(bad("model.encoder_layers must be at least 1"));
        }
        if m.window == 0 {
            return Err(bad("model.window must be at least 1"));
        }
        if m.ff_mult == 0 {
            return Err(bad("model.ff_mult must be at least 1"));
        }
        if m.order == 0 || m.order > MAX_ORDER {
            return Err(bad(format!("model.order must lie in 1..={MAX_ORDER}, got {}", m.order)));
        }
        if m.cbd_enabled && m.cbd_blocks == 0 {
            return Err(bad("model.cbd_blocks must be at least 1 when model.cbd_enabled is true"));
        }
        if !(0.0..1.0).contains(&self.mask.ratio) {
            return Err(bad(format!(
                "mask.ratio must lie in [0, 1) so the encoder sees at least one token, got {}",
                self.mask.ratio
            )));
        }
        self.loss.validate()?;
        if self.loss.uses_frequency_branch() && !m.cbd_enabled {
            return Err(bad(
                "loss.gamma > 0 needs the spectral decoder; set model.cbd_enabled = true or loss.gamma = 0",
            ));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(bad("optimizer.lr must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(bad("optimizer.beta1 and optimizer.beta2 must lie in [0, 1)"));
        }
        if o.eps.is_nan() || o.eps <= 0.0 || o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return Err(bad("optimizer.eps must be positive and optimizer.weight_decay non-negative"));
        }
        if self.train.batch_size == 0 {
            return Err(bad("train.batch_size must be at least 1"));
        }
        if let Some(lr) = self.train.probe_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(bad("train.probe_lr must be positive"));
            }
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    /// `(path, value, default)` for every leaf that differs from the
    /// defaults.
    pub fn overrides(&self) -> Vec<(String, Value, Value)> {
        let actual = serde_json::to_value(self).unwrap_or(Value::Null);
        let default = serde_json::to_value(Self::default()).unwrap_or(Value::Null);
        let mut out = Vec::new();
        diff("", &actual, &default, &mut out);
        out
    }

    pub fn log_overrides(&self) {
        for (path, v, d) in self.overrides() {
            log::info!("config override: {path} = {v} (default {d})");
        }
    }
}

fn diff(prefix: &str, a: &Value, d: &Value, out: &mut Vec<(String, Value, Value)>) {
    match (a, d) {
        (Value::Object(ao), Value::Object(dobj)) => {
            for (k, av) in ao {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                diff(&path, av, dobj.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != d => out.push((prefix.to_string(), a.clone(), d.clone())),
        _ => {}
    }
}
