//! The full model: encoder, mask token, temporal decoder, spectral decoder
//! with its raw-space head, and the classification head, all registered in
//! one parameter store.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{token_count, ClassifierHead, Encoder, MaskPlan, TemporalDecoder};
use crate::cbd::{BlockOptions, CbdDecoder, CbdOutput};
use crate::config::ModelConfig;
use crate::data::NormStats;
use crate::engine::checkpoint::{load_checkpoint, save_checkpoint, Dtype};
use crate::engine::graph::{Graph, Var};
use crate::engine::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::objectives::{pretrain_loss_graph, LossWeights, PretrainLoss};
use crate::rng::SeedTree;
use crate::tensor::Mat;

/// Data-dependent sizes fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Raw series length before truncation.
    pub length: usize,
    pub channels: usize,
    pub classes: usize,
    pub tokens: usize,
}

impl Dims {
    pub fn new(length: usize, channels: usize, classes: usize, window: usize) -> Result<Self> {
        Ok(Self {
            length,
            channels,
            classes,
            tokens: token_count(length, window)?,
        })
    }
}

/// Metadata stored alongside the tensors of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub dims: Dims,
    pub norm: Option<NormStats>,
    /// Command that produced the checkpoint.
    pub stage: String,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: Dims,
    pub store: ParameterStore,
    pub encoder: Encoder,
    pub mask_token: ParamId,
    pub temporal: TemporalDecoder,
    pub cbd: Option<CbdDecoder>,
    /// Maps inverse-transformed decoder tokens to raw windows.
    pub freq_head: Option<Linear>,
    pub head: ClassifierHead,
}

/// Graph nodes of one pre-training forward pass.
pub struct PretrainForward {
    pub loss: PretrainLoss,
    /// `L′ × C` temporal reconstruction.
    pub temporal: Var,
    /// `L′ × C` frequency-branch reconstruction.
    pub frequency: Option<Var>,
    pub cbd: Option<CbdOutput>,
    /// Encoder attention, `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

impl Model {
    pub fn new(config: &ModelConfig, dims: Dims, seeds: SeedTree) -> Result<Self> {
        let mut rng = seeds.child("init").rng();
        let mut store = ParameterStore::new();
        let ff = config.ff_mult * config.d;
        let encoder = Encoder::new(
            &mut store,
            dims.channels,
            dims.tokens,
            config.window,
            config.d,
            config.encoder_layers,
            config.heads,
            ff,
            &mut rng,
        )?;
        let mask_token = store.add("mask_token", Mat::zeros(1, config.d))?;
        let temporal = TemporalDecoder::new(
            &mut store,
            dims.channels,
            dims.tokens,
            config.window,
            config.d,
            config.decoder_layers,
            config.heads,
            ff,
            &mut rng,
        )?;
        let (cbd, freq_head) = if config.cbd_enabled {
            let options = BlockOptions {
                activation: config.activation,
                use_cim: config.use_cim,
                use_ser: config.use_ser,
            };
            let dec = CbdDecoder::new(
                &mut store,
                dims.tokens,
                config.d,
                config.cbd_blocks,
                config.order,
                ff,
                config.per_channel_gating,
                config.uniform_cim,
                options,
                &mut rng,
            )?;
            let head = Linear::new(&mut store, "fd.head", config.d, config.window * dims.channels, &mut rng)?;
            (Some(dec), Some(head))
        } else {
            (None, None)
        };
        let head = ClassifierHead::new(&mut store, config.d, dims.classes, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            dims,
            store,
            encoder,
            mask_token,
            temporal,
            cbd,
            freq_head,
            head,
        })
    }

    /// Rows kept after right-truncation to whole windows.
    pub fn kept_rows(&self) -> usize {
        self.dims.tokens * self.config.window
    }

    /// Leading `L′` rows of a raw sample.
    pub fn ground_truth(&self, x: &Mat) -> Result<Mat> {
        let rows = self.kept_rows();
        if x.rows() < rows || x.cols() != self.dims.channels {
            return Err(Error::shape(
                "model input",
                format!("({}, {})", self.dims.length, self.dims.channels),
                format!("{:?}", x.shape()),
            ));
        }
        Mat::from_vec(rows, x.cols(), x.as_slice()[..rows * x.cols()].to_vec())
    }

    /// Full pre-training forward pass for one sample.
    pub fn pretrain_forward(&self, g: &mut Graph, x: &Mat, mask: &MaskPlan, w: &LossWeights) -> Result<PretrainForward> {
        let gt = self.ground_truth(x)?;
        let enc = self.encoder.forward(g, x, mask)?;
        let token = g.param(self.mask_token);
        let temporal = self.temporal.forward(g, enc.features, mask, token)?;
        let (frequency, cbd) = match (&self.cbd, &self.freq_head) {
            (Some(dec), Some(head)) if w.uses_frequency_branch() => {
                let out = dec.forward(g, enc.features, mask, token)?;
                let tokens = g.idft_real(out.spectrum);
                let raw = head.forward(g, tokens);
                let raw = g.reshape(raw, self.kept_rows(), self.dims.channels);
                (Some(raw), Some(out))
            }
            _ => (None, None),
        };
        let loss = pretrain_loss_graph(g, temporal, frequency, &gt, mask, self.config.window, w)?;
        Ok(PretrainForward {
            loss,
            temporal,
            frequency,
            cbd,
            attention: enc.attention,
        })
    }

    /// Mean-pooled encoder features of an unmasked sample, `1 × d`.
    pub fn pooled(&self, g: &mut Graph, x: &Mat) -> Result<Var> {
        let enc = self.encoder.forward(g, x, &MaskPlan::none(self.dims.tokens))?;
        Ok(g.mean_rows(enc.features))
    }

    /// Class logits of one sample, `1 × classes`.
    pub fn logits(&self, g: &mut Graph, x: &Mat) -> Result<Var> {
        let enc = self.encoder.forward(g, x, &MaskPlan::none(self.dims.tokens))?;
        Ok(self.head.forward(g, enc.features))
    }

    /// Names of the tensors under the encoder (embedding, positions and
    /// transformer layers).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.")
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("cls.")
    }

    pub fn save(&self, path: &Path, norm: Option<&NormStats>, stage: &str, dtype: Dtype) -> Result<()> {
        let meta = CheckpointMeta {
            model: self.config.clone(),
            dims: self.dims,
            norm: norm.cloned(),
            stage: stage.to_string(),
        };
        let value = serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        save_checkpoint(path, &self.store, &value, dtype)
    }

    /// Rebuilds the layout recorded in a checkpoint and copies every tensor
    /// in by name.
    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (loaded, manifest) = load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.metadata.clone()).map_err(|e| {
            Error::Checkpoint(format!("{}: metadata does not describe a model: {e}", path.display()))
        })?;
        let mut model = Model::new(&meta.model, meta.dims, SeedTree::new(0))?;
        if loaded.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{}: holds {} tensors, the recorded layout has {}",
                path.display(),
                loaded.len(),
                model.store.len()
            )));
        }
        let ids: Vec<(ParamId, String)> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let src = loaded
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor {name}", path.display())))?;
            model.store.set(id, src.value.clone())?;
        }
        Ok((model, meta))
    }

    /// Marks every parameter trainable or frozen according to `keep`.
    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) {
        let ids: Vec<(ParamId, bool)> = self.store.iter().map(|(id, p)| (id, keep(&p.name))).collect();
        for (id, t) in ids {
            self.store.set_trainable(id, t);
        }
    }
}
