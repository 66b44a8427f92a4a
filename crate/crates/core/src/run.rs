//! Command orchestration: data preparation, training, artifact writing and
//! the run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backbone::{make_mask, MaskPlan, TimeSeriesBatch};
use crate::cbd::BlockGating;
use crate::config::RunConfig;
use crate::data::{load_dataset, normalize, Dataset, NormStats};
use crate::diagnostics::{
    band_edges, energy_histogram, export_bernstein, interaction_rank, DiagnosticsReport, EnergyReport, LayerRank,
    DEFAULT_RANK_TOL,
};
use crate::engine::checkpoint::Dtype;
use crate::engine::graph::Graph;
use crate::error::{Error, Result};
use crate::model::{CheckpointMeta, Dims, Model};
use crate::rng::SeedTree;
use crate::ser::normalize_energy;
use crate::spectral::{amplitude, dft_inverse_with_residue, Spectrum};
use crate::tensor::Mat;
use crate::train::{
    evaluate, finetune, precision_name, pretrain, probe, reconstruction_weights, thread_pool, ClassifierEpoch,
    PretrainEpoch,
};

/// Points on the exported Bernstein curve.
pub const BERNSTEIN_GRID: usize = 101;

/// Files written by one command.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    /// Paths relative to `dir`, in write order; `manifest.json` is last.
    pub files: Vec<PathBuf>,
    pub metrics: Value,
}

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

/// Collects written files so the manifest can hash them.
struct RunDir {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl RunDir {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, contents)?;
        self.record(&p);
        Ok(p)
    }

    fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path).to_path_buf();
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
    }

    fn finish(mut self, command: &str, cfg: &RunConfig, metrics: Value) -> Result<RunArtifacts> {
        self.write("metrics.json", pretty(&metrics)?)?;
        let mut entries = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let bytes = std::fs::read(self.dir.join(rel))?;
            entries.push(FileEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        let overrides: Vec<Value> = cfg
            .overrides()
            .into_iter()
            .map(|(k, v, d)| json!({ "key": k, "value": v, "default": d }))
            .collect();
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "precision": precision_name(cfg.train.precision),
            "overrides": overrides,
            "files": entries,
        });
        self.write("manifest.json", pretty(&manifest)?)?;
        Ok(RunArtifacts {
            dir: self.dir,
            files: self.files,
            metrics,
        })
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads both splits and z-scores them, with `stats` when given and with
/// training statistics otherwise.
fn prepare_data(cfg: &RunConfig, stats: Option<&NormStats>) -> Result<(Dataset, Option<NormStats>)> {
    let ds = load_dataset(&cfg.data, cfg.seed)?;
    if ds.train.is_empty() {
        return Err(Error::Config("the training split has no samples".into()));
    }
    match stats {
        Some(s) => {
            let out = Dataset {
                train: s.apply(&ds.train)?,
                test: s.apply(&ds.test)?,
                meta: ds.meta,
            };
            Ok((out, Some(s.clone())))
        }
        None if cfg.train.normalize => {
            let (out, s) = normalize(&ds)?;
            Ok((out, Some(s)))
        }
        None => Ok((ds, None)),
    }
}

fn load_model(checkpoint: Option<&Path>, command: &str) -> Result<(Model, CheckpointMeta)> {
    let path = checkpoint.ok_or_else(|| {
        Error::Config(format!(
            "`{command}` needs a trained model; pass --checkpoint PATH (for example the model.ckpt written by `pretrain`)"
        ))
    })?;
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Model::load(path)
}

fn check_dims(model: &Model, ds: &Dataset) -> Result<()> {
    let d = model.dims;
    if ds.train.length() != d.length || ds.train.channels() != d.channels {
        return Err(Error::Config(format!(
            "the checkpoint was trained on {} x {} series, the configured data has {} x {}",
            d.length,
            d.channels,
            ds.train.length(),
            ds.train.channels()
        )));
    }
    if ds.meta.classes > d.classes {
        return Err(Error::Config(format!(
            "the data has {} classes, the checkpoint's head has {}",
            ds.meta.classes, d.classes
        )));
    }
    Ok(())
}

fn warn_model_overrides(cfg: &RunConfig, meta: &CheckpointMeta) {
    if cfg.model != meta.model {
        log::warn!("the [model] section differs from the checkpoint; the checkpoint's architecture is used");
    }
}

fn write_config(rd: &mut RunDir, cfg: &RunConfig) -> Result<()> {
    rd.write("config.toml", cfg.to_toml()?)?;
    Ok(())
}

fn save_model(rd: &mut RunDir, model: &Model, norm: Option<&NormStats>, stage: &str) -> Result<()> {
    let p = rd.dir.join("model.ckpt");
    model.save(&p, norm, stage, Dtype::F64)?;
    rd.record(&p);
    Ok(())
}

fn loss_csv(history: &[PretrainEpoch]) -> String {
    let mut s = String::from("epoch,total,temporal_re,freq_dual,freq_re,temporal_dual\n");
    for e in history {
        let l = &e.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch, l.total, l.temporal_re, l.freq_dual, l.freq_re, l.temporal_dual
        );
    }
    s
}

fn classifier_csv(history: &[ClassifierEpoch]) -> String {
    let mut s = String::from("epoch,loss,train_accuracy\n");
    for e in history {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.loss, e.train_accuracy);
    }
    s
}

/// Masked pre-training from scratch.
pub fn run_pretrain(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (ds, norm) = prepare_data(cfg, None)?;
    let dims = Dims::new(
        ds.train.length(),
        ds.train.channels(),
        ds.meta.classes.max(1),
        cfg.model.window,
    )?;
    let seeds = SeedTree::new(cfg.seed);
    let mut model = Model::new(&cfg.model, dims, seeds.child("model"))?;
    let mut rd = RunDir::create(&cfg.out)?;
    write_config(&mut rd, cfg)?;
    let pool = thread_pool()?;
    log::info!(
        "pretraining on {} samples of {} x {} ({} tokens) for {} epochs with {} workers",
        ds.train.len(),
        dims.length,
        dims.channels,
        dims.tokens,
        cfg.train.epochs,
        pool.current_num_threads()
    );
    let history = pretrain(&mut model, &ds.train, cfg, seeds.child("pretrain"), &pool, |e| {
        log::info!("epoch {} loss {:.6}", e.epoch, e.loss.total);
    })?;
    rd.write("loss.csv", loss_csv(&history))?;
    save_model(&mut rd, &model, norm.as_ref(), "pretrain")?;
    let first = history.first().map(|e| e.loss.total);
    let last = history.last().map(|e| e.loss.total);
    let metrics = json!({
        "epochs": history.len(),
        "initial_loss": first,
        "final_loss": last,
        "final_over_initial": first.zip(last).map(|(a, b)| b / a),
        "parameters": model.store.iter().map(|(_, p)| p.value.len()).sum::<usize>(),
    });
    rd.finish("pretrain", cfg, metrics)
}

fn run_classifier(cfg: &RunConfig, checkpoint: Option<&Path>, command: &str) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (mut model, meta) = load_model(checkpoint, command)?;
    warn_model_overrides(cfg, &meta);
    let (ds, norm) = prepare_data(cfg, meta.norm.as_ref())?;
    check_dims(&model, &ds)?;
    let mut rd = RunDir::create(&cfg.out)?;
    write_config(&mut rd, cfg)?;
    let pool = thread_pool()?;
    let seeds = SeedTree::new(cfg.seed);
    let log_epoch = |e: &ClassifierEpoch| {
        log::info!("epoch {} loss {:.6} train accuracy {:.4}", e.epoch, e.loss, e.train_accuracy);
    };
    let history = if command == "probe" {
        probe(&mut model, &ds.train, cfg, seeds.child("probe"), &pool, log_epoch)?
    } else {
        finetune(&mut model, &ds.train, cfg, seeds.child("finetune"), &pool, log_epoch)?
    };
    rd.write(&format!("{command}.csv"), classifier_csv(&history))?;
    save_model(&mut rd, &model, norm.as_ref(), command)?;
    let train_acc = evaluate(&model, &ds.train, &pool)?;
    let test_acc = if ds.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &ds.test, &pool)?)
    };
    log::info!("train accuracy {train_acc:.4}, test accuracy {test_acc:?}");
    let metrics = json!({
        "epochs": history.len(),
        "final_loss": history.last().map(|e| e.loss),
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "test_samples": ds.test.len(),
    });
    rd.finish(command, cfg, metrics)
}

/// Supervised training of encoder and head from a checkpoint.
pub fn run_finetune(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<RunArtifacts> {
    run_classifier(cfg, checkpoint, "finetune")
}

/// Linear probe on frozen encoder features.
pub fn run_probe(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<RunArtifacts> {
    run_classifier(cfg, checkpoint, "probe")
}

fn head_average(g: &Graph, heads: &[crate::engine::graph::Var]) -> Mat {
    let mut avg = g.value(heads[0]).clone();
    for &h in &heads[1..] {
        avg.add_assign(g.value(h));
    }
    avg.scale(1.0 / heads.len() as f64)
}

fn accumulate_hist(acc: &mut [f64], x: &Mat, bands: usize) -> Result<()> {
    let h = energy_histogram(x, bands)?;
    for (a, v) in acc.iter_mut().zip(h.values) {
        *a += v;
    }
    Ok(())
}

/// Computes every diagnostic of a trained model on up to
/// `train.diagnose_samples` test samples (training samples when the test
/// split is empty).
pub fn diagnose(model: &Model, batch: &TimeSeriesBatch, cfg: &RunConfig) -> Result<DiagnosticsReport> {
    let n = cfg.train.diagnose_samples.min(batch.len());
    if n == 0 {
        return Err(Error::Config("diagnose needs at least one sample (train.diagnose_samples)".into()));
    }
    let rows = model.kept_rows();
    let max_bands = rows / 2 + 1;
    let bands = if cfg.train.diagnose_bands > max_bands {
        log::warn!(
            "train.diagnose_bands = {} exceeds the {max_bands} one-sided bins; using {max_bands}",
            cfg.train.diagnose_bands
        );
        max_bands
    } else {
        cfg.train.diagnose_bands
    };
    let edges = band_edges(rows, bands)?;
    let tokens = model.dims.tokens;
    let weights = reconstruction_weights(model);
    let seeds = SeedTree::new(cfg.seed).child("diagnose");
    let layers = model.config.encoder_layers;

    let mut first_rank = vec![0usize; layers];
    let mut rank_sum = vec![0usize; layers];
    let mut per_head: Vec<Vec<usize>> = vec![Vec::new(); layers];
    let mut raw = vec![0.0; bands];
    let mut rec_t = vec![0.0; bands];
    let mut rec_f = model.cbd.as_ref().map(|_| vec![0.0; bands]);
    let mut residues = Vec::new();
    let mut min_scale: Option<f64> = None;
    let mut bernstein = Vec::new();

    for i in 0..n {
        let x = batch.sample(i);
        let mut g = Graph::new(&model.store);
        let enc = model.encoder.forward(&mut g, x, &MaskPlan::none(tokens))?;
        for (l, heads) in enc.attention.iter().enumerate() {
            let r = interaction_rank(&head_average(&g, heads), DEFAULT_RANK_TOL)?;
            rank_sum[l] += r;
            if i == 0 {
                first_rank[l] = r;
                if cfg.train.diagnose_per_head {
                    per_head[l] = heads
                        .iter()
                        .map(|&h| interaction_rank(g.value(h), DEFAULT_RANK_TOL))
                        .collect::<Result<_>>()?;
                }
            }
        }

        let mask = make_mask(tokens, cfg.mask.ratio, seeds.index(i as u64).seed())?;
        let mut g = Graph::new(&model.store);
        let f = model.pretrain_forward(&mut g, x, &mask, &weights)?;
        accumulate_hist(&mut raw, &model.ground_truth(x)?, bands)?;
        accumulate_hist(&mut rec_t, g.value(f.temporal), bands)?;
        if let (Some(acc), Some(v)) = (rec_f.as_mut(), f.frequency) {
            accumulate_hist(acc, g.value(v), bands)?;
        }
        if let Some(out) = &f.cbd {
            let spec = Spectrum::new(g.take_value(out.spectrum.re), g.take_value(out.spectrum.im))?;
            residues.push(dft_inverse_with_residue(&spec)?.1);
            for b in &out.blocks {
                if let Some(s) = b.scale {
                    let m = g.value(s).as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
                    min_scale = Some(min_scale.map_or(m, |c: f64| c.min(m)));
                }
            }
            if i == 0 {
                if let Some(dec) = &model.cbd {
                    let p = dec.blocks[0].params(&model.store);
                    let gate = match &p.ser {
                        BlockGating::Shared(gp) => gp.clone(),
                        BlockGating::PerChannel(v) => v[0].clone(),
                    };
                    let t = &out.blocks[0].ser_input;
                    let spec = Spectrum::new(g.take_value(t.re), g.take_value(t.im))?;
                    let a = normalize_energy(&amplitude(&spec))?;
                    bernstein = export_bernstein(&gate, &a.col_vec(0), BERNSTEIN_GRID)?;
                }
            }
        }
    }

    let nf = n as f64;
    let mean = |v: Vec<f64>| v.into_iter().map(|x| x / nf).collect::<Vec<f64>>();
    let ranks = (0..layers)
        .map(|l| LayerRank {
            layer: l,
            rank: first_rank[l],
            mean_rank: rank_sum[l] as f64 / nf,
            size: tokens,
            rel_tol: DEFAULT_RANK_TOL,
            per_head: cfg.train.diagnose_per_head.then(|| per_head[l].clone()),
        })
        .collect();
    Ok(DiagnosticsReport {
        ranks,
        energy: EnergyReport {
            bands: edges,
            raw: mean(raw),
            reconstructed_t: mean(rec_t),
            reconstructed_f: rec_f.map(mean),
        },
        bernstein,
        residue_norms: residues,
        min_scale,
    })
}

/// Writes the diagnostics of a checkpoint into `<out>/diag`.
pub fn run_diagnose(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (model, meta) = load_model(checkpoint, "diagnose")?;
    warn_model_overrides(cfg, &meta);
    let (ds, _) = prepare_data(cfg, meta.norm.as_ref())?;
    check_dims(&model, &ds)?;
    let mut rd = RunDir::create(&cfg.out)?;
    write_config(&mut rd, cfg)?;
    let batch = if ds.test.is_empty() { &ds.train } else { &ds.test };
    let report = diagnose(&model, batch, cfg)?;
    for p in report.write(&rd.dir.join("diag"))? {
        rd.record(&p);
    }
    let last = report.ranks.last();
    let metrics = json!({
        "samples": cfg.train.diagnose_samples.min(batch.len()),
        "last_layer_rank": last.map(|r| r.rank),
        "last_layer_mean_rank": last.map(|r| r.mean_rank),
        "tokens": model.dims.tokens,
        "max_residue_norm": report.residue_norms.iter().cloned().fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r)))),
        "min_scale": report.min_scale,
    });
    rd.finish("diagnose", cfg, metrics)
}
