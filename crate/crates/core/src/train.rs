//! Training loops: masked pre-training, fine-tuning, linear probing and
//! evaluation.
//!
//! Samples are processed in fixed chunks; each chunk's per-sample graphs
//! run on the worker pool and their gradients are summed in sample order,
//! so results do not depend on the number of workers.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::{make_mask, TimeSeriesBatch};
use crate::config::RunConfig;
use crate::engine::graph::{Graph, Precision};
use crate::engine::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::engine::params::Gradients;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{LossBreakdown, LossWeights};
use crate::rng::SeedTree;
use crate::tensor::Mat;

/// Samples whose gradients are held in memory at once.
pub const CHUNK: usize = 16;

/// Worker pool sized by `SPECMTM_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("SPECMTM_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

fn shuffled(n: usize, seeds: SeedTree, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds.child("shuffle").index(epoch as u64).rng());
    order
}

fn check_batch(model: &Model, batch: &TimeSeriesBatch) -> Result<()> {
    if (batch.length(), batch.channels()) != (model.dims.length, model.dims.channels) {
        return Err(Error::Config(format!(
            "data has series of {} x {}, the model was built for {} x {}",
            batch.length(),
            batch.channels(),
            model.dims.length,
            model.dims.channels
        )));
    }
    Ok(())
}

/// Runs `f` over `idx` in fixed chunks on the pool and folds the results
/// in index order.
fn accumulate<T, F>(pool: &rayon::ThreadPool, idx: &[usize], model: &Model, f: F) -> Result<(Vec<T>, Gradients)>
where
    T: Send,
    F: Fn(usize) -> Result<(T, Gradients)> + Sync,
{
    let mut total = Gradients::zeros_like(&model.store);
    let mut values = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(CHUNK) {
        let results: Vec<Result<(T, Gradients)>> = pool.install(|| chunk.par_iter().map(|&i| f(i)).collect());
        for r in results {
            let (v, g) = r?;
            total.add_assign(&g);
            values.push(v);
        }
    }
    Ok((values, total))
}

/// Masked pre-training of every part except the classification head.
pub fn pretrain(
    model: &mut Model,
    train: &TimeSeriesBatch,
    cfg: &RunConfig,
    seeds: SeedTree,
    pool: &rayon::ThreadPool,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<Vec<PretrainEpoch>> {
    check_batch(model, train)?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    model.set_trainable(|n| !Model::is_head_param(n));
    let mut state = OptimizerState::new(&model.store, cfg.optimizer);
    let weights = cfg.loss;
    let tokens = model.dims.tokens;
    let precision = cfg.train.precision;
    let mask_seeds = seeds.child("mask");
    let mut history = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let order = shuffled(train.len(), seeds, epoch);
        let epoch_masks = mask_seeds.index(epoch as u64);
        let mut sums = LossBreakdown::default();
        for batch in order.chunks(cfg.train.batch_size) {
            let m: &Model = model;
            let (losses, mut grads) = accumulate(pool, batch, m, |i| {
                let mask = make_mask(tokens, cfg.mask.ratio, epoch_masks.index(i as u64).seed())?;
                let mut g = Graph::new(&m.store).with_precision(precision);
                let f = m.pretrain_forward(&mut g, train.sample(i), &mask, &weights)?;
                let grads = g.backward(f.loss.total)?;
                Ok((f.loss.breakdown(&g), grads))
            })?;
            for l in &losses {
                sums.temporal_re += l.temporal_re;
                sums.freq_dual += l.freq_dual;
                sums.freq_re += l.freq_re;
                sums.temporal_dual += l.temporal_dual;
                sums.total += l.total;
            }
            grads.scale(1.0 / batch.len() as f64);
            adamw_step(&mut model.store, &grads, &mut state)?;
        }
        let n = train.len() as f64;
        let rec = PretrainEpoch {
            epoch: epoch + 1,
            loss: LossBreakdown {
                temporal_re: sums.temporal_re / n,
                freq_dual: sums.freq_dual / n,
                freq_re: sums.freq_re / n,
                temporal_dual: sums.temporal_dual / n,
                total: sums.total / n,
            },
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn labels(batch: &TimeSeriesBatch) -> Result<&[usize]> {
    batch
        .labels()
        .ok_or_else(|| Error::Config("classification needs labelled data".into()))
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate(model: &Model, batch: &TimeSeriesBatch, pool: &rayon::ThreadPool) -> Result<f64> {
    check_batch(model, batch)?;
    let ys = labels(batch)?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let preds: Vec<Result<usize>> = pool.install(|| {
        (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let mut g = Graph::new(&model.store);
                let l = model.logits(&mut g, batch.sample(i))?;
                Ok(argmax(g.value(l).row(0)))
            })
            .collect()
    });
    let mut correct = 0;
    for (p, &y) in preds.into_iter().zip(ys) {
        correct += usize::from(p? == y);
    }
    Ok(correct as f64 / batch.len() as f64)
}

/// Supervised training of encoder and head.
pub fn finetune(
    model: &mut Model,
    train: &TimeSeriesBatch,
    cfg: &RunConfig,
    seeds: SeedTree,
    pool: &rayon::ThreadPool,
    mut on_epoch: impl FnMut(&ClassifierEpoch),
) -> Result<Vec<ClassifierEpoch>> {
    check_batch(model, train)?;
    let ys = labels(train)?;
    model.set_trainable(|n| Model::is_encoder_param(n) || Model::is_head_param(n));
    let mut state = OptimizerState::new(&model.store, cfg.optimizer);
    let precision = cfg.train.precision;
    let mut history = Vec::new();
    for epoch in 0..cfg.train.finetune_epochs {
        let order = shuffled(train.len(), seeds.child("finetune"), epoch);
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.train.batch_size) {
            let m: &Model = model;
            let (outs, mut grads) = accumulate(pool, batch, m, |i| {
                let mut g = Graph::new(&m.store).with_precision(precision);
                let logits = m.logits(&mut g, train.sample(i))?;
                let ce = g.cross_entropy(logits, &[ys[i]])?;
                let hit = argmax(g.value(logits).row(0)) == ys[i];
                Ok(((g.value(ce)[(0, 0)], hit), g.backward(ce)?))
            })?;
            for (l, hit) in outs {
                loss += l;
                correct += usize::from(hit);
            }
            grads.scale(1.0 / batch.len() as f64);
            adamw_step(&mut model.store, &grads, &mut state)?;
        }
        let rec = ClassifierEpoch {
            epoch: epoch + 1,
            loss: loss / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Mean-pooled encoder features of every sample, `N × d`.
pub fn pooled_features(model: &Model, batch: &TimeSeriesBatch, pool: &rayon::ThreadPool) -> Result<Mat> {
    check_batch(model, batch)?;
    let rows: Vec<Result<Vec<f64>>> = pool.install(|| {
        (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let mut g = Graph::new(&model.store);
                let p = model.pooled(&mut g, batch.sample(i))?;
                Ok(g.value(p).row(0).to_vec())
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Mat::zeros(0, model.config.d));
    }
    Ok(Mat::from_rows(&rows))
}

/// Trains only the classification head on frozen encoder features.
pub fn probe(
    model: &mut Model,
    train: &TimeSeriesBatch,
    cfg: &RunConfig,
    seeds: SeedTree,
    pool: &rayon::ThreadPool,
    mut on_epoch: impl FnMut(&ClassifierEpoch),
) -> Result<Vec<ClassifierEpoch>> {
    let ys = labels(train)?;
    let feats = pooled_features(model, train, pool)?;
    model.set_trainable(Model::is_head_param);
    let opt = AdamWConfig {
        lr: cfg.train.probe_lr.unwrap_or(cfg.optimizer.lr),
        ..cfg.optimizer
    };
    let mut state = OptimizerState::new(&model.store, opt);
    let mut history = Vec::new();
    for epoch in 0..cfg.train.probe_epochs {
        let order = shuffled(train.len(), seeds.child("probe"), epoch);
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.train.batch_size) {
            let x = feats.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| ys[i]).collect();
            let mut g = Graph::new(&model.store).with_precision(cfg.train.precision);
            let xv = g.constant(x);
            let logits = model.head.linear.forward(&mut g, xv);
            let ce = g.cross_entropy(logits, &y)?;
            loss += g.value(ce)[(0, 0)] * batch.len() as f64;
            let lv = g.value(logits);
            correct += y.iter().enumerate().filter(|&(r, &t)| argmax(lv.row(r)) == t).count();
            let grads = g.backward(ce)?;
            adamw_step(&mut model.store, &grads, &mut state)?;
        }
        let rec = ClassifierEpoch {
            epoch: epoch + 1,
            loss: loss / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Loss weights used when only reconstructions are wanted.
pub fn reconstruction_weights(model: &Model) -> LossWeights {
    if model.cbd.is_some() {
        LossWeights::default()
    } else {
        LossWeights::plain_mtm()
    }
}

/// Lower-case precision name, as accepted on the command line.
pub fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::model::Dims;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            d: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            cbd_blocks: 1,
            heads: 2,
            ff_mult: 2,
            order: 4,
            ..Default::default()
        };
        cfg.train.batch_size = 8;
        cfg.train.epochs = 2;
        cfg.optimizer.lr = 1e-3;
        cfg
    }

    fn data() -> crate::data::Dataset {
        synth_dataset(
            &SynthSpec {
                samples: 24,
                length: 32,
                frequencies: vec![vec![1.0], vec![4.0]],
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    fn model(cfg: &RunConfig) -> Model {
        Model::new(&cfg.model, Dims::new(32, 2, 2, 8).unwrap(), SeedTree::new(cfg.seed)).unwrap()
    }

    fn run(threads: usize) -> Vec<f64> {
        let cfg = small_cfg();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let mut m = model(&cfg);
        let h = pretrain(&mut m, &data().train, &cfg, SeedTree::new(0), &pool, |_| {}).unwrap();
        h.iter().map(|e| e.loss.total).collect()
    }

    #[test]
    fn pretraining_is_bitwise_reproducible_across_worker_counts() {
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn probe_only_moves_the_head() {
        let cfg = small_cfg();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let mut m = model(&cfg);
        let before = m.store.clone();
        probe(&mut m, &data().train, &cfg, SeedTree::new(0), &pool, |_| {}).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(m.store.iter()) {
            if Model::is_head_param(&a.name) {
                assert_ne!(a.value, b.value, "{}", a.name);
            } else {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let cfg = small_cfg();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let mut m = Model::new(&cfg.model, Dims::new(40, 2, 2, 8).unwrap(), SeedTree::new(0)).unwrap();
        assert!(pretrain(&mut m, &data().train, &cfg, SeedTree::new(0), &pool, |_| {}).is_err());
    }
}
