//! Mini-batch training with masked MSLE summed over output resolutions.

use std::path::Path;

use log::{info, warn};
use plume_tensor::{Adam, AdamConfig, Graph, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::make_batch;
use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{FeatureStats, Patch};
use crate::model::{Forward, Mode, Unet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of cities held out for evaluation.
    pub eval_fraction: f64,
    /// Fraction of training patches held back for checkpoint selection.
    pub val_fraction: f64,
    /// Patches per forward pass; gradients are accumulated up to `batch_size`.
    pub micro_batch: usize,
    /// Stop after this many optimizer steps (0: no limit).
    pub max_steps: u64,
    /// Loss weight per output grid, finest first.
    pub resolution_weights: Vec<f64>,
    /// Scale the forecasting head by the mean training target per pollutant.
    pub scale_outputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            epochs: 20,
            lr: 1e-3,
            seed: 42,
            eval_fraction: 0.2,
            val_fraction: 0.1,
            micro_batch: 1,
            max_steps: 0,
            resolution_weights: vec![1.0; 4],
            scale_outputs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
}

/// Source of patches addressed by index (an archive or an in-memory list).
pub trait PatchSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Patch>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PatchSource for [Patch] {
    fn len(&self) -> usize {
        <[Patch]>::len(self)
    }
    fn get(&self, index: usize) -> Result<Patch> {
        Ok(self[index].clone())
    }
}

impl PatchSource for Vec<Patch> {
    fn len(&self) -> usize {
        <[Patch]>::len(self)
    }
    fn get(&self, index: usize) -> Result<Patch> {
        Ok(self[index].clone())
    }
}

impl PatchSource for crate::features::archive::Archive {
    fn len(&self) -> usize {
        crate::features::archive::Archive::len(self)
    }
    fn get(&self, index: usize) -> Result<Patch> {
        crate::features::archive::Archive::get(self, index)
    }
}

/// Loss of one batch and its parameter gradients (already weighted).
pub struct BatchResult {
    pub loss: f64,
    pub valid_cells: usize,
    pub grads: Option<Vec<Tensor<f32>>>,
    pub batch_stats: Vec<Option<plume_tensor::BatchStats<f32>>>,
}

/// Σ_R w_R · masked_msle(forecast_R, target_R) on one micro-batch.
pub fn batch_loss(
    model: &Unet<f32>,
    patches: &[Patch],
    stats: &FeatureStats,
    weights: &[f64],
    mode: Mode,
) -> Result<BatchResult> {
    let batch = make_batch(patches, stats)?;
    let mut graph = Graph::new();
    let params = model.bind(&mut graph, mode == Mode::Train);
    let mut fw = Forward::new(&mut graph, &params, &model.store, mode);
    let outs = model.forward(&mut fw, &batch.inputs)?;
    let batch_stats = std::mem::take(&mut fw.batch_stats);
    let mut total: Option<Var> = None;
    let mut valid = 0;
    for (k, (&out, target)) in outs.iter().zip(&batch.targets).enumerate() {
        let (l, n) = graph.masked_msle_or_zero(out, target)?;
        valid += n;
        let w = weights.get(k).copied().unwrap_or(1.0) as f32;
        let l = graph.scale(l, w);
        total = Some(match total {
            None => l,
            Some(t) => graph.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("model has no outputs".into()))?;
    let loss = graph.value(total).item() as f64;
    let grads = if mode == Mode::Train && valid > 0 {
        let mut g = graph.backward(total)?;
        Some(
            params
                .iter()
                .zip(&model.store.params)
                .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
                .collect(),
        )
    } else {
        None
    };
    Ok(BatchResult {
        loss,
        valid_cells: valid,
        grads,
        batch_stats,
    })
}

/// Mean valid target per pollutant over all grids of the given patches.
pub fn mean_targets(source: &dyn PatchSource, indices: &[usize]) -> Result<Vec<f64>> {
    let mut sum = [0.0f64; 4];
    let mut n = [0u64; 4];
    for &i in indices {
        let p = source.get(i)?;
        for t in &p.targets {
            for px in t.data().chunks_exact(4) {
                for k in 0..4 {
                    if px[k].is_finite() {
                        sum[k] += px[k] as f64;
                        n[k] += 1;
                    }
                }
            }
        }
    }
    Ok((0..4).map(|k| if n[k] > 0 { (sum[k] / n[k] as f64).max(1e-3) } else { 1.0 }).collect())
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_val_loss: f64,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
}

/// Mean batch loss in inference mode over `indices`, one patch at a time.
pub fn evaluate_loss(
    model: &Unet<f32>,
    source: &dyn PatchSource,
    indices: &[usize],
    stats: &FeatureStats,
    weights: &[f64],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &i in indices {
        let p = source.get(i)?;
        let r = batch_loss(model, std::slice::from_ref(&p), stats, weights, Mode::Infer)?;
        if r.valid_cells > 0 {
            sum += r.loss;
            n += 1;
        }
    }
    Ok(if n > 0 { sum / n as f64 } else { f64::NAN })
}

/// Trains `model` on `train` patches, selecting the checkpoint with the lowest
/// validation loss (evaluated at the end of each epoch).
pub fn train(
    model: &mut Unet<f32>,
    source: &dyn PatchSource,
    train_idx: &[usize],
    val_idx: &[usize],
    stats: &FeatureStats,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    if train_idx.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.micro_batch == 0 {
        return Err(Error::Config("batch_size and micro_batch must be positive".into()));
    }
    if cfg.scale_outputs {
        model.output_scale = mean_targets(source, train_idx)?;
        info!("output scale per pollutant: {:?}", model.output_scale);
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let names = model.store.names();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_idx.to_vec();
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last_train = f64::NAN;
    let mut last_val = f64::NAN;
    let mut emit = |row: LogRow, log: &mut Vec<LogRow>| {
        on_log(&row);
        log.push(row);
    };

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len() as f64;
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            let mut loss = 0.0;
            let mut valid = 0;
            for micro in batch.chunks(cfg.micro_batch) {
                let patches = micro.iter().map(|&i| source.get(i)).collect::<Result<Vec<_>>>()?;
                let r = batch_loss(model, &patches, stats, &cfg.resolution_weights, Mode::Train)?;
                if !r.loss.is_finite() {
                    return Err(Error::Divergence(format!("non-finite loss at step {step}")));
                }
                let w = micro.len() as f64 / b;
                loss += w * r.loss;
                valid += r.valid_cells;
                model.update_running(&r.batch_stats);
                if let Some(g) = r.grads {
                    let wf = w as f32;
                    match acc.as_mut() {
                        None => acc = Some(g.into_iter().map(|t| t.map(|v| v * wf)).collect()),
                        Some(a) => {
                            for (a, g) in a.iter_mut().zip(g) {
                                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                    *x += wf * y;
                                }
                            }
                        }
                    }
                }
            }
            let Some(grads) = acc.filter(|_| valid > 0) else {
                warn!("epoch {epoch}: batch without valid target cells skipped");
                continue;
            };
            let mut values: Vec<Tensor<f32>> = model
                .store
                .params
                .iter_mut()
                .map(|p| std::mem::replace(&mut p.value, Tensor::zeros(&[0])))
                .collect();
            let res = adam.step(&mut values, &grads, &names);
            for (p, v) in model.store.params.iter_mut().zip(values) {
                p.value = v;
            }
            match res {
                Ok(()) => {}
                Err(TensorError::NonFiniteGradient(name)) => {
                    return Err(Error::Divergence(format!("non-finite gradient in {name} at step {step}")))
                }
                Err(e) => return Err(e.into()),
            }
            step += 1;
            epoch_sum += loss;
            epoch_batches += 1;
            last_train = loss;
            emit(
                LogRow {
                    step,
                    epoch,
                    split: "train".into(),
                    loss,
                },
                &mut log,
            );
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                last_val = validate(model, source, val_idx, stats, cfg, step, epoch, &mut best, &mut emit, &mut log)?;
                break 'epochs;
            }
        }
        if epoch_batches > 0 {
            info!("epoch {epoch}: mean train loss {:.5}", epoch_sum / epoch_batches as f64);
        }
        last_val = validate(model, source, val_idx, stats, cfg, step, epoch, &mut best, &mut emit, &mut log)?;
    }
    let epoch = log.last().map_or(0, |r| r.epoch);
    let last = Checkpoint::from_model(model, stats, step, epoch);
    let (best_val_loss, best) = best.unwrap_or((f64::NAN, last.clone()));
    Ok(TrainOutcome {
        best,
        best_val_loss,
        last,
        log,
        final_train_loss: last_train,
        final_val_loss: last_val,
    })
}

#[allow(clippy::too_many_arguments)]
fn validate(
    model: &Unet<f32>,
    source: &dyn PatchSource,
    val_idx: &[usize],
    stats: &FeatureStats,
    cfg: &TrainConfig,
    step: u64,
    epoch: usize,
    best: &mut Option<(f64, Checkpoint)>,
    emit: &mut impl FnMut(LogRow, &mut Vec<LogRow>),
    log: &mut Vec<LogRow>,
) -> Result<f64> {
    if val_idx.is_empty() {
        *best = Some((f64::NAN, Checkpoint::from_model(model, stats, step, epoch)));
        return Ok(f64::NAN);
    }
    let v = evaluate_loss(model, source, val_idx, stats, &cfg.resolution_weights)?;
    emit(
        LogRow {
            step,
            epoch,
            split: "val".into(),
            loss: v,
        },
        log,
    );
    info!("epoch {epoch} step {step}: validation loss {v:.5}");
    let better = match best {
        None => true,
        Some((b, _)) => v < *b || (b.is_nan() && !v.is_nan()),
    };
    if better {
        *best = Some((v, Checkpoint::from_model(model, stats, step, epoch)));
    }
    Ok(v)
}

pub fn write_train_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Splits indices into (fit, validation) with a seeded shuffle.
pub fn carve_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = if n >= 2 { ((fraction * n as f64).round() as usize).min(n - 1) } else { 0 };
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let mut val = idx.split_off(n - k);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}
