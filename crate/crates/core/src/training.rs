//! Augmentation, sampling, optimizer and the deterministic training loop.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalBatch, EvalReport};
use crate::model::Atgnn;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One model input `[bins × frames]` with its (possibly soft) targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub image: Tensor<T>,
    pub targets: Vec<T>,
}

/// Convex combination `λ·a + (1−λ)·b` of images and targets.
pub fn mixup<T: Scalar>(a: &Example<T>, b: &Example<T>, lambda: T) -> Result<Example<T>> {
    if a.image.shape() != b.image.shape() || a.targets.len() != b.targets.len() {
        return Err(Error::Dimension {
            op: "mixup",
            left: a.image.shape(),
            right: b.image.shape(),
        });
    }
    let mu = T::one() - lambda;
    Ok(Example {
        image: a.image.zip_map(&b.image, |x, y| lambda * x + mu * y),
        targets: a.targets.iter().zip(&b.targets).map(|(&x, &y)| lambda * x + mu * y).collect(),
    })
}

/// With probability `ratio` mixes `a` with `b` at `λ ~ Beta(α, α)`;
/// otherwise returns `a` unchanged.
pub fn mixup_draw<T: Scalar, R: Rng>(
    a: &Example<T>,
    b: &Example<T>,
    ratio: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<Example<T>> {
    if rng.random::<f64>() >= ratio {
        if a.image.shape() != b.image.shape() {
            return Err(Error::Dimension {
                op: "mixup",
                left: a.image.shape(),
                right: b.image.shape(),
            });
        }
        return Ok(a.clone());
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Domain(e.to_string()))?;
    mixup(a, b, T::of(beta.sample(rng)))
}

/// Band of `width` rows (frequency) or columns (time) starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBand {
    pub start: usize,
    pub width: usize,
}

/// Overwrites one frequency band and one time band of `image` with its mean.
pub fn apply_masks<T: Scalar>(image: &Tensor<T>, freq: MaskBand, time: MaskBand) -> Tensor<T> {
    let mean = image.sum() / T::of(image.len().max(1) as f64);
    let mut out = image.clone();
    let (rows, cols) = image.shape();
    for r in 0..rows {
        let in_f = r >= freq.start && r < freq.start + freq.width;
        for c in 0..cols {
            if in_f || (c >= time.start && c < time.start + time.width) {
                out.set(r, c, mean);
            }
        }
    }
    out
}

/// Draws widths from `Uniform{0..=max}` and uniform positions, then masks.
pub fn time_freq_mask<T: Scalar, R: Rng>(image: &Tensor<T>, max_t: usize, max_f: usize, rng: &mut R) -> Tensor<T> {
    let (bins, frames) = image.shape();
    let mut band = |max: usize, len: usize| {
        let width = rng.random_range(0..=max.min(len));
        let start = rng.random_range(0..=len - width);
        MaskBand { start, width }
    };
    let time = band(max_t, frames);
    let freq = band(max_f, bins);
    apply_masks(image, freq, time)
}

/// Per-clip weight `max_{c ∈ clip} 1/f_c`, `f_c` the number of clips with class `c`.
pub fn balanced_weights<T: Scalar>(labels: &[Vec<T>]) -> Result<Vec<f64>> {
    let s = labels.first().map_or(0, Vec::len);
    let mut freq = vec![0usize; s];
    for (i, y) in labels.iter().enumerate() {
        if y.len() != s {
            return Err(Error::Shape(format!("clip {i} has {} targets, expected {s}", y.len())));
        }
        for (c, &v) in y.iter().enumerate() {
            if v > T::zero() {
                freq[c] += 1;
            }
        }
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, y)| {
            y.iter()
                .enumerate()
                .filter(|(_, &v)| v > T::zero())
                .map(|(c, _)| 1.0 / freq[c] as f64)
                .reduce(f64::max)
                .ok_or_else(|| Error::Data(format!("clip {i} has no labels")))
        })
        .collect()
}

/// `−(1/S)·Σ [t·ln p + (1−t)·ln(1−p)]` on probabilities.
pub fn bce_loss<T: Scalar>(probs: &[T], targets: &[T]) -> Result<T> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} probabilities for {} targets", probs.len(), targets.len())));
    }
    let mut total = T::zero();
    for (&p, &t) in probs.iter().zip(targets) {
        total -= t * p.ln() + (T::one() - t) * (T::one() - p).ln();
    }
    let loss = total / T::of(probs.len() as f64);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite loss {loss}")))
    }
}

/// Learning rate for optimizer step `step` (1-based) taken during epoch
/// `epoch` (0-based): linear warm-up times `0.5^h`, `h` the number of halving
/// points `start + every·i` (i ≥ 1) not after `epoch`.
pub fn lr_at(step: u64, epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = if cfg.warmup_iters == 0 {
        1.0
    } else {
        (step as f64 / cfg.warmup_iters as f64).min(1.0)
    };
    let halvings = if cfg.decay_every == 0 || epoch <= cfg.decay_start_epoch {
        0
    } else {
        (epoch - cfg.decay_start_epoch) / cfg.decay_every
    };
    cfg.lr0 * warm * 0.5f64.powi(halvings as i32)
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::one() - T::of(cfg.beta1.powi(self.step as i32));
        let c2 = T::one() - T::of(cfg.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(lr), T::of(cfg.adam_eps));
        if params.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        for ((key, p), ((mk, m), (_, v))) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = grads
                .get(key)
                .ok_or_else(|| Error::Data(format!("no gradient for `{key}`")))?;
            if mk != key || g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::Shape(format!("optimizer state for `{key}` does not match")));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Model, optimizer and progress; everything resume needs.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Atgnn<T>,
    pub adam: AdamState<T>,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Atgnn<T>) -> Self {
        let adam = AdamState::new(model.params());
        TrainState { model, adam, epoch: 0 }
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(rename = "val_mAP")]
    pub val_map: Option<f64>,
}

/// Generator for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Sample indices drawn for one epoch.
pub fn epoch_indices<T: Scalar, R: Rng>(data: &[Example<T>], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<usize>> {
    let n = data.len();
    let draws = if cfg.samples_per_epoch == 0 { n } else { cfg.samples_per_epoch };
    if cfg.balanced_sampling {
        let labels: Vec<Vec<T>> = data.iter().map(|e| e.targets.clone()).collect();
        let dist = WeightedIndex::new(balanced_weights(&labels)?).map_err(|e| Error::Data(e.to_string()))?;
        Ok((0..draws).map(|_| dist.sample(rng)).collect())
    } else {
        let mut out = Vec::with_capacity(draws);
        while out.len() < draws {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            out.extend(perm.into_iter().take(draws - out.len()));
        }
        Ok(out)
    }
}

/// Runs one epoch: weighted sampling, augmentation, parallel per-sample
/// gradients reduced in index order, then an Adam step per batch.
pub fn train_epoch<T: Scalar>(state: &mut TrainState<T>, data: &[Example<T>], cfg: &TrainConfig) -> Result<EpochLog> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let epoch = state.epoch;
    let mut rng = epoch_rng(cfg.seed, epoch);
    let indices = epoch_indices(data, cfg, &mut rng)?;
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let mut lr = 0.0;
    for batch in indices.chunks(cfg.batch_size) {
        let inputs = batch
            .iter()
            .map(|&i| {
                if !cfg.augment {
                    return Ok(data[i].clone());
                }
                let partner = rng.random_range(0..data.len());
                let mut ex = mixup_draw(&data[i], &data[partner], cfg.mixup_ratio, cfg.mixup_alpha, &mut rng)?;
                ex.image = time_freq_mask(&ex.image, cfg.max_time_mask, cfg.max_freq_mask, &mut rng);
                Ok(ex)
            })
            .collect::<Result<Vec<_>>>()?;
        let model = &state.model;
        let results = inputs
            .par_iter()
            .map(|ex| model.loss_and_grads(&ex.image, &ex.targets))
            .collect::<Vec<_>>();
        let mut grads = state.model.params().zeros_like();
        let mut batch_loss = 0.0;
        for (k, r) in results.into_iter().enumerate() {
            let (loss, g) = r.map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "epoch {epoch}, step {}, sample {}: {m}",
                    state.adam.step + 1,
                    batch[k]
                )),
                other => other,
            })?;
            grads.add_assign(&g)?;
            batch_loss += loss.to_f64_lossy();
        }
        grads.scale(T::one() / T::of(batch.len() as f64));
        lr = lr_at(state.adam.step + 1, epoch, cfg);
        let params = state.model.params_mut();
        state.adam.update(params, &grads, lr, cfg)?;
        if !params.iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite parameters after step {}",
                state.adam.step
            )));
        }
        loss_sum += batch_loss / batch.len() as f64;
        batches += 1;
    }
    state.epoch += 1;
    Ok(EpochLog {
        epoch,
        step: state.adam.step,
        lr,
        loss: loss_sum / batches as f64,
        val_map: None,
    })
}

/// Scores every example and computes the eval report.
pub fn evaluate_model<T: Scalar>(model: &Atgnn<T>, data: &[Example<T>]) -> Result<EvalReport> {
    let scores = data
        .par_iter()
        .map(|ex| model.predict(&ex.image))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<T>> = data.iter().map(|e| e.targets.clone()).collect();
    evaluate(&EvalBatch::from_rows(&scores, &targets)?)
}

/// Mean BCE over `data` without augmentation.
pub fn dataset_loss<T: Scalar>(model: &Atgnn<T>, data: &[Example<T>]) -> Result<f64> {
    let losses = data
        .par_iter()
        .map(|ex| {
            let z = model.logits(&ex.image)?;
            stable_bce(&z, &ex.targets)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn stable_bce<T: Scalar>(logits: &[T], targets: &[T]) -> Result<f64> {
    let mut total = 0.0;
    for (&z, &t) in logits.iter().zip(targets) {
        let (z, t) = (z.to_f64_lossy(), t.to_f64_lossy());
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    let loss = total / logits.len() as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite loss {loss}")))
    }
}

/// Mean and standard deviation over every cell of every image.
pub fn input_stats<T: Scalar>(data: &[Example<T>]) -> Result<(f64, f64)> {
    let n: usize = data.iter().map(|e| e.image.len()).sum();
    if n == 0 {
        return Err(Error::Data("no input cells".into()));
    }
    let mean = data
        .iter()
        .flat_map(|e| e.image.data())
        .map(|v| v.to_f64_lossy())
        .sum::<f64>()
        / n as f64;
    let var = data
        .iter()
        .flat_map(|e| e.image.data())
        .map(|v| (v.to_f64_lossy() - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok((mean, var.sqrt().max(1e-8)))
}

/// Trains until `state.epoch == cfg.epochs`, evaluating on `val` after each
/// epoch and handing every log line to `on_epoch`.
pub fn fit<T: Scalar>(
    state: &mut TrainState<T>,
    train: &[Example<T>],
    val: Option<&[Example<T>]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    while state.epoch < cfg.epochs {
        let mut log = train_epoch(state, train, cfg)?;
        if let Some(v) = val.filter(|v| !v.is_empty()) {
            log.val_map = evaluate_model(&state.model, v).ok().map(|r| r.map);
        }
        log::info!(
            "epoch {} step {} lr {:.3e} loss {:.5} val mAP {:?}",
            log.epoch,
            log.step,
            log.lr,
            log.loss,
            log.val_map
        );
        on_epoch(&log, state)?;
    }
    Ok(())
}
