//! Training machinery: combined cross-entropy/overlap loss, DSC and IoU
//! metrics, a decoupled-weight-decay Adam optimizer, cosine learning-rate
//! annealing, and the fold/epoch training loop with JSONL metric logging
//! and best-checkpoint retention.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::checkpoint::save_checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::network::{Model, ModelConfig, ParamSet};
use crate::tensor::Tensor;

/// Weights and constants of the combined loss.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// Cross-entropy term weight.
    pub lambda1: f64,
    /// Overlap (soft Dice) term weight.
    pub lambda2: f64,
    /// Probability clamp bound for the logarithms.
    pub eps: f64,
    /// Smoothing constant added to the overlap numerator and denominator.
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig { lambda1: 1.0, lambda2: 1.0, eps: 1e-7, smooth: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || (self.lambda1 == 0.0 && self.lambda2 == 0.0)
        {
            return Err(Error::Config(format!(
                "loss weights λ1={}, λ2={} must be nonnegative and not both zero",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!("loss eps {} out of (0, 0.5)", self.eps)));
        }
        Ok(())
    }
}

fn check_loss_inputs(logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::Contract(format!(
            "loss: logits shape {:?} vs target shape {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    for (i, &t) in target.data().iter().enumerate() {
        if t != 0.0 && t != 1.0 {
            return Err(Error::Data(format!("loss target value {t} at index {i} is not 0 or 1")));
        }
    }
    Ok(())
}

/// The two loss terms separately: (cross-entropy, soft overlap), both
/// scalar tensors on the tape. Probabilities are σ(logits) clamped to
/// [eps, 1−eps] for both terms.
pub fn bce_dice_parts(
    tape: &mut Tape,
    logits: &Tensor,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    check_loss_inputs(logits, target)?;
    let t = if target.tape_id().is_some() { target.clone() } else { tape.constant(target) };
    let sig = tape.sigmoid(logits);
    let p = tape.clamp(&sig, cfg.eps, 1.0 - cfg.eps);

    let ln_p = tape.ln(&p);
    let neg_p = tape.neg(&p);
    let one_minus_p = tape.add_scalar(&neg_p, 1.0);
    let ln_1mp = tape.ln(&one_minus_p);
    let neg_t = tape.neg(&t);
    let one_minus_t = tape.add_scalar(&neg_t, 1.0);
    let pos = tape.mul(&t, &ln_p);
    let negterm = tape.mul(&one_minus_t, &ln_1mp);
    let s = tape.add(&pos, &negterm);
    let m = tape.mean(&s);
    let bce = tape.neg(&m);

    let pt = tape.mul(&p, &t);
    let inter = tape.sum(&pt);
    let psum = tape.sum(&p);
    let tsum = tape.sum(&t);
    let two_inter = tape.scale(&inter, 2.0);
    let num = tape.add_scalar(&two_inter, cfg.smooth);
    let den_sum = tape.add(&psum, &tsum);
    let den = tape.add_scalar(&den_sum, cfg.smooth);
    let ratio = tape.div(&num, &den);
    let neg_ratio = tape.neg(&ratio);
    let dice = tape.add_scalar(&neg_ratio, 1.0);
    Ok((bce, dice))
}

/// λ1·L_ce + λ2·L_overlap as a scalar tape tensor.
pub fn bce_dice_loss(
    tape: &mut Tape,
    logits: &Tensor,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let (bce, dice) = bce_dice_parts(tape, logits, target, cfg)?;
    let a = tape.scale(&bce, cfg.lambda1);
    let b = tape.scale(&dice, cfg.lambda2);
    Ok(tape.add(&a, &b))
}

/// Threshold used to binarize probability maps for metrics and mask output.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Dice similarity coefficient and intersection-over-union of a probability
/// (or binary) map against a binary target, after binarizing the prediction
/// at `threshold`. A pair of empty masks scores (1.0, 1.0).
pub fn dsc_iou(pred: &Tensor, target: &Tensor, threshold: f64) -> Result<(f64, f64)> {
    if pred.shape() != target.shape() {
        return Err(Error::Contract(format!(
            "dsc_iou: prediction shape {:?} vs target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut inter = 0u64;
    let mut pred_count = 0u64;
    let mut target_count = 0u64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let pb = p >= threshold;
        let tb = t > 0.5;
        inter += (pb && tb) as u64;
        pred_count += pb as u64;
        target_count += tb as u64;
    }
    if pred_count == 0 && target_count == 0 {
        return Ok((1.0, 1.0));
    }
    let union = pred_count + target_count - inter;
    let dsc = 2.0 * inter as f64 / (pred_count + target_count) as f64;
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok((dsc, iou))
}

/// Elementwise σ over a plain logits tensor (no tape participation).
pub fn probabilities(logits: &Tensor) -> Tensor {
    Tensor::from_parts(logits.shape().to_vec(), logits.data().iter().map(|&v| sigmoid(v)).collect())
}

// ---- optimizer ----

/// Adam with decoupled multiplicative weight decay applied before each
/// update, and bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, sizes: &[usize]) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter; `grads` aligns with the registry.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "optimizer: {} params, {} grads", params.len(), grads.len());
        assert_eq!(params.len(), self.m.len(), "optimizer sized for {} params", self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay_factor = 1.0 - self.lr * self.weight_decay;
        for (i, (m, v)) in self.m.iter_mut().zip(self.v.iter_mut()).enumerate() {
            let g = grads[i];
            let w = params.value_mut(i).data_mut();
            assert_eq!(w.len(), g.len(), "param {i}: {} weights vs {} grads", w.len(), g.len());
            for j in 0..w.len() {
                w[j] *= decay_factor;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

// ---- scheduler ----

/// Cosine annealing from `lr_max` at t = 0 to `lr_min` at t = `t_max`.
#[derive(Clone, Copy, Debug)]
pub struct SchedulerState {
    pub lr_max: f64,
    pub lr_min: f64,
    pub t_max: usize,
}

/// lr(t) = lr_min + ½(lr_max − lr_min)(1 + cos(πt/T)); the endpoints are
/// returned exactly.
pub fn cosine_lr(s: &SchedulerState, t: usize) -> Result<f64> {
    if t > s.t_max {
        return Err(Error::Contract(format!("scheduler epoch {t} exceeds T_max {}", s.t_max)));
    }
    if t == 0 {
        return Ok(s.lr_max);
    }
    if t == s.t_max {
        return Ok(s.lr_min);
    }
    let cos = (std::f64::consts::PI * t as f64 / s.t_max as f64).cos();
    Ok(s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + cos))
}

// ---- training loop ----

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub folds: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            lr: 1e-3,
            lr_min: 1e-5,
            weight_decay: 1e-2,
            epochs: 30,
            folds: 1,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.folds == 0 {
            return Err(Error::Config("folds must be ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.lr_min.is_finite() && self.lr_min >= 0.0) {
            return Err(Error::Config(format!(
                "learning rates lr={}, lr_min={} must be finite and ≥ 0",
                self.lr, self.lr_min
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be ≥ 0", self.weight_decay)));
        }
        Ok(())
    }
}

/// One JSONL metrics line; epochs are 1-based in the log.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
    pub val_iou: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_dsc: f64,
    pub best_iou: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub folds: Vec<FoldSummary>,
    pub mean_best_dsc: f64,
    pub mean_best_iou: f64,
}

const SPLIT_STREAM: u64 = 0x53_50_4C_49_54; // distinct stream tag for the split shuffle

fn epoch_stream(seed: u64, fold: usize, epoch: usize) -> u64 {
    seed ^ 0x4550_0000_0000_0000 ^ ((fold as u64) << 32) ^ (epoch as u64 + 1)
}

/// Deterministic fold assignment: a seeded shuffle of sample indices, then
/// either a single 1/5 holdout (folds = 1) or contiguous k-fold chunks.
/// Returns (train, validation) index lists per fold.
pub(crate) fn split_folds(n: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM);
    idx.shuffle(&mut rng);
    if folds == 1 {
        let val_len = (n / 5).max(1);
        if val_len >= n {
            return Err(Error::Config(format!("dataset of {n} samples is too small to hold out")));
        }
        let val = idx[..val_len].to_vec();
        let train = idx[val_len..].to_vec();
        return Ok(vec![(train, val)]);
    }
    if folds > n {
        return Err(Error::Config(format!("{folds} folds over {n} samples leaves empty folds")));
    }
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let lo = f * n / folds;
        let hi = (f + 1) * n / folds;
        let val = idx[lo..hi].to_vec();
        let mut train = Vec::with_capacity(n - val.len());
        train.extend_from_slice(&idx[..lo]);
        train.extend_from_slice(&idx[hi..]);
        out.push((train, val));
    }
    Ok(out)
}

/// Horizontal/vertical flip of a (c,h,w) tensor's spatial axes.
fn flip_chw(t: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    if !horizontal && !vertical {
        return t.clone();
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out[ch * h * w + y * w + x] = src[ch * h * w + sy * w + sx];
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// Mean (DSC, IoU) of the model over the given sample indices, binarized at
/// the standard threshold; summation follows index order.
fn evaluate_indices(model: &Model, samples: &[Sample], idx: &[usize]) -> Result<(f64, f64)> {
    let mut dsc_sum = 0.0;
    let mut iou_sum = 0.0;
    for &i in idx {
        let logits = model.infer(&samples[i].image);
        let p = probabilities(&logits);
        let (d, j) = dsc_iou(&p, &samples[i].mask, BINARIZE_THRESHOLD)?;
        dsc_sum += d;
        iou_sum += j;
    }
    let n = idx.len().max(1) as f64;
    Ok((dsc_sum / n, iou_sum / n))
}

/// Mean (DSC, IoU) over a whole sample list.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    evaluate_indices(model, samples, &idx)
}

struct FoldRun<'a> {
    fold: usize,
    train_idx: &'a [usize],
    val_idx: &'a [usize],
    seed: u64,
    config_text: &'a str,
    checkpoint_path: Option<PathBuf>,
}

/// Trains one fold's model in place; logs one JSONL record per epoch and
/// keeps the best-validation-DSC checkpoint (first epoch wins ties).
fn train_fold(
    model: &mut Model,
    cfg: &TrainConfig,
    samples: &[Sample],
    run: &FoldRun,
    log: &mut dyn Write,
    records: &mut Vec<EpochRecord>,
) -> Result<FoldSummary> {
    let loss_cfg = LossConfig::default();
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, &sizes);
    let sched = SchedulerState { lr_max: cfg.lr, lr_min: cfg.lr_min, t_max: cfg.epochs };
    let mut best: Option<(f64, f64, usize)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(&sched, epoch)?;
        opt.set_lr(lr);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_stream(run.seed, run.fold, epoch));
        let mut order = run.train_idx.to_vec();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mounted = model.mount(&mut tape);
            let mut acc: Option<Tensor> = None;
            for &si in batch {
                let sample = &samples[si];
                let (image, mask) = if cfg.augment {
                    let fh = rng.gen::<bool>();
                    let fv = rng.gen::<bool>();
                    (flip_chw(&sample.image, fh, fv), flip_chw(&sample.mask, fh, fv))
                } else {
                    (sample.image.clone(), sample.mask.clone())
                };
                let tx = tape.constant(&image);
                let logits = model.forward(&mut tape, &mounted, &tx);
                let loss = bce_dice_loss(&mut tape, &logits, &mask, &loss_cfg)?;
                acc = Some(match acc {
                    None => loss,
                    Some(prev) => tape.add(&prev, &loss),
                });
            }
            let total = acc.expect("chunks() yields nonempty batches");
            let mean_loss = tape.scale(&total, 1.0 / batch.len() as f64);
            let loss_value = mean_loss.item();
            if !loss_value.is_finite() {
                return Err(Error::Numerics(format!(
                    "training loss became {loss_value} at fold {} epoch {}",
                    run.fold,
                    epoch + 1
                )));
            }
            loss_sum += loss_value * batch.len() as f64;
            let grads = tape.backward(&mean_loss)?;
            let grad_slices: Vec<&[f64]> = mounted.iter().map(|t| grads.wrt(t)).collect();
            opt.step(model.params_mut(), &grad_slices);
        }

        let train_loss = loss_sum / run.train_idx.len() as f64;
        let (val_dsc, val_iou) = evaluate_indices(model, samples, run.val_idx)?;
        let record = EpochRecord {
            fold: run.fold,
            epoch: epoch + 1,
            train_loss,
            val_dsc,
            val_iou,
            lr,
        };
        let line = serde_json::to_string(&record)
            .expect("metric record serialization cannot fail");
        writeln!(log, "{line}")?;
        records.push(record);

        let improved = best.map_or(true, |(bd, _, _)| val_dsc > bd);
        if improved {
            best = Some((val_dsc, val_iou, epoch + 1));
            if let Some(path) = &run.checkpoint_path {
                save_checkpoint(path, run.config_text, model.params().iter())?;
            }
        }
    }

    let (best_dsc, best_iou, best_epoch) = best.expect("at least one epoch ran");
    Ok(FoldSummary {
        fold: run.fold,
        best_epoch,
        best_dsc,
        best_iou,
        checkpoint: run.checkpoint_path.clone(),
    })
}

/// Full training entry point: validates configs, splits folds
/// deterministically, trains one fresh model per fold, logs JSONL records
/// to `log`, and writes per-fold best checkpoints under `out_dir` (named
/// `best.ckpt` for a single fold, `best_fold{f}.ckpt` otherwise).
/// `config_text` is embedded in each checkpoint.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[Sample],
    seed: u64,
    out_dir: Option<&Path>,
    config_text: &str,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let splits = split_folds(samples.len(), cfg.folds, seed)?;
    let mut records = Vec::new();
    let mut folds = Vec::with_capacity(splits.len());
    for (fold, (train_idx, val_idx)) in splits.iter().enumerate() {
        let mut model = Model::new(model_cfg.clone(), seed.wrapping_add(fold as u64))?;
        let checkpoint_path = out_dir.map(|dir| {
            if cfg.folds == 1 {
                dir.join("best.ckpt")
            } else {
                dir.join(format!("best_fold{fold}.ckpt"))
            }
        });
        let run = FoldRun {
            fold,
            train_idx,
            val_idx,
            seed,
            config_text,
            checkpoint_path,
        };
        let summary = train_fold(&mut model, cfg, samples, &run, log, &mut records)?;
        folds.push(summary);
    }
    let k = folds.len() as f64;
    let mean_best_dsc = folds.iter().map(|f| f.best_dsc).sum::<f64>() / k;
    let mean_best_iou = folds.iter().map(|f| f.best_iou).sum::<f64>() / k;
    Ok(TrainOutcome { records, folds, mean_best_dsc, mean_best_iou })
}
