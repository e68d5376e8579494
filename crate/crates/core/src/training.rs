//! Mini-batch training: MAE on the predicted column plus a λ-weighted
//! binary cross-entropy on the gate logits against the occupancy indicator,
//! Adam updates with global-norm gradient clipping, seeded shuffling,
//! patience-based early stopping, and a best-validation checkpoint.
//!
//! Teacher forcing throughout: training windows hold ground truth; free
//! running happens only in evaluation rollouts.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, TapeModel};
use crate::seed;
use crate::table;

fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    128
}
fn default_patience() -> usize {
    10
}
fn default_max_epochs() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// epochs without validation improvement before stopping
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// gate-loss weight; falls back to the model config's λ
    #[serde(default)]
    pub lambda: Option<f64>,
    /// train the ablation variant that never reads the assignment branch
    #[serde(default)]
    pub flow_only: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        if self.patience < 1 {
            return Err(Error::validation("patience must be >= 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::validation("max_epochs must be >= 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::validation("learning rate must be >= 0"));
        }
        if let Some(l) = self.lambda {
            if l < 0.0 {
                return Err(Error::validation("lambda must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

pub const REPORT_HEADER: &str = "epoch,train_loss,val_mae,seconds";

pub fn write_report(report: &TrainReport, path: &Path) -> Result<()> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for e in &report.epochs {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_mae, e.seconds));
    }
    table::write_string(path, &out)
}

/// Loss and parameter gradients for one sample on a fresh tape.
fn sample_pass(
    cfg: &ModelConfig,
    params: &ModelParams,
    a_tilde: &Array2<f64>,
    sample: &Sample,
    lambda: f64,
    flow_only: bool,
    want_grads: bool,
) -> Result<(f64, Option<Vec<Array2<f64>>>)> {
    let mut tape = Tape::new();
    let tm = TapeModel::new(&mut tape, cfg, params, a_tilde, flow_only)?;
    let out = tm.predict_step(&mut tape, &sample.q_window, &sample.a_window)?;
    let target = Array2::from_shape_vec((cfg.s, 1), sample.target.clone())
        .map_err(|e| Error::shape("sample_pass", e.to_string()))?;
    let tgt = tape.leaf(target.clone());
    let mae = tape.mae(out.q_hat, tgt)?;
    let loss = if lambda > 0.0 {
        // BCE-with-logits composed as mean(softplus(z) − y⊙z)
        let indicator = target.mapv(|v| f64::from(v > 0.0));
        let y = tape.leaf(indicator);
        let sp = tape.softplus(out.gate_logits);
        let yz = tape.mul(y, out.gate_logits)?;
        let diff = tape.sub(sp, yz)?;
        let bce = tape.mean_all(diff);
        let weighted = tape.scale(bce, lambda);
        tape.add(mae, weighted)?
    } else {
        mae
    };
    let loss_value = tape.value(loss)[[0, 0]];
    if !want_grads {
        return Ok((loss_value, None));
    }
    let grads = tape.backward(loss)?;
    let collected = tm
        .param_vars()
        .iter()
        .zip(params.shapes())
        .map(|(&v, shape)| grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape)))
        .collect();
    Ok((loss_value, Some(collected)))
}

/// Mean loss and mean gradients over a batch.
pub fn batch_pass(
    cfg: &ModelConfig,
    params: &ModelParams,
    a_tilde: &Array2<f64>,
    batch: &[Sample],
    lambda: f64,
    flow_only: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut loss_sum = 0.0;
    let mut grad_sum: Vec<Array2<f64>> =
        params.shapes().into_iter().map(Array2::zeros).collect();
    for sample in batch {
        let (loss, grads) = sample_pass(cfg, params, a_tilde, sample, lambda, flow_only, true)?;
        loss_sum += loss;
        for (acc, g) in grad_sum.iter_mut().zip(grads.expect("requested")) {
            *acc += &g;
        }
    }
    let n = batch.len() as f64;
    for g in &mut grad_sum {
        g.mapv_inplace(|v| v / n);
    }
    Ok((loss_sum / n, grad_sum))
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
    norm
}

pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Mean absolute error and RMSE over pointwise prediction/target pairs.
pub fn pointwise_metrics(pairs: impl IntoIterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0u64);
    for (pred, target) in pairs {
        let e = pred - target;
        abs += e.abs();
        sq += e * e;
        n += 1;
    }
    let n = n.max(1) as f64;
    (abs / n, (sq / n).sqrt())
}

/// One-step-ahead (teacher-forced) MAE and RMSE over a split.
pub fn evaluate_split(
    model: &Model,
    dataset: &Dataset,
    kind: SplitKind,
    a_tilde: &Array2<f64>,
) -> Result<(f64, f64)> {
    let ids = match kind {
        SplitKind::Train => &dataset.split.train,
        SplitKind::Val => &dataset.split.val,
        SplitKind::Test => &dataset.split.test,
    };
    let samples = dataset.samples_for(ids)?;
    if samples.is_empty() {
        return Err(Error::validation(format!("{kind:?} split has no samples")));
    }
    // parallel map, sequential reduce: the fold order stays deterministic
    let partials: Vec<Result<(f64, f64, u64)>> = samples
        .par_iter()
        .map(|sample| {
            let pred = model.predict_values(&sample.q_window, &sample.a_window, a_tilde)?;
            let (mut abs, mut sq) = (0.0, 0.0);
            for (s, &t) in sample.target.iter().enumerate() {
                let e = pred[[s, 0]] - t;
                abs += e.abs();
                sq += e * e;
            }
            Ok((abs, sq, sample.target.len() as u64))
        })
        .collect();
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0u64);
    for p in partials {
        let (a, s, c) = p?;
        abs += a;
        sq += s;
        n += c;
    }
    let mae = abs / n as f64;
    let rmse = (sq / n as f64).sqrt();
    assert!(rmse >= mae - 1e-12, "power-mean inequality violated: {rmse} < {mae}");
    Ok((mae, rmse))
}

/// Train on the train split, early-stop on validation MAE, persist the
/// best checkpoint and `report.csv` into `out_dir`.
pub fn train(
    dataset: &Dataset,
    a_tilde: &Array2<f64>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(Model, TrainReport)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if dataset.spec.s != model_cfg.s
        || dataset.spec.w_q != model_cfg.w_q
        || dataset.spec.w_a != model_cfg.w_a
    {
        return Err(Error::validation(format!(
            "dataset windows (S={}, W_Q={}, W_A={}) do not match model config (S={}, W_Q={}, W_A={})",
            dataset.spec.s, dataset.spec.w_q, dataset.spec.w_a,
            model_cfg.s, model_cfg.w_q, model_cfg.w_a
        )));
    }
    let train_samples = dataset.samples_for(&dataset.split.train)?;
    if train_samples.is_empty() {
        return Err(Error::validation("train split has no samples"));
    }
    if dataset.samples_for(&dataset.split.val)?.is_empty() {
        return Err(Error::validation("validation split has no samples"));
    }
    let lambda = train_cfg.lambda.unwrap_or(model_cfg.lambda);

    let mut model = Model::init(model_cfg.clone(), seed::derive(train_cfg.seed, "init", 0))?;
    if train_cfg.flow_only {
        model = model.flow_only_variant();
    }
    let mut adam = AdamState::new(train_cfg.lr, &model.params.shapes());

    let mut epochs: Vec<EpochStats> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.params.clone();
    let mut stall = 0usize;

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 1..=train_cfg.max_epochs {
        let t0 = Instant::now();
        let mut rng = seed::rng(seed::derive(train_cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_weighted = 0.0;
        let mut grad_bearing = 0usize;
        for (batch_idx, chunk) in order.chunks(train_cfg.batch).enumerate() {
            let batch: Vec<Sample> =
                chunk.iter().map(|&i| train_samples[i].clone()).collect();
            let (loss, mut grads) =
                batch_pass(&model.cfg, &model.params, a_tilde, &batch, lambda, model.flow_only)?;
            if !loss.is_finite() {
                return Err(Error::runtime(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {batch_idx}; \
                     parameter norm {:.6e}",
                    model.params.norm()
                )));
            }
            grad_bearing += batch.len();
            clip_gradients(&mut grads, GRAD_CLIP_NORM);
            let mut values = model.params.values_mut();
            adam.step_views(&mut values, &grads)?;
            loss_weighted += loss * batch.len() as f64;
        }
        // the val split never contributes gradients
        assert_eq!(grad_bearing, train_samples.len());

        let train_loss = loss_weighted / train_samples.len() as f64;
        let (val_mae, _) = evaluate_split(&model, dataset, SplitKind::Val, a_tilde)?;
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_mae,
            seconds: t0.elapsed().as_secs_f64(),
        });

        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best_params = model.params.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= train_cfg.patience {
                break;
            }
        }
    }

    model.params = best_params;
    model.save(out_dir)?;
    let report = TrainReport { epochs, best_epoch };
    debug_assert!(report
        .epochs
        .iter()
        .all(|e| e.val_mae >= best_val || e.epoch == best_epoch));
    write_report(&report, &out_dir.join("report.csv"))?;
    Ok((model, report))
}
