//! Adam training on mean squared error with best-validation checkpointing.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Hyper, Normalization, SurrogateError, SurrogateModel, N_FEATURES};

/// Samples per gradient work unit; fixed so results do not depend on the
/// number of threads.
const CHUNK: usize = 16;

/// One scenario: a feature row and a target per bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<[f64; N_FEATURES]>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub grad_clip: Option<f64>,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub hyper: Hyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            epochs: 200,
            seed: 0,
            validation_fraction: 0.1,
            grad_clip: None,
            patience: None,
            hyper: Hyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::Config(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean global gradient norm over the epoch's steps.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,grad_norm\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.grad_norm);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub mae_kw: f64,
    pub rmse_kw: f64,
    pub r2: f64,
    /// Standard deviation of the per-bus targets (kW).
    pub target_std_kw: f64,
    pub n_tokens: usize,
}

impl Metrics {
    pub fn mae_mw(&self) -> f64 {
        self.mae_kw / 1000.0
    }

    pub fn rmse_mw(&self) -> f64 {
        self.rmse_kw / 1000.0
    }
}

fn token_count(samples: &[Sample]) -> Result<usize, SurrogateError> {
    let n = samples.first().ok_or(SurrogateError::EmptyDataset)?.features.len();
    for s in samples {
        if s.features.len() != n || s.target.len() != n {
            return Err(SurrogateError::Shape("samples differ in token count".into()));
        }
        if s.target.iter().any(|t| !t.is_finite()) || s.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SurrogateError::Config("non-finite feature or target".into()));
        }
    }
    Ok(n)
}

fn fit_normalization(samples: &[Sample], idx: &[usize]) -> Normalization {
    let mut sum = [0.0; N_FEATURES + 1];
    let mut sq = [0.0; N_FEATURES + 1];
    let mut count = 0.0;
    for &i in idx {
        let s = &samples[i];
        for (row, y) in s.features.iter().zip(&s.target) {
            for j in 0..N_FEATURES {
                sum[j] += row[j];
                sq[j] += row[j] * row[j];
            }
            sum[N_FEATURES] += y;
            sq[N_FEATURES] += y * y;
            count += 1.0;
        }
    }
    let stat = |j: usize| {
        let mean = sum[j] / count;
        let var = (sq[j] / count - mean * mean).max(0.0);
        let std = var.sqrt();
        (mean, if std > 1e-12 * (1.0 + mean.abs()) { std } else { 1.0 })
    };
    let mut norm = Normalization::default();
    for j in 0..N_FEATURES {
        (norm.x_mean[j], norm.x_std[j]) = stat(j);
    }
    (norm.y_mean, norm.y_std) = stat(N_FEATURES);
    norm
}

fn gather(samples: &[Sample], idx: &[usize], norm: &Normalization) -> (Vec<f64>, Vec<f64>) {
    let raw = idx
        .iter()
        .flat_map(|&i| samples[i].features.iter().flatten().copied())
        .collect();
    let targets = idx
        .iter()
        .flat_map(|&i| samples[i].target.iter().map(|y| (y - norm.y_mean) / norm.y_std))
        .collect();
    (raw, targets)
}

/// Summed gradient and loss over `idx`, scaled to the mean over its tokens.
fn batch_gradient(
    model: &SurrogateModel,
    samples: &[Sample],
    idx: &[usize],
    n: usize,
) -> Result<(f64, Vec<f64>), SurrogateError> {
    let total_tokens = (idx.len() * n) as f64;
    let parts: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(CHUNK)
        .map(|c| {
            let (raw, targets) = gather(samples, c, &model.norm);
            let mut g = vec![0.0; model.params.len()];
            let loss = model.loss_and_grad(&raw, &targets, n, &mut g)?;
            let w = (c.len() * n) as f64 / total_tokens;
            g.iter_mut().for_each(|v| *v *= w);
            Ok((loss * w, g))
        })
        .collect::<Result<_, SurrogateError>>()?;
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Mean squared error in normalized units.
fn mean_loss(model: &SurrogateModel, samples: &[Sample], idx: &[usize], n: usize) -> Result<f64, SurrogateError> {
    let parts: Vec<f64> = idx
        .par_chunks(CHUNK)
        .map(|c| {
            let (raw, targets) = gather(samples, c, &model.norm);
            let cache = model.forward_cached(&raw, n)?;
            Ok(cache.y.iter().zip(&targets).map(|(y, t)| (y - t) * (y - t)).sum::<f64>())
        })
        .collect::<Result<_, SurrogateError>>()?;
    Ok(parts.iter().sum::<f64>() / (idx.len() * n) as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

pub fn train(samples: &[Sample], config: &TrainConfig) -> Result<(SurrogateModel, History), SurrogateError> {
    config.validate()?;
    let n = token_count(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64) * config.validation_fraction).round() as usize;
    let n_val = n_val.min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx: Vec<usize> = if val_idx.is_empty() { train_idx.clone() } else { val_idx.to_vec() };

    let mut model = SurrogateModel::new(config.hyper, config.seed)?;
    // start from the target mean
    model.set_head(&vec![0.0; config.hyper.d_model], 0.0)?;
    model.set_normalization(fit_normalization(samples, &train_idx))?;
    let mut adam = Adam {
        m: vec![0.0; model.params.len()],
        v: vec![0.0; model.params.len()],
        t: 0,
    };

    let mut history = History::default();
    let mut best = (f64::INFINITY, model.params.clone());
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch in train_idx.chunks(config.batch_size) {
            let (loss, mut grad) = batch_gradient(&model, samples, batch, n)?;
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !loss.is_finite() || !gnorm.is_finite() {
                return Err(SurrogateError::Divergence { epoch });
            }
            if let Some(clip) = config.grad_clip {
                if gnorm > clip {
                    grad.iter_mut().for_each(|g| *g *= clip / gnorm);
                }
            }
            adam.step(&mut model.params, &grad, config);
            loss_sum += loss * batch.len() as f64;
            norm_sum += gnorm;
            steps += 1;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let val_loss = match mean_loss(&model, samples, &val_idx, n) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(SurrogateError::NonFinite { .. }) => return Err(SurrogateError::Divergence { epoch }),
            Err(e) => return Err(e),
        };
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            grad_norm: norm_sum / steps as f64,
        });
        log::debug!("epoch {epoch}: train {train_loss:.3e} val {val_loss:.3e}");
        if val_loss < best.0 {
            best = (val_loss, model.params.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, history))
}

/// Error statistics of the model on a dataset, in physical units.
pub fn evaluate(model: &SurrogateModel, samples: &[Sample]) -> Result<Metrics, SurrogateError> {
    let n = token_count(samples)?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let preds: Vec<Vec<f64>> = idx
        .par_chunks(CHUNK)
        .map(|c| {
            let refs: Vec<&[[f64; N_FEATURES]]> = c.iter().map(|&i| samples[i].features.as_slice()).collect();
            model.forward_batch(&refs)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let (mut abs, mut sq, mut sum, mut sumsq) = (0.0, 0.0, 0.0, 0.0);
    let mut count = 0usize;
    for (s, p) in samples.iter().zip(&preds) {
        for (y, yh) in s.target.iter().zip(p) {
            let e = yh - y;
            abs += e.abs();
            sq += e * e;
            sum += y;
            sumsq += y * y;
            count += 1;
        }
    }
    debug_assert_eq!(count, samples.len() * n);
    let c = count as f64;
    let var = (sumsq / c - (sum / c).powi(2)).max(0.0);
    let r2 = if var > 0.0 { 1.0 - (sq / c) / var } else if sq == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    Ok(Metrics {
        mae_kw: abs / c,
        rmse_kw: (sq / c).sqrt(),
        r2,
        target_std_kw: var.sqrt(),
        n_tokens: count,
    })
}
