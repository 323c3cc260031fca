use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Network, NetworkSpec, PlateauScheduler};
use crate::cube::{Hypercube, OxygenationMap};
use crate::dataset::{augment_noise, balanced_batches, epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed2, rng_from_seed, streams};
use crate::scalar::Scalar;
use crate::spectral::band_area;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Weight of the adversarial term in the generator loss.
    pub adversarial_weight: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub scheduler_threshold: f64,
    /// Per-epoch training noise; `None` disables augmentation.
    pub noise_snr_db: Option<f64>,
    pub adam: AdamConfig,
    /// Keeps the discriminator at its initial parameters.
    pub freeze_discriminator: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_generator: 1e-3,
            lr_discriminator: 1e-6,
            adversarial_weight: 0.25,
            weight_decay: 1e-6,
            batch: 512,
            epochs: 100,
            scheduler_factor: 0.1,
            scheduler_patience: 10,
            scheduler_threshold: 0.01,
            noise_snr_db: Some(40.0),
            adam: AdamConfig::default(),
            freeze_discriminator: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("scheduler_factor", self.scheduler_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{name} must be > 0")));
            }
        }
        if !(self.adversarial_weight >= 0.0) || !(self.weight_decay >= 0.0) || !(self.scheduler_threshold >= 0.0) {
            return Err(Error::config("train.adversarial_weight, weight_decay and scheduler_threshold must be >= 0"));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("train.epochs and train.batch must be >= 1"));
        }
        if self.scheduler_patience == 0 {
            return Err(Error::config("train.scheduler_patience must be >= 1"));
        }
        Ok(())
    }
}

/// Losses and rates of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub train_loss: f64,
    /// Regression MSE on the validation set.
    pub val_loss: f64,
    pub lr: f64,
    pub discriminator_lr: Option<f64>,
    pub discriminator_accuracy: Option<f64>,
    /// Adversarial training only: batch means of the regression,
    /// adversarial and discriminator terms.
    pub regression_loss: Option<f64>,
    pub adversarial_loss: Option<f64>,
    pub discriminator_loss: Option<f64>,
}

impl EpochRecord {
    /// `key=value` pairs separated by spaces.
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "epoch={} train_loss={:e} val_loss={:e} lr={:e}",
            self.epoch, self.train_loss, self.val_loss, self.lr
        );
        let opt = [
            ("disc_lr", self.discriminator_lr),
            ("disc_accuracy", self.discriminator_accuracy),
            ("regression_loss", self.regression_loss),
            ("adversarial_loss", self.adversarial_loss),
            ("disc_loss", self.discriminator_loss),
        ];
        for (k, v) in opt {
            if let Some(v) = v {
                s.push_str(&format!(" {k}={v:e}"));
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn train_loss(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    pub fn val_loss(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_loss).collect()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min)
    }
}

pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> f64 {
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2)).sum();
    s / pred.len() as f64
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, computed stably.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean of true-negative and true-positive rates.
pub fn balanced_accuracy(sim_logits: &[f64], real_logits: &[f64]) -> f64 {
    let tnr = sim_logits.iter().filter(|&&z| z < 0.0).count() as f64 / sim_logits.len() as f64;
    let tpr = real_logits.iter().filter(|&&z| z >= 0.0).count() as f64 / real_logits.len() as f64;
    0.5 * (tnr + tpr)
}

const EVAL_CHUNK: usize = 4096;

fn eval_chunks<T: Scalar>(net: &Network<T>, ds: &Dataset<T>) -> Result<(Vec<T>, Vec<T>)> {
    let bands = ds.bands();
    let parts: Vec<(Vec<T>, Vec<T>)> = ds
        .features()
        .par_chunks(EVAL_CHUNK * bands)
        .map(|x| net.forward_eval(x, x.len() / bands))
        .collect::<Result<_>>()?;
    let mut pred = Vec::with_capacity(ds.len());
    let mut feat = Vec::with_capacity(ds.len() * net.feature_width());
    for (p, f) in parts {
        pred.extend(p);
        feat.extend(f);
    }
    Ok((pred, feat))
}

/// Evaluation-mode regression MSE against the dataset labels.
pub fn evaluate_mse<T: Scalar>(net: &Network<T>, ds: &Dataset<T>) -> Result<f64> {
    check_bands(net, ds)?;
    let (pred, _) = eval_chunks(net, ds)?;
    Ok(mse(&pred, ds.labels()?))
}

/// Balanced accuracy of the network's own discriminator at telling `sim`
/// from `real`, in evaluation mode.
pub fn discriminator_accuracy<T: Scalar>(net: &Network<T>, sim: &Dataset<T>, real: &Dataset<T>) -> Result<f64> {
    Ok(discriminator_eval(net, sim, real)?.0)
}

/// Balanced accuracy and mean BCE loss of the discriminator.
fn discriminator_eval<T: Scalar>(net: &Network<T>, sim: &Dataset<T>, real: &Dataset<T>) -> Result<(f64, f64)> {
    let logits = |ds: &Dataset<T>| -> Result<Vec<f64>> {
        check_bands(net, ds)?;
        let (_, f) = eval_chunks(net, ds)?;
        Ok(net.discriminate(&f, ds.len())?.iter().map(|v| v.as_f64()).collect())
    };
    let (s, r) = (logits(sim)?, logits(real)?);
    let loss = (s.iter().map(|&z| bce_with_logits(z, 0.0)).sum::<f64>()
        + r.iter().map(|&z| bce_with_logits(z, 1.0)).sum::<f64>())
        / (s.len() + r.len()) as f64;
    Ok((balanced_accuracy(&s, &r), loss))
}

fn check_bands<T: Scalar>(net: &Network<T>, ds: &Dataset<T>) -> Result<()> {
    if ds.bands() != net.input_width() {
        return Err(Error::shape(format!("dataset has {} bands, network expects {}", ds.bands(), net.input_width())));
    }
    Ok(())
}

fn gather<T: Scalar>(ds: &Dataset<T>, idx: &[usize]) -> Vec<T> {
    let mut x = Vec::with_capacity(idx.len() * ds.bands());
    idx.iter().for_each(|&i| x.extend_from_slice(ds.row(i)));
    x
}

fn augmented<T: Scalar>(ds: &Dataset<T>, cfg: &TrainConfig, index: u64) -> Result<Dataset<T>> {
    match cfg.noise_snr_db {
        Some(snr) => augment_noise(ds, snr, derive_seed2(cfg.seed, streams::AUGMENT, index)),
        None => Ok(ds.clone()),
    }
}

fn epoch_seed(cfg: &TrainConfig, epoch: usize) -> u64 {
    derive_seed2(cfg.seed, streams::TRAINING, epoch as u64)
}

fn dropout_rng(cfg: &TrainConfig, stream: u64, epoch: usize, batch: usize) -> crate::rng::StreamRng {
    rng_from_seed(derive_seed(derive_seed2(cfg.seed, stream, epoch as u64), batch as u64))
}

fn finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} became {v} in epoch {epoch}")))
    }
}

/// MSE gradient with respect to predictions.
fn mse_grad<T: Scalar>(pred: &[T], target: &[T]) -> Vec<T> {
    let k = T::lit(2.0 / pred.len() as f64);
    pred.iter().zip(target).map(|(&p, &t)| k * (p - t)).collect()
}

/// Validation set with noise drawn once.
fn validation_copy<T: Scalar>(val: &Dataset<T>, cfg: &TrainConfig) -> Result<Dataset<T>> {
    augmented(val, cfg, u64::MAX)
}

/// Plain regression training with MSE loss and per-epoch noise.
///
/// Returns the parameters of the epoch with the lowest validation MSE.
pub fn train_regressor<T: Scalar>(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train: &Dataset<T>,
    val: &Dataset<T>,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<(Network<T>, TrainHistory)> {
    cfg.validate()?;
    let mut net = Network::<T>::new(spec, derive_seed(cfg.seed, streams::TRAINING))?;
    check_bands(&net, train)?;
    check_bands(&net, val)?;
    train.labels()?;
    let val = validation_copy(val, cfg)?;
    let val_labels = val.labels()?;
    let mut opt = Adam::<T>::new(net.generator_range(), cfg.weight_decay, cfg.adam);
    let mut sched = PlateauScheduler::new(cfg.lr_generator, cfg.scheduler_factor, cfg.scheduler_patience, cfg.scheduler_threshold);
    let mut grads = vec![T::zero(); net.parameter_count()];
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, net.clone());
    for epoch in 0..cfg.epochs {
        let data = augmented(train, cfg, epoch as u64)?;
        let labels = data.labels()?;
        let order = epoch_order(data.len(), epoch_seed(cfg, epoch));
        let mut total = 0.0;
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let x = gather(&data, idx);
            let y: Vec<T> = idx.iter().map(|&i| labels[i]).collect();
            let tape = net.forward_train(&x, idx.len(), &mut dropout_rng(cfg, streams::DROPOUT, epoch, bi))?;
            total += finite(mse(&tape.predictions, &y), "training loss", epoch + 1)? * idx.len() as f64;
            grads.iter_mut().for_each(|g| *g = T::zero());
            let df = net.backward_head(&tape.features, &mse_grad(&tape.predictions, &y), &mut grads);
            net.backward_generator(&tape, df, &mut grads);
            opt.step(&mut net.params, &grads, sched.lr);
            net.update_running_stats(&tape);
        }
        let (pred, _) = eval_chunks(&net, &val)?;
        let val_loss = finite(mse(&pred, val_labels), "validation loss", epoch + 1)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / data.len() as f64,
            val_loss,
            lr: sched.lr,
            discriminator_lr: None,
            discriminator_accuracy: None,
            regression_loss: None,
            adversarial_loss: None,
            discriminator_loss: None,
        };
        if let Some(p) = progress.as_mut() {
            p(&record);
        }
        history.records.push(record);
        if val_loss < best.0 {
            best = (val_loss, net.clone());
            history.best_epoch = epoch + 1;
        }
        sched.step(val_loss);
    }
    Ok((best.1, history))
}

/// Domain-adversarial training on a labeled simulated pool and an
/// unlabeled real pool.
///
/// Every balanced batch first updates the discriminator on detached
/// features, then the generator and regression head on the regression loss
/// of the simulated half plus the weighted flipped-label adversarial loss
/// over both halves. The real half never updates batch-norm running
/// statistics.
#[allow(clippy::too_many_arguments)]
pub fn train_adversarial<T: Scalar>(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    sim_train: &Dataset<T>,
    sim_val: &Dataset<T>,
    real_train: &Dataset<T>,
    real_val: &Dataset<T>,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<(Network<T>, TrainHistory)> {
    cfg.validate()?;
    if !spec.discriminator {
        return Err(Error::config("adversarial training needs a network with a discriminator"));
    }
    if cfg.batch % 2 != 0 {
        return Err(Error::config(format!("adversarial batch size {} must be even", cfg.batch)));
    }
    let mut net = Network::<T>::new(spec, derive_seed(cfg.seed, streams::TRAINING))?;
    for ds in [sim_train, sim_val, real_train, real_val] {
        check_bands(&net, ds)?;
    }
    sim_train.labels()?;
    let sim_val = validation_copy(sim_val, cfg)?;
    let val_labels = sim_val.labels()?;
    let lambda = cfg.adversarial_weight;
    let mut gen_opt = Adam::<T>::new(net.generator_range(), cfg.weight_decay, cfg.adam);
    let mut disc_opt = Adam::<T>::new(net.discriminator_range(), cfg.weight_decay, cfg.adam);
    let mut gen_sched = PlateauScheduler::new(cfg.lr_generator, cfg.scheduler_factor, cfg.scheduler_patience, cfg.scheduler_threshold);
    let mut disc_sched =
        PlateauScheduler::new(cfg.lr_discriminator, cfg.scheduler_factor, cfg.scheduler_patience, cfg.scheduler_threshold);
    let mut grads = vec![T::zero(); net.parameter_count()];
    let mut scratch = vec![T::zero(); net.parameter_count()];
    let fw = net.feature_width();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, net.clone());
    for epoch in 0..cfg.epochs {
        let sim = augmented(sim_train, cfg, epoch as u64)?;
        let labels = sim.labels()?;
        let batches = balanced_batches(sim.len(), real_train.len(), cfg.batch, epoch_seed(cfg, epoch))?;
        let (mut sum_r, mut sum_a, mut sum_d) = (0.0, 0.0, 0.0);
        for (bi, b) in batches.iter().enumerate() {
            let (ns, nr) = (b.sim.len(), b.real.len());
            let n = (ns + nr) as f64;
            let y: Vec<T> = b.sim.iter().map(|&i| labels[i]).collect();
            let tape_s = net.forward_train(&gather(&sim, &b.sim), ns, &mut dropout_rng(cfg, streams::DROPOUT, epoch, bi))?;
            let tape_r = net.forward_train(
                &gather(real_train, &b.real),
                nr,
                &mut dropout_rng(cfg, streams::DROPOUT ^ 1, epoch, bi),
            )?;
            let mut features = tape_s.features.clone();
            features.extend_from_slice(&tape_r.features);
            let domain = |k: usize| if k < ns { 0.0 } else { 1.0 };

            let logits = net.discriminate(&features, ns + nr)?;
            let l_d = logits.iter().enumerate().map(|(k, z)| bce_with_logits(z.as_f64(), domain(k))).sum::<f64>() / n;
            if !cfg.freeze_discriminator {
                grads.iter_mut().for_each(|g| *g = T::zero());
                let d_logits: Vec<T> =
                    logits.iter().enumerate().map(|(k, z)| T::lit((sigmoid(z.as_f64()) - domain(k)) / n)).collect();
                net.backward_discriminator(&features, &d_logits, &mut grads)?;
                disc_opt.step(&mut net.params, &grads, disc_sched.lr);
            }

            grads.iter_mut().for_each(|g| *g = T::zero());
            let l_r = mse(&tape_s.predictions, &y);
            let mut df_s = net.backward_head(&tape_s.features, &mse_grad(&tape_s.predictions, &y), &mut grads);
            let logits = net.discriminate(&features, ns + nr)?;
            let l_a = logits.iter().enumerate().map(|(k, z)| bce_with_logits(z.as_f64(), 1.0 - domain(k))).sum::<f64>() / n;
            if lambda > 0.0 {
                let d_logits: Vec<T> = logits
                    .iter()
                    .enumerate()
                    .map(|(k, z)| T::lit(lambda * (sigmoid(z.as_f64()) - (1.0 - domain(k))) / n))
                    .collect();
                let df = net.backward_discriminator(&features, &d_logits, &mut scratch)?;
                df_s.iter_mut().zip(&df[..ns * fw]).for_each(|(a, &b)| *a += b);
                net.backward_generator(&tape_r, df[ns * fw..].to_vec(), &mut grads);
            }
            net.backward_generator(&tape_s, df_s, &mut grads);
            gen_opt.step(&mut net.params, &grads, gen_sched.lr);
            net.update_running_stats(&tape_s);

            finite(l_r + l_a + l_d, "adversarial training loss", epoch + 1)?;
            sum_r += l_r;
            sum_a += l_a;
            sum_d += l_d;
        }
        let nb = batches.len() as f64;
        let (pred, _) = eval_chunks(&net, &sim_val)?;
        let val_loss = finite(mse(&pred, val_labels), "validation loss", epoch + 1)?;
        let (accuracy, val_disc_loss) = discriminator_eval(&net, &sim_val, real_val)?;
        let (r, a, d) = (sum_r / nb, sum_a / nb, sum_d / nb);
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: r + lambda * a + d,
            val_loss,
            lr: gen_sched.lr,
            discriminator_lr: Some(disc_sched.lr),
            discriminator_accuracy: Some(accuracy),
            regression_loss: Some(r),
            adversarial_loss: Some(a),
            discriminator_loss: Some(d),
        };
        if let Some(p) = progress.as_mut() {
            p(&record);
        }
        history.records.push(record);
        if val_loss < best.0 {
            best = (val_loss, net.clone());
            history.best_epoch = epoch + 1;
        }
        gen_sched.step(val_loss);
        if !cfg.freeze_discriminator {
            disc_sched.step(val_disc_loss);
        }
    }
    Ok((best.1, history))
}

/// Pixels per inference batch in [`infer_map`].
pub const INFER_CHUNK: usize = 8192;

/// Oxygenation map of a cube: optional per-pixel area normalization, an
/// evaluation-mode forward pass and clamping to `[0, 1]`. Pixels that cannot
/// be normalized or give a non-finite prediction are set to 0.5 and flagged.
pub fn infer_map<T: Scalar>(net: &Network<T>, cube: &Hypercube, normalize: bool) -> Result<OxygenationMap> {
    let bands = cube.bands;
    if bands != net.input_width() {
        return Err(Error::shape(format!("cube has {bands} bands, network expects {}", net.input_width())));
    }
    let parts: Vec<(Vec<f32>, Vec<bool>)> = cube
        .data
        .par_chunks(INFER_CHUNK * bands)
        .map(|chunk| -> Result<(Vec<f32>, Vec<bool>)> {
            let n = chunk.len() / bands;
            let mut x: Vec<T> = chunk.iter().map(|&v| T::lit(v as f64)).collect();
            let mut bad = vec![false; n];
            if normalize {
                for (row, flag) in x.chunks_exact_mut(bands).zip(bad.iter_mut()) {
                    let area = band_area(row);
                    if area > T::zero() && area.is_finite() {
                        row.iter_mut().for_each(|v| *v /= area);
                    } else {
                        *flag = true;
                    }
                }
            }
            let pred = net.predict(&x, n)?;
            let values = pred
                .iter()
                .zip(bad.iter_mut())
                .map(|(p, flag)| {
                    let v = p.as_f64();
                    if *flag || !v.is_finite() {
                        *flag = true;
                        0.5
                    } else {
                        v.clamp(0.0, 1.0) as f32
                    }
                })
                .collect();
            Ok((values, bad))
        })
        .collect::<Result<_>>()?;
    let mut map = OxygenationMap::new(cube.height, cube.width, vec![0.0; cube.pixels()])?;
    let mut at = 0;
    for (v, d) in parts {
        map.values[at..at + v.len()].copy_from_slice(&v);
        map.degenerate[at..at + d.len()].copy_from_slice(&d);
        at += v.len();
    }
    Ok(map)
}
