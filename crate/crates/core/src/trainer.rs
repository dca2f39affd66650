//! Supervised training on `(G,R,NIR) → SWIR` patch pairs.
//!
//! Per mini-batch: forward, mean absolute error, reverse pass, gradient norm
//! rescaling then value clipping, and a NADAM update with the momentum
//! schedule `μ_t = β1·(1 − 0.5·0.96^(t·ψ))`. After every epoch the validation
//! RMSE drives early stopping and a halving learning-rate schedule on
//! plateaus.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::error::{Error, Result};
use crate::model::{DeepSwirModel, PatchPredictor};
use crate::raster::Raster;
use crate::tensor::{Element, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Momentum-schedule decay ψ.
    pub schedule_decay: f64,
    pub clip_norm: f64,
    pub clip_value: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub patch_size: usize,
    pub val_fraction: f64,
    pub batch_size: usize,
    /// Epochs without improvement before the learning rate is halved.
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    /// Worker threads for per-batch gradients; 1 is the strict deterministic
    /// mode. Results are reproducible for any fixed thread count.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule_decay: 0.004,
            clip_norm: 1.0,
            clip_value: 0.5,
            patience: 5,
            max_epochs: 10_000,
            patch_size: 32,
            val_fraction: 0.2,
            batch_size: 128,
            plateau_patience: 2,
            min_lr: 1e-6,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("schedule_decay", self.schedule_decay),
            ("clip_norm", self.clip_norm),
            ("clip_value", self.clip_value),
            ("min_lr", self.min_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("beta1 and beta2 must be below 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        for (name, v) in [
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
            ("patch_size", self.patch_size),
            ("batch_size", self.batch_size),
            ("plateau_patience", self.plateau_patience),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// One training pair cropped from a tile.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `d×d×3` source bands (G, R, NIR) in DN.
    pub input: Tensor<f32>,
    /// `d×d×1` target band in DN.
    pub target: Tensor<f32>,
    pub tile: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchDataset {
    pub train: Vec<PatchSample>,
    pub val: Vec<PatchSample>,
}

/// Crops an interleaved `d×d×C` patch of the given bands.
pub fn crop_bands(tile: &Raster, bands: &[usize], row: usize, col: usize, d: usize) -> Tensor<f32> {
    let c = bands.len();
    let mut data = vec![0.0f32; d * d * c];
    for (ci, &b) in bands.iter().enumerate() {
        let plane = tile.band(b);
        for y in 0..d {
            let src = &plane[(row + y) * tile.width() + col..][..d];
            for (x, &v) in src.iter().enumerate() {
                data[(y * d + x) * c + ci] = v as f32;
            }
        }
    }
    Tensor::from_parts(vec![d, d, c], data)
}

/// Draws `count` uniformly random `d×d` crops from 4-band `(G,R,NIR,SWIR)`
/// tiles and splits them at random into training and validation sets.
pub fn sample_patch_dataset(
    tiles: &[Raster],
    count: usize,
    d: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<PatchDataset> {
    if tiles.is_empty() {
        return Err(Error::Empty("no tiles to sample from".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    for (i, t) in tiles.iter().enumerate() {
        if t.bands() < 4 {
            return Err(Error::InvalidRaster(format!(
                "tile {i} has {} bands, need G,R,NIR,SWIR",
                t.bands()
            )));
        }
        if t.width() < d || t.height() < d {
            return Err(Error::InvalidRaster(format!(
                "tile {i} is {}×{}, smaller than the {d}×{d} patch",
                t.height(),
                t.width()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let tile = rng.gen_range(0..tiles.len());
        let t = &tiles[tile];
        let row = rng.gen_range(0..=t.height() - d);
        let col = rng.gen_range(0..=t.width() - d);
        samples.push(PatchSample {
            input: crop_bands(t, &[0, 1, 2], row, col, d),
            target: crop_bands(t, &[3], row, col, d),
            tile,
            row,
            col,
        });
    }

    let n_val = (count as f64 * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let mut is_val = vec![false; count];
    order[..n_val].iter().for_each(|&i| is_val[i] = true);
    let mut ds = PatchDataset::default();
    for (s, v) in samples.into_iter().zip(is_val) {
        if v {
            ds.val.push(s);
        } else {
            ds.train.push(s);
        }
    }
    Ok(ds)
}

/// Mean absolute error and its (sub)gradient `sign(pred − target)/n`, with
/// `sign(0) = 0`.
pub fn mae_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mae_loss: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("mae_loss on empty tensors".into()));
    }
    let n = pred.len() as f64;
    let inv_n = T::from_f64(1.0 / n);
    let mut sum = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.as_f64().abs();
            if d > T::zero() {
                inv_n
            } else if d < T::zero() {
                -inv_n
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((sum / n, Tensor::from_parts(pred.shape().to_vec(), grad)))
}

/// Rescales all gradients so their global L2 norm is at most `clip_norm`,
/// then clamps every entry to `[−clip_value, clip_value]`. Returns the norm
/// before rescaling.
pub fn clip_gradients<T: Element>(
    store: &mut ParamStore<T>,
    clip_norm: f64,
    clip_value: f64,
) -> Result<f64> {
    let mut sq = 0.0f64;
    for p in store.iter() {
        for &g in p.grad.data() {
            let g = g.as_f64();
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    let factor = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    for p in store.iter_mut() {
        for g in p.grad.data_mut() {
            let v = (g.as_f64() * factor).clamp(-clip_value, clip_value);
            *g = T::from_f64(v);
        }
    }
    Ok(norm)
}

/// NADAM optimizer state: moments, the running product of the momentum
/// schedule and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Nadam<T: Element = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    momentum_product: f64,
    t: u64,
}

impl<T: Element> Nadam<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            schedule_decay: cfg.schedule_decay,
            m: zeros(),
            v: zeros(),
            momentum_product: 1.0,
            t: 0,
        }
    }

    /// `μ_t` of the momentum schedule.
    pub fn momentum(&self, t: u64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * self.schedule_decay))
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn momentum_product(&self) -> f64 {
        self.momentum_product
    }

    /// Applies one update using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        let t = self.t + 1;
        let mu_t = self.momentum(t);
        let mu_next = self.momentum(t + 1);
        let prod_t = self.momentum_product * mu_t;
        let prod_next = prod_t * mu_next;
        let v_corr = 1.0 - self.beta2.powi(t.min(i32::MAX as u64) as i32);
        let (b1, b2) = (self.beta1, self.beta2);

        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for ((theta, g), (m, v)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g.as_f64();
                let m_t = b1 * m.as_f64() + (1.0 - b1) * g;
                let v_t = b2 * v.as_f64() + (1.0 - b2) * g * g;
                let g_hat = g / (1.0 - prod_t);
                let m_hat = m_t / (1.0 - prod_next);
                let m_bar = (1.0 - mu_t) * g_hat + mu_next * m_hat;
                let v_hat = v_t / v_corr;
                let next = theta.as_f64() - lr * m_bar / (v_hat.sqrt() + self.eps);
                if !next.is_finite() {
                    return Err(Error::NonFinite(format!("update of {}", p.name)));
                }
                *theta = T::from_f64(next);
                *m = T::from_f64(m_t);
                *v = T::from_f64(v_t);
            }
        }
        self.t = t;
        self.momentum_product = prod_t;
        Ok(())
    }

    fn flat(parts: &[Vec<T>]) -> Vec<f32> {
        parts.iter().flatten().map(|v| v.as_f64() as f32).collect()
    }
}

/// Pooled error statistics in DN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStats {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Default)]
struct ErrorAccumulator {
    abs: f64,
    sq: f64,
    n: usize,
}

impl ErrorAccumulator {
    fn add(&mut self, pred: &[f32], target: &[f32]) {
        for (&p, &t) in pred.iter().zip(target) {
            let d = (p - t) as f64;
            self.abs += d.abs();
            self.sq += d * d;
        }
        self.n += pred.len();
    }

    fn merge(&mut self, o: &ErrorAccumulator) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.n += o.n;
    }

    fn finish(&self) -> ErrorStats {
        let n = self.n.max(1) as f64;
        let stats = ErrorStats {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
        };
        debug_assert!(stats.rmse >= stats.mae * (1.0 - 1e-12));
        stats
    }
}

/// MAE and RMSE over every pixel of every patch, raw DN units.
pub fn evaluate(predictor: &impl PatchPredictor, samples: &[PatchSample]) -> Result<ErrorStats> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluate needs at least one patch".into()));
    }
    let mut acc = ErrorAccumulator::default();
    for s in samples {
        let pred = predictor.predict(&s.input)?;
        if pred.shape() != s.target.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                s.target.shape()
            )));
        }
        acc.add(pred.data(), s.target.data());
    }
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub train_rmse: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// Loss or update became non-finite; the best parameters so far are kept.
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub stop_reason: StopReason,
}

impl TrainReport {
    /// Line-oriented log: a header, then one whitespace-separated row per
    /// epoch.
    pub fn to_log(&self) -> String {
        let mut s = String::from("epoch train_mae train_rmse val_mae val_rmse lr\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{} {:.6} {:.6} {:.6} {:.6} {:e}",
                e.epoch, e.train_mae, e.train_rmse, e.val_mae, e.val_rmse, e.lr
            );
        }
        let _ = writeln!(
            s,
            "# stopped_epoch={} best_epoch={} best_val_rmse={:.6} reason={:?}",
            self.stopped_epoch, self.best_epoch, self.best_val_rmse, self.stop_reason
        );
        s
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Model with the best validation RMSE.
    pub best: DeepSwirModel<f32>,
    pub checkpoint: Checkpoint,
}

/// Tracks the best validation score and decides when to stop or decay.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    plateau_patience: usize,
    best: f64,
    since_best: usize,
    since_decay: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochVerdict {
    Improved,
    Continue,
    DecayLr,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize, plateau_patience: usize) -> Self {
        Self {
            patience,
            plateau_patience,
            best: f64::INFINITY,
            since_best: 0,
            since_decay: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_rmse: f64) -> EpochVerdict {
        if val_rmse < self.best {
            self.best = val_rmse;
            self.since_best = 0;
            self.since_decay = 0;
            return EpochVerdict::Improved;
        }
        self.since_best += 1;
        self.since_decay += 1;
        if self.since_best >= self.patience {
            EpochVerdict::Stop
        } else if self.since_decay >= self.plateau_patience {
            self.since_decay = 0;
            EpochVerdict::DecayLr
        } else {
            EpochVerdict::Continue
        }
    }
}

struct BatchResult {
    grads: Vec<Tensor<f32>>,
    err: ErrorAccumulator,
}

fn batch_gradients(
    model: &DeepSwirModel<f32>,
    samples: &[&PatchSample],
    scale: f32,
) -> Result<BatchResult> {
    let store = model.params();
    let mut grads = store.grad_buffer();
    let mut err = ErrorAccumulator::default();
    for s in samples {
        let mut tape = Tape::with_params(store);
        let x = tape.input(s.input.clone());
        let out = model.forward_tape(&mut tape, x)?;
        err.add(tape.value(out)?.data(), s.target.data());
        let loss = tape.mean_abs_error(out, s.target.clone())?;
        let loss_value = tape.value(loss)?.data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let loss = tape.scale(loss, scale)?;
        tape.backward(loss, &mut grads)?;
    }
    Ok(BatchResult { grads, err })
}

fn parallel_batch(
    model: &DeepSwirModel<f32>,
    samples: &[&PatchSample],
    scale: f32,
    threads: usize,
) -> Result<BatchResult> {
    if threads <= 1 || samples.len() < 2 {
        return batch_gradients(model, samples, scale);
    }
    let chunk = samples.len().div_ceil(threads);
    let results: Vec<Result<BatchResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| s.spawn(move || batch_gradients(model, part, scale)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    });
    // fixed reduction order: chunk 0, 1, ...
    let mut iter = results.into_iter();
    let mut total = iter.next().expect("at least one chunk")?;
    for r in iter {
        let r = r?;
        for (a, b) in total.grads.iter_mut().zip(&r.grads) {
            a.add_assign(b);
        }
        total.err.merge(&r.err);
    }
    Ok(total)
}

/// Trains `model` in place and returns the best-validation model.
pub fn train(
    model: DeepSwirModel<f32>,
    dataset: &PatchDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, dataset, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    mut model: DeepSwirModel<f32>,
    dataset: &PatchDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Empty(format!(
            "need training and validation patches, got {} and {}",
            dataset.train.len(),
            dataset.val.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Nadam::new(model.params(), cfg);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.plateau_patience);
    let mut lr = cfg.lr0;
    let mut epochs = Vec::new();
    let mut best = (model.clone(), opt.clone(), 0usize);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_err = ErrorAccumulator::default();
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&PatchSample> = batch.iter().map(|&i| &dataset.train[i]).collect();
            let step = parallel_batch(&model, &samples, 1.0 / samples.len() as f32, cfg.threads)
                .and_then(|r| {
                    let store = model.params_mut();
                    store.zero_grad();
                    store.accumulate(&r.grads)?;
                    clip_gradients(store, cfg.clip_norm, cfg.clip_value)?;
                    opt.step(store, lr)?;
                    Ok(r.err)
                });
            match step {
                Ok(err) => train_err.merge(&err),
                Err(Error::NonFinite(_)) => {
                    stop_reason = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let val = evaluate(&model, &dataset.val)?;
        if !val.rmse.is_finite() {
            stop_reason = StopReason::Diverged;
            break;
        }
        let train = train_err.finish();
        let record = EpochRecord {
            epoch,
            train_mae: train.mae,
            train_rmse: train.rmse,
            val_mae: val.mae,
            val_rmse: val.rmse,
            lr,
        };
        on_epoch(&record);
        epochs.push(record);

        match stopper.observe(val.rmse) {
            EpochVerdict::Improved => best = (model.clone(), opt.clone(), epoch),
            EpochVerdict::Continue => {}
            EpochVerdict::DecayLr => lr = (lr * 0.5).max(cfg.min_lr.min(lr)),
            EpochVerdict::Stop => {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }

    let (best_model, best_opt, best_epoch) = best;
    let mut checkpoint = Checkpoint::from_model(&best_model);
    checkpoint.train_state = Some(TrainState {
        epoch: best_epoch,
        seed: cfg.seed,
        step: best_opt.step_count(),
        momentum_product: best_opt.momentum_product(),
        lr,
        first_moment: Nadam::flat(&best_opt.m),
        second_moment: Nadam::flat(&best_opt.v),
    });
    let report = TrainReport {
        stopped_epoch: epochs.last().map_or(0, |e| e.epoch),
        best_epoch,
        best_val_rmse: stopper.best(),
        stop_reason,
        epochs,
    };
    Ok(TrainOutcome {
        report,
        best: best_model,
        checkpoint,
    })
}
