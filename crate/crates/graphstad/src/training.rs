//! Loss functions, per-channel scaling, optimization and scheduling for the
//! reconstruction autoencoder. The training driver itself lives here too.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::SegmentationMap;
use crate::tensor::{
    add, ln, mul, scale, square, sub, sum, ParamSet, Scalar, Tensor,
};

// ---------------------------------------------------------------------------
// Per-channel scaling
// ---------------------------------------------------------------------------

/// Inference-time clip ceiling for scaled values. Hot channels land above the
/// training maximum and must keep a large scaled value instead of being
/// clamped back to 1.
pub const SCALE_CLIP: f64 = 1.5;

/// Per-channel min/max of renormalized occupancy over the training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalingStats {
    /// Fit over flat channel vectors (one per map), all of equal length.
    pub fn fit<'a>(maps: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut iter = maps.into_iter();
        let first = iter.next().expect("ScalingStats::fit: empty training set");
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for m in iter {
            assert_eq!(m.len(), min.len(), "ScalingStats::fit: length mismatch");
            for (i, v) in m.iter().enumerate() {
                if *v < min[i] {
                    min[i] = *v;
                }
                if *v > max[i] {
                    max[i] = *v;
                }
            }
        }
        ScalingStats { min, max }
    }

    pub fn is_constant(&self, i: usize) -> bool {
        self.max[i] <= self.min[i]
    }

    pub fn save(&self, path: &std::path::Path) -> crate::Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| crate::Error::Checkpoint(format!("scaler serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| crate::Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> crate::Result<ScalingStats> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| crate::Error::parse(path, e.to_string()))
    }

    /// Scale into [0, SCALE_CLIP]. Training data lands in [0, 1] by
    /// construction; anomalous inference values may exceed 1 up to the clip.
    pub fn scale(&self, values: &[f64]) -> Vec<f64> {
        assert_eq!(values.len(), self.min.len(), "scale: length mismatch");
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if self.is_constant(i) {
                    0.0
                } else {
                    ((v - self.min[i]) / (self.max[i] - self.min[i])).clamp(0.0, SCALE_CLIP)
                }
            })
            .collect()
    }

    /// Inverse of `scale` for in-range values. Constant channels recover their
    /// (constant) minimum.
    pub fn unscale(&self, values: &[f64]) -> Vec<f64> {
        assert_eq!(values.len(), self.min.len(), "unscale: length mismatch");
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if self.is_constant(i) {
                    self.min[i]
                } else {
                    v * (self.max[i] - self.min[i]) + self.min[i]
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Loss configuration and terms
// ---------------------------------------------------------------------------

/// Group weights and regularization strengths for the composite loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight for the depth-1 channel group.
    pub sigma_depth1: f64,
    /// Weight for the depths 2..=7 group.
    pub sigma_rest: f64,
    /// KL penalty weight.
    pub beta_kl: f64,
    /// L2 weight on weight matrices.
    pub rho: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            sigma_depth1: 0.4,
            sigma_rest: 1.0,
            beta_kl: 0.003,
            rho: 1e-7,
        }
    }
}

/// Per-channel loss weights over the flat map: ς_j / M_j for active channels
/// in group j, zero for inactive ones. Group 1 is depth 1, group 2 is depths
/// 2..=7.
pub fn loss_weights(seg: &SegmentationMap, cfg: &LossConfig) -> Vec<f64> {
    assert!(cfg.sigma_depth1 > 0.0 && cfg.sigma_rest > 0.0, "loss weights must be positive");
    let n = seg.geom.n_cells();
    let mut group = vec![0u8; n];
    let (mut m1, mut m2) = (0usize, 0usize);
    for flat in 0..n {
        if !seg.is_active(flat) {
            continue;
        }
        if seg.geom.coordinate_of(flat).depth == 1 {
            group[flat] = 1;
            m1 += 1;
        } else {
            group[flat] = 2;
            m2 += 1;
        }
    }
    assert!(m1 > 0 && m2 > 0, "loss group without active channels");
    group
        .iter()
        .map(|g| match g {
            1 => cfg.sigma_depth1 / m1 as f64,
            2 => cfg.sigma_rest / m2 as f64,
            _ => 0.0,
        })
        .collect()
}

/// Weighted reconstruction MSE over `[rows, n_channels]` batches of flat
/// maps; `weights` comes from `loss_weights`. Rows are batch x time slots;
/// the result is averaged over rows.
pub fn weighted_mse<S: Scalar>(x: &Tensor<S>, xbar: &Tensor<S>, weights: &[f64]) -> Tensor<S> {
    assert_eq!(x.shape(), xbar.shape(), "weighted_mse: shape mismatch");
    assert_eq!(x.shape().len(), 2, "weighted_mse: expected [rows, channels]");
    let rows = x.shape()[0];
    let c = x.shape()[1];
    assert_eq!(c, weights.len(), "weighted_mse: weight length mismatch");
    let tiled: Vec<S> = (0..rows)
        .flat_map(|_| weights.iter().map(|w| S::c(*w)))
        .collect();
    let w = Tensor::from_vec(&[rows, c], tiled);
    scale(&sum(&mul(&w, &square(&sub(x, xbar)))), S::c(1.0 / rows as f64))
}

/// KL divergence of N(mu, diag sigma^2) from N(0, I), mean over batch rows.
/// `mu` and `sigma` are `[B, N_z]`; sigma must be strictly positive.
pub fn kl_divergence<S: Scalar>(mu: &Tensor<S>, sigma: &Tensor<S>) -> Tensor<S> {
    assert_eq!(mu.shape(), sigma.shape(), "kl_divergence: shape mismatch");
    assert_eq!(mu.shape().len(), 2, "kl_divergence: expected [B, N_z]");
    assert!(
        sigma.data().iter().all(|v| *v > S::zero()),
        "op `kl_divergence`: nonpositive sigma"
    );
    let b = mu.shape()[0];
    let var = square(sigma);
    let term = sub(&add(&var, &square(mu)), &add_ones_and_log(&var));
    scale(&sum(&term), S::c(0.5 / b as f64))
}

// 1 + ln(var), built as a graph so gradients flow through the ln.
fn add_ones_and_log<S: Scalar>(var: &Tensor<S>) -> Tensor<S> {
    crate::tensor::add_scalar(&ln(var), S::one())
}

/// Sum of squared entries of every trainable parameter whose name marks it as
/// a weight matrix. Biases, BN affine parameters and running statistics stay
/// out of the penalty.
pub fn l2_weight_penalty<S: Scalar>(params: &ParamSet<S>) -> Tensor<S> {
    let mut total: Option<Tensor<S>> = None;
    for (name, t) in params.iter() {
        if !t.requires_grad() || !is_weight_name(name) {
            continue;
        }
        let term = sum(&square(t));
        total = Some(match total {
            Some(acc) => add(&acc, &term),
            None => term,
        });
    }
    total.unwrap_or_else(|| Tensor::scalar(S::zero()))
}

/// Parameter-name filter for the L2 term.
pub fn is_weight_name(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Composite loss: weighted MSE + beta_kl * KL + rho * l2.
pub fn total_loss<S: Scalar>(
    recon: &Tensor<S>,
    kl: &Tensor<S>,
    params: &ParamSet<S>,
    cfg: &LossConfig,
) -> Tensor<S> {
    let mut loss = recon.clone();
    if cfg.beta_kl != 0.0 {
        loss = add(&loss, &scale(kl, S::c(cfg.beta_kl)));
    }
    if cfg.rho != 0.0 {
        loss = add(&loss, &scale(&l2_weight_penalty(params), S::c(cfg.rho)));
    }
    loss
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// Adam with per-parameter moment buffers keyed by parameter name.
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, Vec<S>>,
    v: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update from the gradients currently accumulated on the
    /// trainable parameters, then clear those gradients.
    pub fn step(&mut self, params: &ParamSet<S>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (S::c(self.beta1), S::c(self.beta2));
        let (ob1, ob2) = (S::c(1.0 - self.beta1), S::c(1.0 - self.beta2));
        let lr = S::c(self.lr / bc1.max(f64::MIN_POSITIVE));
        let denom_scale = S::c(1.0 / bc2.max(f64::MIN_POSITIVE).sqrt());
        let eps = S::c(self.eps);
        for (name, t) in params.iter() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad() else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            t.update_data(|d| {
                for i in 0..d.len() {
                    m[i] = b1 * m[i] + ob1 * g[i];
                    v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                    let vhat_sqrt = (v[i].sqrt()) * denom_scale;
                    d[i] = d[i] - lr * m[i] / (vhat_sqrt + eps);
                }
            });
            t.zero_grad();
        }
    }
}

/// One-cycle learning rate schedule: linear warmup from max_lr/25 to max_lr
/// over the first `warmup_frac` of steps, then cosine anneal down to
/// max_lr/625.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        assert!(total_steps >= 1);
        OneCycle {
            max_lr,
            total_steps,
            warmup_frac: 0.3,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / 25.0
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / 625.0
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let last = self.total_steps.saturating_sub(1);
        if last == 0 {
            return self.max_lr;
        }
        let peak = ((self.warmup_frac * last as f64).round() as usize).clamp(1, last);
        if step <= peak {
            let f = step as f64 / peak as f64;
            self.initial_lr() + (self.max_lr - self.initial_lr()) * f
        } else {
            let f = (step - peak) as f64 / (last - peak) as f64;
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * f.min(1.0)).cos());
            self.final_lr() + (self.max_lr - self.final_lr()) * cos
        }
    }
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

/// Optimization protocol for the autoencoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Worker threads; 0 picks the machine's parallelism.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 1e-3,
            batch: 8,
            epochs: 200,
            patience: 20,
            seed: 0,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &std::path::Path) -> crate::Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| {
            crate::Error::Dataset(format!("cannot write history {}: {e}", path.display()))
        })?;
        for r in &self.records {
            w.serialize(r)
                .map_err(|e| crate::Error::Dataset(format!("history row: {e}")))?;
        }
        w.flush().map_err(|e| crate::Error::io(path, e))
    }
}

struct Job<S: Scalar> {
    snapshot: std::sync::Arc<crate::tensor::ParamSnapshot<S>>,
    idxs: Vec<usize>,
    epoch: u64,
    train: bool,
}

struct Payload<S: Scalar> {
    /// Summed gradients per trainable parameter, in parameter order.
    grads: Vec<Vec<S>>,
    /// Non-trainable parameter values (BN running stats), in parameter order.
    nontrain: Vec<Vec<S>>,
    loss: f64,
    n: usize,
}

fn mix_seed(seed: u64, epoch: u64, idx: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ idx.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// One window's objective (weighted MSE + KL penalty; no L2 term here).
fn window_loss<S: Scalar>(
    model: &crate::model::Autoencoder<S>,
    steps: &[Vec<S>],
    weights: &[f64],
    beta_kl: f64,
    mode: crate::tensor::BatchNormMode,
    eps: Option<&Tensor<S>>,
) -> Tensor<S> {
    let t = steps.len();
    let n: usize = steps[0].len();
    let mut flat = Vec::with_capacity(t * n);
    for s in steps {
        flat.extend_from_slice(s);
    }
    let x = Tensor::from_vec(&[t, n], flat);
    let out = model.forward(steps, mode, eps);
    let recon = crate::tensor::reshape(&out.recon, &[t, n]);
    let mut loss = weighted_mse(&x, &recon, weights);
    if let Some(latent) = &out.latent {
        if beta_kl != 0.0 {
            loss = add(&loss, &scale(&kl_divergence(&latent.mu, &latent.sigma), S::c(beta_kl)));
        }
    }
    loss
}

fn worker_run<S: Scalar>(
    model: &crate::model::Autoencoder<S>,
    windows: &[crate::model::STWindow],
    weights: &[f64],
    beta_kl: f64,
    seed: u64,
    job: &Job<S>,
) -> Payload<S> {
    use crate::tensor::BatchNormMode;
    model.params.load_snapshot(&job.snapshot);
    model.params.zero_grad();
    let mut loss_sum = 0.0;
    for &idx in &job.idxs {
        let steps = windows[idx].steps_as::<S>();
        let loss = if job.train {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, job.epoch, idx as u64));
            let eps = if model.arch.use_vae {
                Some(crate::model::sample_eps(&[1, model.arch.n_z], &mut rng))
            } else {
                None
            };
            let loss = window_loss(model, &steps, weights, beta_kl, BatchNormMode::Train, eps.as_ref());
            loss.backward();
            loss
        } else {
            window_loss(model, &steps, weights, beta_kl, BatchNormMode::Eval, None)
        };
        loss_sum += loss.item().to_f64().unwrap();
    }
    let grads = if job.train {
        model
            .params
            .trainable()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![S::zero(); t.numel()]))
            .collect()
    } else {
        Vec::new()
    };
    let nontrain = model
        .params
        .iter()
        .filter(|(_, t)| !t.requires_grad())
        .map(|(_, t)| t.to_vec())
        .collect();
    Payload {
        grads,
        nontrain,
        loss: loss_sum,
        n: job.idxs.len(),
    }
}

/// Split `idxs` into at most `parts` contiguous non-empty chunks.
fn chunk_indices(idxs: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let parts = parts.min(idxs.len()).max(1);
    (0..parts)
        .map(|p| idxs[p * idxs.len() / parts..(p + 1) * idxs.len() / parts].to_vec())
        .filter(|c| !c.is_empty())
        .collect()
}

/// Train the autoencoder in place on healthy windows. The last 20% of the
/// windows form the validation split; the best-validation parameters are
/// restored before returning. Batch gradients are computed by worker threads
/// and reduced in fixed order, so a given seed reproduces the loss curve
/// bit-identically.
pub fn train<S: Scalar>(
    model: &mut crate::model::Autoencoder<S>,
    windows: &[crate::model::STWindow],
    seg: &SegmentationMap,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> crate::Result<TrainHistory> {
    use rand::seq::SliceRandom;
    use std::sync::mpsc;

    if windows.len() < 2 {
        return Err(crate::Error::Training(
            "autoencoder training needs at least 2 windows".into(),
        ));
    }
    assert!(cfg.batch >= 1 && cfg.patience >= 1);
    let weights = loss_weights(seg, loss_cfg);
    let n_val = (windows.len() / 5).clamp(1, windows.len() - 1);
    let n_train = windows.len() - n_val;
    let val_idxs: Vec<usize> = (n_train..windows.len()).collect();
    let n_batches = n_train.div_ceil(cfg.batch);
    let sched = OneCycle::new(cfg.max_lr, cfg.epochs * n_batches);
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.threads
    };

    let arch = model.arch.clone();
    let geom = model.geom.clone();
    let beta_kl = loss_cfg.beta_kl;
    let rho = loss_cfg.rho;
    let seed = cfg.seed;
    let weights_ref = &weights;

    let mut history = TrainHistory {
        records: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
    };
    let mut best_snapshot = model.params.snapshot();

    std::thread::scope(|scope| -> crate::Result<()> {
        // persistent workers, each with a private replica of the model
        let mut channels = Vec::with_capacity(threads);
        for _ in 0..threads {
            let (job_tx, job_rx) = mpsc::channel::<Job<S>>();
            let (res_tx, res_rx) = mpsc::channel::<std::result::Result<Payload<S>, String>>();
            let arch = arch.clone();
            let geom = geom.clone();
            scope.spawn(move || {
                let replica = match crate::model::Autoencoder::<S>::new(arch, geom, 0) {
                    Ok(m) => m,
                    Err(e) => {
                        let _ = res_tx.send(Err(format!("worker init failed: {e}")));
                        return;
                    }
                };
                while let Ok(job) = job_rx.recv() {
                    let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                        worker_run(&replica, windows, weights_ref, beta_kl, seed, &job)
                    }))
                    .map_err(|p| {
                        p.downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "worker panicked".into())
                    });
                    if res_tx.send(out).is_err() {
                        break;
                    }
                }
            });
            channels.push((job_tx, res_rx));
        }

        // dispatch `jobs` and reduce the results in worker order
        let run_round = |snapshot: &std::sync::Arc<crate::tensor::ParamSnapshot<S>>,
                         idxs: &[usize],
                         epoch: u64,
                         train: bool|
         -> crate::Result<Vec<Payload<S>>> {
            let chunks = chunk_indices(idxs, threads);
            for (c, chunk) in chunks.iter().enumerate() {
                channels[c]
                    .0
                    .send(Job {
                        snapshot: snapshot.clone(),
                        idxs: chunk.clone(),
                        epoch,
                        train,
                    })
                    .map_err(|_| crate::Error::Training("worker thread exited early".into()))?;
            }
            let mut payloads = Vec::with_capacity(chunks.len());
            for (c, _) in chunks.iter().enumerate() {
                let res = channels[c]
                    .1
                    .recv()
                    .map_err(|_| crate::Error::Training("worker thread lost".into()))?;
                payloads.push(res.map_err(crate::Error::Training)?);
            }
            Ok(payloads)
        };

        let mut opt = Adam::<S>::new(sched.initial_lr());
        let mut step = 0usize;
        let mut since_best = 0usize;
        let trainable: Vec<Tensor<S>> =
            model.params.trainable().map(|(_, t)| t.clone()).collect();
        let nontrainable: Vec<Tensor<S>> = model
            .params
            .iter()
            .filter(|(_, t)| !t.requires_grad())
            .map(|(_, t)| t.clone())
            .collect();

        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n_train).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, u64::MAX));
            order.shuffle(&mut shuffle_rng);

            let mut train_loss = 0.0;
            let mut epoch_lr = sched.lr_at(step);
            for batch in order.chunks(cfg.batch) {
                let snapshot = std::sync::Arc::new(model.params.snapshot());
                let payloads = run_round(&snapshot, batch, epoch as u64, true)?;
                let total_n: usize = payloads.iter().map(|p| p.n).sum();
                let inv = S::c(1.0 / total_n as f64);
                for (k, t) in trainable.iter().enumerate() {
                    let mut acc = vec![S::zero(); t.numel()];
                    for p in &payloads {
                        for (a, g) in acc.iter_mut().zip(&p.grads[k]) {
                            *a += *g * inv;
                        }
                    }
                    t.accumulate_grad(&acc);
                }
                // BN running stats: weighted average of the worker replicas
                for (k, t) in nontrainable.iter().enumerate() {
                    let mut acc = vec![S::zero(); t.numel()];
                    for p in &payloads {
                        let w = S::c(p.n as f64 / total_n as f64);
                        for (a, v) in acc.iter_mut().zip(&p.nontrain[k]) {
                            *a += *v * w;
                        }
                    }
                    t.set_data(acc);
                }
                if rho != 0.0 {
                    scale(&l2_weight_penalty(&model.params), S::c(rho)).backward();
                }
                epoch_lr = sched.lr_at(step);
                opt.lr = epoch_lr;
                opt.step(&model.params);
                step += 1;
                train_loss += payloads.iter().map(|p| p.loss).sum::<f64>();
            }
            train_loss /= n_train as f64;

            let snapshot = std::sync::Arc::new(model.params.snapshot());
            let payloads = run_round(&snapshot, &val_idxs, epoch as u64, false)?;
            let val_loss =
                payloads.iter().map(|p| p.loss).sum::<f64>() / n_val as f64;

            history.records.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
                lr: epoch_lr,
            });
            if val_loss < history.best_val {
                history.best_val = val_loss;
                history.best_epoch = epoch;
                best_snapshot = model.params.snapshot();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        Ok(())
    })?;

    model.params.load_snapshot(&best_snapshot);
    Ok(history)
}
