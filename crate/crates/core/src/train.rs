//! Optimisation: Adam, linear warmup + cosine schedule, EMA weights, the
//! epoch loop and checkpoints.
//!
//! Each window gets its own tape. A batch loss is the CCC pooled over the
//! selected frames of every window in the batch; its gradient with respect
//! to the pooled predictions seeds one backward sweep per window. Window
//! gradients are summed in fixed groups and the groups in batch order, so
//! results do not depend on how many worker threads run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{dapf, segment_windows, Corpus, Split, WindowSample, WindowScheme};
use crate::error::{DapaError, Result};
use crate::layers::ForwardCtx;
use crate::metrics::evaluate_corpus;
use crate::model::{DapaModel, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SHUFFLE_KEY: u64 = 0x5348_5546;
const DROPOUT_KEY: u64 = 0x4452_4f50;
/// Windows whose gradients are summed together before groups are combined.
const GRAD_GROUP: usize = 4;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    /// Cosine period in epochs; the rate stays at 0 afterwards.
    pub cosine_t_max: usize,
    pub epochs: usize,
    pub batch_train: usize,
    /// Windows per evaluation work unit.
    pub batch_eval: usize,
    pub dropout: f64,
    pub ema_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss_on_core_only: bool,
    pub window: WindowScheme,
    /// Score the training split with EMA weights after every epoch.
    pub eval_train: bool,
    /// Stop once the training-split CCC reaches this value (needs `eval_train`).
    pub target_train_ccc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 40,
            lr_peak: 5e-5,
            warmup_steps: 400,
            cosine_t_max: 10,
            epochs: 40,
            batch_train: 32,
            batch_eval: 256,
            dropout: 0.1,
            ema_decay: 0.999,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss_on_core_only: true,
            window: WindowScheme::default(),
            eval_train: false,
            target_train_ccc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DapaError::Config(format!("train.{m}")));
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return bad(format!("lr_peak must be finite and non-negative, got {}", self.lr_peak));
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if self.cosine_t_max == 0 || self.epochs == 0 || self.batch_train == 0 || self.batch_eval == 0 {
            return bad("cosine_t_max, epochs, batch_train and batch_eval must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        if self.window.core == 0 {
            return bad("window.core must be positive".into());
        }
        if self.target_train_ccc.is_some() && !self.eval_train {
            return bad("target_train_ccc requires eval_train = true".into());
        }
        Ok(())
    }
}

/// Linear warmup over `warmup_steps`, then per-epoch cosine annealing from
/// `lr_peak` to 0 over `cosine_t_max` epochs, held at 0 afterwards.
pub fn lr_at(cfg: &TrainConfig, step: u64, epoch: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let t = cfg.cosine_t_max as f64;
    let e = (epoch as f64).min(t);
    cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * e / t).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected Adam update. Every gradient is checked first, so a
    /// non-finite value leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(DapaError::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.len() != params.get(id).numel() {
                return Err(DapaError::Dimension(format!(
                    "gradient of '{}' has {} entries, parameter has {}",
                    params.name(id),
                    g.len(),
                    params.get(id).numel()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(DapaError::NonFinite(format!(
                    "gradient of '{}' at entry {i} is {}",
                    params.name(id),
                    g[i]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = T::from_f64_lossy(1.0 - self.beta1);
        let c2 = T::from_f64_lossy(1.0 - self.beta2);
        let bc1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        for (((p, m), v), g) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(grads)
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..g.len() {
                m[i] = b1 * m[i] + c1 * g[i];
                v[i] = b2 * v[i] + c2 * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub shadow: Vec<Tensor<T>>,
    pub decay: f64,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(params: &ParamStore<T>, decay: f64) -> Self {
        Self {
            shadow: params.tensors().iter().map(|t| t.clone().with_requires_grad(false)).collect(),
            decay,
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(DapaError::Dimension(format!(
                "EMA tracks {} tensors, got {}",
                self.shadow.len(),
                params.len()
            )));
        }
        if let Some((s, p)) = self.shadow.iter().zip(params).find(|(s, p)| s.shape() != p.shape()) {
            return Err(DapaError::Dimension(format!(
                "EMA shadow of shape {:?} cannot follow a parameter of shape {:?}",
                s.shape(),
                p.shape()
            )));
        }
        let d = T::from_f64_lossy(self.decay);
        let c = T::from_f64_lossy(1.0 - self.decay);
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + c * b;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryRecord {
    /// Epochs completed, starting at 1.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ccc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_ccc: Option<f64>,
}

pub fn history_csv(records: &[HistoryRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,step,lr,train_loss,train_ccc,val_ccc\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.lr,
            r.train_loss,
            opt(r.train_ccc),
            opt(r.val_ccc)
        );
    }
    out
}

/// Loss and summed parameter gradients of one batch.
pub struct BatchGradients<T> {
    pub loss: f64,
    pub grads: Vec<Vec<T>>,
}

fn selected_positions<T>(w: &WindowSample<T>, core_only: bool) -> Vec<usize> {
    (0..w.core_mask.len()).filter(|&i| !core_only || w.core_mask[i]).collect()
}

/// Forward, pooled CCC loss and backward for one batch. Returns `None` when
/// the batch pools fewer than 2 frames.
pub fn batch_gradients<T: Scalar>(
    model: &DapaModel<T>,
    batch: &[&WindowSample<T>],
    dropout: f64,
    core_only: bool,
    rng: &RngStream,
) -> Result<Option<BatchGradients<T>>> {
    let forwards: Vec<(Tape<T>, Bound, Var)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let xt = tape.constant(&w.x_t);
            let xp = tape.constant(&w.x_p);
            let mut ctx = ForwardCtx::train(dropout, rng.derive(i as u64));
            let y = model.forward(&mut tape, &bound, xt, xp, &w.domain, &mut ctx)?;
            Ok((tape, bound, y))
        })
        .collect::<Result<_>>()?;

    let positions: Vec<Vec<usize>> = batch.iter().map(|w| selected_positions(w, core_only)).collect();
    let mut pooled = Vec::new();
    let mut truth = Vec::new();
    for ((w, (tape, _, y)), pos) in batch.iter().zip(&forwards).zip(&positions) {
        let values = tape.value(*y);
        for &p in pos {
            pooled.push(values[p]);
            truth.push(w.y[p]);
        }
    }
    if pooled.len() < 2 {
        return Ok(None);
    }
    let mut loss_tape = Tape::new();
    let m = pooled.len();
    let pred = loss_tape.param(&Tensor::new(vec![m], pooled)?);
    let loss = loss_tape.ccc_loss(pred, &truth)?;
    let loss_value = loss_tape.value(loss)[0].as_f64();
    let d_pred = loss_tape
        .backward(loss)?
        .get(pred)
        .map(<[T]>::to_vec)
        .unwrap_or_else(|| vec![T::zero(); m]);

    let mut offsets = Vec::with_capacity(batch.len());
    let mut acc = 0;
    for pos in &positions {
        offsets.push(acc);
        acc += pos.len();
    }
    let sizes: Vec<usize> = model.params.tensors().iter().map(Tensor::numel).collect();
    let indices: Vec<usize> = (0..batch.len()).collect();
    let group_sums: Vec<Vec<Vec<T>>> = indices
        .par_chunks(GRAD_GROUP)
        .map(|group| {
            let mut sum: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            for &i in group {
                let (tape, bound, y) = &forwards[i];
                let mut seed = vec![T::zero(); tape.value(*y).len()];
                for (k, &p) in positions[i].iter().enumerate() {
                    seed[p] = d_pred[offsets[i] + k];
                }
                let g = tape.backward_from(*y, &seed)?;
                for (s, &v) in sum.iter_mut().zip(bound.vars()) {
                    if let Some(gv) = g.get(v) {
                        s.iter_mut().zip(gv).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            Ok(sum)
        })
        .collect::<Result<_>>()?;
    let mut grads = sizes.iter().map(|&n| vec![T::zero(); n]).collect::<Vec<_>>();
    for part in group_sums {
        for (g, p) in grads.iter_mut().zip(part) {
            g.iter_mut().zip(p).for_each(|(a, b)| *a = *a + b);
        }
    }
    Ok(Some(BatchGradients {
        loss: loss_value,
        grads,
    }))
}

/// Full optimisation state; everything needed to continue bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: DapaModel<T>,
    pub cfg: TrainConfig,
    pub adam: AdamState<T>,
    pub ema: EmaState<T>,
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<HistoryRecord>,
    pub best_val_ccc: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Training and validation windows prepared once per run.
pub struct PreparedCorpus<T> {
    pub train: Corpus,
    pub val: Corpus,
    pub windows: Vec<WindowSample<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: DapaModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.config.window_len != cfg.window.len() {
            return Err(DapaError::Config(format!(
                "model.window_len {} does not match the window scheme length {}",
                model.config.window_len,
                cfg.window.len()
            )));
        }
        let adam = AdamState::new(&model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let ema = EmaState::new(&model.params, cfg.ema_decay);
        Ok(Self {
            model,
            cfg,
            adam,
            ema,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            best_val_ccc: None,
            best_epoch: None,
        })
    }

    /// Model carrying the EMA weights; live parameters are untouched.
    pub fn ema_model(&self) -> Result<DapaModel<T>> {
        self.model.with_params(&self.ema.shadow)
    }

    pub fn prepare(&self, corpus: &Corpus) -> Result<PreparedCorpus<T>> {
        let train = corpus.split(Split::Train);
        if train.is_empty() {
            return Err(DapaError::Config(
                "the corpus has no training sessions; at least one domain is required".into(),
            ));
        }
        if Some(self.model.config.d_in) != train.feature_dim() {
            return Err(DapaError::Config(format!(
                "model.d_in is {} but the corpus has {} features",
                self.model.config.d_in,
                train.feature_dim().unwrap_or(0)
            )));
        }
        let known = self.model.domains();
        if let Some(d) = corpus.domains().into_iter().find(|d| !known.contains(d)) {
            return Err(DapaError::Lookup(format!(
                "corpus domain '{d}' is not registered in the model (known: {})",
                known.join(", ")
            )));
        }
        let windows = train
            .sessions
            .par_iter()
            .map(|s| segment_windows::<T>(s, &self.cfg.window))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        Ok(PreparedCorpus {
            val: corpus.split(Split::Val),
            train,
            windows,
        })
    }

    fn score(&self, model: &DapaModel<T>, corpus: &Corpus) -> Result<Option<f64>> {
        if corpus.is_empty() {
            return Ok(None);
        }
        let report = evaluate_corpus(model, corpus, &self.cfg.window, &|s| s.domain.clone(), "ema")?;
        Ok(Some(report.global))
    }

    /// One pass over the shuffled training windows followed by EMA scoring.
    pub fn run_epoch(&mut self, data: &PreparedCorpus<T>) -> Result<HistoryRecord> {
        let epoch = self.epoch;
        let order = RngStream::new(self.cfg.seed)
            .derive_path(&[SHUFFLE_KEY, epoch as u64])
            .permutation(data.windows.len());
        let dropout_root = RngStream::new(self.cfg.seed).derive(DROPOUT_KEY);
        let mut losses = Vec::new();
        let mut lr = lr_at(&self.cfg, self.step, epoch);
        for chunk in order.chunks(self.cfg.batch_train) {
            let batch: Vec<&WindowSample<T>> = chunk.iter().map(|&i| &data.windows[i]).collect();
            let rng = dropout_root.derive_path(&[epoch as u64, self.step]);
            let Some(bg) = batch_gradients(&self.model, &batch, self.cfg.dropout, self.cfg.loss_on_core_only, &rng)?
            else {
                log::warn!("epoch {} step {}: batch pools fewer than 2 frames, skipped", epoch + 1, self.step);
                continue;
            };
            if !bg.loss.is_finite() {
                return Err(DapaError::NonFinite(format!(
                    "loss is {} at epoch {} step {}",
                    bg.loss,
                    epoch + 1,
                    self.step
                )));
            }
            // Steps count from 1 so the first update already has a nonzero rate.
            lr = lr_at(&self.cfg, self.step + 1, epoch);
            self.adam.step(&mut self.model.params, &bg.grads, lr).map_err(|e| match e {
                DapaError::NonFinite(m) => {
                    DapaError::NonFinite(format!("{m} (epoch {} step {})", epoch + 1, self.step))
                }
                other => other,
            })?;
            self.ema.update(self.model.params.tensors())?;
            self.step += 1;
            losses.push(bg.loss);
        }
        let ema_model = self.ema_model()?;
        let train_ccc = if self.cfg.eval_train {
            self.score(&ema_model, &data.train)?
        } else {
            None
        };
        let val_ccc = self.score(&ema_model, &data.val)?;
        self.epoch += 1;
        let record = HistoryRecord {
            epoch: self.epoch,
            step: self.step,
            lr,
            train_loss: if losses.is_empty() {
                f64::NAN
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            },
            train_ccc,
            val_ccc,
        };
        if let Some(v) = val_ccc {
            if self.best_val_ccc.is_none_or(|b| v > b) {
                self.best_val_ccc = Some(v);
                self.best_epoch = Some(self.epoch);
            }
        }
        log::info!(
            "epoch {} step {} lr {:.3e} loss {:.5} train_ccc {} val_ccc {}",
            record.epoch,
            record.step,
            record.lr,
            record.train_loss,
            record.train_ccc.map_or("-".into(), |v| format!("{v:.4}")),
            record.val_ccc.map_or("-".into(), |v| format!("{v:.4}")),
        );
        self.history.push(record.clone());
        Ok(record)
    }

    fn reached_target(&self) -> bool {
        match (self.cfg.target_train_ccc, self.history.last().and_then(|r| r.train_ccc)) {
            (Some(target), Some(c)) => c >= target,
            _ => false,
        }
    }

    /// Trains until `cfg.epochs` epochs are done, `max_epochs` more have run,
    /// or the training-CCC target is met. With `out_dir`, writes
    /// `history.csv`, the latest state to `last/` and the best-validation
    /// state to `best/` after every epoch.
    pub fn fit(&mut self, corpus: &Corpus, max_epochs: Option<usize>, out_dir: Option<&Path>) -> Result<()> {
        let data = self.prepare(corpus)?;
        let stop = max_epochs.map_or(self.cfg.epochs, |m| (self.epoch + m).min(self.cfg.epochs));
        while self.epoch < stop && !self.reached_target() {
            self.run_epoch(&data)?;
            if let Some(dir) = out_dir {
                self.write_outputs(dir)?;
            }
        }
        Ok(())
    }

    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DapaError::io(dir, e))?;
        let hist = dir.join("history.csv");
        fs::write(&hist, history_csv(&self.history)).map_err(|e| DapaError::io(&hist, e))?;
        self.save(&dir.join("last"))?;
        // Without validation scores the latest state doubles as the best one.
        if self.best_epoch.is_none() || self.best_epoch == Some(self.epoch) {
            self.save(&dir.join("best"))?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let params = &self.model.params;
        let tensors = params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            scalar: T::NAME.to_string(),
            epoch: self.epoch,
            step: self.step,
            adam_step: self.adam.step,
            best_val_ccc: self.best_val_ccc,
            best_epoch: self.best_epoch,
            domains: self.model.domains(),
            model: self.model.config.clone(),
            train: self.cfg.clone(),
            tensors,
            history: self.history.clone(),
        };
        for sub in ["params", "adam_m", "adam_v", "ema"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| DapaError::io(&d, e))?;
        }
        for (i, (name, t)) in params.iter().enumerate() {
            let file = format!("{name}.dapf");
            dapf::write_dapf(&dir.join("params").join(&file), t)?;
            dapf::write_dapf(&dir.join("adam_m").join(&file), &self.adam.m[i])?;
            dapf::write_dapf(&dir.join("adam_v").join(&file), &self.adam.v[i])?;
            dapf::write_dapf(&dir.join("ema").join(&file), &self.ema.shadow[i])?;
        }
        let text = toml::to_string(&manifest).map_err(|e| DapaError::Checkpoint(e.to_string()))?;
        let path = dir.join("checkpoint.toml");
        fs::write(&path, text).map_err(|e| DapaError::io(&path, e))
    }

    /// Rebuilds a trainer from `dir`; nothing is returned unless every
    /// tensor loads with the recorded name and shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_checkpoint_manifest(dir)?;
        if manifest.scalar != T::NAME {
            return Err(DapaError::Checkpoint(format!(
                "checkpoint stores {} values, requested {}",
                manifest.scalar,
                T::NAME
            )));
        }
        let mut model = DapaModel::<T>::new(manifest.model.clone(), &manifest.domains, 0)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        let recorded: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
        if names.len() != recorded.len() || names.iter().zip(&recorded).any(|(a, b)| a != b) {
            return Err(DapaError::Checkpoint(
                "parameter list does not match the recorded model configuration".into(),
            ));
        }
        let read_all = |sub: &str| -> Result<Vec<Tensor<T>>> {
            manifest
                .tensors
                .iter()
                .map(|e| read_tensor(&dir.join(sub).join(format!("{}.dapf", e.name)), &e.name, &e.shape))
                .collect()
        };
        let params = read_all("params")?;
        let m = read_all("adam_m")?;
        let v = read_all("adam_v")?;
        let shadow = read_all("ema")?;
        model.params.assign(&params).map_err(|e| DapaError::Checkpoint(e.to_string()))?;
        let cfg = manifest.train;
        cfg.validate()?;
        Ok(Self {
            adam: AdamState {
                m,
                v,
                step: manifest.adam_step,
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
            },
            ema: EmaState {
                shadow,
                decay: cfg.ema_decay,
            },
            model,
            cfg,
            epoch: manifest.epoch,
            step: manifest.step,
            history: manifest.history,
            best_val_ccc: manifest.best_val_ccc,
            best_epoch: manifest.best_epoch,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    scalar: String,
    epoch: usize,
    step: u64,
    adam_step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_val_ccc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    domains: Vec<String>,
    model: ModelConfig,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    history: Vec<HistoryRecord>,
}

fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("checkpoint.toml");
    let text = fs::read_to_string(&path).map_err(|e| DapaError::io(&path, e))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| DapaError::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(DapaError::Checkpoint(format!(
            "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

fn read_tensor<T: Scalar>(path: &Path, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t = dapf::read_dapf::<T>(path).map_err(|e| DapaError::Checkpoint(format!("tensor '{name}': {e}")))?;
    if t.numel() != shape.iter().product::<usize>() {
        return Err(DapaError::Checkpoint(format!(
            "tensor '{name}' has {} values, expected shape {shape:?}",
            t.numel()
        )));
    }
    t.reshape(shape.to_vec())
}

/// Scalar type recorded in a checkpoint (`"f32"` or `"f64"`).
pub fn checkpoint_scalar(dir: &Path) -> Result<String> {
    Ok(read_checkpoint_manifest(dir)?.scalar)
}

/// Model with EMA weights and the training configuration, for evaluation.
pub fn load_inference_model<T: Scalar>(dir: &Path) -> Result<(DapaModel<T>, TrainConfig)> {
    let trainer = Trainer::<T>::load(dir)?;
    Ok((trainer.ema_model()?, trainer.cfg))
}

/// Builds a trainer, fits it on the corpus and returns it.
pub fn run_training<T: Scalar>(
    model: DapaModel<T>,
    corpus: &Corpus,
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Trainer<T>> {
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.fit(corpus, None, out_dir)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_corpus, SyntheticSpec};
    use crate::gradcheck::finite_diff_check_many;

    fn tiny_model_cfg(d_in: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            d_prompt: 2,
            d_model: 4,
            lstm_layers: 1,
            head_hidden: vec![4],
            window_len: 12,
            ..ModelConfig::default()
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            lr_peak: 1e-2,
            warmup_steps: 2,
            cosine_t_max: 50,
            epochs: 5,
            batch_train: 4,
            ema_decay: 0.5,
            window: WindowScheme::new(4, 4).unwrap(),
            ..TrainConfig::default()
        }
    }

    fn corpus() -> Corpus {
        synthetic_corpus(&SyntheticSpec {
            num_domains: 2,
            sessions_per_domain: 2,
            frames_per_session: 30,
            feature_dim: 3,
            val_sessions_per_domain: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn trainer<T: Scalar>(cfg: TrainConfig) -> Trainer<T> {
        let c = corpus();
        let model = DapaModel::new(tiny_model_cfg(3), &c.domains(), cfg.seed).unwrap();
        Trainer::new(model, cfg).unwrap()
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert!((lr_at(&cfg, 200, 0) - 2.5e-5).abs() < 1e-18);
        assert!((lr_at(&cfg, 400, 0) - 5e-5).abs() < 1e-18);
        assert!((lr_at(&cfg, 5000, 5) - 2.5e-5).abs() < 1e-18);
        assert!(lr_at(&cfg, 5000, 10).abs() < 1e-20);
        assert_eq!(lr_at(&cfg, 5000, 25), lr_at(&cfg, 5000, 10));
        assert_eq!(lr_at(&cfg, 0, 0), 0.0);
        assert!((lr_at(&cfg, 399, 0) - lr_at(&cfg, 400, 0)).abs() < 2e-7);
    }

    fn one_param_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = one_param_store(0.3);
        let mut adam = AdamState::new(&p, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &[vec![1.0]], 0.1).unwrap();
        let expect = 0.3 - 0.1 / (1.0 + 1e-8);
        assert!((p.tensors()[0].data()[0] - expect).abs() < 1e-9);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_zero_gradient_and_non_finite() {
        let mut p = one_param_store(0.3);
        let mut adam = AdamState::new(&p, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.3);
        let before = (p.clone(), adam.clone());
        let e = adam.step(&mut p, &[vec![f64::NAN]], 0.1).unwrap_err();
        assert!(matches!(e, DapaError::NonFinite(ref m) if m.contains("'w'")));
        assert_eq!(p.tensors(), before.0.tensors());
        assert_eq!(adam, before.1);
    }

    #[test]
    fn ema_cases() {
        let p = one_param_store(1.0);
        let mut ema = EmaState::new(&one_param_store(0.0), 0.5);
        ema.update(p.tensors()).unwrap();
        assert_eq!(ema.shadow[0].data()[0], 0.5);
        let mut ema = EmaState::new(&one_param_store(-3.0), 0.0);
        ema.update(p.tensors()).unwrap();
        assert_eq!(ema.shadow[0].data()[0], 1.0);
        let decay = 0.99;
        let mut ema = EmaState::new(&one_param_store(0.0), decay);
        for _ in 0..(10.0 / (1.0 - decay)) as usize {
            ema.update(p.tensors()).unwrap();
        }
        assert!((ema.shadow[0].data()[0] - 1.0).abs() < 1e-4);
        for _ in 0..2000 {
            ema.update(p.tensors()).unwrap();
        }
        assert!((ema.shadow[0].data()[0] - 1.0).abs() < 1e-6);
        let wrong = vec![Tensor::<f64>::zeros(&[2])];
        assert!(ema.update(&wrong).is_err());
    }

    #[test]
    fn pooled_batch_gradient_matches_finite_differences() {
        let t = trainer::<f64>(tiny_train_cfg());
        let data = t.prepare(&corpus()).unwrap();
        let batch: Vec<&WindowSample<f64>> = data.windows.iter().take(3).collect();
        let rng = RngStream::new(7);
        let bg = batch_gradients(&t.model, &batch, 0.1, true, &rng).unwrap().unwrap();
        let model = &t.model;
        let check = finite_diff_check_many(
            |tape, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                let mut preds = Vec::new();
                let mut truth = Vec::new();
                for (i, w) in batch.iter().enumerate() {
                    let xt = tape.constant(&w.x_t);
                    let xp = tape.constant(&w.x_p);
                    let mut ctx = ForwardCtx::train(0.1, rng.derive(i as u64));
                    let y = model.forward(tape, &bound, xt, xp, &w.domain, &mut ctx)?;
                    for p in selected_positions(w, true) {
                        preds.push(tape.slice(y, 0, p, 1)?);
                        truth.push(w.y[p]);
                    }
                }
                let pooled = tape.concat(&preds, 0)?;
                tape.ccc_loss(pooled, &truth)
            },
            model.params.tensors(),
            1e-3,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
        // The batch gradient must equal the single-tape gradient above.
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for (i, w) in batch.iter().enumerate() {
            let xt = tape.constant(&w.x_t);
            let xp = tape.constant(&w.x_p);
            let mut ctx = ForwardCtx::train(0.1, rng.derive(i as u64));
            let y = model.forward(&mut tape, &bound, xt, xp, &w.domain, &mut ctx).unwrap();
            for p in selected_positions(w, true) {
                preds.push(tape.slice(y, 0, p, 1).unwrap());
                truth.push(w.y[p]);
            }
        }
        let pooled = tape.concat(&preds, 0).unwrap();
        let loss = tape.ccc_loss(pooled, &truth).unwrap();
        assert!((tape.value(loss)[0] - bg.loss).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        for (v, got) in bound.vars().iter().zip(&bg.grads) {
            let want = g.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; got.len()]);
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn one_epoch_writes_one_record_and_loadable_checkpoint() {
        let mut t = trainer::<f32>(TrainConfig { epochs: 1, ..tiny_train_cfg() });
        let dir = tempfile::tempdir().unwrap();
        t.fit(&corpus(), None, Some(dir.path())).unwrap();
        assert_eq!(t.history.len(), 1);
        let csv = fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(t.history[0].val_ccc.is_some());
        let back = Trainer::<f32>::load(&dir.path().join("last")).unwrap();
        assert_eq!(back.model.params.tensors(), t.model.params.tensors());
        assert_eq!(back.adam, t.adam);
        assert_eq!(back.ema, t.ema);
        assert_eq!(back.history, t.history);
        assert_eq!((back.epoch, back.step), (t.epoch, t.step));
        assert!(Trainer::<f64>::load(&dir.path().join("last")).is_err());
        let (m, _) = load_inference_model::<f32>(&dir.path().join("best")).unwrap();
        assert_eq!(m.params.tensors(), t.ema.shadow.as_slice());
    }

    #[test]
    fn zero_rate_keeps_parameters() {
        let mut t = trainer::<f32>(TrainConfig { lr_peak: 0.0, epochs: 2, ..tiny_train_cfg() });
        let before = t.model.params.tensors().to_vec();
        t.fit(&corpus(), None, None).unwrap();
        assert_eq!(t.model.params.tensors(), before.as_slice());
        assert!(t.step > 0);
    }

    #[test]
    fn ema_scoring_leaves_live_weights() {
        let mut t = trainer::<f32>(TrainConfig { epochs: 1, ..tiny_train_cfg() });
        let data = t.prepare(&corpus()).unwrap();
        t.run_epoch(&data).unwrap();
        let live = t.model.params.tensors().to_vec();
        assert_ne!(live, t.ema.shadow);
        t.score(&t.ema_model().unwrap(), &data.val).unwrap();
        assert_eq!(t.model.params.tensors(), live.as_slice());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let full = {
            let mut t = trainer::<f64>(TrainConfig { epochs: 4, ..tiny_train_cfg() });
            t.fit(&corpus(), None, None).unwrap();
            t
        };
        let again = {
            let mut t = trainer::<f64>(TrainConfig { epochs: 4, ..tiny_train_cfg() });
            t.fit(&corpus(), None, None).unwrap();
            t
        };
        assert_eq!(history_csv(&full.history), history_csv(&again.history));
        assert_eq!(full.model.params.tensors(), again.model.params.tensors());

        let dir = tempfile::tempdir().unwrap();
        let mut first = trainer::<f64>(TrainConfig { epochs: 4, ..tiny_train_cfg() });
        first.fit(&corpus(), Some(2), Some(dir.path())).unwrap();
        assert_eq!(first.history.len(), 2);
        let mut resumed = Trainer::<f64>::load(&dir.path().join("last")).unwrap();
        resumed.fit(&corpus(), None, None).unwrap();
        assert_eq!(history_csv(&resumed.history), history_csv(&full.history));
        assert_eq!(resumed.model.params.tensors(), full.model.params.tensors());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut t = trainer::<f32>(TrainConfig { epochs: 2, batch_train: 7, ..tiny_train_cfg() });
                t.fit(&corpus(), None, None).unwrap();
                (history_csv(&t.history), t.model.params.tensors().to_vec())
            })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn corrupted_checkpoints_fail_cleanly() {
        let mut t = trainer::<f32>(TrainConfig { epochs: 1, ..tiny_train_cfg() });
        let dir = tempfile::tempdir().unwrap();
        t.fit(&corpus(), None, Some(dir.path())).unwrap();
        let last = dir.path().join("last");
        let victim = last.join("ema").join("head.fc0.weight.dapf");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
        let e = Trainer::<f32>::load(&last).unwrap_err().to_string();
        assert!(e.contains("head.fc0.weight"), "{e}");

        fs::write(&victim, &bytes).unwrap();
        let mf = last.join("checkpoint.toml");
        let text = fs::read_to_string(&mf).unwrap();
        fs::write(&mf, text.replace("format_version = 1", "format_version = 9")).unwrap();
        assert!(Trainer::<f32>::load(&last).is_err());
        fs::write(&mf, "garbage = [").unwrap();
        assert!(Trainer::<f32>::load(&last).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = corpus();
        let model = DapaModel::<f32>::new(tiny_model_cfg(3), &["domain00".to_string()], 1).unwrap();
        let t = Trainer::new(model, tiny_train_cfg()).unwrap();
        assert!(matches!(t.prepare(&c), Err(DapaError::Lookup(_))));
        let t = trainer::<f32>(tiny_train_cfg());
        assert!(matches!(t.prepare(&Corpus::default()), Err(DapaError::Config(_))));
        let model = DapaModel::<f32>::new(tiny_model_cfg(3), &c.domains(), 1).unwrap();
        assert!(Trainer::new(model, TrainConfig::default()).is_err());
        assert!(TrainConfig { warmup_steps: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
