//! AdamW/SGD, the single-sample probe update, and the mini-batch training
//! loop.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::TokenizedSample;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ParamStore};
use crate::numcore::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::Adamw),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            ..Default::default()
        }
    }

    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            ..Default::default()
        }
    }

    /// `lr = 0` is accepted so a probe can be made inert in tests; training
    /// with it is pointless but harmless.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            shuffle: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One AdamW update of a single weight; returns the new value.
pub fn adamw_update(w: f64, g: f64, m: &mut f64, v: &mut f64, step: u64, cfg: &OptimizerConfig) -> f64 {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / (1.0 - cfg.beta1.powi(step as i32));
    let v_hat = *v / (1.0 - cfg.beta2.powi(step as i32));
    w - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * w
}

/// Optimizer with its moment buffers.
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    moments: Option<(ParamStore, ParamStore)>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            step: 0,
            moments: None,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let cfg = &self.cfg;
        let grad_tensors = grads.tensors();
        let mut param_tensors = params.tensors_mut();
        if grad_tensors.len() != param_tensors.len() {
            return Err(Error::Shape("gradient layout differs from parameters".into()));
        }
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (w, (_, g)) in param_tensors.iter_mut().zip(&grad_tensors) {
                    for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *wv = *wv - cfg.lr * gv - cfg.lr * cfg.weight_decay * *wv;
                    }
                }
            }
            OptimizerKind::Adamw => {
                let (m, v) = self
                    .moments
                    .get_or_insert_with(|| (grads.zeros_like(), grads.zeros_like()));
                let mut ms = m.tensors_mut();
                let mut vs = v.tensors_mut();
                for (i, w) in param_tensors.iter_mut().enumerate() {
                    let g = grad_tensors[i].1.data();
                    let (mt, vt) = (ms[i].data_mut(), vs[i].data_mut());
                    for (j, wv) in w.data_mut().iter_mut().enumerate() {
                        *wv = adamw_update(*wv, g[j], &mut mt[j], &mut vt[j], self.step, cfg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of probing one sample: the updated model and the sample's loss at
/// the base model.
pub struct Probe {
    pub params: ParamStore,
    pub base_loss: f64,
}

/// Fine-tunes a copy of `base` on one sample for `steps` updates from fresh
/// optimizer state. `base` is never touched.
pub fn probe_step(
    config: &ModelConfig,
    base: &ParamStore,
    sample: &TokenizedSample,
    opt: &OptimizerConfig,
    steps: usize,
) -> Result<Probe> {
    if steps == 0 {
        return Err(Error::Config("probe steps must be at least 1".into()));
    }
    let mut optimizer = Optimizer::new(opt.clone())?;
    let mut params = base.clone();
    let mut base_loss = None;
    for _ in 0..steps {
        let (loss, grads) = model::loss_and_grads(config, &params, &sample.token_ids, &sample.loss_mask)?;
        base_loss.get_or_insert(loss);
        optimizer.step(&mut params, &grads)?;
    }
    Ok(Probe {
        params,
        base_loss: base_loss.expect("at least one step"),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
}

/// Mean loss and mean gradient over a batch. Per-sample work may run in
/// parallel; the reduction is always in batch order.
pub fn batch_loss_and_grads(
    config: &ModelConfig,
    params: &ParamStore,
    batch: &[&TokenizedSample],
) -> Result<(f64, ParamStore)> {
    let per_sample: Vec<Result<(f64, ParamStore)>> = batch
        .par_iter()
        .map(|s| model::loss_and_grads(config, params, &s.token_ids, &s.loss_mask))
        .collect();
    let mut total = 0.0;
    let mut sum: Option<ParamStore> = None;
    for (s, r) in batch.iter().zip(per_sample) {
        let (loss, grads) = r.map_err(|e| e.at_sample(s.source_index))?;
        total += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => acc.add_assign(&grads)?,
        }
    }
    let mut grads = sum.ok_or_else(|| Error::Config("empty batch".into()))?;
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Mini-batch training. Without shuffling, batches follow the given order.
pub fn train(
    config: &ModelConfig,
    base: &ParamStore,
    data: &[TokenizedSample],
    opt: &OptimizerConfig,
    tc: &TrainConfig,
) -> Result<(ParamStore, Vec<LogRecord>)> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let mut optimizer = Optimizer::new(opt.clone())?;
    let mut params = base.clone();
    let mut rng = Rng::new(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    for _ in 0..tc.epochs {
        if tc.shuffle {
            rng.shuffle(&mut order);
        }
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&TokenizedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = batch_loss_and_grads(config, &params, &batch)?;
            optimizer.step(&mut params, &grads)?;
            log.push(LogRecord {
                step: optimizer.steps_taken(),
                loss,
            });
        }
    }
    Ok((params, log))
}

/// Mean over samples of each sample's masked cross-entropy.
pub fn eval_loss(config: &ModelConfig, params: &ParamStore, data: &[TokenizedSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation data is empty".into()));
    }
    let losses: Vec<Result<f64>> = data
        .par_iter()
        .map(|s| model::loss(config, params, &s.token_ids, &s.loss_mask).map_err(|e| e.at_sample(s.source_index)))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}
