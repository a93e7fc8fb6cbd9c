//! Training, evaluation and the experiment runners.

mod checkpoint;
mod optim;
mod study;

use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::models::{FeatureNorm, ForwardCtx, Init, Model, ModelConfig, ModelError};
use crate::nbody::{read_dataset, worker_threads, DatasetError, SimError, TrajectorySample};
use crate::rollout::{loss_on_tape, rollout_batch, rollout_on_tape, RolloutConfig, RolloutError, Session, WindowBatch};

pub use checkpoint::{Checkpoint, CHECKPOINT_FILE, CHECKPOINT_FORMAT};
pub use optim::{adam_step, clip_gradients, decay_parameters, global_norm, AdamState};
pub use study::{consecutive_errors, long_trajectories, run_study, Report, StudyConfig, StudyKind};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{split} sample {seed} has k = {k}, which cannot serve order {order}")]
    DataOrder {
        split: &'static str,
        seed: u64,
        k: usize,
        order: usize,
    },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("training diverged in epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// Every training knob. Missing JSON keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub clip_grad_norm: f64,
    /// Decoupled weight-decay coefficient, scaled by the learning rate.
    pub param_reg: f64,
    /// Per-epoch multiplicative decay of `param_reg`.
    pub param_reg_decay: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub init: Init,
    /// Z-score charges with training-set statistics before they enter edge
    /// attributes.
    pub feature_norm: bool,
    pub rollout: RolloutConfig,
    /// Evaluate (and write a metrics row) every this many epochs.
    pub eval_every: usize,
    /// Systems per evaluation chunk.
    pub eval_batch: usize,
    pub data: DataPaths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            batch_size: 200,
            learning_rate: 5e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            clip_grad_norm: 1.0,
            param_reg: 1.0,
            param_reg_decay: 0.99,
            seed: 0,
            model: ModelConfig::default(),
            init: Init::ConstantEstimator,
            feature_norm: false,
            rollout: RolloutConfig::default(),
            eval_every: 1,
            eval_batch: 100,
            data: DataPaths::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 || self.eval_batch == 0 || self.eval_every == 0 {
            return bad("batch_size, eval_batch and eval_every must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.clip_grad_norm > 0.0) || !(self.param_reg >= 0.0) {
            return bad("learning_rate and clip_grad_norm must be positive, param_reg non-negative".into());
        }
        if self.model.hidden == 0 || self.model.layers == 0 {
            return bad("model needs a positive hidden size and layer count".into());
        }
        self.rollout.validate()?;
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Train, validation and (possibly empty) test samples.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<TrajectorySample>,
    pub valid: Vec<TrajectorySample>,
    pub test: Vec<TrajectorySample>,
}

impl TrainData {
    pub fn load(paths: &DataPaths) -> Result<Self, TrainError> {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| TrainError::Config(format!("data.{what} path missing")))
        };
        Ok(Self {
            train: read_dataset(need(&paths.train, "train")?)?,
            valid: read_dataset(need(&paths.valid, "valid")?)?,
            test: match &paths.test {
                Some(p) => read_dataset(p)?,
                None => Vec::new(),
            },
        })
    }

    /// Splits consecutive samples into `train/valid/test` of the given sizes.
    pub fn split(mut samples: Vec<TrajectorySample>, train: usize, valid: usize) -> Self {
        let test = samples.split_off((train + valid).min(samples.len()));
        let valid_set = samples.split_off(train.min(samples.len()));
        Self {
            train: samples,
            valid: valid_set,
            test,
        }
    }
}

/// Rejects samples whose frames cannot serve an order-`order` rollout: fewer
/// recorded intervals than the order, or missing node frames when velocity
/// supervision is on.
pub fn check_compatible(split: &'static str, samples: &[TrajectorySample], cfg: &RolloutConfig) -> Result<(), TrainError> {
    for s in samples {
        let short = s.k < cfg.order;
        let missing = cfg.use_velocity_reg && s.nodes_for_order(cfg.order).is_none();
        if short || missing {
            return Err(TrainError::DataOrder {
                split,
                seed: s.seed,
                k: s.k,
                order: cfg.order,
            });
        }
    }
    Ok(())
}

/// Metrics recorded at one evaluation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Mean optimised loss over the epoch's batches (weighted by batch size).
    pub train_loss: f64,
    pub valid_mse: f64,
    pub test_mse: Option<f64>,
    /// Validation MSE of predicted against true velocity at each node.
    pub intermediate_velocity_mse: Option<Vec<f64>>,
    /// Seconds since training started.
    pub wall_clock_seconds: f64,
}

impl MetricsRow {
    pub fn mean_intermediate_velocity_mse(&self) -> Option<f64> {
        self.intermediate_velocity_mse
            .as_ref()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Column order of `metrics.csv`; the per-node columns run `k0..kK`.
pub fn metrics_header(order: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "train_loss", "valid_mse", "test_mse", "ivel_mse_mean"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..=order).map(|k| format!("ivel_mse_k{k}")));
    h.push("wall_clock_seconds".into());
    h
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow], order: usize) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(metrics_header(order))?;
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.valid_mse.to_string(),
            fmt_opt(r.test_mse),
            fmt_opt(r.mean_intermediate_velocity_mse()),
        ];
        match &r.intermediate_velocity_mse {
            Some(v) => rec.extend(v.iter().map(|x| x.to_string())),
            None => rec.extend((0..=order).map(|_| String::new())),
        }
        rec.push(r.wall_clock_seconds.to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of evaluating a predictor on a set of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    /// Mean over samples of `MSE(x̂^T, x^T)`.
    pub mse: f64,
    /// Per-node mean velocity MSE, when every sample records the nodes.
    pub intermediate_velocity_mse: Option<Vec<f64>>,
}

impl EvalReport {
    /// MSE in the customary `×10⁻²` reporting unit.
    pub fn mse_e2(&self) -> f64 {
        self.mse * 100.0
    }
}

fn mse_rows(a: &Tensor, b: &Tensor, rows: std::ops::Range<usize>) -> f64 {
    let n = rows.len() * a.cols();
    let sum: f64 = rows
        .flat_map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    sum / n as f64
}

/// Per-sample terminal MSE and node-velocity MSEs for one chunk.
fn evaluate_chunk(
    model: &Model,
    cfg: &RolloutConfig,
    chunk: &[TrajectorySample],
) -> Result<Vec<(f64, Option<Vec<f64>>)>, TrainError> {
    let refs: Vec<&TrajectorySample> = chunk.iter().collect();
    let eval_cfg = RolloutConfig {
        use_velocity_reg: false,
        ..cfg.clone()
    };
    let batch = WindowBatch::from_samples(&refs, &eval_cfg, model.config().feature_norm)?;
    let trace = rollout_batch(model, &batch.graph, &batch.x0, &batch.v0, &eval_cfg)?;
    Ok((0..chunk.len())
        .map(|b| {
            let range = batch.graph.system_range(b);
            let mse = mse_rows(&trace.prediction, &batch.x_terminal, range.clone());
            let nodes = batch.node_velocities.as_ref().map(|nodes| {
                nodes
                    .iter()
                    .zip(&trace.velocities)
                    .map(|(truth, pred)| mse_rows(pred, truth, range.clone()))
                    .collect()
            });
            (mse, nodes)
        })
        .collect())
}

/// Mean terminal MSE (and node-velocity MSE) of `model` on `samples`.
/// Chunks run on `NC_DYN_THREADS` workers; results are reduced in sample order.
pub fn evaluate(model: &Model, cfg: &RolloutConfig, samples: &[TrajectorySample], chunk: usize) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let strict = RolloutConfig {
        use_velocity_reg: false,
        ..cfg.clone()
    };
    check_compatible("evaluation", samples, &strict)?;
    let chunks: Vec<&[TrajectorySample]> = samples.chunks(chunk.max(1)).collect();
    let threads = worker_threads();
    let per_chunk: Vec<Result<Vec<_>, TrainError>> = if threads <= 1 || chunks.len() == 1 {
        chunks.iter().map(|c| evaluate_chunk(model, cfg, c)).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(|| chunks.par_iter().map(|c| evaluate_chunk(model, cfg, c)).collect())
    };
    let mut mse = 0.0;
    let mut nodes: Option<Vec<f64>> = Some(vec![0.0; cfg.order + 1]);
    for result in per_chunk {
        for (m, n) in result? {
            mse += m;
            nodes = match (nodes, n) {
                (Some(mut acc), Some(n)) => {
                    acc.iter_mut().zip(n).for_each(|(a, b)| *a += b);
                    Some(acc)
                }
                _ => None,
            };
        }
    }
    let count = samples.len() as f64;
    Ok(EvalReport {
        samples: samples.len(),
        mse: mse / count,
        intermediate_velocity_mse: nodes.map(|v| v.into_iter().map(|x| x / count).collect()),
    })
}

/// Loss value and parameter gradients for one batch.
pub struct BatchGradients {
    pub total: f64,
    pub main: f64,
    pub grads: Vec<Tensor>,
}

pub fn batch_gradients(model: &Model, batch: &WindowBatch, cfg: &RolloutConfig, epoch: usize) -> Result<BatchGradients, TrainError> {
    let weights = cfg.weights()?;
    let mut s = Session::new(model, batch.graph.clone());
    let x = s.tape.constant(batch.x0.clone());
    let v = s.tape.constant(batch.v0.clone());
    let target = s.tape.constant(batch.x_terminal.clone());
    let nodes = match (&batch.node_velocities, cfg.use_velocity_reg) {
        (Some(n), true) => Some(n.iter().map(|t| s.tape.constant(t.clone())).collect::<Vec<_>>()),
        _ => None,
    };
    let ctx = ForwardCtx {
        params: &s.params,
        graph: &s.graph,
        vars: s.vars,
    };
    let trace = rollout_on_tape(model, &mut s.tape, &ctx, x, v, cfg, &weights)?;
    let terms = loss_on_tape(&mut s.tape, &trace, target, nodes.as_deref(), cfg, epoch)?;
    let g = s.tape.backward(terms.total)?;
    Ok(BatchGradients {
        total: s.tape.value(terms.total).item(),
        main: s.tape.value(terms.main).item(),
        grads: s.params.vars().iter().map(|v| g.wrt(*v)).collect(),
    })
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation MSE.
    pub best: Checkpoint,
    /// Parameters after the last epoch.
    pub last: Model,
    pub metrics: Vec<MetricsRow>,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn best_model(&self) -> Model {
        self.best.to_model().expect("checkpoint built from a live model")
    }
}

/// Minimises the terminal-position loss (plus velocity supervision for NC⁺)
/// with Adam, global-norm clipping and decoupled weight decay, evaluating on
/// the validation set every `eval_every` epochs. Deterministic per config.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if data.valid.is_empty() {
        return Err(TrainError::EmptySet("valid"));
    }
    if cfg.batch_size > data.train.len() {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            data.train.len()
        )));
    }
    check_compatible("train", &data.train, &cfg.rollout)?;
    check_compatible("valid", &data.valid, &cfg.rollout)?;
    check_compatible("test", &data.test, &cfg.rollout)?;

    let start = Instant::now();
    let mut model_cfg = cfg.model.clone();
    model_cfg.feature_norm = cfg
        .feature_norm
        .then(|| FeatureNorm::fit(data.train.iter().flat_map(|s| s.charges.iter())));
    let mut model = Model::new(model_cfg, cfg.init, cfg.seed);
    let mut adam = AdamState::new(model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = Vec::new();
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let decay = cfg.learning_rate * cfg.param_reg * cfg.param_reg_decay.powi(epoch as i32);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&TrajectorySample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = WindowBatch::from_samples(&refs, &cfg.rollout, model.config().feature_norm)?;
            let mut bg = match batch_gradients(&model, &batch, &cfg.rollout, epoch) {
                Err(TrainError::Rollout(RolloutError::NonFinite { step })) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        message: format!("non-finite velocity at rollout step {step}"),
                    })
                }
                other => other?,
            };
            if !bg.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    message: "non-finite loss".into(),
                });
            }
            loss_sum += bg.total * chunk.len() as f64;
            clip_gradients(&mut bg.grads, cfg.clip_grad_norm);
            let params = model.params_mut().tensors_mut();
            decay_parameters(params, decay);
            adam_step(params, &bg.grads, &mut adam, cfg.learning_rate, cfg.betas, cfg.eps);
        }
        let last_epoch = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.eval_every == 0 || last_epoch {
            let valid = evaluate(&model, &cfg.rollout, &data.valid, cfg.eval_batch)?;
            let test = if data.test.is_empty() {
                None
            } else {
                Some(evaluate(&model, &cfg.rollout, &data.test, cfg.eval_batch)?.mse)
            };
            let row = MetricsRow {
                epoch: epoch + 1,
                train_loss: loss_sum / data.train.len() as f64,
                valid_mse: valid.mse,
                test_mse: test,
                intermediate_velocity_mse: valid.intermediate_velocity_mse,
                wall_clock_seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {:>5}  train {:.6e}  valid {:.6e}",
                row.epoch,
                row.train_loss,
                row.valid_mse
            );
            if best.as_ref().map_or(true, |b| valid.mse < b.valid_mse) {
                best = Some(Checkpoint::new(&model, &cfg.rollout, epoch + 1, valid.mse));
            }
            metrics.push(row);
        }
    }
    Ok(TrainOutcome {
        best: best.expect("the last epoch is always evaluated"),
        last: model,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Loads the datasets named in `cfg.data`, trains, and writes `metrics.csv`
/// and `checkpoint.json` into `out_dir`.
pub fn train_to_dir(cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome, TrainError> {
    let data = TrainData::load(&cfg.data)?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out)?;
    let outcome = train(cfg, &data)?;
    write_metrics(out.join(METRICS_FILE), &outcome.metrics, cfg.rollout.order)?;
    outcome.best.save(out.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}
