//! Newton–Cotes rollout around a velocity backbone.
//!
//! The backbone is applied recurrently to produce `K + 1` velocity estimates
//! at `t^k = kT/K`; the terminal coordinate is
//! `x̂^T = x^0 + (T/K) Σ_k w^k v̂^k` with closed Newton–Cotes weights
//! (`x^0 + T v̂^0` for `K = 0`).
//!
//! Recurrence (default `QuadratureNodes::Outputs`):
//!
//! ```text
//! v̂^0 = M(x^0, v^0)
//! x̂^i = x̂^{i-1} + v̂^{i-1} T/K           i = 1..K
//! v̂^i = M(x̂^i, v̂^{i-1})
//! ```
//!
//! With `QuadratureNodes::Inputs` the first node is the raw input velocity
//! `v^0` instead of the backbone's output on it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::models::{BatchGraph, FeatureNorm, ForwardCtx, Model, ModelError};
use crate::nbody::{SystemState, TrajectorySample};
use crate::quadrature::{NcWeights, QuadratureError, MAX_ORDER};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("non-finite value at rollout step {step}")]
    NonFinite { step: usize },
    #[error("trace has {trace} velocities but the rule of order {order} needs {}", order + 1)]
    OrderMismatch { trace: usize, order: usize },
    #[error("velocity regularisation needs frames at the {order}+1 nodes; sample {seed} has k = {k}")]
    MissingIntermediate { seed: u64, k: usize, order: usize },
    #[error("sample {seed} spans {sample} time units but the rollout window is {config}")]
    WindowMismatch { seed: u64, sample: f64, config: f64 },
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Which velocities serve as the `K + 1` quadrature nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureNodes {
    /// Every node is a backbone output.
    Outputs,
    /// Node 0 is the observed input velocity.
    Inputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Newton–Cotes order `K`.
    pub order: usize,
    /// Supervise every node velocity (NC⁺) in addition to the terminal position.
    pub use_velocity_reg: bool,
    pub reg_weight: f64,
    /// Multiplicative decay of `reg_weight` per epoch.
    pub reg_decay: f64,
    pub t_window: f64,
    pub quadrature_nodes: QuadratureNodes,
    /// Divide fed-back velocities by the RMS speed of their own system
    /// before re-input.
    pub normalize_feedback: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            order: 2,
            use_velocity_reg: true,
            reg_weight: 0.001,
            reg_decay: 0.999,
            t_window: 1.0,
            quadrature_nodes: QuadratureNodes::Outputs,
            normalize_feedback: true,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.order > MAX_ORDER {
            return Err(RolloutError::Config(format!("order {} exceeds {MAX_ORDER}", self.order)));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(RolloutError::Config(format!("reg_weight {} is negative", self.reg_weight)));
        }
        if !(self.t_window > 0.0 && self.t_window.is_finite()) {
            return Err(RolloutError::Config(format!("t_window {} is not positive", self.t_window)));
        }
        Ok(())
    }

    /// Velocity-regularisation weight after `epoch` decays.
    pub fn reg_weight_at(&self, epoch: usize) -> f64 {
        self.reg_weight * self.reg_decay.powi(epoch as i32)
    }

    pub fn weights(&self) -> Result<NcWeights, RolloutError> {
        Ok(NcWeights::new(self.order)?)
    }

    /// Time between consecutive nodes.
    pub fn node_spacing(&self) -> f64 {
        if self.order == 0 {
            self.t_window
        } else {
            self.t_window / self.order as f64
        }
    }
}

/// Anything that maps a state to a velocity on a tape.
pub trait Backbone {
    fn velocity(&self, tape: &mut Tape, ctx: &ForwardCtx<'_>, x: Var, v: Var) -> Result<Var, ModelError>;

    fn param_store(&self) -> Option<&ParamStore> {
        None
    }

    fn feature_norm(&self) -> Option<FeatureNorm> {
        None
    }
}

impl Backbone for Model {
    fn velocity(&self, tape: &mut Tape, ctx: &ForwardCtx<'_>, x: Var, v: Var) -> Result<Var, ModelError> {
        Model::velocity(self, tape, ctx, x, v)
    }

    fn param_store(&self) -> Option<&ParamStore> {
        Some(self.params())
    }

    fn feature_norm(&self) -> Option<FeatureNorm> {
        self.config().feature_norm
    }
}

/// Rollout recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeTrace {
    pub x0: Var,
    /// Velocity fed to the backbone for each node (node 0: the observed `v^0`).
    pub inputs: Vec<Var>,
    /// Quadrature nodes `v̂^0..v̂^K`.
    pub velocities: Vec<Var>,
    /// Intermediate coordinates `x̂^1..x̂^K`.
    pub positions: Vec<Var>,
    /// `x̂^T`.
    pub prediction: Var,
}

/// Values of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub x0: Tensor,
    pub inputs: Vec<Tensor>,
    pub velocities: Vec<Tensor>,
    pub positions: Vec<Tensor>,
    pub prediction: Tensor,
}

impl RolloutTrace {
    pub fn from_tape(tape: &Tape, trace: &TapeTrace) -> Self {
        let vals = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).clone()).collect();
        Self {
            x0: tape.value(trace.x0).clone(),
            inputs: vals(&trace.inputs),
            velocities: vals(&trace.velocities),
            positions: vals(&trace.positions),
            prediction: tape.value(trace.prediction).clone(),
        }
    }
}

fn check_finite(tape: &Tape, var: Var, step: usize) -> Result<(), RolloutError> {
    if tape.value(var).is_finite() {
        Ok(())
    } else {
        Err(RolloutError::NonFinite { step })
    }
}

/// Divides every node velocity by the RMS speed of its own system,
/// `v_i / sqrt(mean_j |v_j|^2 + 1e-24)`, differentiably.
fn normalize_per_system(tape: &mut Tape, graph: &BatchGraph, v: Var) -> Result<Var, AutodiffError> {
    let systems = graph.node_systems().clone();
    let sq = tape.row_squared_norm(v)?;
    let per_system = tape.scatter_add_rows(sq, systems.clone(), graph.num_systems())?;
    let inv_n = tape.constant(graph.inverse_sizes());
    let mean = tape.mul_rows(per_system, inv_n)?;
    let floor = tape.constant(Tensor::full(&[graph.num_systems(), 1], 1e-24));
    let mean = tape.add(mean, floor)?;
    let inv_rms = tape.rsqrt(mean)?;
    let inv_rms = tape.gather_rows(inv_rms, systems)?;
    tape.mul_rows(v, inv_rms)
}

/// Records `x^0 + Σ_k c_k v̂^k` with `c_k = w^k · T/K`.
pub fn predict_on_tape(
    tape: &mut Tape,
    x0: Var,
    velocities: &[Var],
    weights: &NcWeights,
    t_window: f64,
) -> Result<Var, RolloutError> {
    if velocities.len() != weights.order() + 1 {
        return Err(RolloutError::OrderMismatch {
            trace: velocities.len(),
            order: weights.order(),
        });
    }
    let mut acc = x0;
    for (v, c) in velocities.iter().zip(weights.scaled(t_window)) {
        let term = tape.scale(*v, c)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Terminal coordinate from node velocities, `x^0 + (T/K) Σ_k w^k v̂^k`.
pub fn predict(x0: &Tensor, velocities: &[Tensor], weights: &NcWeights, t_window: f64) -> Result<Tensor, RolloutError> {
    if velocities.len() != weights.order() + 1 {
        return Err(RolloutError::OrderMismatch {
            trace: velocities.len(),
            order: weights.order(),
        });
    }
    let mut out = x0.clone();
    for (v, c) in velocities.iter().zip(weights.scaled(t_window)) {
        if v.shape() != x0.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "predict",
                left: x0.shape().to_vec(),
                right: v.shape().to_vec(),
            }
            .into());
        }
        for (o, x) in out.data_mut().iter_mut().zip(v.data()) {
            *o += c * x;
        }
    }
    Ok(out)
}

/// Runs the recurrence for every system of `ctx.graph` at once.
pub fn rollout_on_tape<B: Backbone + ?Sized>(
    backbone: &B,
    tape: &mut Tape,
    ctx: &ForwardCtx<'_>,
    x0: Var,
    v0: Var,
    cfg: &RolloutConfig,
    weights: &NcWeights,
) -> Result<TapeTrace, RolloutError> {
    if weights.order() != cfg.order {
        return Err(RolloutError::OrderMismatch {
            trace: cfg.order + 1,
            order: weights.order(),
        });
    }
    let tau = cfg.node_spacing();
    let first = match cfg.quadrature_nodes {
        QuadratureNodes::Outputs => backbone.velocity(tape, ctx, x0, v0)?,
        QuadratureNodes::Inputs => v0,
    };
    check_finite(tape, first, 0)?;
    let mut inputs = vec![v0];
    let mut velocities = vec![first];
    let mut positions = Vec::with_capacity(cfg.order);
    let mut x_prev = x0;
    for i in 1..=cfg.order {
        let prev = velocities[i - 1];
        let advance = tape.scale(prev, tau)?;
        let x_i = tape.add(x_prev, advance)?;
        let fed = if cfg.normalize_feedback {
            normalize_per_system(tape, ctx.graph, prev)?
        } else {
            prev
        };
        let v_i = backbone.velocity(tape, ctx, x_i, fed)?;
        check_finite(tape, v_i, i)?;
        inputs.push(fed);
        velocities.push(v_i);
        positions.push(x_i);
        x_prev = x_i;
    }
    let prediction = predict_on_tape(tape, x0, &velocities, weights, cfg.t_window)?;
    Ok(TapeTrace {
        x0,
        inputs,
        velocities,
        positions,
        prediction,
    })
}

/// Tape, bound parameters and graph for a no-gradient evaluation.
pub struct Session {
    pub tape: Tape,
    pub params: crate::autodiff::BoundParams,
    pub graph: BatchGraph,
    pub vars: crate::models::GraphVars,
}

impl Session {
    pub fn new<B: Backbone + ?Sized>(backbone: &B, graph: BatchGraph) -> Self {
        let mut tape = Tape::new();
        let params = match backbone.param_store() {
            Some(store) => store.bind(&mut tape),
            None => ParamStore::new().bind(&mut tape),
        };
        let vars = graph.bind(&mut tape);
        Self {
            tape,
            params,
            graph,
            vars,
        }
    }

    pub fn ctx(&self) -> ForwardCtx<'_> {
        ForwardCtx {
            params: &self.params,
            graph: &self.graph,
            vars: self.vars,
        }
    }
}

/// Rolls out a batch of systems given as stacked `[M, 3]` tensors.
pub fn rollout_batch<B: Backbone + ?Sized>(
    backbone: &B,
    graph: &BatchGraph,
    x0: &Tensor,
    v0: &Tensor,
    cfg: &RolloutConfig,
) -> Result<RolloutTrace, RolloutError> {
    cfg.validate()?;
    let weights = cfg.weights()?;
    let mut s = Session::new(backbone, graph.clone());
    let x = s.tape.constant(x0.clone());
    let v = s.tape.constant(v0.clone());
    let ctx = ForwardCtx {
        params: &s.params,
        graph: &s.graph,
        vars: s.vars,
    };
    let trace = rollout_on_tape(backbone, &mut s.tape, &ctx, x, v, cfg, &weights)?;
    Ok(RolloutTrace::from_tape(&s.tape, &trace))
}

/// Rolls out a single system.
pub fn rollout<B: Backbone + ?Sized>(
    backbone: &B,
    state: &SystemState,
    cfg: &RolloutConfig,
) -> Result<RolloutTrace, RolloutError> {
    let graph = BatchGraph::new(&[&state.charges], backbone.feature_norm())?;
    rollout_batch(
        backbone,
        &graph,
        &Tensor::from_rows3(&state.positions),
        &Tensor::from_rows3(&state.velocities),
        cfg,
    )
}

/// Stacked tensors and targets for a set of windows.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub graph: BatchGraph,
    pub x0: Tensor,
    pub v0: Tensor,
    pub x_terminal: Tensor,
    /// Observed velocities at the `K + 1` nodes, when every sample has them.
    pub node_velocities: Option<Vec<Tensor>>,
}

impl WindowBatch {
    pub fn from_samples(
        samples: &[&TrajectorySample],
        cfg: &RolloutConfig,
        feature_norm: Option<FeatureNorm>,
    ) -> Result<Self, RolloutError> {
        if samples.is_empty() {
            return Err(RolloutError::EmptyBatch);
        }
        for s in samples {
            if (s.t_window - cfg.t_window).abs() > 1e-9 * cfg.t_window {
                return Err(RolloutError::WindowMismatch {
                    seed: s.seed,
                    sample: s.t_window,
                    config: cfg.t_window,
                });
            }
        }
        let charges: Vec<&[f64]> = samples.iter().map(|s| s.charges.as_slice()).collect();
        let graph = BatchGraph::new(&charges, feature_norm)?;
        let stack = |pick: &dyn Fn(&TrajectorySample) -> &Vec<[f64; 3]>| {
            let rows: Vec<[f64; 3]> = samples.iter().flat_map(|s| pick(s).iter().copied()).collect();
            Tensor::from_rows3(&rows)
        };
        let x0 = stack(&|s| &s.initial().x);
        let v0 = stack(&|s| &s.initial().v);
        let x_terminal = stack(&|s| &s.terminal().x);
        let nodes: Option<Vec<Vec<_>>> = samples.iter().map(|s| s.nodes_for_order(cfg.order)).collect();
        let node_velocities = nodes.map(|per_sample| {
            (0..=cfg.order)
                .map(|k| {
                    let rows: Vec<[f64; 3]> = per_sample.iter().flat_map(|f| f[k].v.iter().copied()).collect();
                    Tensor::from_rows3(&rows)
                })
                .collect()
        });
        if cfg.use_velocity_reg && node_velocities.is_none() {
            let bad = samples
                .iter()
                .find(|s| s.nodes_for_order(cfg.order).is_none())
                .expect("some sample lacks nodes");
            return Err(RolloutError::MissingIntermediate {
                seed: bad.seed,
                k: bad.k,
                order: cfg.order,
            });
        }
        Ok(Self {
            graph,
            x0,
            v0,
            x_terminal,
            node_velocities,
        })
    }

    pub fn num_systems(&self) -> usize {
        self.graph.num_systems()
    }
}

/// Loss handles on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub main: Var,
    /// Velocity regularisation; present whenever node targets are available.
    pub reg: Option<Var>,
    /// `main + λ_r reg` for NC⁺, `main` otherwise.
    pub total: Var,
}

/// Terminal-position MSE plus, when targets exist, the node-velocity MSE
/// pooled over all `K + 1` nodes. Only NC⁺ adds the latter to the total.
pub fn loss_on_tape(
    tape: &mut Tape,
    trace: &TapeTrace,
    x_terminal: Var,
    node_targets: Option<&[Var]>,
    cfg: &RolloutConfig,
    epoch: usize,
) -> Result<LossTerms, RolloutError> {
    let main = tape.mse(trace.prediction, x_terminal)?;
    let reg = match node_targets {
        Some(targets) => {
            if targets.len() != trace.velocities.len() {
                return Err(RolloutError::OrderMismatch {
                    trace: trace.velocities.len(),
                    order: targets.len().saturating_sub(1),
                });
            }
            let mut acc: Option<Var> = None;
            for (pred, target) in trace.velocities.iter().zip(targets) {
                let term = tape.mse(*pred, *target)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            let sum = acc.expect("at least one node");
            Some(tape.scale(sum, 1.0 / targets.len() as f64)?)
        }
        None => None,
    };
    let total = if cfg.use_velocity_reg {
        let reg = reg.ok_or(RolloutError::MissingIntermediate {
            seed: 0,
            k: 0,
            order: cfg.order,
        })?;
        let weighted = tape.scale(reg, cfg.reg_weight_at(epoch))?;
        tape.add(main, weighted)?
    } else {
        main
    };
    Ok(LossTerms { main, reg, total })
}

/// Loss values of a finished trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub main: f64,
    pub reg: Option<f64>,
    pub total: f64,
}

/// Value-level counterpart of [`loss_on_tape`] for a single sample.
pub fn loss(trace: &RolloutTrace, sample: &TrajectorySample, cfg: &RolloutConfig, epoch: usize) -> Result<LossValues, RolloutError> {
    let mut tape = Tape::new();
    let var = |tape: &mut Tape, t: &Tensor| tape.constant(t.clone());
    let tape_trace = TapeTrace {
        x0: var(&mut tape, &trace.x0),
        inputs: trace.inputs.iter().map(|t| var(&mut tape, t)).collect(),
        velocities: trace.velocities.iter().map(|t| var(&mut tape, t)).collect(),
        positions: trace.positions.iter().map(|t| var(&mut tape, t)).collect(),
        prediction: var(&mut tape, &trace.prediction),
    };
    let target = tape.constant(Tensor::from_rows3(&sample.terminal().x));
    let nodes = sample
        .nodes_for_order(trace.velocities.len() - 1)
        .map(|frames| frames.iter().map(|f| tape.constant(Tensor::from_rows3(&f.v))).collect::<Vec<_>>());
    if cfg.use_velocity_reg && nodes.is_none() {
        return Err(RolloutError::MissingIntermediate {
            seed: sample.seed,
            k: sample.k,
            order: cfg.order,
        });
    }
    let terms = loss_on_tape(&mut tape, &tape_trace, target, nodes.as_deref(), cfg, epoch)?;
    Ok(LossValues {
        main: tape.value(terms.main).item(),
        reg: terms.reg.map(|r| tape.value(r).item()),
        total: tape.value(terms.total).item(),
    })
}

/// One emitted state of a consecutive prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedFrame {
    pub t: f64,
    pub positions: Tensor,
    pub velocities: Tensor,
}

/// Chains windows. Within a window the ordinary rollout runs; each window
/// emits a state per node time `t^1..t^K` (positions `x̂^i`, the last being
/// `x̂^T`), or one state at `T` for order 0. The next window starts from the
/// latest predicted positions with the mean velocity of the `K + 1` most
/// recent states. For order 0 this is the last output itself.
///
/// Stops early, with a warning, once any coordinate leaves
/// `[-divergence_bound, divergence_bound]` or turns non-finite.
#[allow(clippy::too_many_arguments)]
pub fn consecutive_predict<B: Backbone + ?Sized>(
    backbone: &B,
    graph: &BatchGraph,
    x0: &Tensor,
    v0: &Tensor,
    cfg: &RolloutConfig,
    horizon_windows: usize,
    divergence_bound: f64,
) -> Result<Vec<PredictedFrame>, RolloutError> {
    if horizon_windows == 0 {
        return Err(RolloutError::Config("horizon must be at least one window".into()));
    }
    let tau = cfg.node_spacing();
    let mut history: VecDeque<Tensor> = VecDeque::with_capacity(cfg.order + 2);
    history.push_back(v0.clone());
    let mut x_in = x0.clone();
    let mut v_in = v0.clone();
    let mut frames = Vec::with_capacity(horizon_windows * cfg.order.max(1));
    for w in 0..horizon_windows {
        let t_start = w as f64 * cfg.t_window;
        let trace = match rollout_batch(backbone, graph, &x_in, &v_in, cfg) {
            Ok(t) => t,
            Err(RolloutError::NonFinite { step }) => {
                log::warn!("consecutive prediction diverged in window {w} at step {step}; truncating");
                return Ok(frames);
            }
            Err(e) => return Err(e),
        };
        let mut emitted = Vec::with_capacity(cfg.order.max(1));
        for i in 1..cfg.order {
            emitted.push(PredictedFrame {
                t: t_start + i as f64 * tau,
                positions: trace.positions[i - 1].clone(),
                velocities: trace.velocities[i].clone(),
            });
        }
        emitted.push(PredictedFrame {
            t: t_start + cfg.t_window,
            positions: trace.prediction.clone(),
            velocities: trace.velocities[cfg.order].clone(),
        });
        for f in emitted {
            let diverged = f
                .positions
                .data()
                .iter()
                .any(|x| !x.is_finite() || x.abs() > divergence_bound);
            if diverged {
                log::warn!("consecutive prediction left the bound {divergence_bound} at t = {}; truncating", f.t);
                return Ok(frames);
            }
            history.push_back(f.velocities.clone());
            if history.len() > cfg.order + 1 {
                history.pop_front();
            }
            frames.push(f);
        }
        let last = frames.last().expect("window emitted a frame");
        x_in = last.positions.clone();
        v_in = mean_tensor(history.iter());
    }
    Ok(frames)
}

/// Running mean, exact when all items are equal.
fn mean_tensor<'a>(mut items: impl Iterator<Item = &'a Tensor>) -> Tensor {
    let mut acc = items.next().expect("non-empty history").clone();
    for (k, t) in items.enumerate() {
        let n = (k + 2) as f64;
        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
            *a += (b - *a) / n;
        }
    }
    acc
}

#[cfg(test)]
mod tests;
