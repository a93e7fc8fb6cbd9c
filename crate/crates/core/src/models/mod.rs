//! Equivariant velocity predictors.
//!
//! Both backbones map a state `(x, v)` to a velocity
//! `v̂_i = φ_v(h_i) v_i + (1/(N-1)) Σ_{j≠i} (x_i - x_j) m_ij`, where the scalar
//! weight `m_ij` depends on positions only through `|x_i - x_j|^2`. The radial
//! field variant additionally multiplies by `|v_i|` and builds messages from
//! distance and edge attribute alone.

mod egnn;
mod graph;
mod rf;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BoundParams, ParamStore, Tape, Tensor, Var};
use crate::nbody::{SystemState, Vec3};

pub use egnn::EgnnArch;
pub use graph::{BatchGraph, FeatureNorm, GraphVars};
pub use rf::RfArch;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("velocity prediction needs at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("feature dimension {got} does not match hidden size {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("checkpoint tensor {name}: {message}")]
    Checkpoint { name: String, message: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Egnn,
    Rf,
}

/// Architecture of a backbone. `layers` counts message-passing layers of the
/// EGNN stack; the radial field model always uses one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: BackboneKind,
    pub hidden: usize,
    pub layers: usize,
    pub layer_norm: bool,
    pub feature_norm: Option<FeatureNorm>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Egnn,
            hidden: 64,
            layers: 4,
            layer_norm: true,
            feature_norm: None,
        }
    }
}

/// How output layers are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Coordinate-message output zeroed and velocity gate fixed at one, so an
    /// untrained model predicts `v̂ = v`.
    ConstantEstimator,
    /// Every layer drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
enum Arch {
    Egnn(EgnnArch),
    Rf(RfArch),
}

/// A backbone together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    arch: Arch,
}

/// Velocity predicted for one system.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityPrediction {
    pub v_hat: Vec<Vec3>,
    pub x_hat_next: Option<Vec<Vec3>>,
}

/// Tape handles needed by a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx<'a> {
    pub params: &'a BoundParams,
    pub graph: &'a BatchGraph,
    pub vars: GraphVars,
}

impl Model {
    pub fn new(config: ModelConfig, init: Init, seed: u64) -> Self {
        assert!(config.hidden > 0 && config.layers > 0, "hidden size and layer count must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let arch = match config.kind {
            BackboneKind::Egnn => Arch::Egnn(EgnnArch::new(&mut params, &config, init, &mut rng)),
            BackboneKind::Rf => Arch::Rf(RfArch::new(&mut params, &config, init, &mut rng)),
        };
        Self { config, params, arch }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records the velocity prediction for every node of `ctx.graph`.
    pub fn velocity(&self, tape: &mut Tape, ctx: &ForwardCtx<'_>, x: Var, v: Var) -> Result<Var, ModelError> {
        let out = match &self.arch {
            Arch::Egnn(a) => a.velocity(tape, ctx, x, v)?,
            Arch::Rf(a) => a.velocity(tape, ctx, x, v)?,
        };
        Ok(out)
    }

    /// Builds a graph for `state`, records a fresh tape and returns the
    /// predicted velocities.
    pub fn predict_velocity(&self, state: &SystemState) -> Result<VelocityPrediction, ModelError> {
        let graph = BatchGraph::new(&[&state.charges], self.config.feature_norm)?;
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let vars = graph.bind(&mut tape);
        let ctx = ForwardCtx {
            params: &params,
            graph: &graph,
            vars,
        };
        let x = tape.constant(Tensor::from_rows3(&state.positions));
        let v = tape.constant(Tensor::from_rows3(&state.velocities));
        let out = self.velocity(&mut tape, &ctx, x, v)?;
        Ok(VelocityPrediction {
            v_hat: tape.value(out).to_rows3(),
            x_hat_next: None,
        })
    }

    /// Scalar coordinate weight `m_ij` for one ordered pair, given node
    /// features of the final message layer.
    pub fn message(&self, h_i: &[f64], h_j: &[f64], x_i: Vec3, x_j: Vec3, e_ij: f64) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let d = [x_i[0] - x_j[0], x_i[1] - x_j[1], x_i[2] - x_j[2]];
        let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let out = match &self.arch {
            Arch::Egnn(a) => {
                for h in [h_i, h_j] {
                    if h.len() != self.config.hidden {
                        return Err(ModelError::Dimension {
                            expected: self.config.hidden,
                            got: h.len(),
                        });
                    }
                }
                a.pair_message(&mut tape, &params, h_i, h_j, d2, e_ij)?
            }
            Arch::Rf(a) => a.pair_message(&mut tape, &params, d2, e_ij)?,
        };
        Ok(tape.value(out).item())
    }

    /// Named tensors for checkpointing.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect()
    }

    /// Rebuilds a model of `config` and overwrites its parameters from
    /// `tensors`, which must match names and shapes exactly.
    pub fn from_named_tensors(config: ModelConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self, ModelError> {
        let mut model = Model::new(config, Init::Random, 0);
        if tensors.len() != model.params.len() {
            return Err(ModelError::Checkpoint {
                name: "*".into(),
                message: format!("expected {} tensors, found {}", model.params.len(), tensors.len()),
            });
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let src = tensors.get(&name).ok_or_else(|| ModelError::Checkpoint {
                name: name.clone(),
                message: "missing".into(),
            })?;
            let dst = model.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(ModelError::Checkpoint {
                    name,
                    message: format!("shape {:?}, expected {:?}", src.shape(), dst.shape()),
                });
            }
            *dst = src.clone();
        }
        Ok(model)
    }
}
