use rand::Rng;

use super::egnn::zero_output;
use super::{ForwardCtx, Init, ModelConfig};
use crate::autodiff::uniform_tensor;
use crate::autodiff::{Activation, AutodiffError, BoundParams, Mlp, MlpSpec, ParamId, ParamStore, Tape, Tensor, Var};

/// Radial field backbone: messages see only `|x_i - x_j|^2` and the edge
/// attribute, and the velocity update is scaled by `|v_i|`. The velocity gate
/// reads the species embedding together with `|v_i|`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfArch {
    embedding: ParamId,
    edge: Mlp,
    coord: Mlp,
    gate: Mlp,
}

impl RfArch {
    pub(super) fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, init: Init, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let embedding = store.add("embedding", uniform_tensor(rng, &[2, d], 1.0));
        let spec = |dims: Vec<usize>, out| MlpSpec {
            dims,
            hidden_norm: cfg.layer_norm,
            output_activation: out,
        };
        let edge = Mlp::new(store, "edge", &spec(vec![2, d, d], Activation::Silu), rng);
        let coord = Mlp::new(store, "coord", &spec(vec![d, d, 1], Activation::Identity), rng);
        let gate = Mlp::new(store, "gate", &spec(vec![d + 1, d, 1], Activation::Identity), rng);
        if init == Init::ConstantEstimator {
            zero_output(store, &coord, 0.0);
            zero_output(store, &gate, 1.0);
        }
        Self {
            embedding,
            edge,
            coord,
            gate,
        }
    }

    pub(super) fn velocity(&self, tape: &mut Tape, ctx: &ForwardCtx<'_>, x: Var, v: Var) -> Result<Var, AutodiffError> {
        let p = ctx.params;
        let graph = ctx.graph;
        let h = tape.gather_rows(p.var(self.embedding), graph.species().clone())?;
        let (rel, d2) = graph.relative(tape, x)?;
        let input = tape.concat(&[d2, ctx.vars.edge_attr])?;
        let m = self.edge.forward(tape, p, input)?;
        let weights = self.coord.forward(tape, p, m)?;
        let shift = graph.aggregate_displacements(tape, ctx.vars, rel, weights)?;
        let speed = tape.row_norm(v)?;
        let gate_in = tape.concat(&[h, speed])?;
        let gate = self.gate.forward(tape, p, gate_in)?;
        let gated = tape.mul_rows(v, gate)?;
        let update = tape.add(gated, shift)?;
        tape.mul_rows(update, speed)
    }

    pub(super) fn pair_message(&self, tape: &mut Tape, p: &BoundParams, d2: f64, e_ij: f64) -> Result<Var, AutodiffError> {
        let input = tape.constant(Tensor::matrix(1, 2, vec![d2, e_ij])?);
        let m = self.edge.forward(tape, p, input)?;
        self.coord.forward(tape, p, m)
    }
}
