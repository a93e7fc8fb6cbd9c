use rand::Rng;

use super::{ForwardCtx, Init, ModelConfig};
use crate::autodiff::uniform_tensor;
use crate::autodiff::{Activation, AutodiffError, BoundParams, Mlp, MlpSpec, ParamId, ParamStore, Tape, Tensor, Var};

/// Message network `φ_e(h_i, h_j, |x_i - x_j|^2, e_ij)`.
///
/// The first affine map is split by input block so node projections are
/// computed once per node and gathered onto edges, rather than multiplying
/// the concatenated `2D + 2` wide edge input.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeNet {
    w_recv: ParamId,
    w_send: ParamId,
    w_dist: ParamId,
    w_attr: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
    tail: Mlp,
}

impl EdgeNet {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, hidden: usize, layer_norm: bool, rng: &mut R) -> Self {
        let bound = 1.0 / ((2 * hidden + 2) as f64).sqrt();
        let w_recv = store.add(format!("{prefix}.in.w_recv"), uniform_tensor(rng, &[hidden, hidden], bound));
        let w_send = store.add(format!("{prefix}.in.w_send"), uniform_tensor(rng, &[hidden, hidden], bound));
        let w_dist = store.add(format!("{prefix}.in.w_dist"), uniform_tensor(rng, &[1, hidden], bound));
        let w_attr = store.add(format!("{prefix}.in.w_attr"), uniform_tensor(rng, &[1, hidden], bound));
        let bias = store.add(format!("{prefix}.in.b"), uniform_tensor(rng, &[hidden], bound));
        let norm = layer_norm.then(|| {
            (
                store.add(format!("{prefix}.in.ln_g"), Tensor::full(&[hidden], 1.0)),
                store.add(format!("{prefix}.in.ln_b"), Tensor::zeros(&[hidden])),
            )
        });
        let tail = Mlp::new(
            store,
            &format!("{prefix}.out"),
            &MlpSpec {
                dims: vec![hidden, hidden],
                hidden_norm: layer_norm,
                output_activation: Activation::Silu,
            },
            rng,
        );
        Self {
            w_recv,
            w_send,
            w_dist,
            w_attr,
            bias,
            norm,
            tail,
        }
    }

    /// Messages for every edge, `[E, D]`.
    fn forward(&self, tape: &mut Tape, ctx: &ForwardCtx<'_>, h: Var, d2: Var) -> Result<Var, AutodiffError> {
        let p = ctx.params;
        let recv = tape.matmul(h, p.var(self.w_recv))?;
        let send = tape.matmul(h, p.var(self.w_send))?;
        let recv = tape.gather_rows(recv, ctx.graph.receivers().clone())?;
        let send = tape.gather_rows(send, ctx.graph.senders().clone())?;
        let dist = tape.matmul(d2, p.var(self.w_dist))?;
        let attr = tape.matmul(ctx.vars.edge_attr, p.var(self.w_attr))?;
        let pre = tape.add(recv, send)?;
        let pre = tape.add(pre, dist)?;
        let pre = tape.add(pre, attr)?;
        let pre = tape.add_row(pre, p.var(self.bias))?;
        self.finish(tape, p, pre)
    }

    fn finish(&self, tape: &mut Tape, p: &BoundParams, pre: Var) -> Result<Var, AutodiffError> {
        let z = match self.norm {
            Some((g, b)) => tape.layer_norm(pre, p.var(g), p.var(b))?,
            None => pre,
        };
        let z = tape.silu(z)?;
        self.tail.forward(tape, p, z)
    }
}

/// Multi-layer EGNN. Input coordinates and velocities stay fixed across
/// layers; only node features evolve, via the residual update
/// `h^l = h^{l-1} + φ_h(h^{l-1}, Σ_j m_ij^l)`. The last layer's messages feed
/// the coordinate weight `φ_x`, and the velocity gate `φ_v` reads the features
/// entering that layer. With one layer this is the single-layer EGNN.
#[derive(Debug, Clone, PartialEq)]
pub struct EgnnArch {
    embedding: ParamId,
    edges: Vec<EdgeNet>,
    nodes: Vec<Mlp>,
    coord: Mlp,
    gate: Mlp,
}

pub(super) fn zero_output(store: &mut ParamStore, mlp: &Mlp, bias: f64) {
    let last = mlp.last();
    store.get_mut(last.weight).data_mut().fill(0.0);
    store.get_mut(last.bias).data_mut().fill(bias);
}

impl EgnnArch {
    pub(super) fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, init: Init, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let embedding = store.add("embedding", uniform_tensor(rng, &[2, d], 1.0));
        let mut edges = Vec::with_capacity(cfg.layers);
        let mut nodes = Vec::with_capacity(cfg.layers.saturating_sub(1));
        for l in 0..cfg.layers {
            edges.push(EdgeNet::new(store, &format!("layer{l}.edge"), d, cfg.layer_norm, rng));
            if l + 1 < cfg.layers {
                nodes.push(Mlp::new(
                    store,
                    &format!("layer{l}.node"),
                    &MlpSpec {
                        dims: vec![2 * d, d, d],
                        hidden_norm: cfg.layer_norm,
                        output_activation: Activation::Identity,
                    },
                    rng,
                ));
            }
        }
        let head = |store: &mut ParamStore, name: &str, rng: &mut R| {
            Mlp::new(
                store,
                name,
                &MlpSpec {
                    dims: vec![d, d, 1],
                    hidden_norm: cfg.layer_norm,
                    output_activation: Activation::Identity,
                },
                rng,
            )
        };
        let coord = head(store, "coord", rng);
        let gate = head(store, "gate", rng);
        if init == Init::ConstantEstimator {
            zero_output(store, &coord, 0.0);
            zero_output(store, &gate, 1.0);
        }
        Self {
            embedding,
            edges,
            nodes,
            coord,
            gate,
        }
    }

    pub(super) fn velocity(&self, tape: &mut Tape, ctx: &ForwardCtx<'_>, x: Var, v: Var) -> Result<Var, AutodiffError> {
        let p = ctx.params;
        let graph = ctx.graph;
        let mut h = tape.gather_rows(p.var(self.embedding), graph.species().clone())?;
        let (rel, d2) = graph.relative(tape, x)?;
        let last = self.edges.len() - 1;
        let mut messages = None;
        for (l, edge) in self.edges.iter().enumerate() {
            let m = edge.forward(tape, ctx, h, d2)?;
            if l < last {
                let agg = graph.sum_messages(tape, m)?;
                let input = tape.concat(&[h, agg])?;
                let dh = self.nodes[l].forward(tape, p, input)?;
                h = tape.add(h, dh)?;
            } else {
                messages = Some(m);
            }
        }
        let weights = self.coord.forward(tape, p, messages.expect("at least one layer"))?;
        let shift = graph.aggregate_displacements(tape, ctx.vars, rel, weights)?;
        let gate = self.gate.forward(tape, p, h)?;
        let gated = tape.mul_rows(v, gate)?;
        tape.add(gated, shift)
    }

    pub(super) fn pair_message(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        h_i: &[f64],
        h_j: &[f64],
        d2: f64,
        e_ij: f64,
    ) -> Result<Var, AutodiffError> {
        let edge = self.edges.last().expect("at least one layer");
        let d = h_i.len();
        let hi = tape.constant(Tensor::matrix(1, d, h_i.to_vec())?);
        let hj = tape.constant(Tensor::matrix(1, d, h_j.to_vec())?);
        let dist = tape.constant(Tensor::matrix(1, 1, vec![d2])?);
        let attr = tape.constant(Tensor::matrix(1, 1, vec![e_ij])?);
        let a = tape.matmul(hi, p.var(edge.w_recv))?;
        let b = tape.matmul(hj, p.var(edge.w_send))?;
        let c = tape.matmul(dist, p.var(edge.w_dist))?;
        let e = tape.matmul(attr, p.var(edge.w_attr))?;
        let pre = tape.add(a, b)?;
        let pre = tape.add(pre, c)?;
        let pre = tape.add(pre, e)?;
        let pre = tape.add_row(pre, p.var(edge.bias))?;
        let m = edge.finish(tape, p, pre)?;
        self.coord.forward(tape, p, m)
    }
}
