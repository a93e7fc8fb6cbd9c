use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

/// Training-set statistics used to z-score the scalar node feature (charge)
/// before it enters the edge attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: f64,
    pub std: f64,
}

impl FeatureNorm {
    pub fn fit<'a>(charges: impl IntoIterator<Item = &'a f64>) -> Self {
        let values: Vec<f64> = charges.into_iter().copied().collect();
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(1e-12),
        }
    }

    pub fn apply(&self, q: f64) -> f64 {
        (q - self.mean) / self.std
    }
}

/// Disjoint union of fully connected particle systems, laid out as one node
/// list. Edge `e` carries the message from `dst[e]` (sender `j`) to `src[e]`
/// (receiver `i`).
#[derive(Debug, Clone)]
pub struct BatchGraph {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    species: Arc<[usize]>,
    system_of: Arc<[usize]>,
    edge_attr: Tensor,
    inv_neighbors: Tensor,
}

/// Graph constants recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub edge_attr: Var,
    pub inv_neighbors: Var,
}

impl BatchGraph {
    /// `charges[b]` lists the charges of system `b`; every system needs at
    /// least two particles.
    pub fn new(charges: &[&[f64]], feature_norm: Option<FeatureNorm>) -> Result<Self, ModelError> {
        let sizes: Vec<usize> = charges.iter().map(|c| c.len()).collect();
        if let Some(&n) = sizes.iter().find(|&&n| n < 2) {
            return Err(ModelError::TooFewParticles(n));
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut attr = Vec::new();
        let mut species = Vec::new();
        let mut inv = Vec::new();
        let mut system_of = Vec::new();
        let mut offset = 0;
        for (b, qs) in charges.iter().enumerate() {
            offsets.push(offset);
            let n = qs.len();
            for i in 0..n {
                system_of.push(b);
                species.push(usize::from(qs[i] > 0.0));
                inv.push(1.0 / (n - 1) as f64);
                for j in (0..n).filter(|&j| j != i) {
                    src.push(offset + i);
                    dst.push(offset + j);
                    let (qi, qj) = match feature_norm {
                        Some(fnorm) => (fnorm.apply(qs[i]), fnorm.apply(qs[j])),
                        None => (qs[i], qs[j]),
                    };
                    attr.push(qi * qj);
                }
            }
            offset += n;
        }
        let e = src.len();
        Ok(Self {
            sizes,
            offsets,
            src: src.into(),
            dst: dst.into(),
            species: species.into(),
            system_of: system_of.into(),
            edge_attr: Tensor::new(vec![e, 1], attr).map_err(ModelError::Autodiff)?,
            inv_neighbors: Tensor::new(vec![offset, 1], inv).map_err(ModelError::Autodiff)?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.species.len()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn num_systems(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Node range of system `b`.
    pub fn system_range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b] + self.sizes[b]
    }

    pub fn receivers(&self) -> &Arc<[usize]> {
        &self.src
    }

    pub fn senders(&self) -> &Arc<[usize]> {
        &self.dst
    }

    pub fn species(&self) -> &Arc<[usize]> {
        &self.species
    }

    /// System index of every node.
    pub fn node_systems(&self) -> &Arc<[usize]> {
        &self.system_of
    }

    /// `[B, 1]` column of `1 / N_b`.
    pub fn inverse_sizes(&self) -> Tensor {
        let data = self.sizes.iter().map(|&n| 1.0 / n as f64).collect();
        Tensor::new(vec![self.sizes.len(), 1], data).expect("finite sizes")
    }

    pub fn bind(&self, tape: &mut Tape) -> GraphVars {
        GraphVars {
            edge_attr: tape.constant(self.edge_attr.clone()),
            inv_neighbors: tape.constant(self.inv_neighbors.clone()),
        }
    }

    /// Relative positions `x_i - x_j` per edge and their squared lengths.
    pub fn relative(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), AutodiffError> {
        let xi = tape.gather_rows(x, self.src.clone())?;
        let xj = tape.gather_rows(x, self.dst.clone())?;
        let rel = tape.sub(xi, xj)?;
        let d2 = tape.row_squared_norm(rel)?;
        Ok((rel, d2))
    }

    /// `(1/(N-1)) Σ_{j≠i} rel_ij * w_ij` for every node.
    pub fn aggregate_displacements(
        &self,
        tape: &mut Tape,
        vars: GraphVars,
        rel: Var,
        weights: Var,
    ) -> Result<Var, AutodiffError> {
        let weighted = tape.mul_rows(rel, weights)?;
        let summed = tape.scatter_add_rows(weighted, self.src.clone(), self.num_nodes())?;
        tape.mul_rows(summed, vars.inv_neighbors)
    }

    /// Sum of edge rows into their receivers.
    pub fn sum_messages(&self, tape: &mut Tape, messages: Var) -> Result<Var, AutodiffError> {
        tape.scatter_add_rows(messages, self.src.clone(), self.num_nodes())
    }
}
