use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, BoundParams, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
}

/// One affine layer, optionally followed by layer normalisation and an
/// activation (in that order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<(ParamId, ParamId)>,
    pub activation: Activation,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Shape description used to allocate an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Layer widths, input first: `[in, hidden.., out]`.
    pub dims: Vec<usize>,
    /// Layer normalisation after every hidden affine map, before its activation.
    pub hidden_norm: bool,
    pub output_activation: Activation,
}

/// Feed-forward stack; hidden layers use SiLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

pub(crate) fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.gen_range(-bound..=bound);
    }
    t
}

impl Mlp {
    /// Allocates parameters named `{prefix}.{layer}.{w,b,ln_g,ln_b}` with
    /// weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: &MlpSpec, rng: &mut R) -> Self {
        assert!(spec.dims.len() >= 2, "an MLP needs at least one layer");
        let depth = spec.dims.len() - 1;
        let layers = spec
            .dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = store.add(format!("{prefix}.{l}.w"), uniform_tensor(rng, &[fan_in, fan_out], bound));
                let bias = store.add(format!("{prefix}.{l}.b"), uniform_tensor(rng, &[fan_out], bound));
                let hidden = l + 1 < depth;
                let norm = (hidden && spec.hidden_norm).then(|| {
                    (
                        store.add(format!("{prefix}.{l}.ln_g"), Tensor::full(&[fan_out], 1.0)),
                        store.add(format!("{prefix}.{l}.ln_b"), Tensor::zeros(&[fan_out])),
                    )
                });
                DenseLayer {
                    weight,
                    bias,
                    norm,
                    activation: if hidden { Activation::Silu } else { spec.output_activation },
                    fan_in,
                    fan_out,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn last(&self) -> &DenseLayer {
        self.layers.last().expect("non-empty mlp")
    }

    /// Applies the network to the rows of `x` (`[m, in] -> [m, out]`).
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var, AutodiffError> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(tape, params, h))
    }
}

impl DenseLayer {
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var, AutodiffError> {
        let z = tape.matmul(x, params.var(self.weight))?;
        let z = tape.add_row(z, params.var(self.bias))?;
        self.finish(tape, params, z)
    }

    /// Normalisation and activation applied to an already affine-mapped input.
    pub fn finish(&self, tape: &mut Tape, params: &BoundParams, z: Var) -> Result<Var, AutodiffError> {
        let z = match self.norm {
            Some((g, b)) => tape.layer_norm(z, params.var(g), params.var(b))?,
            None => z,
        };
        match self.activation {
            Activation::Identity => Ok(z),
            Activation::Relu => tape.relu(z),
            Activation::Silu => tape.silu(z),
        }
    }
}
