//! Rigid transforms used by the equivariance checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

pub type Rotation = [[f64; 3]; 3];

/// Uniformly distributed rotation from a normalised random quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let mut q = [0.0f64; 4];
    loop {
        for c in &mut q {
            *c = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.iter_mut().for_each(|c| *c /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn random_translation<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> [f64; 3] {
    [0; 3].map(|_| rng.gen_range(-scale..scale))
}

/// Applies `p -> R p + b` to every row of an `[n, 3]` tensor.
pub fn transform_rows(t: &Tensor, rotation: &Rotation, translation: [f64; 3]) -> Tensor {
    let rows: Vec<[f64; 3]> = t
        .to_rows3()
        .into_iter()
        .map(|p| {
            let mut out = translation;
            for (r, o) in out.iter_mut().enumerate() {
                *o += rotation[r][0] * p[0] + rotation[r][1] * p[1] + rotation[r][2] * p[2];
            }
            out
        })
        .collect();
    Tensor::from_rows3(&rows)
}

pub fn rotate_rows(t: &Tensor, rotation: &Rotation) -> Tensor {
    transform_rows(t, rotation, [0.0; 3])
}
