#![allow(dead_code)]

use ncdyn::autodiff::{Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Entries with magnitude in `[lo, hi]` and random sign, away from kinks at 0.
pub fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)` over whole gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Reverse-mode and central-difference gradients of a scalar function of
/// several tensors.
pub fn gradients<F>(inputs: &[Tensor], f: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let g = tape.backward(out).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|v| g.wrt(*v).into_data()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let (t, _, o) = eval(&work);
            let up = t.value(o).item();
            work[i].data_mut()[j] = x - FD_STEP;
            let (t, _, o) = eval(&work);
            let down = t.value(o).item();
            work[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    (analytic, numeric)
}

/// Contracts an op's output with fixed random weights so every output entry
/// contributes to the checked scalar.
pub fn contract(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    if tape.value(out).len() == 1 {
        let w = tape.constant(Tensor::full(tape.value(out).shape(), weights.data()[0]));
        let p = tape.mul(out, w).unwrap();
        return tape.sum(p).unwrap();
    }
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One random instance of a tape operation, already reduced to a scalar.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn weigh(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| (0.37 + 1.3 * i as f64).sin()).collect()).unwrap();
    contract(tape, out, &w)
}

pub const OP_NAMES: [&str; 22] = [
    "add",
    "sub",
    "mul",
    "mul_scalar",
    "matmul",
    "relu",
    "silu",
    "rsqrt",
    "layer_norm",
    "sum",
    "mean",
    "squared_norm",
    "scale",
    "concat",
    "add_row",
    "gather_rows",
    "scatter_add_rows",
    "mul_rows_column",
    "mul_rows_vector",
    "row_squared_norm",
    "row_norm",
    "mse",
];

pub fn op_case<R: Rng>(rng: &mut R, which: usize) -> OpCase {
    use std::sync::Arc;
    let m = rng.gen_range(2..5);
    let n = rng.gen_range(2..5);
    let name = OP_NAMES[which];
    let r = |rng: &mut R, shape: &[usize]| random_tensor(rng, shape, -2.0, 2.0);
    let (inputs, f): (Vec<Tensor>, OpFn) = match name {
        "add" => (vec![r(rng, &[m, n]), r(rng, &[m, n])], Box::new(|t, v| { let o = t.add(v[0], v[1]).unwrap(); weigh(t, o) })),
        "sub" => (vec![r(rng, &[m, n]), r(rng, &[m, n])], Box::new(|t, v| { let o = t.sub(v[0], v[1]).unwrap(); weigh(t, o) })),
        "mul" => (vec![r(rng, &[m, n]), r(rng, &[m, n])], Box::new(|t, v| { let o = t.mul(v[0], v[1]).unwrap(); weigh(t, o) })),
        "mul_scalar" => (vec![r(rng, &[m, n]), r(rng, &[])], Box::new(|t, v| { let o = t.mul(v[0], v[1]).unwrap(); weigh(t, o) })),
        "matmul" => {
            let k = rng.gen_range(1..5);
            (vec![r(rng, &[m, k]), r(rng, &[k, n])], Box::new(|t, v| { let o = t.matmul(v[0], v[1]).unwrap(); weigh(t, o) }))
        }
        "relu" => (vec![away_from_zero(rng, &[m, n], 0.1, 2.0)], Box::new(|t, v| { let o = t.relu(v[0]).unwrap(); weigh(t, o) })),
        "silu" => (vec![random_tensor(rng, &[m, n], -4.0, 4.0)], Box::new(|t, v| { let o = t.silu(v[0]).unwrap(); weigh(t, o) })),
        "rsqrt" => (vec![random_tensor(rng, &[m, n], 0.3, 3.0)], Box::new(|t, v| { let o = t.rsqrt(v[0]).unwrap(); weigh(t, o) })),
        "layer_norm" => (
            vec![r(rng, &[m, n]), r(rng, &[n]), r(rng, &[n])],
            Box::new(|t, v| { let o = t.layer_norm(v[0], v[1], v[2]).unwrap(); weigh(t, o) }),
        ),
        "sum" => (vec![r(rng, &[m, n])], Box::new(|t, v| { let o = t.sum(v[0]).unwrap(); weigh(t, o) })),
        "mean" => (vec![r(rng, &[m, n])], Box::new(|t, v| { let o = t.mean(v[0]).unwrap(); weigh(t, o) })),
        "squared_norm" => (vec![r(rng, &[m, n])], Box::new(|t, v| { let o = t.squared_norm(v[0]).unwrap(); weigh(t, o) })),
        "scale" => (vec![r(rng, &[m, n])], Box::new(|t, v| { let o = t.scale(v[0], -1.7).unwrap(); weigh(t, o) })),
        "concat" => {
            let n2 = rng.gen_range(1..4);
            (
                vec![r(rng, &[m, n]), r(rng, &[m, n2]), r(rng, &[m, 1])],
                Box::new(|t, v| { let o = t.concat(v).unwrap(); weigh(t, o) }),
            )
        }
        "add_row" => (vec![r(rng, &[m, n]), r(rng, &[n])], Box::new(|t, v| { let o = t.add_row(v[0], v[1]).unwrap(); weigh(t, o) })),
        "gather_rows" => {
            let p = rng.gen_range(1..8);
            let idx: Arc<[usize]> = (0..p).map(|_| rng.gen_range(0..m)).collect();
            (vec![r(rng, &[m, n])], Box::new(move |t, v| { let o = t.gather_rows(v[0], idx.clone()).unwrap(); weigh(t, o) }))
        }
        "scatter_add_rows" => {
            let p = rng.gen_range(1..8);
            let idx: Arc<[usize]> = (0..p).map(|_| rng.gen_range(0..m)).collect();
            (
                vec![r(rng, &[p, n])],
                Box::new(move |t, v| { let o = t.scatter_add_rows(v[0], idx.clone(), m).unwrap(); weigh(t, o) }),
            )
        }
        "mul_rows_column" => (vec![r(rng, &[m, n]), r(rng, &[m, 1])], Box::new(|t, v| { let o = t.mul_rows(v[0], v[1]).unwrap(); weigh(t, o) })),
        "mul_rows_vector" => (vec![r(rng, &[m, n]), r(rng, &[m])], Box::new(|t, v| { let o = t.mul_rows(v[0], v[1]).unwrap(); weigh(t, o) })),
        "row_squared_norm" => (vec![r(rng, &[m, n])], Box::new(|t, v| { let o = t.row_squared_norm(v[0]).unwrap(); weigh(t, o) })),
        "row_norm" => (vec![away_from_zero(rng, &[m, n], 0.2, 2.0)], Box::new(|t, v| { let o = t.row_norm(v[0]).unwrap(); weigh(t, o) })),
        "mse" => (vec![r(rng, &[m, n]), r(rng, &[m, n])], Box::new(|t, v| t.mse(v[0], v[1]).unwrap())),
        _ => unreachable!(),
    };
    OpCase { name, inputs, f }
}

/// Newton–Cotes weights from the moment conditions
/// `Σ_k w_k k^j = K^{j+1} / (j+1)`, `j = 0..=K`, solved by exact Gaussian
/// elimination. Independent of the Lagrange-basis construction.
pub fn moment_weights(order: usize) -> Vec<ncdyn::quadrature::Rational> {
    use ncdyn::quadrature::Rational;
    use num_traits::{One, Zero};
    if order == 0 {
        return vec![Rational::one()];
    }
    let n = order + 1;
    let int = |v: usize| Rational::from_integer(v as i128);
    let mut a: Vec<Vec<Rational>> = (0..n)
        .map(|j| {
            let mut row: Vec<Rational> = (0..n).map(|k| int(k.pow(j as u32))).collect();
            row.push(int(order.pow(j as u32 + 1)) / int(j + 1));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero()).expect("Vandermonde is invertible");
        a.swap(col, pivot);
        let p = a[col][col];
        for c in col..=n {
            a[col][c] /= p;
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col];
                for c in col..=n {
                    let sub = f * a[col][c];
                    a[r][c] -= sub;
                }
            }
        }
    }
    a.into_iter().map(|row| row[n]).collect()
}

/// Random polynomial of the given degree with its antiderivative.
pub fn random_polynomial<R: Rng>(rng: &mut R, degree: usize) -> Vec<f64> {
    (0..=degree).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn poly_eval(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, a| acc * t + a)
}

pub fn poly_integral(c: &[f64], a: f64, b: f64) -> f64 {
    let anti = |t: f64| c.iter().enumerate().rev().fold(0.0, |acc, (i, x)| (acc + x / (i + 1) as f64) * t);
    anti(b) - anti(a)
}

/// Small model with random weights.
pub fn small_model(kind: ncdyn::models::BackboneKind, hidden: usize, layers: usize, seed: u64) -> ncdyn::models::Model {
    use ncdyn::models::{Init, Model, ModelConfig};
    let config = ModelConfig {
        kind,
        hidden,
        layers,
        ..ModelConfig::default()
    };
    Model::new(config, Init::Random, seed)
}

/// Directional-derivative checks of the full order-2 rollout loss (main term
/// plus velocity regularisation, with feedback normalisation) with respect to
/// all parameters. Returns one relative error per random direction.
pub fn rollout_loss_direction_errors(kind: ncdyn::models::BackboneKind, seed: u64, directions: usize) -> Vec<f64> {
    use ncdyn::nbody::sample_trajectory;
    use ncdyn::rollout::{RolloutConfig, WindowBatch};
    use ncdyn::train::batch_gradients;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = RolloutConfig {
        order: 2,
        use_velocity_reg: true,
        reg_weight: 0.5,
        normalize_feedback: true,
        ..RolloutConfig::default()
    };
    let samples: Vec<_> = (0..3).map(|i| sample_trajectory(seed * 10 + i, 4, 1.0, 2, 1e-3).unwrap()).collect();
    let refs: Vec<_> = samples.iter().collect();
    let batch = WindowBatch::from_samples(&refs, &cfg, None).unwrap();
    let model = small_model(kind, 6, 2, seed);
    let analytic = batch_gradients(&model, &batch, &cfg, 3).unwrap().grads;
    let loss_at = |dir: &[Tensor], h: f64| {
        let mut m = model.clone();
        for (p, d) in m.params_mut().tensors_mut().iter_mut().zip(dir) {
            for (x, dx) in p.data_mut().iter_mut().zip(d.data()) {
                *x += h * dx;
            }
        }
        batch_gradients(&m, &batch, &cfg, 3).unwrap().total
    };
    (0..directions)
        .map(|_| {
            let dir: Vec<Tensor> = model
                .params()
                .tensors()
                .iter()
                .map(|p| random_tensor(&mut rng, p.shape(), -1.0, 1.0))
                .collect();
            let exact: f64 = analytic
                .iter()
                .zip(&dir)
                .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let numeric = (loss_at(&dir, FD_STEP) - loss_at(&dir, -FD_STEP)) / (2.0 * FD_STEP);
            relative_error(&[exact], &[numeric])
        })
        .collect()
}

/// Largest deviation from `f(Rx + b, Rv) = R f(x, v) + b` over random weights,
/// states and rigid motions, for the bare backbone and the order `0..=3`
/// rollouts built on it.
pub fn equivariance_max_error(kind: ncdyn::models::BackboneKind, draws: u64, transforms: usize) -> f64 {
    use ncdyn::geometry::{random_rotation, random_translation, rotate_rows, transform_rows};
    use ncdyn::nbody::init_system;
    use ncdyn::rollout::{rollout, RolloutConfig};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for draw in 0..draws {
        let model = small_model(kind, 16, 2, 1000 + draw);
        let state = init_system(2000 + draw, 5).unwrap();
        let bare = model.predict_velocity(&state).unwrap().v_hat;
        let bare = Tensor::from_rows3(&bare);
        let cfgs: Vec<RolloutConfig> = (0..=3)
            .map(|order| RolloutConfig {
                order,
                ..RolloutConfig::default()
            })
            .collect();
        let base: Vec<_> = cfgs.iter().map(|c| rollout(&model, &state, c).unwrap()).collect();
        for _ in 0..transforms {
            let r = random_rotation(&mut rng);
            let b = random_translation(&mut rng, 5.0);
            let moved = state.transformed(&r, b);
            let v = Tensor::from_rows3(&model.predict_velocity(&moved).unwrap().v_hat);
            worst = worst.max(v.max_abs_diff(&rotate_rows(&bare, &r)));
            for (c, base) in cfgs.iter().zip(&base) {
                let t = rollout(&model, &moved, c).unwrap();
                worst = worst.max(t.prediction.max_abs_diff(&transform_rows(&base.prediction, &r, b)));
                for (v, w) in t.velocities.iter().zip(&base.velocities) {
                    worst = worst.max(v.max_abs_diff(&rotate_rows(w, &r)));
                }
            }
        }
    }
    worst
}

/// Largest residual of `f(αa + βb) = αf(a) + βf(b) + (1 − α − β) f(0)` for the
/// EGNN velocity output as a function of the input velocities.
pub fn affine_residual(configs: u64) -> f64 {
    use ncdyn::models::BackboneKind;
    use ncdyn::nbody::init_system;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for c in 0..configs {
        let layers = 1 + (c as usize % 4);
        let model = small_model(BackboneKind::Egnn, 16, layers, 300 + c);
        let mut state = init_system(500 + c, 3 + (c as usize % 5)).unwrap();
        let n = state.len();
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<[f64; 3]> {
            (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-1.5..1.5))).collect()
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mut eval = |v: &[[f64; 3]]| {
            state.velocities = v.to_vec();
            model.predict_velocity(&state).unwrap().v_hat
        };
        let fa = eval(&a);
        let fb = eval(&b);
        let f0 = eval(&vec![[0.0; 3]; n]);
        let mix: Vec<[f64; 3]> = a
            .iter()
            .zip(&b)
            .map(|(p, q)| [0, 1, 2].map(|k| alpha * p[k] + beta * q[k]))
            .collect();
        let fm = eval(&mix);
        for i in 0..n {
            for k in 0..3 {
                let want = alpha * fa[i][k] + beta * fb[i][k] + (1.0 - alpha - beta) * f0[i][k];
                worst = worst.max((fm[i][k] - want).abs());
            }
        }
    }
    worst
}
