use super::*;
use crate::geometry::{random_rotation, random_translation, rotate_rows, transform_rows};
use crate::models::{BackboneKind, Init, ModelConfig};
use crate::nbody::{init_system, sample_trajectory, Frame, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Ignores its input and returns a fixed velocity field.
struct Constant(Tensor);

impl Backbone for Constant {
    fn velocity(&self, tape: &mut Tape, _: &ForwardCtx<'_>, _: Var, _: Var) -> Result<Var, ModelError> {
        Ok(tape.constant(self.0.clone()))
    }
}

/// `v̂ = c v`.
struct Scaled(f64);

impl Backbone for Scaled {
    fn velocity(&self, tape: &mut Tape, _: &ForwardCtx<'_>, _: Var, v: Var) -> Result<Var, ModelError> {
        Ok(tape.scale(v, self.0)?)
    }
}

fn cfg(order: usize) -> RolloutConfig {
    RolloutConfig {
        order,
        use_velocity_reg: false,
        normalize_feedback: false,
        ..RolloutConfig::default()
    }
}

fn model(kind: BackboneKind, layers: usize, init: Init, seed: u64) -> Model {
    let config = ModelConfig {
        kind,
        hidden: 8,
        layers,
        layer_norm: true,
        feature_norm: None,
    };
    Model::new(config, init, seed)
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) < tol
}

#[test]
fn order_zero_is_bare_backbone() {
    let m = model(BackboneKind::Egnn, 2, Init::Random, 1);
    let state = init_system(3, 5).unwrap();
    let trace = rollout(&m, &state, &cfg(0)).unwrap();
    assert_eq!(trace.velocities.len(), 1);
    assert!(trace.positions.is_empty());
    let bare = Tensor::from_rows3(&m.predict_velocity(&state).unwrap().v_hat);
    assert_eq!(trace.velocities[0], bare);
    let x0 = Tensor::from_rows3(&state.positions);
    let want: Vec<f64> = x0.data().iter().zip(bare.data()).map(|(x, v)| x + v).collect();
    assert_eq!(trace.prediction.data(), &want[..]);
}

#[test]
fn constant_backbone_moves_by_v_star_t_for_every_order() {
    let state = init_system(1, 4).unwrap();
    let v_star = Tensor::from_rows3(&[[0.3, -0.2, 1.0], [0.0, 0.5, 0.1], [-1.0, 0.0, 0.0], [0.2, 0.2, 0.2]]);
    let x0 = Tensor::from_rows3(&state.positions);
    for order in 0..=MAX_ORDER {
        let mut c = cfg(order);
        c.t_window = 1.5;
        let trace = rollout(&Constant(v_star.clone()), &state, &c).unwrap();
        assert_eq!(trace.velocities.len(), order + 1);
        let want: Vec<f64> = x0.data().iter().zip(v_star.data()).map(|(x, v)| x + 1.5 * v).collect();
        let err = trace
            .prediction
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "order {order}: {err}");
    }
}

#[test]
fn order_two_matches_hand_unrolled_recurrence() {
    let mut m = model(BackboneKind::Egnn, 1, Init::Random, 4);
    for name in ["coord.1.w", "coord.1.b"] {
        let id = m.params().find(name).unwrap();
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let state = SystemState {
        positions: vec![[0.0, 0.0, 0.0], [1.0, 0.5, -0.5]],
        velocities: vec![[1.0, 0.0, 0.0], [0.0, -2.0, 1.0]],
        charges: vec![1.0, -1.0],
        masses: vec![1.0, 1.0],
    };
    // With messages off each particle is scaled by its own gate.
    let unit = m.predict_velocity(&state).unwrap().v_hat;
    let g = [unit[0][0] / 1.0, unit[1][1] / -2.0];
    for normalize in [false, true] {
        let mut c = cfg(2);
        c.normalize_feedback = normalize;
        let trace = rollout(&m, &state, &c).unwrap();
        let mut v: Vec<Vec3> = state.velocities.iter().zip(g).map(|(v, g)| v.map(|x| g * x)).collect();
        let mut x = state.positions.clone();
        let mut vs = vec![v.clone()];
        let mut xs = vec![];
        for _ in 0..2 {
            for (xi, vi) in x.iter_mut().zip(&v) {
                for c in 0..3 {
                    xi[c] += 0.5 * vi[c];
                }
            }
            let rms = if normalize {
                (v.iter().flatten().map(|a| a * a).sum::<f64>() / 2.0).sqrt()
            } else {
                1.0
            };
            v = v.iter().zip(g).map(|(v, g)| v.map(|a| g * a / rms)).collect();
            xs.push(x.clone());
            vs.push(v.clone());
        }
        for k in 0..3 {
            assert!(close(&trace.velocities[k], &Tensor::from_rows3(&vs[k]), 1e-13));
        }
        for k in 0..2 {
            assert!(close(&trace.positions[k], &Tensor::from_rows3(&xs[k]), 1e-13));
        }
        let want: Vec<Vec3> = (0..2)
            .map(|i| [0, 1, 2].map(|c| state.positions[i][c] + 0.5 * (vs[0][i][c] + 4.0 * vs[1][i][c] + vs[2][i][c]) / 3.0))
            .collect();
        assert!(close(&trace.prediction, &Tensor::from_rows3(&want), 1e-13));
    }
}

#[test]
fn input_nodes_use_observed_velocity() {
    let state = init_system(2, 3).unwrap();
    let mut c = cfg(1);
    c.quadrature_nodes = QuadratureNodes::Inputs;
    let trace = rollout(&Scaled(2.0), &state, &c).unwrap();
    let v0 = Tensor::from_rows3(&state.velocities);
    assert_eq!(trace.velocities[0], v0);
    // v̂^1 = 2 v^0; trapezoid: x0 + (v0 + 2 v0) / 2
    let x0 = Tensor::from_rows3(&state.positions);
    let want: Vec<f64> = x0.data().iter().zip(v0.data()).map(|(x, v)| x + 1.5 * v).collect();
    assert!(close(&trace.prediction, &Tensor::new(vec![3, 3], want).unwrap(), 1e-14));
}

#[test]
fn overflow_names_the_step() {
    let state = init_system(2, 3).unwrap();
    let err = rollout(&Scaled(1e200), &state, &cfg(3)).unwrap_err();
    assert!(matches!(err, RolloutError::NonFinite { step: 1 }), "{err}");
}

#[test]
fn predict_examples() {
    let x0 = Tensor::from_rows3(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]]);
    let zeros = vec![Tensor::zeros(&[2, 3]); 4];
    assert_eq!(predict(&x0, &zeros, &NcWeights::new(3).unwrap(), 1.0).unwrap(), x0);

    // v(t) = a + b t integrated over [0, 2] by the trapezoid rule.
    let (a, b) = (0.7, -1.9);
    let at = |t: f64| Tensor::from_rows3(&[[a + b * t; 3], [b * t; 3]]);
    let got = predict(&x0, &[at(0.0), at(2.0)], &NcWeights::new(1).unwrap(), 2.0).unwrap();
    let disp = [2.0 * a + 2.0 * b, 2.0 * b];
    for i in 0..2 {
        for c in 0..3 {
            assert!((got.row(i)[c] - x0.row(i)[c] - disp[i]).abs() < 1e-14);
        }
    }

    // v(t) = 1 - 3t + 2t^2 over [0, 1.2]: displacement T - 1.5 T^2 + (2/3) T^3.
    let q = |t: f64| Tensor::from_rows3(&[[1.0 - 3.0 * t + 2.0 * t * t; 3]]);
    let t = 1.2;
    let x = Tensor::from_rows3(&[[0.0; 3]]);
    let got = predict(&x, &[q(0.0), q(0.6), q(1.2)], &NcWeights::new(2).unwrap(), t).unwrap();
    let exact = t - 1.5 * t * t + 2.0 / 3.0 * t * t * t;
    assert!(got.data().iter().all(|v| (v - exact).abs() < 1e-12));

    let err = predict(&x0, &zeros[..2], &NcWeights::new(2).unwrap(), 1.0).unwrap_err();
    assert!(matches!(err, RolloutError::OrderMismatch { trace: 2, order: 2 }));
}

fn trace_from(sample: &TrajectorySample) -> RolloutTrace {
    let rows = |f: &Frame, v: bool| Tensor::from_rows3(if v { &f.v } else { &f.x });
    RolloutTrace {
        x0: rows(sample.initial(), false),
        inputs: vec![],
        velocities: sample.frames.iter().map(|f| rows(f, true)).collect(),
        positions: sample.frames[1..].iter().map(|f| rows(f, false)).collect(),
        prediction: rows(sample.terminal(), false),
    }
}

#[test]
fn loss_examples() {
    let sample = sample_trajectory(7, 4, 1.0, 2, 1e-3).unwrap();
    let perfect = trace_from(&sample);
    let mut plus = cfg(2);
    plus.use_velocity_reg = true;
    let l = loss(&perfect, &sample, &plus, 0).unwrap();
    assert_eq!((l.main, l.reg, l.total), (0.0, Some(0.0), 0.0));

    let mut noisy = perfect.clone();
    noisy.velocities[1].data_mut()[0] += 0.3;
    let loose = loss(&noisy, &sample, &cfg(2), 0).unwrap();
    let reg = loose.reg.unwrap();
    assert!((reg - 0.09 / 12.0 / 3.0).abs() < 1e-15);
    assert_eq!(loose.total, loose.main);
    let strict = loss(&noisy, &sample, &plus, 5).unwrap();
    assert!((strict.total - 0.001 * 0.999f64.powi(5) * reg).abs() < 1e-18);

    // δ in one coordinate of x̂^T, N particles: δ² / (3N).
    let delta = 0.25;
    let mut off = perfect.clone();
    off.prediction.data_mut()[4] += delta;
    let l = loss(&off, &sample, &cfg(2), 0).unwrap();
    assert!((l.main - delta * delta / 12.0).abs() < 1e-15);
}

#[test]
fn velocity_regularisation_needs_node_frames() {
    let sample = sample_trajectory(7, 3, 1.0, 1, 1e-3).unwrap();
    let mut plus = cfg(2);
    plus.use_velocity_reg = true;
    let trace = RolloutTrace {
        x0: Tensor::zeros(&[3, 3]),
        inputs: vec![],
        velocities: vec![Tensor::zeros(&[3, 3]); 3],
        positions: vec![],
        prediction: Tensor::zeros(&[3, 3]),
    };
    assert!(matches!(
        loss(&trace, &sample, &plus, 0),
        Err(RolloutError::MissingIntermediate { k: 1, order: 2, .. })
    ));
    let refs = [&sample];
    assert!(matches!(
        WindowBatch::from_samples(&refs, &plus, None),
        Err(RolloutError::MissingIntermediate { .. })
    ));
    assert!(WindowBatch::from_samples(&refs, &cfg(2), None).unwrap().node_velocities.is_none());
}

#[test]
fn batch_stacks_systems_in_order() {
    let a = sample_trajectory(1, 3, 1.0, 4, 1e-3).unwrap();
    let b = sample_trajectory(2, 5, 1.0, 4, 1e-3).unwrap();
    let mut c = cfg(2);
    c.use_velocity_reg = true;
    let batch = WindowBatch::from_samples(&[&a, &b], &c, None).unwrap();
    assert_eq!(batch.num_systems(), 2);
    assert_eq!(batch.x0.shape(), &[8, 3]);
    assert_eq!(batch.x0.row(3), &b.frames[0].x[0]);
    assert_eq!(batch.x_terminal.row(0), &a.frames[4].x[0]);
    let nodes = batch.node_velocities.unwrap();
    assert_eq!(nodes.len(), 3);
    assert_eq!(nodes[1].row(4), &b.frames[2].v[1]);

    let mut wrong = c.clone();
    wrong.t_window = 2.0;
    assert!(matches!(
        WindowBatch::from_samples(&[&a], &wrong, None),
        Err(RolloutError::WindowMismatch { .. })
    ));
}

#[test]
fn pipeline_equivariant_for_low_orders() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for order in 0..=3 {
        let mut c = cfg(order);
        c.normalize_feedback = true;
        let m = model(BackboneKind::Egnn, 2, Init::Random, order as u64);
        let state = init_system(40 + order as u64, 5).unwrap();
        let base = rollout(&m, &state, &c).unwrap();
        let r = random_rotation(&mut rng);
        let b = random_translation(&mut rng, 5.0);
        let moved = rollout(&m, &state.transformed(&r, b), &c).unwrap();
        assert!(close(&moved.prediction, &transform_rows(&base.prediction, &r, b), 1e-5));
        for (v, w) in moved.velocities.iter().zip(&base.velocities) {
            assert!(close(v, &rotate_rows(w, &r), 1e-5));
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let m = model(BackboneKind::Egnn, 2, Init::Random, 9);
    let samples: Vec<_> = (0..32).map(|s| sample_trajectory(s, 5, 1.0, 2, 1e-3).unwrap()).collect();
    let refs: Vec<_> = samples.iter().collect();
    let c = cfg(2);
    let batch = WindowBatch::from_samples(&refs, &c, None).unwrap();
    let mut s = Session::new(&m, batch.graph.clone());
    let x = s.tape.constant(batch.x0.clone());
    let v = s.tape.constant(batch.v0.clone());
    let target = s.tape.constant(batch.x_terminal.clone());
    let ctx = ForwardCtx {
        params: &s.params,
        graph: &s.graph,
        vars: s.vars,
    };
    let trace = rollout_on_tape(&m, &mut s.tape, &ctx, x, v, &c, &c.weights().unwrap()).unwrap();
    let terms = loss_on_tape(&mut s.tape, &trace, target, None, &c, 0).unwrap();
    let grads = s.tape.backward(terms.main).unwrap();
    let (mut nonzero, mut total) = (0, 0);
    for var in s.params.vars() {
        let g = grads.wrt(*var);
        total += g.len();
        nonzero += g.data().iter().filter(|x| **x != 0.0).count();
    }
    assert!(nonzero as f64 >= 0.99 * total as f64, "{nonzero}/{total}");
}

#[test]
fn single_window_consecutive_equals_rollout() {
    let m = model(BackboneKind::Egnn, 2, Init::Random, 2);
    let state = init_system(8, 5).unwrap();
    for order in [0, 1, 2, 3] {
        let mut c = cfg(order);
        c.normalize_feedback = true;
        let trace = rollout(&m, &state, &c).unwrap();
        let graph = BatchGraph::new(&[&state.charges], None).unwrap();
        let frames = consecutive_predict(
            &m,
            &graph,
            &Tensor::from_rows3(&state.positions),
            &Tensor::from_rows3(&state.velocities),
            &c,
            1,
            1e6,
        )
        .unwrap();
        assert_eq!(frames.len(), order.max(1));
        let last = frames.last().unwrap();
        assert!((last.t - 1.0).abs() < 1e-15);
        assert!(close(&last.positions, &trace.prediction, 1e-10));
    }
}

#[test]
fn free_particles_follow_straight_lines() {
    let m = model(BackboneKind::Egnn, 1, Init::ConstantEstimator, 0);
    let state = init_system(5, 5).unwrap();
    let graph = BatchGraph::new(&[&state.charges], None).unwrap();
    let x0 = Tensor::from_rows3(&state.positions);
    let v0 = Tensor::from_rows3(&state.velocities);
    for order in [0, 2, 3] {
        let frames = consecutive_predict(&m, &graph, &x0, &v0, &cfg(order), 10, 1e6).unwrap();
        assert_eq!(frames.len(), 10 * order.max(1));
        for f in &frames {
            let want: Vec<f64> = x0.data().iter().zip(v0.data()).map(|(x, v)| x + v * f.t).collect();
            let err = f.positions.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "order {order} t {}: {err}", f.t);
        }
    }
}

#[test]
fn divergence_truncates() {
    let state = init_system(5, 3).unwrap();
    let graph = BatchGraph::new(&[&state.charges], None).unwrap();
    let x0 = Tensor::from_rows3(&state.positions);
    let v0 = Tensor::from_rows3(&state.velocities);
    let frames = consecutive_predict(&Scaled(3.0), &graph, &x0, &v0, &cfg(1), 50, 1e3).unwrap();
    assert!(!frames.is_empty() && frames.len() < 50);
    assert!(frames.iter().all(|f| f.positions.data().iter().all(|x| x.abs() <= 1e3)));
}

#[test]
fn mean_of_identical_states_is_that_state() {
    let t = Tensor::from_rows3(&[[0.1, -0.7, 1.0 / 3.0]]);
    let items = [t.clone(), t.clone(), t.clone()];
    assert_eq!(mean_tensor(items.iter()), t);
}
