//! Charged-particle simulator used to generate ground-truth windows.
//!
//! Particles interact through a softened Coulomb law
//! `F_ij = q_i q_j (x_i - x_j) / (|x_i - x_j|^2 + eps^2)^{3/2}` and are advanced
//! with kick-drift-kick leapfrog.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];

/// Softening length of the force law.
pub const SOFTENING: f64 = 0.1;
/// Side of the cube initial positions are drawn from.
pub const BOX_SIDE: f64 = 5.0;
/// Standard deviation of each initial velocity component.
pub const VELOCITY_STD: f64 = 0.5;
pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_WINDOW: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("a system needs at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("window {t} with order {k} is not an integer number of steps of {dt}")]
    IncompatibleGrid { t: f64, k: usize, dt: f64 },
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no samples")]
    NoSamples,
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Positions, velocities and scalar features of every particle at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub charges: Vec<f64>,
    pub masses: Vec<f64>,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl SystemState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn min_pair_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let d = sub(self.positions[i], self.positions[j]);
                best = best.min(dot(d, d).sqrt());
            }
        }
        best
    }

    pub fn momentum(&self) -> Vec3 {
        let mut p = [0.0; 3];
        for (v, m) in self.velocities.iter().zip(&self.masses) {
            for c in 0..3 {
                p[c] += m * v[c];
            }
        }
        p
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, m)| 0.5 * m * dot(*v, *v))
            .sum()
    }

    pub fn potential_energy(&self) -> f64 {
        let mut u = 0.0;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let d = sub(self.positions[i], self.positions[j]);
                u += self.charges[i] * self.charges[j] / (dot(d, d) + SOFTENING * SOFTENING).sqrt();
            }
        }
        u
    }

    pub fn energy(&self) -> f64 {
        self.kinetic_energy() + self.potential_energy()
    }

    /// Accelerations under the softened Coulomb law. Each pair force is
    /// computed once and applied with opposite signs.
    pub fn accelerations(&self) -> Vec<Vec3> {
        let n = self.len();
        let mut force = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in i + 1..n {
                let d = sub(self.positions[i], self.positions[j]);
                let r2 = dot(d, d) + SOFTENING * SOFTENING;
                let s = self.charges[i] * self.charges[j] / (r2 * r2.sqrt());
                for c in 0..3 {
                    let f = s * d[c];
                    force[i][c] += f;
                    force[j][c] -= f;
                }
            }
        }
        force
            .into_iter()
            .zip(&self.masses)
            .map(|(f, m)| [f[0] / m, f[1] / m, f[2] / m])
            .collect()
    }

    /// Applies `x -> R x + b`, `v -> R v`.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: Vec3) -> Self {
        let rot = |p: Vec3| -> Vec3 {
            [
                dot(rotation[0], p),
                dot(rotation[1], p),
                dot(rotation[2], p),
            ]
        };
        Self {
            positions: self
                .positions
                .iter()
                .map(|p| {
                    let q = rot(*p);
                    [q[0] + translation[0], q[1] + translation[1], q[2] + translation[2]]
                })
                .collect(),
            velocities: self.velocities.iter().map(|v| rot(*v)).collect(),
            charges: self.charges.clone(),
            masses: self.masses.clone(),
        }
    }
}

/// Random initial condition: positions uniform in a cube of side
/// [`BOX_SIDE`], velocity components `N(0, VELOCITY_STD^2)`, charges `±1`.
/// Positions are redrawn until no pair is closer than [`SOFTENING`].
pub fn init_system(seed: u64, n: usize) -> Result<SystemState, SimError> {
    if n < 2 {
        return Err(SimError::TooFewParticles(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, VELOCITY_STD).expect("valid std");
    let half = BOX_SIDE / 2.0;
    let positions = loop {
        let candidate: Vec<Vec3> = (0..n)
            .map(|_| [0; 3].map(|_| rng.gen_range(-half..half)))
            .collect();
        let ok = (0..n).all(|i| {
            (i + 1..n).all(|j| {
                let d = sub(candidate[i], candidate[j]);
                dot(d, d).sqrt() > SOFTENING
            })
        });
        if ok {
            break candidate;
        }
    };
    let velocities = (0..n).map(|_| [0; 3].map(|_| normal.sample(&mut rng))).collect();
    let charges = (0..n)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Ok(SystemState {
        positions,
        velocities,
        charges,
        masses: vec![1.0; n],
    })
}

/// Leapfrog integrator that carries the accelerations of the current state so
/// each step costs one force evaluation.
#[derive(Debug, Clone)]
pub struct Leapfrog {
    state: SystemState,
    accel: Vec<Vec3>,
}

impl Leapfrog {
    pub fn new(state: SystemState) -> Self {
        let accel = state.accelerations();
        Self { state, accel }
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn into_state(self) -> SystemState {
        self.state
    }

    /// One kick-drift-kick update.
    pub fn step(&mut self, dt: f64) {
        let s = &mut self.state;
        for (v, a) in s.velocities.iter_mut().zip(&self.accel) {
            for c in 0..3 {
                v[c] += 0.5 * dt * a[c];
            }
        }
        for (x, v) in s.positions.iter_mut().zip(&s.velocities) {
            for c in 0..3 {
                x[c] += dt * v[c];
            }
        }
        self.accel = s.accelerations();
        for (v, a) in s.velocities.iter_mut().zip(&self.accel) {
            for c in 0..3 {
                v[c] += 0.5 * dt * a[c];
            }
        }
    }

    pub fn advance(&mut self, steps: usize, dt: f64) {
        for _ in 0..steps {
            self.step(dt);
        }
    }
}

/// One leapfrog step of size `dt`.
pub fn step(state: &SystemState, dt: f64) -> Result<SystemState, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::BadStep(dt));
    }
    let mut lf = Leapfrog::new(state.clone());
    lf.step(dt);
    Ok(lf.into_state())
}

/// Positions and velocities at one recorded time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
}

/// One prediction window: `k + 1` equally spaced frames over `[0, t_window]`.
/// One JSON object per line in dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub seed: u64,
    pub n: usize,
    pub t_window: f64,
    pub k: usize,
    pub dt: f64,
    pub charges: Vec<f64>,
    pub frames: Vec<Frame>,
}

/// Number of fine steps between recorded frames.
pub fn steps_per_frame(t_window: f64, k: usize, dt: f64) -> Result<usize, SimError> {
    let bad = || SimError::IncompatibleGrid { t: t_window, k, dt };
    if k == 0 || !(dt > 0.0) || !(t_window > 0.0) {
        return Err(bad());
    }
    let ratio = t_window / (k as f64 * dt);
    let steps = ratio.round();
    if steps < 1.0 || (ratio - steps).abs() > 1e-9 * steps {
        return Err(bad());
    }
    Ok(steps as usize)
}

/// Integrates from [`init_system`] with step `dt` and records frames at
/// `t = i * t_window / k`, `i = 0..=k`.
pub fn sample_trajectory(seed: u64, n: usize, t_window: f64, k: usize, dt: f64) -> Result<TrajectorySample, SimError> {
    let stride = steps_per_frame(t_window, k, dt)?;
    let state = init_system(seed, n)?;
    Ok(record_frames(seed, state, t_window, k, stride, dt))
}

pub(crate) fn record_frames(
    seed: u64,
    state: SystemState,
    t_window: f64,
    k: usize,
    stride: usize,
    dt: f64,
) -> TrajectorySample {
    let charges = state.charges.clone();
    let n = state.len();
    let mut lf = Leapfrog::new(state);
    let mut frames = Vec::with_capacity(k + 1);
    for i in 0..=k {
        if i > 0 {
            lf.advance(stride, dt);
        }
        frames.push(Frame {
            t: t_window * i as f64 / k as f64,
            x: lf.state().positions.clone(),
            v: lf.state().velocities.clone(),
        });
    }
    TrajectorySample {
        seed,
        n,
        t_window,
        k,
        dt,
        charges,
        frames,
    }
}

impl TrajectorySample {
    pub fn initial(&self) -> &Frame {
        &self.frames[0]
    }

    pub fn terminal(&self) -> &Frame {
        self.frames.last().expect("sample has frames")
    }

    pub fn state_at(&self, frame: usize) -> SystemState {
        let f = &self.frames[frame];
        SystemState {
            positions: f.x.clone(),
            velocities: f.v.clone(),
            charges: self.charges.clone(),
            masses: vec![1.0; self.n],
        }
    }

    /// Frames at the `order + 1` nodes of an order-`order` rule, when the
    /// recorded grid contains them. Order 0 yields the initial frame alone.
    pub fn nodes_for_order(&self, order: usize) -> Option<Vec<&Frame>> {
        if order == 0 {
            return Some(vec![&self.frames[0]]);
        }
        if order > self.k || self.k % order != 0 {
            return None;
        }
        let stride = self.k / order;
        Some((0..=order).map(|i| &self.frames[i * stride]).collect())
    }

    fn validate(&self) -> Result<(), String> {
        if self.n < 2 {
            return Err(format!("n = {} is below 2", self.n));
        }
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if self.charges.len() != self.n {
            return Err(format!("{} charges for {} particles", self.charges.len(), self.n));
        }
        if self.frames.len() != self.k + 1 {
            return Err(format!("{} frames for k = {}", self.frames.len(), self.k));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.x.len() != self.n || f.v.len() != self.n {
                return Err(format!("frame {i} has {}/{} rows for n = {}", f.x.len(), f.v.len(), self.n));
            }
        }
        Ok(())
    }
}

/// Worker count for data generation and evaluation: `NC_DYN_THREADS` when set,
/// otherwise the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("NC_DYN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Generates `count` samples with seeds `seed, seed + 1, ..` on a pool of
/// `threads` workers. Output is ordered by seed.
pub fn generate_dataset(
    count: usize,
    seed: u64,
    n: usize,
    t_window: f64,
    k: usize,
    dt: f64,
    threads: usize,
) -> Result<Vec<TrajectorySample>, SimError> {
    steps_per_frame(t_window, k, dt)?;
    if n < 2 {
        return Err(SimError::TooFewParticles(n));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|i| sample_trajectory(seed + i, n, t_window, k, dt))
            .collect()
    })
}

pub fn write_dataset(samples: &[TrajectorySample], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::NoSamples);
    }
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TrajectorySample>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: TrajectorySample =
            serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: i + 1, source })?;
        sample
            .validate()
            .map_err(|message| DatasetError::Invalid { line: i + 1, message })?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(DatasetError::NoSamples);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_separated() {
        let a = init_system(7, 5).unwrap();
        let b = init_system(7, 5).unwrap();
        assert_eq!(a, b);
        let two = init_system(3, 2).unwrap();
        assert_eq!(two.len(), 2);
        assert!(two.min_pair_distance() >= SOFTENING);
        assert!(two.charges.iter().all(|q| *q == 1.0 || *q == -1.0));
        assert!(matches!(init_system(0, 1), Err(SimError::TooFewParticles(1))));
    }

    #[test]
    fn mirror_symmetry_preserved() {
        let state = SystemState {
            positions: vec![[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]],
            velocities: vec![[0.0; 3]; 2],
            charges: vec![1.0, 1.0],
            masses: vec![1.0, 1.0],
        };
        let mut lf = Leapfrog::new(state);
        lf.advance(500, 1e-3);
        let s = lf.state();
        assert_eq!(s.velocities[0][0], -s.velocities[1][0]);
        assert!(s.velocities[0][0] < 0.0, "like charges repel");
        assert_eq!(s.velocities[0][1], 0.0);
    }

    #[test]
    fn grid_compatibility() {
        assert_eq!(steps_per_frame(1.0, 2, 1e-3).unwrap(), 500);
        assert!(steps_per_frame(1.0, 3, 1e-3).is_err());
        assert!(steps_per_frame(1.0, 0, 1e-3).is_err());
        assert!(matches!(step(&init_system(1, 3).unwrap(), 0.0), Err(SimError::BadStep(_))));
    }

    #[test]
    fn frame_times() {
        let s = sample_trajectory(1, 3, 1.0, 1, 1e-3).unwrap();
        assert_eq!(s.frames.len(), 2);
        assert_eq!((s.frames[0].t, s.frames[1].t), (0.0, 1.0));
        let s = sample_trajectory(1, 3, 1.0, 2, 1e-3).unwrap();
        assert_eq!(s.frames[1].t, 0.5);
        assert_eq!(s.state_at(0), init_system(1, 3).unwrap());
    }

    #[test]
    fn nodes_for_order_subsamples() {
        let s = sample_trajectory(2, 3, 1.0, 4, 1e-3).unwrap();
        let nodes = s.nodes_for_order(2).unwrap();
        assert_eq!(nodes.iter().map(|f| f.t).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
        assert!(s.nodes_for_order(3).is_none());
        assert!(s.nodes_for_order(8).is_none());
        assert_eq!(s.nodes_for_order(0).unwrap().len(), 1);
    }
}
