use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, TrainConfig, TrainData, TrainError};
use crate::autodiff::Tensor;
use crate::models::{BatchGraph, Model};
use crate::nbody::{sample_trajectory, TrajectorySample, DEFAULT_DT};
use crate::rollout::{consecutive_predict, RolloutConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    /// Sweep the rule order and record test error and time per epoch.
    ImpactOfK,
    /// Node-velocity error per evaluation epoch for NC and NC⁺.
    NcVsNcplus,
    /// Chained windows on long held-out trajectories, NC⁺ against order 0.
    Consecutive,
}

impl FromStr for StudyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "impact_of_k" => Ok(Self::ImpactOfK),
            "nc_vs_ncplus" => Ok(Self::NcVsNcplus),
            "consecutive" => Ok(Self::Consecutive),
            other => Err(format!(
                "unknown study {other:?} (expected impact_of_k, nc_vs_ncplus or consecutive)"
            )),
        }
    }
}

/// Base training config plus the sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Orders swept by `impact_of_k`.
    pub orders: Vec<usize>,
    /// Windows chained by `consecutive`.
    pub windows: usize,
    /// Held-out long trajectories for `consecutive`.
    pub heldout: usize,
    pub heldout_seed: u64,
    pub heldout_particles: usize,
    pub divergence_bound: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            orders: (0..=5).collect(),
            windows: 10,
            heldout: 20,
            heldout_seed: 1_000_000,
            heldout_particles: 5,
            divergence_bound: 1e3,
        }
    }
}

/// A CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Long trajectories with one frame per window boundary.
pub fn long_trajectories(
    count: usize,
    seed: u64,
    n: usize,
    t_window: f64,
    windows: usize,
) -> Result<Vec<TrajectorySample>, TrainError> {
    (0..count as u64)
        .map(|i| Ok(sample_trajectory(seed + i, n, t_window * windows as f64, windows, DEFAULT_DT)?))
        .collect()
}

/// Mean over trajectories of the position MSE at the end of each window.
/// Windows after a divergence count as infinite error.
pub fn consecutive_errors(
    model: &Model,
    cfg: &RolloutConfig,
    trajectories: &[TrajectorySample],
    windows: usize,
    bound: f64,
) -> Result<Vec<f64>, TrainError> {
    let mut sums = vec![0.0; windows];
    for traj in trajectories {
        if traj.k != windows {
            return Err(TrainError::Config(format!(
                "trajectory {} has {} windows, expected {windows}",
                traj.seed, traj.k
            )));
        }
        let graph = BatchGraph::new(&[&traj.charges], model.config().feature_norm)?;
        let x0 = Tensor::from_rows3(&traj.frames[0].x);
        let v0 = Tensor::from_rows3(&traj.frames[0].v);
        let frames = consecutive_predict(model, &graph, &x0, &v0, cfg, windows, bound)?;
        let per_window = cfg.order.max(1);
        for (w, sum) in sums.iter_mut().enumerate() {
            let err = match frames.get((w + 1) * per_window - 1) {
                Some(f) => {
                    let truth = Tensor::from_rows3(&traj.frames[w + 1].x);
                    f.positions
                        .data()
                        .iter()
                        .zip(truth.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / truth.len() as f64
                }
                None => f64::INFINITY,
            };
            *sum += err;
        }
    }
    Ok(sums.into_iter().map(|s| s / trajectories.len() as f64).collect())
}

fn with(base: &TrainConfig, seed: u64, order: usize, reg: bool) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.rollout.order = order;
    cfg.rollout.use_velocity_reg = reg;
    cfg
}

/// Runs one of the experiments and returns its table.
pub fn run_study(kind: StudyKind, cfg: &StudyConfig, data: &TrainData) -> Result<Report, TrainError> {
    let base = &cfg.train;
    let eval_set = if data.test.is_empty() { &data.valid } else { &data.test };
    match kind {
        StudyKind::ImpactOfK => {
            let mut report = Report::new(&["seed", "order", "test_mse", "test_mse_e2", "epoch_seconds"]);
            for &seed in &cfg.seeds {
                for &order in &cfg.orders {
                    let tc = with(base, seed, order, base.rollout.use_velocity_reg);
                    let out = train(&tc, data)?;
                    let eval = evaluate(&out.best_model(), &tc.rollout, eval_set, tc.eval_batch)?;
                    report.push(vec![
                        seed.to_string(),
                        order.to_string(),
                        eval.mse.to_string(),
                        eval.mse_e2().to_string(),
                        (out.seconds / tc.epochs as f64).to_string(),
                    ]);
                }
            }
            Ok(report)
        }
        StudyKind::NcVsNcplus => {
            let mut report = Report::new(&["seed", "variant", "epoch", "valid_mse", "ivel_mse_mean"]);
            for &seed in &cfg.seeds {
                for (variant, reg) in [("nc", false), ("nc_plus", true)] {
                    let tc = with(base, seed, base.rollout.order, reg);
                    let out = train(&tc, data)?;
                    for row in &out.metrics {
                        report.push(vec![
                            seed.to_string(),
                            variant.into(),
                            row.epoch.to_string(),
                            row.valid_mse.to_string(),
                            row.mean_intermediate_velocity_mse()
                                .map(|x| x.to_string())
                                .unwrap_or_default(),
                        ]);
                    }
                }
            }
            Ok(report)
        }
        StudyKind::Consecutive => {
            let held = long_trajectories(
                cfg.heldout,
                cfg.heldout_seed,
                cfg.heldout_particles,
                base.rollout.t_window,
                cfg.windows,
            )?;
            let mut report = Report::new(&["seed", "variant", "window", "mse"]);
            for &seed in &cfg.seeds {
                for (variant, order, reg) in [("nc_plus_2", 2, true), ("nc_0", 0, false)] {
                    let tc = with(base, seed, order, reg);
                    let model = train(&tc, data)?.best_model();
                    let errs = consecutive_errors(&model, &tc.rollout, &held, cfg.windows, cfg.divergence_bound)?;
                    for (w, e) in errs.iter().enumerate() {
                        report.push(vec![seed.to_string(), variant.into(), (w + 1).to_string(), e.to_string()]);
                    }
                }
            }
            Ok(report)
        }
    }
}
