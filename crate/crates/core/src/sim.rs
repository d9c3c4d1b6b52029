//! Ground truth for a bending rod and synthetic sensor readings.
//!
//! The rod is inextensible with unit axial strain along body x. Its
//! curvature about body z ramps linearly with arclength and oscillates in
//! time; constant twist and bending about x and y give 3D shapes.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::graph::{build_grid, Grid, GridInit};
use crate::liegroup::{ad, adjoint, angular, Pose, Twist};
use crate::prior::{Mat24, NodeState, PriorParams};
use crate::sensors::{Measurement, MeasurementKind};
use crate::solver::SolverOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    /// Base curvature about body z (1/m).
    pub kappa0: f64,
    /// Tip amplitude of the oscillating curvature (1/m).
    pub kappa_amp: f64,
    /// Oscillation period (s).
    pub period: f64,
    /// Constant twist about body x (1/m).
    #[serde(default)]
    pub twist_x: f64,
    /// Constant curvature about body y (1/m).
    #[serde(default)]
    pub bend_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub qs_psd_diag: [f64; 6],
    pub qt_psd_diag: [f64; 6],
    pub qst_psd_diag: [f64; 6],
    /// Initial covariance, diagonal in chart order `(ξ, ε, ϖ, ψ)`.
    pub p0_diag: Vec<f64>,
    pub mean_strain: [f64; 6],
    #[serde(default)]
    pub mean_velocity: [f64; 6],
    #[serde(default)]
    pub mean_strain_velocity: [f64; 6],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Strain6,
    Gyro3,
    Pose6,
    Position3,
}

/// Where and when a sensor reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Every grid node.
    Nodes,
    /// At fixed arclengths, at `t ∈ {0, 1/rate, …}` up to the duration inclusive.
    Rate { rate_hz: f64, arclengths: Vec<f64> },
    /// Explicit `(s, t)` points.
    Points { points: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub kind: SensorKind,
    pub schedule: Schedule,
    /// Per-component noise standard deviation.
    pub std: f64,
    /// Observed strain components; all six when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<[bool; 6]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    PriorMean,
    GroundTruth,
    /// Poses integrated from the strain readings at the nodes.
    MeasurementSeeded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub max_halvings: usize,
    #[serde(default)]
    pub init: InitMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        SolverConfig { max_iters: d.max_iters, tol: d.tol, max_halvings: d.max_halvings, init: InitMode::default() }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            max_iters: self.max_iters,
            tol: self.tol,
            max_halvings: self.max_halvings,
            compute_covariance: true,
        }
    }
}

fn default_refinement() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Robot length (m).
    pub length: f64,
    pub n_space: usize,
    pub n_time: usize,
    /// Duration (s).
    pub duration: f64,
    pub prior: PriorConfig,
    pub truth: TruthConfig,
    pub sensors: Vec<SensorConfig>,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Integration lattice density relative to the grid.
    #[serde(default = "default_refinement")]
    pub refinement: usize,
}

fn uniform(n: usize, end: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| end * (i as f64 / (n - 1) as f64)).collect()
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.length > 0.0 && self.length.is_finite()) {
            return bad("length must be positive");
        }
        if self.n_space == 0 || self.n_time == 0 {
            return bad("grid sizes must be at least 1");
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) || (self.n_time > 1 && self.duration <= 0.0) {
            return bad("duration must be positive when the grid has more than one time knot");
        }
        if !(self.truth.period > 0.0) {
            return bad("truth period must be positive");
        }
        if self.refinement == 0 {
            return bad("refinement must be at least 1");
        }
        if self.prior.p0_diag.len() != 24 {
            return bad("p0_diag must have 24 entries");
        }
        for s in &self.sensors {
            if !(s.std >= 0.0 && s.std.is_finite()) {
                return bad("sensor std must be non-negative");
            }
            if let Schedule::Rate { rate_hz, arclengths } = &s.schedule {
                if !(*rate_hz > 0.0 && rate_hz.is_finite()) {
                    return bad("sensor rates must be positive");
                }
                if arclengths.iter().any(|&a| !(0.0..=self.length).contains(&a)) {
                    return bad("sensor arclength outside the robot");
                }
            }
            if let Schedule::Points { points } = &s.schedule {
                if points.iter().any(|p| !(0.0..=self.length).contains(&p[0]) || !(0.0..=self.duration).contains(&p[1])) {
                    return bad("sensor point outside the grid hull");
                }
            }
            if s.mask.is_some_and(|m| !m.iter().any(|&v| v)) {
                return bad("strain mask selects nothing");
            }
        }
        self.prior_params().validate().map_err(|e| SimError::InvalidConfig(e.to_string()))
    }

    pub fn s_knots(&self) -> Vec<f64> {
        uniform(self.n_space, self.length)
    }

    pub fn t_knots(&self) -> Vec<f64> {
        uniform(self.n_time, self.duration)
    }

    pub fn prior_params(&self) -> PriorParams {
        let p = &self.prior;
        let diag6 = |d: &[f64; 6]| nalgebra::Matrix6::from_diagonal(&Twist::from_column_slice(d));
        let mut p0 = Mat24::zeros();
        for (i, v) in p.p0_diag.iter().take(24).enumerate() {
            p0[(i, i)] = *v;
        }
        PriorParams {
            qs_psd: diag6(&p.qs_psd_diag),
            qt_psd: diag6(&p.qt_psd_diag),
            qst_psd: diag6(&p.qst_psd_diag),
            p0,
            prior_mean: NodeState::new(
                Pose::identity(),
                Twist::from_column_slice(&p.mean_strain),
                Twist::from_column_slice(&p.mean_velocity),
                Twist::from_column_slice(&p.mean_strain_velocity),
            ),
        }
    }

    /// Copy with every sensor's noise scaled by `factor`.
    pub fn with_noise_scale(&self, factor: f64) -> ScenarioConfig {
        let mut out = self.clone();
        for s in &mut out.sensors {
            s.std *= factor;
        }
        out
    }

    fn step(&self) -> f64 {
        self.length / (8 * self.n_space.max(1) * self.refinement) as f64
    }
}

/// Body-frame strain `(1, 0, 0, τ_x, κ_y, κ(s, t))`, with
/// `κ(s, t) = κ₀ + κ_A·sin(2πt/T_p)·s/L`.
pub fn strain_field(s: f64, t: f64, cfg: &ScenarioConfig) -> Result<Twist, SimError> {
    check_s(s, cfg)?;
    Ok(body_strain(s, t, cfg))
}

fn check_s(s: f64, cfg: &ScenarioConfig) -> Result<(), SimError> {
    if (0.0..=cfg.length).contains(&s) {
        Ok(())
    } else {
        Err(SimError::OutOfRange { s, length: cfg.length })
    }
}

fn body_strain(s: f64, t: f64, cfg: &ScenarioConfig) -> Twist {
    let tr = &cfg.truth;
    let kappa = tr.kappa0 + tr.kappa_amp * (2.0 * PI * t / tr.period).sin() * (s / cfg.length);
    Twist::new(1.0, 0.0, 0.0, tr.twist_x, tr.bend_y, kappa)
}

const GAUSS_OFFSET: f64 = 0.288_675_134_594_812_9; // √3/6

/// One fourth-order Magnus step of `T' = T·ε^` over `[s, s + h]`.
fn magnus_step(s: f64, h: f64, t: f64, cfg: &ScenarioConfig) -> Pose {
    let a1 = body_strain(s + (0.5 - GAUSS_OFFSET) * h, t, cfg);
    let a2 = body_strain(s + (0.5 + GAUSS_OFFSET) * h, t, cfg);
    let omega = (a1 + a2) * (0.5 * h) + ad(&a1) * a2 * (h * h * 3f64.sqrt() / 12.0);
    Pose::exp(&omega)
}

fn integrate_from(mut pose: Pose, from: f64, to: f64, t: f64, steps: usize, cfg: &ScenarioConfig) -> Pose {
    let h = (to - from) / steps as f64;
    for i in 0..steps {
        pose = pose * magnus_step(from + i as f64 * h, h, t, cfg);
    }
    pose
}

fn steps_for(len: f64, cfg: &ScenarioConfig) -> usize {
    ((len / cfg.step()).ceil() as usize).max(1)
}

/// Base-to-`s` pose at time `t`; the base is the identity.
pub fn integrate_pose(cfg: &ScenarioConfig, s: f64, t: f64) -> Result<Pose, SimError> {
    check_s(s, cfg)?;
    Ok(integrate_from(Pose::identity(), 0.0, s, t, steps_for(s, cfg), cfg))
}

/// As [`integrate_pose`] with an explicit step count.
pub fn integrate_pose_steps(cfg: &ScenarioConfig, s: f64, t: f64, steps: usize) -> Result<Pose, SimError> {
    check_s(s, cfg)?;
    Ok(integrate_from(Pose::identity(), 0.0, s, t, steps.max(1), cfg))
}

/// Poses at sorted arclengths along one time slice.
fn poses_along(cfg: &ScenarioConfig, s_sorted: &[f64], t: f64) -> Vec<Pose> {
    let mut out = Vec::with_capacity(s_sorted.len());
    let (mut pose, mut at) = (Pose::identity(), 0.0);
    for &s in s_sorted {
        if s > at {
            pose = integrate_from(pose, at, s, t, steps_for(s - at, cfg), cfg);
            at = s;
        }
        out.push(pose);
    }
    out
}

/// Analytic ground-truth field.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    cfg: ScenarioConfig,
    /// Time step of the central differences.
    delta: f64,
}

impl GroundTruth {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        Ok(GroundTruth { cfg: cfg.clone(), delta: 1e-5 * cfg.truth.period })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    /// Uses a custom central-difference step.
    pub fn with_time_step(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    /// States at ascending arclengths `s` on the time slice `t`.
    ///
    /// The velocity is `log(T(t+δ)·T(t−δ)⁻¹)/2δ`. The strain-velocity is
    /// the mixed derivative of the pose in the node's own chart,
    /// `∂ₜε + ½·ad(ε)·ϖ`, which is what the chart prior propagates.
    pub fn row(&self, s: &[f64], t: f64) -> Result<Vec<NodeState>, SimError> {
        for w in s.windows(2) {
            if w[1] < w[0] {
                return Err(SimError::InvalidConfig("arclengths must be ascending".into()));
            }
        }
        for &v in s {
            check_s(v, &self.cfg)?;
        }
        let d = self.delta;
        let now = poses_along(&self.cfg, s, t);
        let after = poses_along(&self.cfg, s, t + d);
        let before = poses_along(&self.cfg, s, t - d);
        let left_strain = |pose: &Pose, si: f64, ti: f64| adjoint(pose) * body_strain(si, ti, &self.cfg);
        Ok((0..s.len())
            .map(|i| {
                let strain = left_strain(&now[i], s[i], t);
                let velocity = (after[i] * before[i].inverse()).log() / (2.0 * d);
                let d_strain = (left_strain(&after[i], s[i], t + d) - left_strain(&before[i], s[i], t - d)) / (2.0 * d);
                let strain_velocity = d_strain + ad(&strain) * velocity * 0.5;
                NodeState::new(now[i], strain, velocity, strain_velocity)
            })
            .collect())
    }

    pub fn state(&self, s: f64, t: f64) -> Result<NodeState, SimError> {
        Ok(self.row(&[s], t)?[0])
    }

    /// Ground truth on the scenario grid, flattened space-major.
    pub fn grid_states(&self) -> Result<Vec<NodeState>, SimError> {
        let s = self.cfg.s_knots();
        let mut out = Vec::with_capacity(s.len() * self.cfg.n_time);
        for t in self.cfg.t_knots() {
            out.extend(self.row(&s, t)?);
        }
        Ok(out)
    }
}

pub fn ground_truth_state(cfg: &ScenarioConfig, s: f64, t: f64) -> Result<NodeState, SimError> {
    GroundTruth::new(cfg)?.state(s, t)
}

/// Inclusive sample times `0, 1/rate, …` up to `duration`.
pub fn rate_times(rate_hz: f64, duration: f64) -> Vec<f64> {
    let count = (duration * rate_hz + 1e-9).floor() as usize + 1;
    (0..count).map(|i| i as f64 / rate_hz).collect()
}

fn schedule_points(sensor: &SensorConfig, cfg: &ScenarioConfig) -> Vec<(f64, f64)> {
    match &sensor.schedule {
        Schedule::Nodes => {
            let s = cfg.s_knots();
            cfg.t_knots().iter().flat_map(|&t| s.iter().map(move |&s| (s, t))).collect()
        }
        Schedule::Rate { rate_hz, arclengths } => rate_times(*rate_hz, cfg.duration)
            .into_iter()
            .flat_map(|t| arclengths.iter().map(move |&s| (s, t)))
            .collect(),
        Schedule::Points { points } => points.iter().map(|p| (p[0], p[1])).collect(),
    }
}

/// Noisy readings of every configured sensor, in configuration order.
/// Deterministic for a fixed seed.
pub fn generate_measurements(cfg: &ScenarioConfig, truth: &GroundTruth) -> Result<Vec<Measurement>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for sensor in &cfg.sensors {
        let std = sensor.std;
        let mut noise = |n: usize| -> Vec<f64> {
            (0..n).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
        };
        for (s, t) in schedule_points(sensor, cfg) {
            let x = truth.state(s, t)?;
            let kind = match sensor.kind {
                SensorKind::Strain6 => {
                    let n = noise(6);
                    let body = body_strain(s, t, cfg) + Twist::from_column_slice(&n);
                    MeasurementKind::Strain { value: body, mask: sensor.mask.unwrap_or([true; 6]) }
                }
                SensorKind::Gyro3 => {
                    let n = noise(3);
                    let rate = x.pose.rotation.matrix().transpose() * angular(&x.velocity);
                    MeasurementKind::Gyro { value: rate + Vector3::from_column_slice(&n) }
                }
                SensorKind::Pose6 => {
                    let n = noise(6);
                    MeasurementKind::Pose { value: Pose::exp(&Twist::from_column_slice(&n)) * x.pose }
                }
                SensorKind::Position3 => {
                    let n = noise(3);
                    MeasurementKind::Position { value: x.pose.translation + Vector3::from_column_slice(&n) }
                }
            };
            let m = kind.dim();
            out.push(Measurement::new(kind, s, t, DMatrix::identity(m, m) * (std * std)));
        }
    }
    Ok(out)
}

/// Starting grid for the solver according to the configured init mode.
pub fn initial_grid(cfg: &ScenarioConfig, measurements: &[Measurement]) -> Result<Grid, SimError> {
    let (s, t) = (cfg.s_knots(), cfg.t_knots());
    let params = cfg.prior_params();
    let grid = match cfg.solver.init {
        InitMode::PriorMean => build_grid(&s, &t, GridInit::PriorMean(&params))?,
        InitMode::GroundTruth => Grid::from_states(&s, &t, GroundTruth::new(cfg)?.grid_states()?)?,
        InitMode::MeasurementSeeded => Grid::from_states(&s, &t, seeded_states(cfg, measurements))?,
    };
    Ok(grid)
}

/// Poses integrated along each time row from full strain readings at the
/// nodes, falling back to the prior mean strain where a node has none.
/// Rates start at zero.
fn seeded_states(cfg: &ScenarioConfig, measurements: &[Measurement]) -> Vec<NodeState> {
    let (s, t) = (cfg.s_knots(), cfg.t_knots());
    let fallback = Twist::from_column_slice(&cfg.prior.mean_strain);
    let reading = |sv: f64, tv: f64| {
        measurements
            .iter()
            .find_map(|m| match &m.kind {
                MeasurementKind::Strain { value, mask } if mask.iter().all(|&v| v) && m.s == sv && m.t == tv => {
                    Some(*value)
                }
                _ => None,
            })
            .unwrap_or(fallback)
    };
    let mut out = Vec::with_capacity(s.len() * t.len());
    for &tk in &t {
        let mut pose = Pose::identity();
        let mut prev = reading(s[0], tk);
        for (n, &sn) in s.iter().enumerate() {
            let body = reading(sn, tk);
            if n > 0 {
                pose = pose * Pose::exp(&((prev + body) * (0.5 * (sn - s[n - 1]))));
            }
            out.push(NodeState::new(pose, adjoint(&pose) * body, Twist::zeros(), Twist::zeros()));
            prev = body;
        }
    }
    out
}
