//! Learners: receding-horizon gradient descent ascent (zero-order or exact
//! gradients) and a full-horizon descent-ascent baseline, both instrumented
//! against the Riccati oracle.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::grad::{full_horizon_gradient, project_ball, zero_order_gradient, ExactGradient, Player, RecedingProblem, SmoothingParams, StackedGain};
use crate::linalg::{spectral_norm, Mat};
use crate::model::{LqMftgModel, PolicyProfile, StepGains};
use crate::riccati::{closed_form_cost, NoiseModel, RiccatiSolution};
use crate::rng;
use crate::sim::{check_receding, Engine, SimConfig, Stage};

/// Projection radius used when neither the config nor an oracle supplies one.
pub const DEFAULT_PROJ_RADIUS_SQ: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `η_k = η_0 / (k + 1)`.
    InverseK(f64),
}

impl LrSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            LrSchedule::Constant(eta) => eta,
            LrSchedule::InverseK(eta) => eta / (k as f64 + 1.0),
        }
    }

    fn base(&self) -> f64 {
        match *self {
            LrSchedule::Constant(eta) | LrSchedule::InverseK(eta) => eta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    ZeroOrder,
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgdaConfig {
    /// Inner iterations `K` per timestep (per run for the baseline).
    pub inner_iters: usize,
    pub lr: LrSchedule,
    pub smoothing: SmoothingParams,
    /// Squared projection radius `D`; `None` derives it from the oracle.
    pub proj_radius_sq: Option<f64>,
    /// Population simulated by each zero-order cost evaluation.
    pub sim: SimConfig,
    pub eval_cov_y: Mat,
    pub eval_cov_z: Mat,
    pub seed: u64,
    pub gradient_mode: GradientMode,
    /// Exact mode only: stop a timestep once the gradient norm drops below `1e-10`.
    pub early_stop: bool,
    /// Fill `wall_ms` in trace rows (otherwise 0, keeping traces reproducible).
    pub record_wall_clock: bool,
}

impl RgdaConfig {
    /// Exact-gradient defaults: `Σ_y = Σ_z = I`.
    pub fn exact(model: &LqMftgModel, inner_iters: usize, lr: f64) -> Self {
        let m = model.state_dim;
        Self {
            inner_iters,
            lr: LrSchedule::Constant(lr),
            smoothing: SmoothingParams::new(0.1, 1000),
            proj_radius_sq: None,
            sim: SimConfig::new(100, 1, 0),
            eval_cov_y: Mat::identity(m, m),
            eval_cov_z: Mat::identity(m, m),
            seed: 0,
            gradient_mode: GradientMode::Exact,
            early_stop: false,
            record_wall_clock: false,
        }
    }

    pub fn zero_order(model: &LqMftgModel, inner_iters: usize, lr: f64, smoothing: SmoothingParams, sim: SimConfig) -> Self {
        Self {
            smoothing,
            sim,
            gradient_mode: GradientMode::ZeroOrder,
            ..Self::exact(model, inner_iters, lr)
        }
    }

    pub fn check(&self, model: &LqMftgModel) -> Result<()> {
        let eta = self.lr.base();
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if let Some(d) = self.proj_radius_sq {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidArgument("projection radius must be positive".into()));
            }
        }
        let m = model.state_dim;
        if self.eval_cov_y.shape() != (m, m) || self.eval_cov_z.shape() != (m, m) {
            return Err(Error::Dimension(format!("evaluation covariances must be {m}x{m}")));
        }
        if self.gradient_mode == GradientMode::ZeroOrder {
            self.smoothing.check()?;
            self.sim.check()?;
        }
        Ok(())
    }

    /// `D`: the configured value, else `4 max_t ‖[K*;L*]‖²` over both players
    /// (at least 1), else [`DEFAULT_PROJ_RADIUS_SQ`].
    pub fn resolve_radius_sq(&self, oracle: Option<&RiccatiSolution>) -> f64 {
        if let Some(d) = self.proj_radius_sq {
            return d;
        }
        match oracle.filter(|o| o.solved()) {
            Some(o) => {
                let nash = &o.nash_gains;
                let largest = (0..nash.horizon())
                    .flat_map(|t| {
                        let g = nash.step(t);
                        [StackedGain::of(Player::Minimizer, &g).norm_sq(), StackedGain::of(Player::Maximizer, &g).norm_sq()]
                    })
                    .fold(0.0, f64::max);
                (4.0 * largest).max(1.0)
            }
            None => DEFAULT_PROJ_RADIUS_SQ,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Timestep being solved; `None` for the baseline, which updates all at once.
    pub t: Option<usize>,
    pub k: usize,
    /// Exact mode: closed-form cost at the updated gains. Zero-order mode: one
    /// Monte-Carlo evaluation at the gains before the update.
    pub cost_estimate: f64,
    /// Nash gap of the deviation gains (max over players; over timesteps for
    /// the baseline). `None` without an oracle.
    pub err_k: Option<f64>,
    pub err_l: Option<f64>,
    /// Frobenius distance to the step's own saddle point (exact RGDA only).
    pub saddle_gap: Option<f64>,
    pub grad_norm: f64,
    pub proj_active: bool,
    pub wall_ms: f64,
    /// Gains after the update: the step-`t` gains for RGDA, every step for the baseline.
    pub gains: Vec<StepGains>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningTrace {
    pub algo: String,
    pub rows: Vec<TraceRow>,
    /// Nash gap of the zero initialization.
    pub initial_gap: Option<f64>,
    /// Nash gap of the returned policy.
    pub final_gap: Option<f64>,
    /// Per-timestep gradient evaluations (exact) or cost evaluations (zero-order).
    pub total_evals: u64,
    pub proj_radius_sq: f64,
}

/// Per-timestep distance to the oracle in spectral norm:
/// `err_K(t) = max_j ‖K^j_t - K^{j*}_t‖`, `err_L(t)` likewise.
#[derive(Debug, Clone, PartialEq)]
pub struct NashGap {
    pub err_k: Vec<f64>,
    pub err_l: Vec<f64>,
}

impl NashGap {
    pub fn max_k(&self) -> f64 {
        self.err_k.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_l(&self) -> f64 {
        self.err_l.iter().copied().fold(0.0, f64::max)
    }

    pub fn max(&self) -> f64 {
        self.max_k().max(self.max_l())
    }
}

fn step_gap(gains: &StepGains, nash: &StepGains) -> (f64, f64) {
    let err_k = spectral_norm(&(&gains.k1 - &nash.k1)).max(spectral_norm(&(&gains.k2 - &nash.k2)));
    let err_l = spectral_norm(&(&gains.l1 - &nash.l1)).max(spectral_norm(&(&gains.l2 - &nash.l2)));
    (err_k, err_l)
}

pub fn nash_gap(policy: &PolicyProfile, oracle: &RiccatiSolution) -> Result<NashGap> {
    let nash = &oracle.nash_gains;
    if policy.horizon() != nash.horizon() {
        return Err(Error::Dimension(format!(
            "policy has {} steps, oracle has {}",
            policy.horizon(),
            nash.horizon()
        )));
    }
    let mut gap = NashGap {
        err_k: Vec::with_capacity(policy.horizon()),
        err_l: Vec::with_capacity(policy.horizon()),
    };
    for t in 0..policy.horizon() {
        let (g, n) = (policy.step(t), nash.step(t));
        if g.k1.shape() != n.k1.shape() || g.k2.shape() != n.k2.shape() || g.l1.shape() != n.l1.shape() || g.l2.shape() != n.l2.shape() {
            return Err(Error::Dimension(format!("gain shapes differ from the oracle at t={t}")));
        }
        let (k, l) = step_gap(&g, &n);
        gap.err_k.push(k);
        gap.err_l.push(l);
    }
    Ok(gap)
}

fn usable(oracle: Option<&RiccatiSolution>) -> Option<&RiccatiSolution> {
    oracle.filter(|o| o.solved())
}

fn elapsed_ms(start: &Instant, on: bool) -> f64 {
    if on {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

fn ensure_finite(value: f64, what: &'static str, t: usize, k: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what, t, k })
    }
}

/// Projected update of one player's stacked gains; returns whether the
/// projection was active.
fn update(gains: &mut StepGains, player: Player, direction: &StackedGain, eta: f64, radius_sq: f64) -> bool {
    let current = StackedGain::of(player, gains);
    let step = StackedGain {
        player,
        matrix: &current.matrix + &direction.matrix * eta,
    };
    let active = step.norm_sq() > radius_sq;
    project_ball(&step, radius_sq).apply_to(gains);
    active
}

/// Solves the step-`t` saddle problem with later gains frozen, starting from
/// zero gains: `K` rounds of a projected descent step for the minimizer
/// followed by a projected ascent step for the maximizer (which sees the
/// minimizer's updated gains).
pub fn inner_gda(
    model: &LqMftgModel,
    t: usize,
    frozen: &PolicyProfile,
    cfg: &RgdaConfig,
    oracle: Option<&RiccatiSolution>,
) -> Result<(StepGains, Vec<TraceRow>)> {
    cfg.check(model)?;
    let radius_sq = cfg.resolve_radius_sq(oracle);
    inner_gda_with(model, t, frozen, cfg, usable(oracle), radius_sq, &Instant::now())
}

fn inner_gda_with(
    model: &LqMftgModel,
    t: usize,
    frozen: &PolicyProfile,
    cfg: &RgdaConfig,
    oracle: Option<&RiccatiSolution>,
    radius_sq: f64,
    start: &Instant,
) -> Result<(StepGains, Vec<TraceRow>)> {
    let mut gains = StepGains::zeros(model.state_dim, model.control_dim);
    check_receding(model, &gains, frozen, t)?;
    let problem = RecedingProblem::new(model, frozen, t, &cfg.eval_cov_y, &cfg.eval_cov_z, &NoiseModel::infinite(model))?;
    let nash = oracle.map(|o| o.nash_gains.step(t));
    let mut rows = Vec::with_capacity(cfg.inner_iters);

    match cfg.gradient_mode {
        GradientMode::Exact => {
            let saddle = problem.saddle();
            for k in 0..cfg.inner_iters {
                let eta = cfg.lr.at(k);
                let g1 = problem.gradient(&gains).player1;
                ensure_finite(g1.norm(), "gradient", t, k)?;
                let mut active = update(&mut gains, Player::Minimizer, &scaled(&g1, -1.0), eta, radius_sq);
                let g2 = problem.gradient(&gains).player2;
                ensure_finite(g2.norm(), "gradient", t, k)?;
                active |= update(&mut gains, Player::Maximizer, &g2, eta, radius_sq);
                let cost = problem.cost(&gains);
                ensure_finite(cost, "cost", t, k)?;
                let grad_norm = (g1.norm_sq() + g2.norm_sq()).sqrt();
                let (err_k, err_l) = gaps(&gains, nash.as_ref());
                rows.push(TraceRow {
                    t: Some(t),
                    k,
                    cost_estimate: cost,
                    err_k,
                    err_l,
                    saddle_gap: saddle.as_ref().map(|s| distance(&gains, s)),
                    grad_norm,
                    proj_active: active,
                    wall_ms: elapsed_ms(start, cfg.record_wall_clock),
                    gains: vec![gains.clone()],
                });
                if cfg.early_stop && grad_norm < 1e-10 {
                    break;
                }
            }
        }
        GradientMode::ZeroOrder => {
            let engine = Engine::receding(model, frozen, t, &cfg.eval_cov_y, &cfg.eval_cov_z, cfg.sim.n_agents);
            let rollouts = cfg.sim.n_rollouts;
            let estimate = |candidate: &StepGains, rng: &mut rng::StreamRng| {
                let stage = Stage::new(model, t, candidate);
                let total: f64 = (0..rollouts)
                    .map(|_| {
                        let (y, z) = engine.rollout(Some(&stage), rng, 1.0);
                        y + z
                    })
                    .sum();
                total / rollouts as f64
            };
            for k in 0..cfg.inner_iters {
                let eta = cfg.lr.at(k);
                let key = |player: u64| rng::derive_key(cfg.seed, &[t as u64, k as u64, player]);

                let base1 = StackedGain::of(Player::Minimizer, &gains);
                let current = gains.clone();
                let g1 = zero_order_gradient(|g, rng| estimate(&g.inserted(&current), rng), &base1, &cfg.smoothing, key(0))?;
                // One Monte-Carlo evaluation at the unperturbed gains for the trace.
                let mean_cost = estimate(&current, &mut rng::stream(key(2), &[]));
                ensure_finite(g1.norm(), "gradient", t, k)?;
                ensure_finite(mean_cost, "cost", t, k)?;
                let mut active = update(&mut gains, Player::Minimizer, &scaled(&g1, -1.0), eta, radius_sq);

                let base2 = StackedGain::of(Player::Maximizer, &gains);
                let current = gains.clone();
                let g2 = zero_order_gradient(|g, rng| estimate(&g.inserted(&current), rng), &base2, &cfg.smoothing, key(1))?;
                ensure_finite(g2.norm(), "gradient", t, k)?;
                active |= update(&mut gains, Player::Maximizer, &g2, eta, radius_sq);

                let (err_k, err_l) = gaps(&gains, nash.as_ref());
                rows.push(TraceRow {
                    t: Some(t),
                    k,
                    cost_estimate: mean_cost,
                    err_k,
                    err_l,
                    saddle_gap: None,
                    grad_norm: (g1.norm_sq() + g2.norm_sq()).sqrt(),
                    proj_active: active,
                    wall_ms: elapsed_ms(start, cfg.record_wall_clock),
                    gains: vec![gains.clone()],
                });
            }
        }
    }
    Ok((gains, rows))
}

fn scaled(g: &StackedGain, factor: f64) -> StackedGain {
    StackedGain {
        player: g.player,
        matrix: &g.matrix * factor,
    }
}

fn gaps(gains: &StepGains, nash: Option<&StepGains>) -> (Option<f64>, Option<f64>) {
    match nash {
        Some(n) => {
            let (k, l) = step_gap(gains, n);
            (Some(k), Some(l))
        }
        None => (None, None),
    }
}

fn distance(a: &StepGains, b: &StepGains) -> f64 {
    ((&a.k1 - &b.k1).norm_squared() + (&a.k2 - &b.k2).norm_squared() + (&a.l1 - &b.l1).norm_squared() + (&a.l2 - &b.l2).norm_squared()).sqrt()
}

fn evals_per_iter(cfg: &RgdaConfig) -> u64 {
    match cfg.gradient_mode {
        GradientMode::Exact => 2,
        GradientMode::ZeroOrder => {
            2 * cfg.smoothing.batch as u64 * cfg.sim.n_rollouts as u64
        }
    }
}

/// Receding-horizon gradient descent ascent: timesteps are solved backward
/// from `T-1` to `0`, each by [`inner_gda`] with the already learned later
/// gains frozen.
pub fn rgda(model: &LqMftgModel, cfg: &RgdaConfig, oracle: Option<&RiccatiSolution>) -> Result<(PolicyProfile, LearningTrace)> {
    cfg.check(model)?;
    let radius_sq = cfg.resolve_radius_sq(oracle);
    let oracle = usable(oracle);
    let start = Instant::now();
    let mut policy = PolicyProfile::zeros(model);
    let initial_gap = oracle.map(|o| nash_gap(&policy, o)).transpose()?.map(|g| g.max_k());
    let mut rows = Vec::with_capacity(model.horizon * cfg.inner_iters);
    for t in (0..model.horizon).rev() {
        let (gains, step_rows) = inner_gda_with(model, t, &policy, cfg, oracle, radius_sq, &start)?;
        policy.set_step(t, gains);
        rows.extend(step_rows);
    }
    let final_gap = oracle.map(|o| nash_gap(&policy, o)).transpose()?.map(|g| g.max_k());
    let algo = match cfg.gradient_mode {
        GradientMode::Exact => "ergda",
        GradientMode::ZeroOrder => "rgda",
    };
    let total_evals = rows.len() as u64 * evals_per_iter(cfg);
    Ok((
        policy,
        LearningTrace {
            algo: algo.into(),
            rows,
            initial_gap,
            final_gap,
            total_evals,
            proj_radius_sq: radius_sq,
        },
    ))
}

/// Full-horizon baseline: every iteration takes a projected descent step on
/// all of the minimizer's gains, then a projected ascent step on all of the
/// maximizer's gains, using exact gradients of the full cost under the current
/// policy (no freezing). States start from the evaluation covariances.
pub fn baseline_gda(model: &LqMftgModel, cfg: &RgdaConfig, oracle: Option<&RiccatiSolution>) -> Result<(PolicyProfile, LearningTrace)> {
    cfg.check(model)?;
    if cfg.gradient_mode != GradientMode::Exact {
        return Err(Error::InvalidArgument("the baseline runs with exact gradients only".into()));
    }
    let radius_sq = cfg.resolve_radius_sq(oracle);
    let oracle = usable(oracle);
    let start = Instant::now();
    let noise = NoiseModel::infinite(model);
    let horizon = model.horizon;
    let mut policy = PolicyProfile::zeros(model);
    let gap_of = |p: &PolicyProfile| -> Result<(Option<f64>, Option<f64>)> {
        Ok(match oracle {
            Some(o) => {
                let g = nash_gap(p, o)?;
                (Some(g.max_k()), Some(g.max_l()))
            }
            None => (None, None),
        })
    };
    let initial_gap = gap_of(&policy)?.0;
    let mut rows = Vec::with_capacity(cfg.inner_iters);
    let step_all = |policy: &mut PolicyProfile, grads: &[ExactGradient], player: Player, eta: f64| -> bool {
        let mut active = false;
        for (t, g) in grads.iter().enumerate() {
            let mut gains = policy.step(t);
            let dir = match player {
                Player::Minimizer => scaled(&g.player1, -1.0),
                Player::Maximizer => g.player2.clone(),
            };
            active |= update(&mut gains, player, &dir, eta, radius_sq);
            policy.set_step(t, gains);
        }
        active
    };
    for k in 0..cfg.inner_iters {
        let eta = cfg.lr.at(k);
        let g1 = full_horizon_gradient(model, &policy, &cfg.eval_cov_y, &cfg.eval_cov_z, &noise)?;
        let norm1: f64 = g1.iter().map(|g| g.player1.norm_sq()).sum();
        ensure_finite(norm1, "gradient", 0, k)?;
        let mut active = step_all(&mut policy, &g1, Player::Minimizer, eta);
        let g2 = full_horizon_gradient(model, &policy, &cfg.eval_cov_y, &cfg.eval_cov_z, &noise)?;
        let norm2: f64 = g2.iter().map(|g| g.player2.norm_sq()).sum();
        ensure_finite(norm2, "gradient", 0, k)?;
        active |= step_all(&mut policy, &g2, Player::Maximizer, eta);
        let cost = closed_form_cost(model, &policy, &cfg.eval_cov_y, &cfg.eval_cov_z, 0)?.total;
        ensure_finite(cost, "cost", 0, k)?;
        let (err_k, err_l) = gap_of(&policy)?;
        rows.push(TraceRow {
            t: None,
            k,
            cost_estimate: cost,
            err_k,
            err_l,
            saddle_gap: None,
            grad_norm: (norm1 + norm2).sqrt(),
            proj_active: active,
            wall_ms: elapsed_ms(&start, cfg.record_wall_clock),
            gains: (0..horizon).map(|t| policy.step(t)).collect(),
        });
    }
    let final_gap = gap_of(&policy)?.0;
    Ok((
        policy,
        LearningTrace {
            algo: "baseline".into(),
            total_evals: 2 * horizon as u64 * rows.len() as u64,
            rows,
            initial_gap,
            final_gap,
            proj_radius_sq: radius_sq,
        },
    ))
}
