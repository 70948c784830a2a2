//! Finite-population Monte-Carlo simulation.
//!
//! `M` agents follow linear policies in their own state and the empirical
//! mean-field `z̃ = (1/M) Σ x^i`. Each rollout draws from its own random
//! stream keyed by `(seed, rollout index)`, so estimates do not depend on how
//! rollouts are spread across threads; per-rollout results are collected and
//! summed in index order.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{psd_factor, Mat};
use crate::model::{LqMftgModel, PolicyProfile, StepGains};
use crate::riccati::stage_weight;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    /// Number of simulated agents `M` (at least 2).
    pub n_agents: usize,
    pub n_rollouts: usize,
    pub seed: u64,
    /// Pair rollouts `2j, 2j+1` with negated noise.
    pub antithetic: bool,
}

impl SimConfig {
    pub fn new(n_agents: usize, n_rollouts: usize, seed: u64) -> Self {
        Self {
            n_agents,
            n_rollouts,
            seed,
            antithetic: false,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::InvalidArgument("n_agents must be at least 2".into()));
        }
        if self.n_rollouts < 1 {
            return Err(Error::InvalidArgument("n_rollouts must be at least 1".into()));
        }
        if self.antithetic && self.n_rollouts % 2 == 1 {
            return Err(Error::InvalidArgument("antithetic sampling needs an even number of rollouts".into()));
        }
        Ok(())
    }
}

/// Monte-Carlo cost estimate. `total` is exactly `y_part + z_part`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub total: f64,
    pub y_part: f64,
    pub z_part: f64,
    /// Standard error of `total` across rollouts (antithetic pairs count as one sample).
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState {
    pub states: Vec<DVector<f64>>,
    pub empirical_mean: DVector<f64>,
    pub time: usize,
}

impl PopulationState {
    pub fn new(states: Vec<DVector<f64>>, time: usize) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::InvalidArgument("a population needs at least 2 agents".into()));
        }
        let dim = states[0].len();
        if states.iter().any(|s| s.len() != dim) {
            return Err(Error::Dimension("agent states have different lengths".into()));
        }
        let empirical_mean = mean_of(&states);
        Ok(Self {
            states,
            empirical_mean,
            time,
        })
    }

    /// `y^i = x^i - z̃`.
    pub fn deviations(&self) -> Vec<DVector<f64>> {
        self.states.iter().map(|x| x - &self.empirical_mean).collect()
    }
}

fn mean_of(states: &[DVector<f64>]) -> DVector<f64> {
    let mut sum = DVector::zeros(states[0].len());
    for s in states {
        sum += s;
    }
    sum / states.len() as f64
}

fn gaussian(rng: &mut StreamRng, factor: &Mat, sign: f64) -> DVector<f64> {
    if factor.iter().all(|v| *v == 0.0) {
        return DVector::zeros(factor.nrows());
    }
    let xi = DVector::from_fn(factor.ncols(), |_, _| sign * rng.sample::<f64, _>(StandardNormal));
    factor * xi
}

/// Advances every agent one step:
/// `x^i ← F_dev (x^i - z̃) + F_mean z̃ + ω^i + ω̄` with `ω^i ~ N(0, Σ)` per agent
/// and a shared `ω̄ ~ N(0, Σ̄)`. The common draw is taken before the agents'
/// draws, in agent order.
pub fn step_population(
    model: &LqMftgModel,
    gains: &StepGains,
    state: &PopulationState,
    rng: &mut StreamRng,
) -> Result<PopulationState> {
    let t = state.time;
    if t >= model.horizon {
        return Err(Error::InvalidArgument(format!("cannot step past the horizon (t={t})")));
    }
    let dev = model.deviation_loop(t, gains);
    let mean = model.mean_loop(t, gains);
    let common = gaussian(rng, &psd_factor(&model.sigma_bar), 1.0);
    let shared = &mean * &state.empirical_mean + common;
    let idio = psd_factor(&model.sigma);
    let states = state
        .states
        .iter()
        .map(|x| &dev * (x - &state.empirical_mean) + &shared + gaussian(rng, &idio, 1.0))
        .collect();
    PopulationState::new(states, t + 1)
}

/// Row-major copy of a square matrix for the inner loops.
#[derive(Debug, Clone)]
struct Square {
    n: usize,
    data: Vec<f64>,
}

impl Square {
    fn new(m: &Mat) -> Self {
        let n = m.nrows();
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self { n, data }
    }

    #[inline]
    fn mul_add(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    #[inline]
    fn quad(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            acc += x[i] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }
}

/// Noise factor, or `None` for an exactly zero covariance (no draws are made).
fn factor(cov: &Mat) -> Option<Square> {
    let l = psd_factor(cov);
    if l.iter().all(|v| *v == 0.0) {
        None
    } else {
        Some(Square::new(&l))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Stage {
    dev: Square,
    mean: Square,
    weight_y: Square,
    weight_z: Square,
}

impl Stage {
    pub(crate) fn new(model: &LqMftgModel, t: usize, gains: &StepGains) -> Self {
        Self {
            dev: Square::new(&model.deviation_loop(t, gains)),
            mean: Square::new(&model.mean_loop(t, gains)),
            weight_y: Square::new(&stage_weight(model, t, gains, false)),
            weight_z: Square::new(&stage_weight(model, t, gains, true)),
        }
    }
}

#[derive(Debug, Clone)]
enum Init {
    /// `x^i = ω^{0,i} + ω̄⁰`.
    Population { idio: Option<Square>, common: Option<Square> },
    /// Deviations i.i.d. `N(0, Σ_y)`, re-centred and rescaled so their sum is
    /// zero and each keeps covariance `Σ_y`; mean-field `N(0, Σ_z)`.
    Receding { y: Option<Square>, z: Option<Square> },
}

/// Precomputed simulation of stages `start..T`.
#[derive(Debug, Clone)]
pub(crate) struct Engine {
    dim: usize,
    n_agents: usize,
    stages: Vec<Stage>,
    terminal_y: Square,
    terminal_z: Square,
    idio: Option<Square>,
    common: Option<Square>,
    init: Init,
}

impl Engine {
    fn new(model: &LqMftgModel, policy: &PolicyProfile, start: usize, n_agents: usize, init: Init) -> Self {
        let horizon = model.horizon;
        Self {
            dim: model.state_dim,
            n_agents,

            stages: (start..horizon).map(|s| Stage::new(model, s, &policy.step(s))).collect(),
            terminal_y: Square::new(&model.q[horizon]),
            terminal_z: Square::new(&model.q_bar[horizon]),
            idio: factor(&model.sigma),
            common: factor(&model.sigma_bar),
            init,
        }
    }

    pub(crate) fn population(model: &LqMftgModel, policy: &PolicyProfile, n_agents: usize) -> Self {
        let init = Init::Population {
            idio: factor(&model.sigma0),
            common: factor(&model.sigma0_bar),
        };
        Self::new(model, policy, 0, n_agents, init)
    }

    /// Stages after `t` come from `frozen`; stage `t` is supplied per rollout.
    pub(crate) fn receding(
        model: &LqMftgModel,
        frozen: &PolicyProfile,
        t: usize,
        cov_y: &Mat,
        cov_z: &Mat,
        n_agents: usize,
    ) -> Self {
        let init = Init::Receding {
            y: factor(cov_y),
            z: factor(cov_z),
        };
        Self::new(model, frozen, t, n_agents, init)
    }

    fn draw(rng: &mut StreamRng, f: &Option<Square>, sign: f64, scratch: &mut [f64], out: &mut [f64]) {
        if let Some(f) = f {
            for v in scratch.iter_mut() {
                *v = sign * rng.sample::<f64, _>(StandardNormal);
            }
            f.mul_add(scratch, out);
        }
    }

    /// One rollout; returns the agent-averaged deviation cost and the
    /// mean-field cost. `first` overrides the stage at `start`.
    pub(crate) fn rollout(&self, first: Option<&Stage>, rng: &mut StreamRng, sign: f64) -> (f64, f64) {
        let (m, n) = (self.dim, self.n_agents);
        let inv_n = 1.0 / n as f64;
        let mut x = vec![0.0; n * m];
        let mut z = vec![0.0; m];
        let mut shared = vec![0.0; m];
        let mut scratch = vec![0.0; m];

        match &self.init {
            Init::Population { idio, common } => {
                Self::draw(rng, common, sign, &mut scratch, &mut shared);
                for xi in x.chunks_exact_mut(m) {
                    xi.copy_from_slice(&shared);
                    Self::draw(rng, idio, sign, &mut scratch, xi);
                }
            }
            Init::Receding { y, z: zf } => {
                Self::draw(rng, zf, sign, &mut scratch, &mut shared);
                for xi in x.chunks_exact_mut(m) {
                    Self::draw(rng, y, sign, &mut scratch, xi);
                }
                let mut mean = vec![0.0; m];
                for xi in x.chunks_exact(m) {
                    for (a, b) in mean.iter_mut().zip(xi) {
                        *a += b * inv_n;
                    }
                }
                let scale = (n as f64 / (n as f64 - 1.0)).sqrt();
                for xi in x.chunks_exact_mut(m) {
                    for k in 0..m {
                        xi[k] = (xi[k] - mean[k]) * scale + shared[k];
                    }
                }
            }
        }

        let (mut cost_y, mut cost_z) = (0.0, 0.0);
        let steps = self.stages.len();
        for i in 0..=steps {
            z.iter_mut().for_each(|v| *v = 0.0);
            for xi in x.chunks_exact(m) {
                for (a, b) in z.iter_mut().zip(xi) {
                    *a += b;
                }
            }
            z.iter_mut().for_each(|v| *v *= inv_n);
            for xi in x.chunks_exact_mut(m) {
                for (a, b) in xi.iter_mut().zip(&z) {
                    *a -= b;
                }
            }
            let (wy, wz) = if i == steps {
                (&self.terminal_y, &self.terminal_z)
            } else {
                let st = if i == 0 { first.unwrap_or(&self.stages[0]) } else { &self.stages[i] };
                (&st.weight_y, &st.weight_z)
            };
            cost_y += x.chunks_exact(m).map(|y| wy.quad(y)).sum::<f64>() * inv_n;
            cost_z += wz.quad(&z);
            if i == steps {
                break;
            }
            let st = if i == 0 { first.unwrap_or(&self.stages[0]) } else { &self.stages[i] };
            shared.iter_mut().for_each(|v| *v = 0.0);
            st.mean.mul_add(&z, &mut shared);
            Self::draw(rng, &self.common, sign, &mut scratch, &mut shared);
            let mut next = vec![0.0; m];
            for xi in x.chunks_exact_mut(m) {
                next.copy_from_slice(&shared);
                st.dev.mul_add(xi, &mut next);
                Self::draw(rng, &self.idio, sign, &mut scratch, &mut next);
                xi.copy_from_slice(&next);
            }
        }
        (cost_y, cost_z)
    }

    /// Runs `sim.n_rollouts` rollouts and aggregates them.
    pub(crate) fn estimate(&self, first: Option<&Stage>, sim: &SimConfig) -> CostReport {
        let results: Vec<(f64, f64)> = (0..sim.n_rollouts)
            .into_par_iter()
            .map(|r| {
                let (stream, sign) = if sim.antithetic {
                    ((r / 2) as u64, if r % 2 == 0 { 1.0 } else { -1.0 })
                } else {
                    (r as u64, 1.0)
                };
                let mut rng = rng::stream(sim.seed, &[stream]);
                self.rollout(first, &mut rng, sign)
            })
            .collect();
        summarize(&results, sim.antithetic)
    }
}

fn summarize(results: &[(f64, f64)], paired: bool) -> CostReport {
    let n = results.len() as f64;
    let y_part = results.iter().map(|r| r.0).sum::<f64>() / n;
    let z_part = results.iter().map(|r| r.1).sum::<f64>() / n;
    let total = y_part + z_part;
    let samples: Vec<f64> = if paired {
        results.chunks(2).map(|c| c.iter().map(|r| r.0 + r.1).sum::<f64>() / c.len() as f64).collect()
    } else {
        results.iter().map(|r| r.0 + r.1).collect()
    };
    CostReport {
        total,
        y_part,
        z_part,
        std_error: std_error(&samples),
    }
}

fn std_error(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Monte-Carlo estimate of the finite-population cost of `policy`, starting
/// from `x^i_0 = ω^{0,i} + ω̄⁰`.
pub fn rollout_cost(model: &LqMftgModel, policy: &PolicyProfile, sim: &SimConfig) -> Result<CostReport> {
    policy.check(model)?;
    sim.check()?;
    Ok(Engine::population(model, policy, sim.n_agents).estimate(None, sim))
}

/// Monte-Carlo estimate of the receding-horizon cost at `t`: deviations start
/// at `N(0, Σ_y)`, the mean-field at `N(0, Σ_z)`, the candidate gains act at
/// `t` and `frozen` supplies the gains for every later step.
pub fn receding_horizon_cost(
    model: &LqMftgModel,
    candidate: &StepGains,
    frozen: &PolicyProfile,
    t: usize,
    eval_cov_y: &Mat,
    eval_cov_z: &Mat,
    sim: &SimConfig,
) -> Result<CostReport> {
    check_receding(model, candidate, frozen, t)?;
    sim.check()?;
    let engine = Engine::receding(model, frozen, t, eval_cov_y, eval_cov_z, sim.n_agents);
    let first = Stage::new(model, t, candidate);
    Ok(engine.estimate(Some(&first), sim))
}

pub(crate) fn check_receding(model: &LqMftgModel, candidate: &StepGains, frozen: &PolicyProfile, t: usize) -> Result<()> {
    if t >= model.horizon {
        return Err(Error::InvalidArgument(format!("t={t} must be below the horizon {}", model.horizon)));
    }
    if frozen.horizon() != model.horizon {
        return Err(Error::MissingFutureGains {
            expected: model.horizon,
            got: frozen.horizon(),
        });
    }
    let mut probe = frozen.clone();
    probe.set_step(t, candidate.clone());
    probe.check(model)
}

/// Paired estimate of `J_M - J_∞` for `policy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapEstimate {
    /// Mean of the per-rollout difference.
    pub mean: f64,
    pub std_error: f64,
    pub finite_cost: f64,
    pub infinite_cost: f64,
}

/// Estimates the finite-population gap `J_M - J_∞` with common random numbers:
/// each rollout drives the `M`-agent system and its infinite-population
/// counterpart (deviations driven by each agent's own noise, mean-field by the
/// common noise only) with the same draws and records the cost difference.
pub fn population_gap_estimate(
    model: &LqMftgModel,
    policy: &PolicyProfile,
    n_agents: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<GapEstimate> {
    policy.check(model)?;
    SimConfig::new(n_agents, n_rollouts, seed).check()?;
    let engine = Engine::population(model, policy, n_agents);
    let results: Vec<(f64, f64)> = (0..n_rollouts)
        .into_par_iter()
        .map(|r| engine.paired_rollout(&mut rng::stream(seed, &[r as u64])))
        .collect();
    let diffs: Vec<f64> = results.iter().map(|(f, i)| f - i).collect();
    let n = n_rollouts as f64;
    Ok(GapEstimate {
        mean: diffs.iter().sum::<f64>() / n,
        std_error: std_error(&diffs),
        finite_cost: results.iter().map(|r| r.0).sum::<f64>() / n,
        infinite_cost: results.iter().map(|r| r.1).sum::<f64>() / n,
    })
}

impl Engine {
    /// Finite and infinite-population costs on shared draws.
    fn paired_rollout(&self, rng: &mut StreamRng) -> (f64, f64) {
        let (m, n) = (self.dim, self.n_agents);
        let inv_n = 1.0 / n as f64;
        let Init::Population { idio: idio0, common: common0 } = &self.init else {
            unreachable!("paired rollouts start from the model's initial law")
        };
        let mut x = vec![0.0; n * m];
        let mut y_ref = vec![0.0; n * m];
        let mut z_ref = vec![0.0; m];
        let mut z = vec![0.0; m];
        let mut scratch = vec![0.0; m];
        let mut noise = vec![0.0; m];

        Self::draw(rng, common0, 1.0, &mut scratch, &mut z_ref);
        for (xi, yi) in x.chunks_exact_mut(m).zip(y_ref.chunks_exact_mut(m)) {
            noise.iter_mut().for_each(|v| *v = 0.0);
            Self::draw(rng, idio0, 1.0, &mut scratch, &mut noise);
            yi.copy_from_slice(&noise);
            for k in 0..m {
                xi[k] = noise[k] + z_ref[k];
            }
        }

        let (mut finite, mut infinite) = (0.0, 0.0);
        let steps = self.stages.len();
        let mut next = vec![0.0; m];
        let mut common = vec![0.0; m];
        for i in 0..=steps {
            z.iter_mut().for_each(|v| *v = 0.0);
            for xi in x.chunks_exact(m) {
                for (a, b) in z.iter_mut().zip(xi) {
                    *a += b * inv_n;
                }
            }
            for xi in x.chunks_exact_mut(m) {
                for (a, b) in xi.iter_mut().zip(&z) {
                    *a -= b;
                }
            }
            let (wy, wz) = if i == steps {
                (&self.terminal_y, &self.terminal_z)
            } else {
                (&self.stages[i].weight_y, &self.stages[i].weight_z)
            };
            finite += x.chunks_exact(m).map(|y| wy.quad(y)).sum::<f64>() * inv_n + wz.quad(&z);
            infinite += y_ref.chunks_exact(m).map(|y| wy.quad(y)).sum::<f64>() * inv_n + wz.quad(&z_ref);
            if i == steps {
                break;
            }
            let st = &self.stages[i];
            common.iter_mut().for_each(|v| *v = 0.0);
            Self::draw(rng, &self.common, 1.0, &mut scratch, &mut common);
            // z_ref ← F_mean z_ref + ω̄
            next.copy_from_slice(&common);
            st.mean.mul_add(&z_ref, &mut next);
            z_ref.copy_from_slice(&next);
            let mut shared = common.clone();
            st.mean.mul_add(&z, &mut shared);
            for (xi, yi) in x.chunks_exact_mut(m).zip(y_ref.chunks_exact_mut(m)) {
                noise.iter_mut().for_each(|v| *v = 0.0);
                Self::draw(rng, &self.idio, 1.0, &mut scratch, &mut noise);
                next.copy_from_slice(&shared);
                st.dev.mul_add(xi, &mut next);
                for k in 0..m {
                    next[k] += noise[k];
                }
                xi.copy_from_slice(&next);
                next.copy_from_slice(&noise);
                st.dev.mul_add(yi, &mut next);
                yi.copy_from_slice(&next);
            }
        }
        (finite, infinite)
    }
}
