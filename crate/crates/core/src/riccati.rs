//! Exact solution of the game: coupled backward Riccati recursions, Nash
//! gains and value, attenuation-level certificates, closed-form evaluation of
//! arbitrary linear policies and the finite-population gap constant.

use crate::error::{Error, Result};
use crate::linalg::{checked_inverse, frobenius, min_eigenvalue, symmetrize, trace_product, Mat, STRICT_PD_MARGIN};
use crate::model::{LqMftgModel, PolicyProfile, StepGains};

/// Per-step process-noise covariances of the deviation and mean-field processes.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub dev: Mat,
    pub mean: Mat,
}

impl NoiseModel {
    /// Infinite population: deviations see `Σ`, the mean-field sees `Σ̄`.
    pub fn infinite(model: &LqMftgModel) -> Self {
        Self {
            dev: model.sigma.clone(),
            mean: model.sigma_bar.clone(),
        }
    }

    /// `n` simulated agents with an empirical mean-field: deviations see
    /// `((n-1)/n) Σ` and the empirical mean sees `Σ̄ + Σ/n`.
    pub fn finite(model: &LqMftgModel, n_agents: usize) -> Self {
        let n = n_agents as f64;
        Self {
            dev: &model.sigma * ((n - 1.0) / n),
            mean: &model.sigma_bar + &model.sigma / n,
        }
    }

    /// Covariances of the initial deviation and mean-field states, built from
    /// `Σ⁰, Σ̄⁰` the same way as [`NoiseModel::infinite`] / [`NoiseModel::finite`].
    pub fn initial(model: &LqMftgModel, n_agents: Option<usize>) -> Self {
        match n_agents {
            None => Self {
                dev: model.sigma0.clone(),
                mean: model.sigma0_bar.clone(),
            },
            Some(n) => {
                let n = n as f64;
                Self {
                    dev: &model.sigma0 * ((n - 1.0) / n),
                    mean: &model.sigma0_bar + &model.sigma0 / n,
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub gamma: f64,
    /// `M_t` for `t = 0..=T`.
    pub m_seq: Vec<Mat>,
    pub m_bar_seq: Vec<Mat>,
    /// `Λ_t` for `t = 0..T`.
    pub lambda_seq: Vec<Mat>,
    pub lambda_bar_seq: Vec<Mat>,
    pub n_seq: Vec<f64>,
    pub n_bar_seq: Vec<f64>,
    pub nash_gains: PolicyProfile,
    pub nash_value: f64,
    /// `γ²I - M_t ≻ 0` and `γ²I - M̄_t ≻ 0` for every `t`.
    pub cond1_holds: bool,
    /// Timestep at which `Λ_t` or `Λ̄_t` was singular; entries at and below it
    /// are NaN.
    pub failed_at: Option<usize>,
}

impl RiccatiSolution {
    pub fn solved(&self) -> bool {
        self.failed_at.is_none()
    }
}

struct Recursion {
    m: Vec<Mat>,
    lambda: Vec<Mat>,
    n: Vec<f64>,
    gain_min: Vec<Mat>,
    gain_max: Vec<Mat>,
    failed_at: Option<usize>,
    cond1: bool,
}

/// One of the two decoupled games: `M_t = Q_t + A_tᵀ M_{t+1} Λ_t⁻¹ A_t` with
/// `Λ_t = I + (B_t B_tᵀ - γ⁻² I) M_{t+1}`.
fn backward(
    horizon: usize,
    gamma: f64,
    a: impl Fn(usize) -> Mat,
    b: impl Fn(usize) -> Mat,
    q: &[Mat],
    noise: &Mat,
) -> Recursion {
    let dim = q[horizon].nrows();
    let p = b(0).ncols();
    let eye = Mat::identity(dim, dim);
    let g2 = gamma * gamma;
    let nan = |r, c| Mat::from_element(r, c, f64::NAN);

    let mut m = vec![nan(dim, dim); horizon + 1];
    let mut lambda = vec![nan(dim, dim); horizon];
    let mut n = vec![f64::NAN; horizon + 1];
    let mut gain_min = vec![nan(p, dim); horizon];
    let mut gain_max = vec![nan(dim, dim); horizon];
    m[horizon] = q[horizon].clone();
    n[horizon] = 0.0;
    let mut cond1 = min_eigenvalue(&(&eye * g2 - &m[horizon])) > STRICT_PD_MARGIN;
    let mut failed_at = None;

    for t in (0..horizon).rev() {
        let (a_t, b_t) = (a(t), b(t));
        let next = m[t + 1].clone();
        let next = &next;
        let lam = &eye + (&b_t * b_t.transpose() - &eye / g2) * next;
        let Some(lam_inv) = checked_inverse(&lam) else {
            failed_at = Some(t);
            cond1 = false;
            break;
        };
        let closed = &lam_inv * &a_t;
        let m_next_closed = next * &closed;
        m[t] = symmetrize(&(&q[t] + a_t.transpose() * &m_next_closed));
        n[t] = n[t + 1] + trace_product(next, noise);
        gain_min[t] = b_t.transpose() * &m_next_closed;
        gain_max[t] = &m_next_closed / g2;
        lambda[t] = lam;
        cond1 &= min_eigenvalue(&(&eye * g2 - &m[t])) > STRICT_PD_MARGIN;
    }
    Recursion {
        m,
        lambda,
        n,
        gain_min,
        gain_max,
        failed_at,
        cond1,
    }
}

/// Solves the coupled Riccati recursions for the model's `γ`.
///
/// A singular `Λ_t` (condition number above `1e12`) stops the recursion; the
/// returned solution then has `cond1_holds = false` and records `failed_at`.
pub fn solve_riccati(model: &LqMftgModel) -> RiccatiSolution {
    let horizon = model.horizon;
    let y = backward(horizon, model.gamma, |t| model.a[t].clone(), |t| model.b[t].clone(), &model.q, &model.sigma);
    let z = backward(
        horizon,
        model.gamma,
        |t| model.a_tilde(t),
        |t| model.b_tilde(t),
        &model.q_bar,
        &model.sigma_bar,
    );
    let failed_at = match (y.failed_at, z.failed_at) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    };
    let nash_value = trace_product(&y.m[0], &model.sigma0) + trace_product(&z.m[0], &model.sigma0_bar) + y.n[0] + z.n[0];
    RiccatiSolution {
        gamma: model.gamma,
        nash_gains: PolicyProfile {
            k1: y.gain_min,
            k2: y.gain_max,
            l1: z.gain_min,
            l2: z.gain_max,
        },
        m_seq: y.m,
        m_bar_seq: z.m,
        lambda_seq: y.lambda,
        lambda_bar_seq: z.lambda,
        n_seq: y.n,
        n_bar_seq: z.n,
        nash_value,
        cond1_holds: y.cond1 && z.cond1 && failed_at.is_none(),
        failed_at,
    }
}

/// Outcome of an attenuation-level test; `margin <= 0` is required.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viability {
    pub viable: bool,
    pub margin: f64,
}

/// Mean-field viability:
/// `S = Σ_{t=1..T} tr((M_t - γ²I)Σ + (M̄_t - γ²I)Σ̄) + tr(M_0Σ⁰) + tr(M̄_0Σ̄⁰) <= 0`
/// together with the positivity condition on `γ²I - M_t`.
pub fn check_viability_mf(model: &LqMftgModel, sol: &RiccatiSolution) -> Viability {
    let margin = viability_sum(model, sol);
    Viability {
        viable: sol.cond1_holds && margin <= 0.0,
        margin,
    }
}

fn viability_sum(model: &LqMftgModel, sol: &RiccatiSolution) -> f64 {
    let g2 = sol.gamma * sol.gamma;
    let noise = model.sigma.trace() + model.sigma_bar.trace();
    let running: f64 = (1..=model.horizon)
        .map(|t| trace_product(&sol.m_seq[t], &model.sigma) + trace_product(&sol.m_bar_seq[t], &model.sigma_bar) - g2 * noise)
        .sum();
    running + trace_product(&sol.m_seq[0], &model.sigma0) + trace_product(&sol.m_bar_seq[0], &model.sigma0_bar)
}

/// Finite-population viability for `n_agents`: `S <= -C T / N` with
/// `C = C₁ σ` taken from `gap`.
pub fn check_viability_finite(
    model: &LqMftgModel,
    sol: &RiccatiSolution,
    gap: &PopulationGapAnalysis,
    n_agents: usize,
) -> Viability {
    let s = viability_sum(model, sol);
    let margin = s + gap.constant() * model.horizon as f64 / n_agents.max(1) as f64;
    Viability {
        viable: sol.cond1_holds && margin <= 0.0,
        margin,
    }
}

/// Noise-to-state operators and the constant bounding the gap between the
/// finite- and infinite-population costs of one policy.
#[derive(Debug, Clone)]
pub struct PopulationGapAnalysis {
    /// Block lower-triangular deviation operator, `(T+1)m` square.
    pub psi: Mat,
    /// Block lower-triangular mean-field operator.
    pub psi_bar: Mat,
    /// `‖Ψᵀ Q̂ Ψ‖_F + ‖Ψ̄ᵀ Q̄̂ Ψ̄‖_F`.
    pub c1: f64,
    /// `‖Σ‖_F`.
    pub sigma_f: f64,
    pub horizon: usize,
}

impl PopulationGapAnalysis {
    /// The constant `C = C₁ σ` of the finite-population condition.
    pub fn constant(&self) -> f64 {
        self.c1 * self.sigma_f
    }

    /// `C₁ σ T / M`.
    pub fn gap_bound(&self, n_agents: usize) -> f64 {
        self.constant() * self.horizon as f64 / n_agents as f64
    }
}

fn noise_to_state(loops: &[Mat], dim: usize) -> Mat {
    let blocks = loops.len() + 1;
    let mut psi = Mat::zeros(blocks * dim, blocks * dim);
    for s in 0..blocks {
        let mut prod = Mat::identity(dim, dim);
        psi.view_mut((s * dim, s * dim), (dim, dim)).copy_from(&prod);
        for t in s + 1..blocks {
            prod = &loops[t - 1] * prod;
            psi.view_mut((t * dim, s * dim), (dim, dim)).copy_from(&prod);
        }
    }
    psi
}

/// Builds `Ψ`, `Ψ̄` and `C₁` for `policy`.
pub fn compute_population_gap(model: &LqMftgModel, policy: &PolicyProfile) -> Result<PopulationGapAnalysis> {
    policy.check(model)?;
    let (m, horizon) = (model.state_dim, model.horizon);
    let (dev, mean): (Vec<Mat>, Vec<Mat>) = (0..horizon)
        .map(|t| {
            let g = policy.step(t);
            (model.deviation_loop(t, &g), model.mean_loop(t, &g))
        })
        .unzip();
    let psi = noise_to_state(&dev, m);
    let psi_bar = noise_to_state(&mean, m);
    let weights = |bar: bool| {
        let mut w = Mat::zeros((horizon + 1) * m, (horizon + 1) * m);
        for t in 0..=horizon {
            let block = if t < horizon {
                stage_weight(model, t, &policy.step(t), bar)
            } else if bar {
                model.q_bar[t].clone()
            } else {
                model.q[t].clone()
            };
            w.view_mut((t * m, t * m), (m, m)).copy_from(&block);
        }
        w
    };
    let c1 = frobenius(&(psi.transpose() * weights(false) * &psi))
        + frobenius(&(psi_bar.transpose() * weights(true) * &psi_bar));
    Ok(PopulationGapAnalysis {
        psi,
        psi_bar,
        c1,
        sigma_f: frobenius(&model.sigma),
        horizon,
    })
}

/// The gap analysis with the larger `C₁` among the Nash policy of `sol` and
/// the zero policy.
pub fn conservative_population_gap(model: &LqMftgModel, sol: &RiccatiSolution) -> Result<PopulationGapAnalysis> {
    let zero = compute_population_gap(model, &PolicyProfile::zeros(model))?;
    if !sol.solved() {
        return Ok(zero);
    }
    let nash = compute_population_gap(model, &sol.nash_gains)?;
    Ok(if nash.c1 >= zero.c1 { nash } else { zero })
}

/// Running weight of the deviation (`bar = false`) or mean-field part:
/// `Q_t + K1ᵀK1 - γ² K2ᵀK2` (resp. `Q̄_t + L1ᵀL1 - γ² L2ᵀL2`).
pub fn stage_weight(model: &LqMftgModel, t: usize, gains: &StepGains, bar: bool) -> Mat {
    let g2 = model.gamma * model.gamma;
    if bar {
        &model.q_bar[t] + gains.l1.transpose() * &gains.l1 - gains.l2.transpose() * &gains.l2 * g2
    } else {
        &model.q[t] + gains.k1.transpose() * &gains.k1 - gains.k2.transpose() * &gains.k2 * g2
    }
}

/// Value matrices and noise offsets of one part of the cost under a fixed
/// policy, from `start` to the horizon.
#[derive(Debug, Clone)]
pub struct ValueRecursion {
    pub start: usize,
    /// `M̃_s` for `s = start..=T`.
    pub value_matrices: Vec<Mat>,
    /// Accumulated noise contribution from `s` onwards, `s = start..=T`.
    pub offsets: Vec<f64>,
}

impl ValueRecursion {
    pub fn matrix(&self, s: usize) -> &Mat {
        &self.value_matrices[s - self.start]
    }

    pub fn offset(&self, s: usize) -> f64 {
        self.offsets[s - self.start]
    }

    /// Lyapunov recursion `M̃_s = W_s + F_sᵀ M̃_{s+1} F_s`,
    /// offset `o_s = tr(M̃_{s+1} noise) + o_{s+1}`.
    pub(crate) fn build(
        start: usize,
        horizon: usize,
        terminal: &Mat,
        noise: &Mat,
        mut stage: impl FnMut(usize) -> (Mat, Mat),
    ) -> Self {
        let len = horizon + 1 - start;
        let mut value_matrices = vec![terminal.clone(); len];
        let mut offsets = vec![0.0; len];
        for s in (start..horizon).rev() {
            let (weight, closed) = stage(s);
            let i = s - start;
            let next = &value_matrices[i + 1];
            offsets[i] = offsets[i + 1] + trace_product(next, noise);
            value_matrices[i] = symmetrize(&(weight + closed.transpose() * next * &closed));
        }
        Self {
            start,
            value_matrices,
            offsets,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClosedFormCost {
    pub total: f64,
    pub y_part: f64,
    pub z_part: f64,
    pub y: ValueRecursion,
    pub z: ValueRecursion,
}

/// Exact expected cost from `start_time` under `policy`, with the deviation
/// and mean-field states drawn from zero-mean Gaussians of the given
/// covariances and the model's (infinite-population) process noise.
pub fn closed_form_cost(
    model: &LqMftgModel,
    policy: &PolicyProfile,
    init_y_cov: &Mat,
    init_z_cov: &Mat,
    start_time: usize,
) -> Result<ClosedFormCost> {
    closed_form_cost_with(model, policy, init_y_cov, init_z_cov, start_time, &NoiseModel::infinite(model))
}

/// [`closed_form_cost`] with explicit process-noise covariances.
pub fn closed_form_cost_with(
    model: &LqMftgModel,
    policy: &PolicyProfile,
    init_y_cov: &Mat,
    init_z_cov: &Mat,
    start_time: usize,
    noise: &NoiseModel,
) -> Result<ClosedFormCost> {
    policy.check(model)?;
    if start_time > model.horizon {
        return Err(Error::InvalidArgument(format!(
            "start time {start_time} beyond horizon {}",
            model.horizon
        )));
    }
    let m = model.state_dim;
    for (name, c) in [("init_y_cov", init_y_cov), ("init_z_cov", init_z_cov), ("noise.dev", &noise.dev), ("noise.mean", &noise.mean)] {
        if c.shape() != (m, m) {
            return Err(Error::Dimension(format!("{name} must be {m}x{m}")));
        }
    }
    let horizon = model.horizon;
    let y = ValueRecursion::build(start_time, horizon, &model.q[horizon], &noise.dev, |s| {
        let g = policy.step(s);
        (stage_weight(model, s, &g, false), model.deviation_loop(s, &g))
    });
    let z = ValueRecursion::build(start_time, horizon, &model.q_bar[horizon], &noise.mean, |s| {
        let g = policy.step(s);
        (stage_weight(model, s, &g, true), model.mean_loop(s, &g))
    });
    let y_part = trace_product(y.matrix(start_time), init_y_cov) + y.offset(start_time);
    let z_part = trace_product(z.matrix(start_time), init_z_cov) + z.offset(start_time);
    Ok(ClosedFormCost {
        total: y_part + z_part,
        y_part,
        z_part,
        y,
        z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViabilityMode {
    MeanField,
    /// Finite population of the given size.
    Finite(usize),
}

/// Viability of `model` at attenuation level `gamma` under `mode`.
pub fn viability_at(model: &LqMftgModel, gamma: f64, mode: ViabilityMode) -> Result<Viability> {
    let model = model.with_gamma(gamma);
    let sol = solve_riccati(&model);
    Ok(match mode {
        ViabilityMode::MeanField => check_viability_mf(&model, &sol),
        ViabilityMode::Finite(n) => {
            let gap = conservative_population_gap(&model, &sol)?;
            check_viability_finite(&model, &sol, &gap, n)
        }
    })
}

const COARSE_SCAN_POINTS: usize = 9;

/// Smallest viable attenuation level in `[lo, hi]`, to within `tol`.
///
/// Returns `lo` when `lo` is already viable and `None` when `hi` is not. The
/// search assumes viability is monotone in `γ`; a geometric scan of the bracket
/// runs first and any viable-then-not-viable pair among all evaluated points is
/// reported as [`Error::NonMonotone`]. The returned level is always a viable
/// one (the upper end of the final bracket).
pub fn find_min_viable_gamma(
    model: &LqMftgModel,
    lo: f64,
    hi: f64,
    tol: f64,
    mode: ViabilityMode,
) -> Result<Option<f64>> {
    if !(lo > 0.0 && hi > lo && tol > 0.0 && hi.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "invalid bracket lo={lo}, hi={hi}, tol={tol}"
        )));
    }
    if let ViabilityMode::Finite(0) = mode {
        return Err(Error::InvalidArgument("finite population needs at least one agent".into()));
    }
    let mut evaluated: Vec<(f64, bool)> = Vec::new();
    let mut viable = |g: f64| -> Result<bool> {
        let v = viability_at(model, g, mode)?.viable;
        evaluated.push((g, v));
        Ok(v)
    };
    if viable(lo)? {
        return Ok(Some(lo));
    }
    if !viable(hi)? {
        return Ok(None);
    }
    let ratio = (hi / lo).powf(1.0 / (COARSE_SCAN_POINTS - 1) as f64);
    let (mut a, mut b) = (lo, hi);
    let mut found = false;
    for i in 1..COARSE_SCAN_POINTS - 1 {
        let g = lo * ratio.powi(i as i32);
        let v = viable(g)?;
        if v && !found {
            b = g;
            found = true;
        } else if !found {
            a = g;
        }
    }
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if viable(mid)? {
            b = mid;
        } else {
            a = mid;
        }
    }
    check_monotone(&mut evaluated)?;
    Ok(Some(b))
}

/// Checks that, sorted by `γ`, no viable point precedes a non-viable one.
pub fn check_monotone(points: &mut [(f64, bool)]) -> Result<()> {
    points.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut first_viable = None;
    for &(g, v) in points.iter() {
        match (v, first_viable) {
            (true, None) => first_viable = Some(g),
            (false, Some(at)) => {
                return Err(Error::NonMonotone {
                    viable_at: at,
                    not_viable_at: g,
                })
            }
            _ => {}
        }
    }
    Ok(())
}
