//! Seeded random game instances for tests, benchmarks and experiments.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{max_eigenvalue, Mat};
use crate::model::LqMftgModel;
use crate::riccati::solve_riccati;
use crate::rng;

/// Shape of a random instance. Matrices are drawn as
/// `A = a_scale · G / √m`, `B = b_identity · [I 0] + b_noise · G`,
/// `Q = q_weight · I + W Wᵀ / m` and covariances `noise_scale · (I + V Vᵀ / m) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceParams {
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub a_scale: f64,
    pub a_bar_scale: f64,
    pub b_identity: f64,
    pub b_noise: f64,
    pub b_bar_scale: f64,
    pub q_weight: f64,
    pub noise_scale: f64,
    /// Draw fresh dynamics and weights for every timestep.
    pub time_varying: bool,
    /// `γ² = max_t λ_max(M_t, M̄_t) + gamma_margin` at the fixed point.
    pub gamma_margin: f64,
}

impl InstanceParams {
    pub fn new(horizon: usize, state_dim: usize, control_dim: usize) -> Self {
        Self {
            horizon,
            state_dim,
            control_dim,
            a_scale: 1.0,
            a_bar_scale: 0.3,
            b_identity: 1.0,
            b_noise: 0.3,
            b_bar_scale: 0.1,
            q_weight: 1.0,
            noise_scale: 1.0,
            time_varying: false,
            gamma_margin: 1.0,
        }
    }
}

fn gaussian(rng: &mut rng::StreamRng, r: usize, c: usize) -> Mat {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn gram(rng: &mut rng::StreamRng, m: usize) -> Mat {
    let w = gaussian(rng, m, m);
    &w * w.transpose() / m as f64
}

/// Random instance with `γ` calibrated by [`calibrate_gamma`]; `None` when no
/// calibration is found (for example `Λ_t` singular along the way).
pub fn random_instance(params: &InstanceParams, seed: u64) -> Option<LqMftgModel> {
    let mut rng = rng::stream(seed, &[0x1257]);
    let (m, p, horizon) = (params.state_dim, params.control_dim, params.horizon);
    let root = (m as f64).sqrt();
    let draw_step = |rng: &mut rng::StreamRng| {
        let a = gaussian(rng, m, m) * (params.a_scale / root);
        let a_bar = gaussian(rng, m, m) * (params.a_bar_scale / root);
        let mut b = gaussian(rng, m, p) * params.b_noise;
        for i in 0..m.min(p) {
            b[(i, i)] += params.b_identity;
        }
        let b_bar = gaussian(rng, m, p) * params.b_bar_scale;
        (a, a_bar, b, b_bar)
    };
    let mut steps = Vec::with_capacity(horizon);
    let first = draw_step(&mut rng);
    for _ in 0..horizon {
        steps.push(if params.time_varying { draw_step(&mut rng) } else { first.clone() });
    }
    let q_first = Mat::identity(m, m) * params.q_weight + gram(&mut rng, m);
    let q_bar_first = Mat::identity(m, m) * params.q_weight + gram(&mut rng, m);
    let (mut q, mut q_bar) = (Vec::new(), Vec::new());
    for _ in 0..=horizon {
        if params.time_varying {
            q.push(Mat::identity(m, m) * params.q_weight + gram(&mut rng, m));
            q_bar.push(Mat::identity(m, m) * params.q_weight + gram(&mut rng, m));
        } else {
            q.push(q_first.clone());
            q_bar.push(q_bar_first.clone());
        }
    }
    let cov = |rng: &mut rng::StreamRng| (Mat::identity(m, m) + gram(rng, m)) * (params.noise_scale / 2.0);
    let sigma = cov(&mut rng);
    let sigma_bar = cov(&mut rng);
    let sigma0 = cov(&mut rng);
    let sigma0_bar = cov(&mut rng);
    let model = LqMftgModel {
        horizon,
        state_dim: m,
        control_dim: p,
        a: steps.iter().map(|s| s.0.clone()).collect(),
        a_bar: steps.iter().map(|s| s.1.clone()).collect(),
        b: steps.iter().map(|s| s.2.clone()).collect(),
        b_bar: steps.iter().map(|s| s.3.clone()).collect(),
        q,
        q_bar,
        sigma,
        sigma_bar,
        sigma0,
        sigma0_bar,
        gamma: 1.0,
    };
    let gamma = calibrate_gamma(&model, params.gamma_margin)?;
    Some(model.with_gamma(gamma))
}

/// Smallest `γ` with `γ² = max_t max(λ_max(M^γ_t), λ_max(M̄^γ_t)) + margin`.
///
/// The right-hand side decreases in `γ` wherever the recursion solves, so the
/// fixed point is found by bisection on `γ² - f(γ²)`; levels at which the
/// recursion fails count as too small. The result satisfies the per-step
/// positivity condition with slack about `margin`.
pub fn calibrate_gamma(model: &LqMftgModel, margin: f64) -> Option<f64> {
    assert!(margin > 0.0, "margin must be positive");
    let top = |ms: &[Mat]| ms.iter().map(max_eigenvalue).fold(f64::NEG_INFINITY, f64::max);
    // Positive when g2 is at or above the fixed point.
    let excess = |g2: f64| -> Option<f64> {
        let sol = solve_riccati(&model.with_gamma(g2.sqrt()));
        if !sol.cond1_holds {
            return None;
        }
        let f = top(&sol.m_seq).max(top(&sol.m_bar_seq)) + margin;
        f.is_finite().then_some(g2 - f)
    };
    let mut lo = top(&model.q).max(top(&model.q_bar)) + margin;
    if excess(lo).is_some_and(|e| e >= 0.0) {
        return Some(lo.sqrt());
    }
    let mut hi = 2.0 * lo;
    while !excess(hi).is_some_and(|e| e >= 0.0) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return None;
        }
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if excess(mid).is_some_and(|e| e >= 0.0) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi.sqrt())
}
