//! Policy gradients of the receding-horizon cost.
//!
//! At timestep `t`, with the gains of every later step frozen, the expected
//! cost is a quadratic in the step-`t` gains:
//!
//! ```text
//! J_t = tr((Q_t + K1ᵀK1 - γ² K2ᵀK2) Σ_y) + tr(F_tᵀ M̃_{t+1} F_t Σ_y) + (z part) + const
//! ```
//!
//! with `F_t = A_t - B_t K1 + K2`. It is convex in the minimizer's gains and
//! concave in the maximizer's whenever `γ² I - M̃_{t+1}` is positive definite,
//! which is what makes the per-step saddle problems tractable.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{checked_inverse, frobenius, trace_product, Mat};
use crate::model::{LqMftgModel, PolicyProfile, StepGains};
use crate::riccati::{stage_weight, NoiseModel, ValueRecursion};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Player {
    /// Player 1, controls `(K1, L1)`.
    Minimizer,
    /// Player 2, controls `(K2, L2)`.
    Maximizer,
}

/// One player's deviation and mean-field gains stacked vertically, `[K; L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedGain {
    pub player: Player,
    pub matrix: Mat,
}

impl StackedGain {
    pub fn stack(player: Player, k: &Mat, l: &Mat) -> Self {
        assert_eq!(k.shape(), l.shape(), "stacked blocks must have equal shapes");
        let (r, c) = k.shape();
        let mut matrix = Mat::zeros(2 * r, c);
        matrix.rows_mut(0, r).copy_from(k);
        matrix.rows_mut(r, r).copy_from(l);
        Self { player, matrix }
    }

    pub fn of(player: Player, gains: &StepGains) -> Self {
        match player {
            Player::Minimizer => Self::stack(player, &gains.k1, &gains.l1),
            Player::Maximizer => Self::stack(player, &gains.k2, &gains.l2),
        }
    }

    pub fn unstack(&self) -> (Mat, Mat) {
        let r = self.matrix.nrows() / 2;
        (self.matrix.rows(0, r).into_owned(), self.matrix.rows(r, r).into_owned())
    }

    /// Writes this player's gains into `gains`, leaving the other player's alone.
    pub fn apply_to(&self, gains: &mut StepGains) {
        let (k, l) = self.unstack();
        match self.player {
            Player::Minimizer => {
                gains.k1 = k;
                gains.l1 = l;
            }
            Player::Maximizer => {
                gains.k2 = k;
                gains.l2 = l;
            }
        }
    }

    /// `gains` with this player's part replaced.
    pub fn inserted(&self, gains: &StepGains) -> StepGains {
        let mut out = gains.clone();
        self.apply_to(&mut out);
        out
    }

    pub fn norm(&self) -> f64 {
        frobenius(&self.matrix)
    }

    pub fn norm_sq(&self) -> f64 {
        self.matrix.norm_squared()
    }

    /// Number of entries, the dimension of the perturbation sphere.
    pub fn dim(&self) -> usize {
        self.matrix.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParams {
    /// Sphere radius `r`.
    pub radius: f64,
    /// Mini-batch size `N_b`: number of cost evaluations per estimate.
    pub batch: usize,
    /// Use directions in pairs `(e, -e)`. The constant part of the cost then
    /// cancels exactly instead of only in expectation.
    pub antithetic: bool,
    /// Subtract a cost evaluation at the unperturbed gain from every sample.
    pub baseline_subtract: bool,
}

impl SmoothingParams {
    pub fn new(radius: f64, batch: usize) -> Self {
        Self {
            radius,
            batch,
            antithetic: false,
            baseline_subtract: false,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidArgument("smoothing radius must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("mini-batch size must be at least 1".into()));
        }
        if self.antithetic && self.batch % 2 == 1 {
            return Err(Error::InvalidArgument("antithetic directions need an even mini-batch".into()));
        }
        Ok(())
    }
}

/// Exact gradients of the receding-horizon cost, one per player.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactGradient {
    pub player1: StackedGain,
    pub player2: StackedGain,
}

impl ExactGradient {
    pub fn of(&self, player: Player) -> &StackedGain {
        match player {
            Player::Minimizer => &self.player1,
            Player::Maximizer => &self.player2,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.player1.norm_sq() + self.player2.norm_sq()).sqrt()
    }
}

/// The step-`t` problem with later gains frozen: continuation value matrices
/// and noise offsets are computed once, after which cost, gradient and the
/// local saddle point are closed-form in the step-`t` gains.
#[derive(Debug, Clone)]
pub struct RecedingProblem<'a> {
    model: &'a LqMftgModel,
    pub t: usize,
    /// `M̃_{t+1}` for the deviation part.
    pub value_y: Mat,
    /// `M̃_{t+1}` for the mean-field part.
    pub value_z: Mat,
    pub cov_y: Mat,
    pub cov_z: Mat,
    /// Noise entering at `t` and later, already weighted by the continuation.
    offset: f64,
}

impl<'a> RecedingProblem<'a> {
    pub fn new(
        model: &'a LqMftgModel,
        frozen: &PolicyProfile,
        t: usize,
        cov_y: &Mat,
        cov_z: &Mat,
        noise: &NoiseModel,
    ) -> Result<Self> {
        if t >= model.horizon {
            return Err(Error::InvalidArgument(format!("t={t} must be below the horizon {}", model.horizon)));
        }
        if frozen.horizon() != model.horizon {
            return Err(Error::MissingFutureGains {
                expected: model.horizon,
                got: frozen.horizon(),
            });
        }
        frozen.check(model)?;
        let m = model.state_dim;
        if cov_y.shape() != (m, m) || cov_z.shape() != (m, m) {
            return Err(Error::Dimension(format!("evaluation covariances must be {m}x{m}")));
        }
        let horizon = model.horizon;
        let y = ValueRecursion::build(t + 1, horizon, &model.q[horizon], &noise.dev, |s| {
            let g = frozen.step(s);
            (stage_weight(model, s, &g, false), model.deviation_loop(s, &g))
        });
        let z = ValueRecursion::build(t + 1, horizon, &model.q_bar[horizon], &noise.mean, |s| {
            let g = frozen.step(s);
            (stage_weight(model, s, &g, true), model.mean_loop(s, &g))
        });
        let value_y = y.matrix(t + 1).clone();
        let value_z = z.matrix(t + 1).clone();
        let offset = trace_product(&value_y, &noise.dev)
            + y.offset(t + 1)
            + trace_product(&value_z, &noise.mean)
            + z.offset(t + 1);
        Ok(Self {
            model,
            t,
            value_y,
            value_z,
            cov_y: cov_y.clone(),
            cov_z: cov_z.clone(),
            offset,
        })
    }

    /// Builds the problem from already known continuation matrices (no noise offset).
    pub(crate) fn from_values(model: &'a LqMftgModel, t: usize, value_y: Mat, value_z: Mat, cov_y: Mat, cov_z: Mat) -> Self {
        Self {
            model,
            t,
            value_y,
            value_z,
            cov_y,
            cov_z,
            offset: 0.0,
        }
    }

    /// Expected receding-horizon cost of the step-`t` gains.
    pub fn cost(&self, gains: &StepGains) -> f64 {
        let (model, t) = (self.model, self.t);
        let fy = model.deviation_loop(t, gains);
        let fz = model.mean_loop(t, gains);
        let wy = stage_weight(model, t, gains, false) + fy.transpose() * &self.value_y * &fy;
        let wz = stage_weight(model, t, gains, true) + fz.transpose() * &self.value_z * &fz;
        trace_product(&wy, &self.cov_y) + trace_product(&wz, &self.cov_z) + self.offset
    }

    pub fn gradient(&self, gains: &StepGains) -> ExactGradient {
        let (model, t) = (self.model, self.t);
        let g2 = model.gamma * model.gamma;
        let (b, bt) = (&model.b[t], model.b_tilde(t));
        // ∂/∂K1 = 2 (K1 - Bᵀ M̃ F) Σ_y,  ∂/∂K2 = 2 (M̃ F - γ² K2) Σ_y
        let my_f = &self.value_y * model.deviation_loop(t, gains);
        let mz_f = &self.value_z * model.mean_loop(t, gains);
        let dk1 = (&gains.k1 - b.transpose() * &my_f) * &self.cov_y * 2.0;
        let dk2 = (&my_f - &gains.k2 * g2) * &self.cov_y * 2.0;
        let dl1 = (&gains.l1 - bt.transpose() * &mz_f) * &self.cov_z * 2.0;
        let dl2 = (&mz_f - &gains.l2 * g2) * &self.cov_z * 2.0;
        ExactGradient {
            player1: StackedGain::stack(Player::Minimizer, &dk1, &dl1),
            player2: StackedGain::stack(Player::Maximizer, &dk2, &dl2),
        }
    }

    /// Stationary point of the step problem: `K1 = BᵀM̃Λ̃⁻¹A`,
    /// `K2 = γ⁻²M̃Λ̃⁻¹A` with `Λ̃ = I + (BBᵀ - γ⁻²I)M̃`, and likewise for the
    /// mean-field gains. `None` when `Λ̃` is singular.
    pub fn saddle(&self) -> Option<StepGains> {
        let (model, t) = (self.model, self.t);
        let g2 = model.gamma * model.gamma;
        let eye = Mat::identity(model.state_dim, model.state_dim);
        let solve = |a: &Mat, b: &Mat, value: &Mat| -> Option<(Mat, Mat)> {
            let lam = &eye + (b * b.transpose() - &eye / g2) * value;
            let closed = checked_inverse(&lam)? * a;
            let v_closed = value * closed;
            Some((b.transpose() * &v_closed, v_closed / g2))
        };
        let (k1, k2) = solve(&model.a[t], &model.b[t], &self.value_y)?;
        let (l1, l2) = solve(&model.a_tilde(t), &model.b_tilde(t), &self.value_z)?;
        Some(StepGains { k1, k2, l1, l2 })
    }
}

/// Exact gradients of the receding-horizon cost at `t` with respect to each
/// player's stacked gains, later steps frozen at `frozen`.
pub fn exact_gradient(
    model: &LqMftgModel,
    gains: &StepGains,
    frozen: &PolicyProfile,
    t: usize,
    eval_cov_y: &Mat,
    eval_cov_z: &Mat,
) -> Result<ExactGradient> {
    let problem = RecedingProblem::new(model, frozen, t, eval_cov_y, eval_cov_z, &NoiseModel::infinite(model))?;
    let mut probe = frozen.clone();
    probe.set_step(t, gains.clone());
    probe.check(model)?;
    Ok(problem.gradient(gains))
}

/// Gradient of the full-horizon cost with respect to every step's gains,
/// under the policy's own continuation (nothing frozen). State covariances are
/// propagated forward from `(init_y, init_z)` with the given process noise.
pub fn full_horizon_gradient(
    model: &LqMftgModel,
    policy: &PolicyProfile,
    init_y: &Mat,
    init_z: &Mat,
    noise: &NoiseModel,
) -> Result<Vec<ExactGradient>> {
    policy.check(model)?;
    let horizon = model.horizon;
    let y = ValueRecursion::build(0, horizon, &model.q[horizon], &noise.dev, |s| {
        let g = policy.step(s);
        (stage_weight(model, s, &g, false), model.deviation_loop(s, &g))
    });
    let z = ValueRecursion::build(0, horizon, &model.q_bar[horizon], &noise.mean, |s| {
        let g = policy.step(s);
        (stage_weight(model, s, &g, true), model.mean_loop(s, &g))
    });
    let (mut cov_y, mut cov_z) = (init_y.clone(), init_z.clone());
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let g = policy.step(t);
        let problem = RecedingProblem::from_values(
            model,
            t,
            y.matrix(t + 1).clone(),
            z.matrix(t + 1).clone(),
            cov_y.clone(),
            cov_z.clone(),
        );
        out.push(problem.gradient(&g));
        let fy = model.deviation_loop(t, &g);
        let fz = model.mean_loop(t, &g);
        cov_y = &fy * &cov_y * fy.transpose() + &noise.dev;
        cov_z = &fz * &cov_z * fz.transpose() + &noise.mean;
    }
    Ok(out)
}

fn sphere_direction(rng: &mut StreamRng, rows: usize, cols: usize) -> Mat {
    loop {
        let u = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = u.norm();
        if n > 0.0 {
            return u / n;
        }
    }
}

/// One-point zero-order gradient estimate
/// `(n / (N_b r²)) Σ_j J(base + e_j) e_j`, `e_j` uniform on the radius-`r`
/// sphere in the space of `base`.
///
/// Direction `j` is drawn from the stream `(seed, 0, j)` as a unit vector and
/// scaled by `r`, so runs at different radii with the same seed share
/// directions. The evaluator receives its own stream `(seed, 1, j)` for any
/// internal sampling; evaluations run in parallel and are summed in index
/// order. With `antithetic`, directions come in pairs `(u, -u)` keyed by the
/// pair index.
pub fn zero_order_gradient<F>(evaluator: F, base: &StackedGain, smoothing: &SmoothingParams, seed: u64) -> Result<StackedGain>
where
    F: Fn(&StackedGain, &mut StreamRng) -> f64 + Sync,
{
    smoothing.check()?;
    let (rows, cols) = base.matrix.shape();
    let n = base.dim() as f64;
    let r = smoothing.radius;
    let baseline = if smoothing.baseline_subtract {
        evaluator(base, &mut rng::stream(seed, &[2]))
    } else {
        0.0
    };
    let samples: Vec<(f64, Mat)> = (0..smoothing.batch)
        .into_par_iter()
        .map(|j| {
            let u = if smoothing.antithetic {
                let u = sphere_direction(&mut rng::stream(seed, &[0, (j / 2) as u64]), rows, cols);
                if j % 2 == 0 {
                    u
                } else {
                    -u
                }
            } else {
                sphere_direction(&mut rng::stream(seed, &[0, j as u64]), rows, cols)
            };
            let perturbed = StackedGain {
                player: base.player,
                matrix: &base.matrix + &u * r,
            };
            let cost = evaluator(&perturbed, &mut rng::stream(seed, &[1, j as u64]));
            (cost - baseline, u)
        })
        .collect();
    let mut sum = Mat::zeros(rows, cols);
    for (cost, u) in &samples {
        sum += u * *cost;
    }
    // e_j = r u_j, so (n / (N_b r²)) Σ J e_j = (n / (N_b r)) Σ J u_j.
    Ok(StackedGain {
        player: base.player,
        matrix: sum * (n / (smoothing.batch as f64 * r)),
    })
}

/// Radial projection onto `{‖g‖_F² ≤ D}`.
pub fn project_ball(gain: &StackedGain, radius_sq: f64) -> StackedGain {
    assert!(radius_sq > 0.0, "projection radius must be positive");
    let norm_sq = gain.norm_sq();
    if norm_sq <= radius_sq {
        return gain.clone();
    }
    let mut out = StackedGain {
        player: gain.player,
        matrix: &gain.matrix * (radius_sq / norm_sq).sqrt(),
    };
    // Guard against the rescaled norm landing a rounding error outside.
    if out.norm_sq() > radius_sq {
        out.matrix *= 1.0 - f64::EPSILON;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::{closed_form_cost, solve_riccati};
    use approx::assert_relative_eq;

    fn s(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn scalar_model() -> LqMftgModel {
        LqMftgModel {
            horizon: 1,
            state_dim: 1,
            control_dim: 1,
            a: vec![s(1.0)],
            a_bar: vec![s(0.0)],
            b: vec![s(1.0)],
            b_bar: vec![s(0.0)],
            q: vec![s(1.0); 2],
            q_bar: vec![s(1.0); 2],
            sigma: s(0.0),
            sigma_bar: s(0.0),
            sigma0: s(1.0),
            sigma0_bar: s(0.0),
            gamma: 10.0,
        }
    }

    #[test]
    fn stack_round_trip() {
        let k = Mat::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let l = Mat::from_row_slice(2, 3, &[7., 8., 9., 10., 11., 12.]);
        let g = StackedGain::stack(Player::Minimizer, &k, &l);
        assert_eq!(g.matrix.shape(), (4, 3));
        assert_eq!(g.unstack(), (k, l));
    }

    #[test]
    fn scalar_gradient_by_hand() {
        let model = scalar_model();
        let frozen = PolicyProfile::zeros(&model);
        let one = s(1.0);
        for k in [0.0, 0.3, 0.5, 1.2] {
            let mut g = StepGains::zeros(1, 1);
            g.k1[(0, 0)] = k;
            let grad = exact_gradient(&model, &g, &frozen, 0, &one, &one).unwrap();
            assert_relative_eq!(grad.player1.matrix[(0, 0)], 2.0 * (2.0 * k - 1.0), epsilon = 1e-14);
        }
    }

    #[test]
    fn saddle_is_stationary_and_matches_riccati() {
        let model = scalar_model();
        let frozen = PolicyProfile::zeros(&model);
        let one = s(1.0);
        let p = RecedingProblem::new(&model, &frozen, 0, &one, &one, &NoiseModel::infinite(&model)).unwrap();
        let saddle = p.saddle().unwrap();
        assert!(p.gradient(&saddle).norm() < 1e-12);
        let sol = solve_riccati(&model);
        assert_relative_eq!(saddle.k1, sol.nash_gains.k1[0], epsilon = 1e-14);
        assert_relative_eq!(saddle.k2, sol.nash_gains.k2[0], epsilon = 1e-14);
    }

    #[test]
    fn receding_cost_matches_closed_form() {
        let mut model = scalar_model();
        model.horizon = 2;
        model.a = vec![s(0.9), s(1.1)];
        model.a_bar = vec![s(0.2); 2];
        model.b = vec![s(0.7); 2];
        model.b_bar = vec![s(0.1); 2];
        model.q.push(s(2.0));
        model.q_bar.push(s(0.5));
        model.sigma = s(0.3);
        model.sigma_bar = s(0.2);
        let sol = solve_riccati(&model);
        let cy = s(1.3);
        let cz = s(0.4);
        let p = RecedingProblem::new(&model, &sol.nash_gains, 0, &cy, &cz, &NoiseModel::infinite(&model)).unwrap();
        let exact = closed_form_cost(&model, &sol.nash_gains, &cy, &cz, 0).unwrap();
        assert_relative_eq!(p.cost(&sol.nash_gains.step(0)), exact.total, epsilon = 1e-12);
    }

    #[test]
    fn finite_differences_agree() {
        let mut model = scalar_model();
        model.horizon = 2;
        model.a = vec![s(0.9), s(1.1)];
        model.a_bar = vec![s(0.2); 2];
        model.b = vec![s(0.7); 2];
        model.b_bar = vec![s(0.1); 2];
        model.q.push(s(2.0));
        model.q_bar.push(s(0.5));
        let frozen = solve_riccati(&model).nash_gains;
        let p = RecedingProblem::new(&model, &frozen, 0, &s(1.0), &s(0.7), &NoiseModel::infinite(&model)).unwrap();
        let g = StepGains {
            k1: s(0.2),
            k2: s(-0.1),
            l1: s(0.4),
            l2: s(0.05),
        };
        let grad = p.gradient(&g);
        for player in [Player::Minimizer, Player::Maximizer] {
            let base = StackedGain::of(player, &g);
            for i in 0..base.dim() {
                let h = 1e-5;
                let mut plus = base.clone();
                plus.matrix[i] += h;
                let mut minus = base.clone();
                minus.matrix[i] -= h;
                let fd = (p.cost(&plus.inserted(&g)) - p.cost(&minus.inserted(&g))) / (2.0 * h);
                assert_relative_eq!(fd, grad.of(player).matrix[i], max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let zero = StackedGain::stack(Player::Maximizer, &Mat::zeros(2, 2), &Mat::zeros(2, 2));
        assert_eq!(project_ball(&zero, 1.0), zero);
        let mut big = zero.clone();
        big.matrix[(0, 0)] = 2.0;
        let p = project_ball(&big, 1.0);
        assert!((p.norm_sq() - 1.0).abs() < 1e-15 && p.norm_sq() <= 1.0);
        assert_eq!(project_ball(&p, 1.0), p);
    }

    #[test]
    fn zero_order_is_exact_on_linear_costs_with_pairs() {
        let base = StackedGain::stack(Player::Minimizer, &s(0.3), &s(-0.2));
        let mut sm = SmoothingParams::new(0.1, 20000);
        sm.antithetic = true;
        let est = zero_order_gradient(|g, _| 5.0 + 3.0 * g.matrix[0] - g.matrix[1], &base, &sm, 4).unwrap();
        assert!((est.matrix[0] - 3.0).abs() < 0.05);
        assert!((est.matrix[1] + 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_order_is_seeded() {
        let base = StackedGain::stack(Player::Minimizer, &s(0.3), &s(-0.2));
        let sm = SmoothingParams::new(0.1, 64);
        let f = |g: &StackedGain, rng: &mut StreamRng| g.norm_sq() + rng.random::<f64>();
        assert_eq!(zero_order_gradient(f, &base, &sm, 1).unwrap(), zero_order_gradient(f, &base, &sm, 1).unwrap());
    }
}
