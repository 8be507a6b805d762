//! Backward regression Monte Carlo for the auxiliary Brownian BSDE and its
//! jump extension through the default-time decomposition.
//!
//! Sign convention used throughout the crate:
//!
//! ```text
//! Y_t = xi + int_t^T F(s, X_s, Y_s, Z_s, U_s, a_s, lambda_s) ds - int_t^T Z_s dX_s
//! ```
//!
//! so a driver `F = -r y` discounts and `F = lambda u` with
//! `u = xi_a - y` prices the default leg.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::claims::Claim;
use crate::default_model::{DefaultSample, IntensityModel};
use crate::error::{Error, Result};
use crate::regression::{FitInfo, PolyFit};
use crate::scalar::{mean, std_dev, Scalar};
use crate::sde_sim::PathBundle;

/// Arguments handed to a driver evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverArgs<S> {
    pub t: S,
    pub x: S,
    pub y: S,
    /// Gradient with respect to `dX`.
    pub z: S,
    /// Jump size `xi_a - y`.
    pub u: S,
    /// Quadratic-variation density of the current measure.
    pub a_hat: S,
    pub lambda: S,
}

/// Declared Lipschitz bounds of a driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lipschitz<S> {
    pub c_y: S,
    pub c_z: S,
    pub c_u: S,
}

type DriverFn<S> = Arc<dyn Fn(&DriverArgs<S>) -> S + Send + Sync>;

/// Generator `F(t, x, y, z, u, a, lambda)` with declared Lipschitz constants.
#[derive(Clone)]
pub struct Driver<S> {
    f: DriverFn<S>,
    pub lipschitz: Lipschitz<S>,
}

impl<S: Scalar> fmt::Debug for Driver<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> Driver<S> {
    pub fn new(f: impl Fn(&DriverArgs<S>) -> S + Send + Sync + 'static, lipschitz: Lipschitz<S>) -> Self {
        Self {
            f: Arc::new(f),
            lipschitz,
        }
    }

    pub fn zero() -> Self {
        Self::new(
            |_| S::zero(),
            Lipschitz {
                c_y: S::zero(),
                c_z: S::zero(),
                c_u: S::zero(),
            },
        )
    }

    /// `F = -discount * y + constant`, plus `lambda * u` when `jump` is set.
    pub fn linear(discount: S, jump: bool, constant: S) -> Self {
        Self::new(
            move |a| {
                let base = constant - discount * a.y;
                if jump {
                    base + a.lambda * a.u
                } else {
                    base
                }
            },
            Lipschitz {
                c_y: discount.abs(),
                c_z: S::zero(),
                c_u: if jump { S::one() } else { S::zero() },
            },
        )
    }

    #[inline]
    pub fn eval(&self, args: &DriverArgs<S>) -> S {
        (self.f)(args)
    }

    /// Driver shifted by a constant.
    pub fn shifted(&self, shift: S) -> Self {
        let f = self.f.clone();
        Self::new(move |a| f(a) + shift, self.lipschitz)
    }

    /// Checks the declared Lipschitz bounds on random perturbations of the
    /// probes.
    pub fn check_lipschitz(&self, probes: &[DriverArgs<S>], seed: u64) -> std::result::Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slack = S::lit(1e-9);
        for p in probes {
            for _ in 0..8 {
                let d = S::lit(rng.gen_range(-1.0..1.0));
                let base = self.eval(p);
                let dy = self.eval(&DriverArgs { y: p.y + d, ..*p });
                if (dy - base).abs() > self.lipschitz.c_y * d.abs() + slack * (S::one() + base.abs()) {
                    return Err(format!("y-Lipschitz bound violated at {p:?}"));
                }
                let dz = self.eval(&DriverArgs { z: p.z + d, ..*p });
                let bound_z = self.lipschitz.c_z * p.a_hat.sqrt() * d.abs();
                if (dz - base).abs() > bound_z + slack * (S::one() + base.abs()) {
                    return Err(format!("z-Lipschitz bound violated at {p:?}"));
                }
                let du = self.eval(&DriverArgs { u: p.u + d, ..*p });
                if (du - base).abs() > self.lipschitz.c_u * p.lambda * d.abs() + slack * (S::one() + base.abs()) {
                    return Err(format!("u-Lipschitz bound violated at {p:?}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BsdeOptions {
    pub basis_degree: usize,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        Self { basis_degree: 3 }
    }
}

/// Inputs of one backward regression step on a set of nodes.
pub(crate) struct StepInputs<'a, S> {
    pub t: S,
    pub dt: S,
    pub xs: &'a [S],
    pub dw: &'a [S],
    pub sigma: &'a [S],
    pub y_next: &'a [S],
    pub xi_a_next: &'a [S],
    pub lambda: &'a [S],
}

pub(crate) struct StepOutputs<S> {
    pub value: PolyFit<S>,
    pub grad: PolyFit<S>,
    pub value_info: FitInfo,
    pub y: Vec<S>,
    pub z: Vec<S>,
    pub residual: Vec<S>,
}

/// One explicit step: `Y_k = E_k[Y_{k+1} - Z_k sigma dW_k + dt F(...)]`.
///
/// `Z_k` is regressed first on `(Y_{k+1} - E_k[Y_{k+1}]) dW / (sigma dt)`, and
/// the fitted `Z_k sigma dW_k` is subtracted from the value target as a
/// zero-mean control variate.
pub(crate) fn regression_step<S: Scalar>(inp: &StepInputs<'_, S>, driver: &Driver<S>, degree: usize) -> StepOutputs<S> {
    let n = inp.xs.len();
    let (cont, _) = PolyFit::fit(inp.xs, inp.y_next, degree);
    let z_target: Vec<S> = (0..n)
        .map(|i| (inp.y_next[i] - cont.eval(inp.xs[i])) * inp.dw[i] / (inp.sigma[i] * inp.dt))
        .collect();
    let (grad, _) = PolyFit::fit(inp.xs, &z_target, degree);
    let z: Vec<S> = inp.xs.iter().map(|&x| grad.eval(x)).collect();
    let target: Vec<S> = (0..n)
        .map(|i| {
            let args = DriverArgs {
                t: inp.t,
                x: inp.xs[i],
                y: inp.y_next[i],
                z: z[i],
                u: inp.xi_a_next[i] - inp.y_next[i],
                a_hat: inp.sigma[i] * inp.sigma[i],
                lambda: inp.lambda[i],
            };
            inp.y_next[i] - z[i] * inp.sigma[i] * inp.dw[i] + inp.dt * driver.eval(&args)
        })
        .collect();
    let (value, value_info) = PolyFit::fit(inp.xs, &target, degree);
    let y: Vec<S> = inp.xs.iter().map(|&x| value.eval(x)).collect();
    let residual: Vec<S> = target.iter().zip(&y).map(|(&t, &f)| t - f).collect();
    StepOutputs {
        value,
        grad,
        value_info,
        y,
        z,
        residual,
    }
}

/// Solution of the Brownian BSDE under one measure.
#[derive(Debug, Clone)]
pub struct BsdeSolution<S> {
    /// `[n_paths, n_steps + 1]`.
    pub y: Array2<S>,
    /// `[n_paths, n_steps]`.
    pub z: Array2<S>,
    pub y0: S,
    /// Standard error of the time-0 regression target.
    pub y0_se: S,
    /// RMS of the one-step regression residual, per step.
    pub residual_rms: Vec<S>,
    /// Pathwise residuals, `[n_paths, n_steps]`.
    pub residuals: Array2<S>,
    /// Steps where the regression fell back to a lower degree (excluding
    /// the degenerate time-0 step).
    pub degree_fallbacks: Vec<(usize, usize)>,
    /// Fitted value function per step `0..n_steps`.
    pub value_fits: Vec<PolyFit<S>>,
}

impl<S: Scalar> BsdeSolution<S> {
    /// Lag-1 autocorrelation of pathwise residuals pooled over steps.
    pub fn residual_lag1_autocorrelation(&self) -> S {
        let (n, m) = self.residuals.dim();
        if m < 2 {
            return S::zero();
        }
        let mut num = S::zero();
        let mut den = S::zero();
        for i in 0..n {
            for k in 0..m {
                let r = self.residuals[[i, k]];
                den += r * r;
                if k + 1 < m {
                    num += r * self.residuals[[i, k + 1]];
                }
            }
        }
        if den == S::zero() {
            S::zero()
        } else {
            num / den
        }
    }
}

fn row_slice<S>(a: &Array2<S>, i: usize) -> &[S] {
    a.row(i).to_slice().expect("standard layout")
}

/// Backward regression solve of the auxiliary BSDE with terminal `Phi(xi_b)`
/// and jump slot `u = Phi(xi_a) - Y`.
pub fn solve_brownian_bsde<S: Scalar>(
    bundle: &PathBundle<S>,
    claim: &Claim<S>,
    driver: &Driver<S>,
    intensity: &IntensityModel<S>,
    options: BsdeOptions,
) -> Result<BsdeSolution<S>> {
    let grid = bundle.grid;
    let terminal: Vec<S> = (0..bundle.n_paths())
        .map(|i| claim.terminal_value(&grid, row_slice(&bundle.x, i)))
        .collect();
    solve_with_terminal(bundle, &terminal, claim, driver, intensity, options)
}

/// Same as [`solve_brownian_bsde`] with explicit per-path terminal values.
pub fn solve_with_terminal<S: Scalar>(
    bundle: &PathBundle<S>,
    terminal: &[S],
    claim: &Claim<S>,
    driver: &Driver<S>,
    intensity: &IntensityModel<S>,
    options: BsdeOptions,
) -> Result<BsdeSolution<S>> {
    let grid = bundle.grid;
    let n = bundle.n_paths();
    let n_steps = grid.n_steps();
    if terminal.len() != n {
        return Err(Error::InconsistentBundles(format!(
            "{} terminal values for {n} paths",
            terminal.len()
        )));
    }
    let dt = grid.dt();
    let mut y = Array2::<S>::zeros((n, n_steps + 1));
    let mut z = Array2::<S>::zeros((n, n_steps));
    let mut residuals = Array2::<S>::zeros((n, n_steps));
    let mut residual_rms = vec![S::zero(); n_steps];
    let mut fallbacks = Vec::new();
    let mut value_fits = vec![PolyFit::constant(S::zero()); n_steps];
    for i in 0..n {
        y[[i, n_steps]] = terminal[i];
    }
    // pathwise replay of Y_0: terminal + Σ (dt F - Z σ ΔW)
    let mut replay: Vec<S> = terminal.to_vec();

    for k in (0..n_steps).rev() {
        let t = grid.time(k);
        let t_next = grid.time(k + 1);
        let xs: Vec<S> = bundle.x.column(k).to_vec();
        let dw: Vec<S> = bundle.dw.column(k).to_vec();
        let sigma: Vec<S> = bundle.a_hat.column(k).iter().map(|a| a.sqrt()).collect();
        let y_next: Vec<S> = y.column(k + 1).to_vec();
        let xi_a_next: Vec<S> = (0..n)
            .map(|i| claim.default_value(&grid, t_next, row_slice(&bundle.x, i)))
            .collect();
        let lambda = (0..n)
            .map(|i| intensity.rate(t, Some(xs[i])))
            .collect::<Result<Vec<S>>>()?;
        let out = regression_step(
            &StepInputs {
                t,
                dt,
                xs: &xs,
                dw: &dw,
                sigma: &sigma,
                y_next: &y_next,
                xi_a_next: &xi_a_next,
                lambda: &lambda,
            },
            driver,
            options.basis_degree,
        );
        if out.value_info.fell_back() && k > 0 {
            fallbacks.push((k, out.value_info.degree));
        }
        for i in 0..n {
            if !out.y[i].is_finite() {
                return Err(Error::NonFinite { path: i, step: k });
            }
            y[[i, k]] = out.y[i];
            z[[i, k]] = out.z[i];
            residuals[[i, k]] = out.residual[i];
            replay[i] += out.residual[i] + out.y[i] - y_next[i];
        }
        residual_rms[k] = (out.residual.iter().map(|&r| r * r).sum::<S>() / S::from_usize_lossy(n)).sqrt();
        value_fits[k] = out.value;
    }
    let y0 = mean(&y.column(0).to_vec());
    let y0_se = std_dev(&replay) / S::from_usize_lossy(n).sqrt();
    Ok(BsdeSolution {
        y,
        z,
        y0,
        y0_se,
        residual_rms,
        residuals,
        degree_fallbacks: fallbacks,
        value_fits,
    })
}

/// Jump BSDE solution obtained by pasting at the default time.
#[derive(Debug, Clone)]
pub struct JumpBsdeSolution<S> {
    pub y: Array2<S>,
    pub z: Array2<S>,
    pub u: Array2<S>,
    pub y0: S,
}

/// `Y^tau = Y 1_{t<tau} + xi_a_tau 1_{t>=tau}`, `Z^tau = Z 1_{t<tau}`,
/// `U = (xi_a - Y) 1_{t<tau}`.
pub fn solve_jump_bsde<S: Scalar>(
    bundle: &PathBundle<S>,
    brownian: &BsdeSolution<S>,
    claim: &Claim<S>,
    defaults: &[DefaultSample<S>],
) -> Result<JumpBsdeSolution<S>> {
    let n = bundle.n_paths();
    if defaults.len() != n || brownian.y.nrows() != n {
        return Err(Error::InconsistentBundles(format!(
            "{} default samples and {} solution rows for {n} paths",
            defaults.len(),
            brownian.y.nrows()
        )));
    }
    let grid = bundle.grid;
    let n_steps = grid.n_steps();
    let mut y = Array2::<S>::zeros((n, n_steps + 1));
    let mut z = Array2::<S>::zeros((n, n_steps));
    let mut u = Array2::<S>::zeros((n, n_steps + 1));
    for i in 0..n {
        let path = row_slice(&bundle.x, i);
        let tau = defaults[i].tau;
        let at_default = if defaults[i].occurred_before {
            claim.default_value(&grid, tau, path)
        } else {
            S::zero()
        };
        for k in 0..=n_steps {
            let t = grid.time(k);
            if t < tau {
                y[[i, k]] = brownian.y[[i, k]];
                u[[i, k]] = claim.default_value(&grid, t, path) - brownian.y[[i, k]];
                if k < n_steps {
                    z[[i, k]] = brownian.z[[i, k]];
                }
            } else {
                y[[i, k]] = at_default;
            }
        }
    }
    let y0 = mean(&y.column(0).to_vec());
    Ok(JumpBsdeSolution { y, z, u, y0 })
}

/// Exact solution at `t0` of `y' = (r + lambda) y - lambda xi_a`,
/// `y(T) = terminal`, over a horizon of length `horizon`.
pub fn closed_form_linear_bsde(r: f64, lambda: f64, horizon: f64, terminal: f64, xi_a: f64) -> f64 {
    let rate = r + lambda;
    if rate == 0.0 {
        return terminal;
    }
    let fixed = lambda * xi_a / rate;
    fixed + (terminal - fixed) * (-rate * horizon).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{decompose_claim, ClaimSpec, Utility};
    use crate::sde_sim::{simulate_paths, ConstantVolatility, MeasureSpec, TimeGrid};

    fn bundle(sigma: f64, n_paths: usize, n_steps: usize, seed: u64) -> PathBundle<f64> {
        let g = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
        simulate_paths(&g, &MeasureSpec::driftless(sigma), &ConstantVolatility, 1.0, n_paths, seed).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        assert!((closed_form_linear_bsde(0.0, 1.0, 1.0, 1.0, 0.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((closed_form_linear_bsde(0.05, 0.0, 1.0, 1.0, 0.0) - (-0.05f64).exp()).abs() < 1e-15);
        assert_eq!(closed_form_linear_bsde(0.0, 0.0, 1.0, 3.5, 0.0), 3.5);
    }

    #[test]
    fn martingale_representation_of_terminal_state() {
        let b = bundle(0.2, 10_000, 50, 1);
        let claim = decompose_claim(&ClaimSpec::power(1.0, 1), Utility::Identity).unwrap();
        let sol = solve_brownian_bsde(&b, &claim, &Driver::zero(), &IntensityModel::zero(), BsdeOptions::default())
            .unwrap();
        assert!((sol.y0 - 1.0).abs() < 1e-2);
        for k in 0..50 {
            let zm = sol.z.column(k).mean().unwrap();
            assert!((zm - 1.0).abs() < 0.05, "step {k}: {zm}");
        }
        for i in 0..b.n_paths() {
            assert_eq!(sol.y[[i, 50]], b.x[[i, 50]]);
        }
        assert!(sol.residual_lag1_autocorrelation().abs() < 0.1);
    }

    #[test]
    fn discounting_driver() {
        // F = -r y discounts under the crate's sign convention.
        let b = bundle(0.2, 2000, 400, 2);
        let claim = decompose_claim(&ClaimSpec::Survival, Utility::Identity).unwrap();
        let sol = solve_brownian_bsde(
            &b,
            &claim,
            &Driver::linear(0.05, false, 0.0),
            &IntensityModel::zero(),
            BsdeOptions::default(),
        )
        .unwrap();
        let exact = closed_form_linear_bsde(0.05, 0.0, 1.0, 1.0, 0.0);
        assert!((sol.y0 - exact).abs() < 1e-3, "{} vs {exact}", sol.y0);
    }

    #[test]
    fn survival_bond_and_jump_paste() {
        let b = bundle(0.2, 2000, 500, 3);
        let claim = decompose_claim(&ClaimSpec::Survival, Utility::Identity).unwrap();
        let lambda = IntensityModel::constant(1.0, 1.0).unwrap();
        let sol = solve_brownian_bsde(&b, &claim, &Driver::linear(0.0, true, 0.0), &lambda, BsdeOptions::default())
            .unwrap();
        assert!((sol.y0 - (-1.0f64).exp()).abs() < 1e-3);

        let defaults = lambda.sample_defaults_for(&b, 9).unwrap();
        let jump = solve_jump_bsde(&b, &sol, &claim, &defaults).unwrap();
        let g = b.grid;
        for (i, d) in defaults.iter().enumerate().take(50) {
            for k in (0..=500).step_by(50) {
                let t = g.time(k);
                if t < d.tau {
                    let exact = (-(1.0 - t)).exp();
                    assert!((jump.y[[i, k]] - exact).abs() < 2e-3);
                    assert!((jump.u[[i, k]] + exact).abs() < 2e-3);
                } else {
                    assert_eq!(jump.y[[i, k]], 0.0);
                    assert_eq!(jump.u[[i, k]], 0.0);
                }
            }
        }
    }

    #[test]
    fn jump_freezes_at_default_value() {
        let b = bundle(0.2, 200, 20, 4);
        let claim = decompose_claim(&ClaimSpec::power(1.0, 2), Utility::Identity).unwrap();
        let sol = solve_brownian_bsde(&b, &claim, &Driver::zero(), &IntensityModel::zero(), BsdeOptions::default())
            .unwrap();
        let g = b.grid;
        let mut defaults = vec![DefaultSample::no_default(1.0); 200];
        defaults[0] = DefaultSample::at(0.5, 1.0);
        let jump = solve_jump_bsde(&b, &sol, &claim, &defaults).unwrap();
        let x_tau = b.x[[0, g.floor_index(0.5)]];
        for k in 10..=20 {
            assert_eq!(jump.y[[0, k]], x_tau * x_tau);
        }
        for k in 0..=20 {
            assert_eq!(jump.y[[1, k]], sol.y[[1, k]]);
        }
    }

    #[test]
    fn raising_terminal_never_lowers_value() {
        let b = bundle(0.3, 2000, 20, 5);
        let lambda = IntensityModel::constant(0.5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let c0: f64 = rng.gen_range(-1.0..1.0);
            let c2: f64 = rng.gen_range(0.0..2.0);
            let d0: f64 = rng.gen_range(0.0..0.3);
            let d2: f64 = rng.gen_range(0.0..0.3);
            let lo = decompose_claim(
                &ClaimSpec::split(move |_, x: f64| c0 + c2 * x * x, |_, x: f64| x),
                Utility::Identity,
            )
            .unwrap();
            let hi = decompose_claim(
                &ClaimSpec::split(move |_, x: f64| c0 + d0 + (c2 + d2) * x * x, |_, x: f64| x),
                Utility::Identity,
            )
            .unwrap();
            let driver = Driver::linear(0.1, true, 0.0);
            let a = solve_brownian_bsde(&b, &hi, &driver, &lambda, BsdeOptions::default()).unwrap();
            let c = solve_brownian_bsde(&b, &lo, &driver, &lambda, BsdeOptions::default()).unwrap();
            assert!(a.y0 >= c.y0 - 1e-9);
        }
    }

    #[test]
    fn lipschitz_probe_check() {
        let probes: Vec<DriverArgs<f64>> = (0..10)
            .map(|i| DriverArgs {
                t: 0.1 * i as f64,
                x: 1.0,
                y: i as f64,
                z: 0.5,
                u: -0.2,
                a_hat: 0.04,
                lambda: 1.0,
            })
            .collect();
        assert!(Driver::linear(0.05, true, 0.0).check_lipschitz(&probes, 1).is_ok());
        let bad = Driver::new(
            |a: &DriverArgs<f64>| 3.0 * a.y,
            Lipschitz {
                c_y: 1.0,
                c_z: 0.0,
                c_u: 0.0,
            },
        );
        assert!(bad.check_lipschitz(&probes, 1).is_err());
    }

    #[test]
    fn single_precision_smoke() {
        let g = TimeGrid::new(0.0f32, 1.0, 20).unwrap();
        let b = simulate_paths(&g, &MeasureSpec::driftless(0.2f32), &ConstantVolatility, 1.0, 4000, 1).unwrap();
        let claim = decompose_claim(&ClaimSpec::power(1.0f32, 2), Utility::Identity).unwrap();
        let sol = solve_brownian_bsde(&b, &claim, &Driver::zero(), &IntensityModel::zero(), BsdeOptions::default())
            .unwrap();
        assert!((sol.y0 - 1.04).abs() < 0.01, "{}", sol.y0);
    }
}
