//! Markovian route: explicit monotone finite differences for
//! `∂_t v + Ĥ(t, x, v, ∂_x v, g - v, ∂_xx v) = 0`, `v(T, .) = g(T, .)`,
//! where `Ĥ = sup_a {½ a γ + F(.., a)}` over a discrete variance grid.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::bsde_solver::{Driver, DriverArgs};
use crate::claims::Claim;
use crate::default_model::{DefaultSample, IntensityModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::second_order::{
    assemble_erratic_solution, sample_family_defaults, solve_auxiliary_2bsde, Mode, SecondOrderOptions,
};
use crate::sde_sim::{build_measure_family, simulate_family, ConstantVolatility, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeGrid<S> {
    pub x_min: S,
    pub x_max: S,
    pub n_x: usize,
    pub time: TimeGrid<S>,
}

impl<S: Scalar> PdeGrid<S> {
    /// Checks `dt <= dx² / a_max`.
    pub fn new(x_min: S, x_max: S, n_x: usize, time: TimeGrid<S>, a_max: S) -> Result<Self> {
        if n_x < 3 {
            return Err(Error::InvalidParameter {
                name: "n_x",
                reason: format!("need at least 3 spatial nodes, got {n_x}"),
            });
        }
        if !(x_max > x_min) {
            return Err(Error::InvalidParameter {
                name: "x_max",
                reason: format!("empty spatial range [{x_min}, {x_max}]"),
            });
        }
        let grid = Self {
            x_min,
            x_max,
            n_x,
            time,
        };
        let limit = grid.cfl_limit(a_max);
        if time.dt() > limit * (S::one() + S::lit(1e-12)) {
            return Err(Error::CflViolation {
                dt: time.dt().to_f64_lossy(),
                limit: limit.to_f64_lossy(),
            });
        }
        Ok(grid)
    }

    /// Smallest number of time steps meeting the CFL bound.
    pub fn with_cfl(x_min: S, x_max: S, n_x: usize, t0: S, horizon: S, a_max: S) -> Result<Self> {
        let dx = (x_max - x_min) / S::from_usize_lossy(n_x.saturating_sub(1).max(1));
        let limit = if a_max > S::zero() { dx * dx / a_max } else { horizon - t0 };
        let n_steps = ((horizon - t0) / limit).ceil().to_usize().unwrap_or(1).max(1);
        Self::new(x_min, x_max, n_x, TimeGrid::new(t0, horizon, n_steps)?, a_max)
    }

    /// Domain `x0 ± width_sd · σ_max √T`.
    pub fn centered(x0: S, width_sd: S, n_x: usize, t0: S, horizon: S, a_max: S) -> Result<Self> {
        let half = width_sd * a_max.sqrt() * (horizon - t0).sqrt();
        let half = if half > S::zero() { half } else { S::one() };
        Self::with_cfl(x0 - half, x0 + half, n_x, t0, horizon, a_max)
    }

    pub fn dx(&self) -> S {
        (self.x_max - self.x_min) / S::from_usize_lossy(self.n_x - 1)
    }

    pub fn dt(&self) -> S {
        self.time.dt()
    }

    pub fn cfl_limit(&self, a_max: S) -> S {
        let dx = self.dx();
        if a_max > S::zero() {
            dx * dx / a_max
        } else {
            S::infinity()
        }
    }

    pub fn x(&self, j: usize) -> S {
        if j + 1 == self.n_x {
            self.x_max
        } else {
            self.x_min + S::from_usize_lossy(j) * self.dx()
        }
    }

    pub fn xs(&self) -> Vec<S> {
        (0..self.n_x).map(|j| self.x(j)).collect()
    }
}

/// Arguments of the Hamiltonian at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianArgs<S> {
    pub t: S,
    pub x: S,
    pub y: S,
    pub z: S,
    pub u: S,
    pub gamma: S,
    pub lambda: S,
}

fn check_a_grid<S: Scalar>(a_grid: &[S]) -> Result<()> {
    if a_grid.is_empty() {
        return Err(Error::EmptyGrid("a_grid"));
    }
    if let Some(a) = a_grid.iter().find(|a| !(**a >= S::zero())) {
        return Err(Error::InvalidParameter {
            name: "a_grid",
            reason: format!("variance {a} is negative"),
        });
    }
    Ok(())
}

#[inline]
fn hamiltonian_term<S: Scalar>(driver: &Driver<S>, a: S, args: &HamiltonianArgs<S>) -> S {
    S::lit(0.5) * a * args.gamma
        + driver.eval(&DriverArgs {
            t: args.t,
            x: args.x,
            y: args.y,
            z: args.z,
            u: args.u,
            a_hat: a,
            lambda: args.lambda,
        })
}

/// Grid optimum of `½ a γ + F(.., a)` and the attaining variance
/// (lowest index on ties). `Mode::Inf` gives the lower Hamiltonian.
pub fn optimize_hamiltonian<S: Scalar>(
    driver: &Driver<S>,
    a_grid: &[S],
    args: &HamiltonianArgs<S>,
    mode: Mode,
) -> Result<(S, S)> {
    check_a_grid(a_grid)?;
    Ok(optimize_unchecked(driver, a_grid, args, mode))
}

fn optimize_unchecked<S: Scalar>(driver: &Driver<S>, a_grid: &[S], args: &HamiltonianArgs<S>, mode: Mode) -> (S, S) {
    let mut best = hamiltonian_term(driver, a_grid[0], args);
    let mut arg = a_grid[0];
    for &a in &a_grid[1..] {
        let v = hamiltonian_term(driver, a, args);
        if mode.improves(v, best) {
            best = v;
            arg = a;
        }
    }
    (best, arg)
}

/// `Ĥ = sup_a {½ a γ + F(.., a)}` over `a_grid`, with its argmax.
pub fn biconjugate_hamiltonian<S: Scalar>(
    driver: &Driver<S>,
    a_grid: &[S],
    args: &HamiltonianArgs<S>,
) -> Result<(S, S)> {
    optimize_hamiltonian(driver, a_grid, args, Mode::Sup)
}

/// `n` evenly spaced variances covering `[σ_lo², σ_hi²]`.
pub fn variance_grid<S: Scalar>(band: (S, S), n: usize) -> Result<Vec<S>> {
    let (lo, hi) = (band.0 * band.0, band.1 * band.1);
    if n == 0 {
        return Err(Error::EmptyGrid("a_grid"));
    }
    if n == 1 || lo == hi {
        return Ok(vec![hi]);
    }
    Ok((0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * S::from_usize_lossy(i) / S::from_usize_lossy(n - 1)
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct PdeSolution<S: Scalar> {
    pub grid: PdeGrid<S>,
    pub mode: Mode,
    pub a_grid: Vec<S>,
    /// `[n_steps + 1, n_x]`, rows are times.
    pub v: Array2<S>,
    pub grad_v: Array2<S>,
    pub lap_v: Array2<S>,
    /// Optimized Hamiltonian evaluated on each row's own derivatives.
    pub hamiltonian: Array2<S>,
    pub argmax_a: Array2<S>,
    /// `g - v`.
    pub u: Array2<S>,
    /// Deterministic intensity at each time node.
    pub lambda: Vec<S>,
    driver: Driver<S>,
    claim: Claim<S>,
}

impl<S: Scalar> PdeSolution<S> {
    pub fn xs(&self) -> Vec<S> {
        self.grid.xs()
    }

    /// `k^b = Ĥ - (½ â Γ + F(.., â))` on the whole grid for a realized `â`.
    /// Nonnegative in `Mode::Sup` whenever `â` lies in the variance grid.
    pub fn k_density(&self, a_hat: S) -> Array2<S> {
        let mut out = Array2::zeros(self.v.raw_dim());
        for ((k, j), o) in out.indexed_iter_mut() {
            let args = self.args_at(k, j);
            *o = self.mode.gap(self.hamiltonian[[k, j]], hamiltonian_term(&self.driver, a_hat, &args));
        }
        out
    }

    /// Smallest entry of [`Self::k_density`] over every variance in the grid.
    pub fn min_k_density(&self) -> S {
        self.a_grid
            .iter()
            .map(|&a| self.k_density(a).iter().copied().fold(S::infinity(), S::min))
            .fold(S::infinity(), S::min)
    }

    fn args_at(&self, k: usize, j: usize) -> HamiltonianArgs<S> {
        HamiltonianArgs {
            t: self.grid.time.time(k),
            x: self.grid.x(j),
            y: self.v[[k, j]],
            z: self.grad_v[[k, j]],
            u: self.u[[k, j]],
            gamma: self.lap_v[[k, j]],
            lambda: self.lambda[k],
        }
    }

    /// Bilinear interpolation of a field; `x` outside the grid is clamped
    /// and reported through the flag.
    pub fn interpolate(&self, field: &Array2<S>, t: S, x: S) -> (S, bool) {
        let tg = &self.grid.time;
        let n_t = tg.n_steps();
        let ft = ((t - tg.t0()) / tg.dt()).max(S::zero()).min(S::from_usize_lossy(n_t));
        let k = ft.floor().to_usize().unwrap_or(0).min(n_t.saturating_sub(1));
        let wt = ft - S::from_usize_lossy(k);
        let clamped = x < self.grid.x_min || x > self.grid.x_max;
        let xc = x.max(self.grid.x_min).min(self.grid.x_max);
        let fx = (xc - self.grid.x_min) / self.grid.dx();
        let j = fx.floor().to_usize().unwrap_or(0).min(self.grid.n_x - 2);
        let wx = fx - S::from_usize_lossy(j);
        let row = |r: usize| field[[r, j]] * (S::one() - wx) + field[[r, j + 1]] * wx;
        let k1 = (k + 1).min(n_t);
        (row(k) * (S::one() - wt) + row(k1) * wt, clamped)
    }

    pub fn value_at(&self, t: S, x: S) -> S {
        self.interpolate(&self.v, t, x).0
    }

    /// `v(t0, x0)`.
    pub fn v0(&self, x0: S) -> S {
        self.value_at(self.grid.time.t0(), x0)
    }
}

fn derivatives<S: Scalar>(row: &[S], dx: S) -> (Vec<S>, Vec<S>) {
    let n = row.len();
    let mut grad = vec![S::zero(); n];
    let mut lap = vec![S::zero(); n];
    let two = S::lit(2.0);
    for j in 1..n - 1 {
        grad[j] = (row[j + 1] - row[j - 1]) / (two * dx);
        lap[j] = (row[j + 1] - two * row[j] + row[j - 1]) / (dx * dx);
    }
    grad[0] = (row[1] - row[0]) / dx;
    grad[n - 1] = (row[n - 1] - row[n - 2]) / dx;
    lap[0] = lap[1];
    lap[n - 1] = lap[n - 2];
    (grad, lap)
}

/// Solves the fully nonlinear PDE backward from `v(T, .) = g(T, .)` with
/// Dirichlet data `g` at both spatial ends.
/// Gradient, Laplacian, Hamiltonian, argmax and jump size along one row.
type RowFields<S> = (Vec<S>, Vec<S>, Vec<S>, Vec<S>, Vec<S>);

pub fn solve_pde<S: Scalar>(
    grid: &PdeGrid<S>,
    claim: &Claim<S>,
    driver: &Driver<S>,
    a_grid: &[S],
    intensity: &IntensityModel<S>,
    mode: Mode,
) -> Result<PdeSolution<S>> {
    check_a_grid(a_grid)?;
    if !intensity.is_deterministic() {
        return Err(Error::NotMarkovian(
            "the PDE route needs a deterministic intensity".into(),
        ));
    }
    if !claim.is_markov() {
        return Err(Error::UnsupportedClaim("the PDE route needs a Markov claim form".into()));
    }
    let a_max = a_grid.iter().copied().fold(S::zero(), S::max);
    let limit = grid.cfl_limit(a_max);
    if grid.dt() > limit * (S::one() + S::lit(1e-12)) {
        return Err(Error::CflViolation {
            dt: grid.dt().to_f64_lossy(),
            limit: limit.to_f64_lossy(),
        });
    }
    let tg = grid.time;
    let n_t = tg.n_steps();
    let n_x = grid.n_x;
    let dx = grid.dx();
    let dt = tg.dt();
    let xs = grid.xs();
    let lambda = (0..=n_t)
        .map(|k| intensity.rate(tg.time(k), None))
        .collect::<Result<Vec<S>>>()?;
    let g_at = |t: S, x: S| claim.default_fn(t, x).expect("markov claim");

    let mut v = Array2::<S>::zeros((n_t + 1, n_x));
    let mut grad_v = Array2::<S>::zeros((n_t + 1, n_x));
    let mut lap_v = Array2::<S>::zeros((n_t + 1, n_x));
    let mut ham = Array2::<S>::zeros((n_t + 1, n_x));
    let mut argmax = Array2::<S>::zeros((n_t + 1, n_x));
    let mut u = Array2::<S>::zeros((n_t + 1, n_x));

    let horizon = tg.horizon();
    for (j, &x) in xs.iter().enumerate() {
        v[[n_t, j]] = claim.terminal_fn(horizon, x).expect("markov claim");
    }

    let fill_row = |k: usize, row: &[S]| -> RowFields<S> {
        let t = tg.time(k);
        let (gr, lp) = derivatives(row, dx);
        let (h, am, uu): (Vec<S>, Vec<S>, Vec<S>) = {
            let out: Vec<(S, S, S)> = (0..n_x)
                .into_par_iter()
                .map(|j| {
                    let uj = g_at(t, xs[j]) - row[j];
                    let args = HamiltonianArgs {
                        t,
                        x: xs[j],
                        y: row[j],
                        z: gr[j],
                        u: uj,
                        gamma: lp[j],
                        lambda: lambda[k],
                    };
                    let (h, a) = optimize_unchecked(driver, a_grid, &args, mode);
                    (h, a, uj)
                })
                .collect();
            let mut h = Vec::with_capacity(n_x);
            let mut am = Vec::with_capacity(n_x);
            let mut uu = Vec::with_capacity(n_x);
            for (a, b, c) in out {
                h.push(a);
                am.push(b);
                uu.push(c);
            }
            (h, am, uu)
        };
        (gr, lp, h, am, uu)
    };

    let mut store = |k: usize, v: &Array2<S>, ham: &mut Array2<S>| {
        let row = v.row(k).to_vec();
        let (gr, lp, h, am, uu) = fill_row(k, &row);
        grad_v.row_mut(k).assign(&Array1::from(gr));
        lap_v.row_mut(k).assign(&Array1::from(lp));
        ham.row_mut(k).assign(&Array1::from(h));
        argmax.row_mut(k).assign(&Array1::from(am));
        u.row_mut(k).assign(&Array1::from(uu));
    };

    store(n_t, &v, &mut ham);
    for k in (0..n_t).rev() {
        let t = tg.time(k);
        for j in 1..n_x - 1 {
            let val = v[[k + 1, j]] + dt * ham[[k + 1, j]];
            if !val.is_finite() {
                return Err(Error::PdeBlowUp {
                    t: t.to_f64_lossy(),
                    x: xs[j].to_f64_lossy(),
                });
            }
            v[[k, j]] = val;
        }
        v[[k, 0]] = g_at(t, xs[0]);
        v[[k, n_x - 1]] = g_at(t, xs[n_x - 1]);
        store(k, &v, &mut ham);
    }

    Ok(PdeSolution {
        grid: *grid,
        mode,
        a_grid: a_grid.to_vec(),
        v,
        grad_v,
        lap_v,
        hamiltonian: ham,
        argmax_a: argmax,
        u,
        lambda,
        driver: driver.clone(),
        claim: claim.clone(),
    })
}

/// Pathwise processes read off a PDE solution.
#[derive(Debug, Clone, PartialEq)]
pub struct FkPath<S> {
    pub y: Vec<S>,
    pub z: Vec<S>,
    pub u: Vec<S>,
    /// `K^b` accumulated along the path and stopped at `tau`.
    pub k: Vec<S>,
    /// Some state left the spatial grid and was clamped.
    pub clamped: bool,
}

/// `Y = v(t, X) 1_{t<tau} + g(tau, X_tau) 1_{t>=tau}`, `Z = ∂_x v 1_{t<tau}`,
/// `U = (g - v) 1_{t<tau}`, and `K = ∫ k^b(â) ds` up to `tau`.
pub fn piecewise_fk_assemble<S: Scalar>(
    pde: &PdeSolution<S>,
    path_grid: &TimeGrid<S>,
    path: &[S],
    a_hat: &[S],
    default: DefaultSample<S>,
) -> FkPath<S> {
    let n = path_grid.n_steps();
    let mut out = FkPath {
        y: vec![S::zero(); n + 1],
        z: vec![S::zero(); n + 1],
        u: vec![S::zero(); n + 1],
        k: vec![S::zero(); n + 1],
        clamped: false,
    };
    let tau = if default.occurred_before { default.tau } else { S::infinity() };
    let k_tau = path_grid.floor_index(tau.min(path_grid.horizon()));
    let at_default = if default.occurred_before {
        pde_default_value(pde, tau, path[k_tau])
    } else {
        S::zero()
    };
    for k in 0..=n {
        let t = path_grid.time(k);
        let x = path[k];
        if t >= tau {
            out.y[k] = at_default;
            out.k[k] = if k > 0 { out.k[k - 1] } else { S::zero() };
            continue;
        }
        let (v, c) = pde.interpolate(&pde.v, t, x);
        out.clamped |= c;
        out.y[k] = v;
        out.z[k] = pde.interpolate(&pde.grad_v, t, x).0;
        out.u[k] = pde.interpolate(&pde.u, t, x).0;
        if k > 0 {
            let tp = path_grid.time(k - 1);
            let xp = path[k - 1];
            let args = HamiltonianArgs {
                t: tp,
                x: xp,
                y: pde.interpolate(&pde.v, tp, xp).0,
                z: pde.interpolate(&pde.grad_v, tp, xp).0,
                u: pde.interpolate(&pde.u, tp, xp).0,
                gamma: pde.interpolate(&pde.lap_v, tp, xp).0,
                lambda: pde.lambda[pde.grid.time.nearest_index(tp)],
            };
            let h = pde.interpolate(&pde.hamiltonian, tp, xp).0;
            let dens = pde.mode.gap(h, hamiltonian_term(&pde.driver, a_hat[k - 1], &args));
            out.k[k] = out.k[k - 1] + dens.max(S::zero()) * path_grid.dt();
        }
    }
    out
}

fn pde_default_value<S: Scalar>(pde: &PdeSolution<S>, tau: S, x: S) -> S {
    pde.claim.default_fn(tau, x).expect("markov claim")
}

/// A Markovian scenario solved both by the PDE and by Monte Carlo.
#[derive(Clone)]
pub struct FkScenario<S> {
    pub band: (S, S),
    pub n_measures: usize,
    pub x0: S,
    pub horizon: S,
    pub claim: Claim<S>,
    pub driver: Driver<S>,
    pub intensity: IntensityModel<S>,
    pub mode: Mode,
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_x: usize,
    pub a_grid_n: usize,
    pub seed: u64,
    pub basis_degree: usize,
    /// Batches for the Monte Carlo error (see [`SecondOrderOptions`]).
    pub se_batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkReport<S> {
    pub pde_value: S,
    pub mc_value: S,
    pub mc_se: S,
    pub tol: S,
    pub pass: bool,
}

/// PDE value at `(t0, x0)` against the assembled Monte Carlo value; passes
/// within `max(2 SE, 2 %)`.
pub fn fk_consistency_check<S: Scalar>(scenario: &FkScenario<S>) -> Result<FkReport<S>> {
    if !scenario.intensity.is_deterministic() {
        return Err(Error::NotMarkovian("state-dependent intensity".into()));
    }
    if !scenario.claim.is_markov() {
        return Err(Error::NotMarkovian("path-dependent claim".into()));
    }
    let a_grid = variance_grid(scenario.band, scenario.a_grid_n)?;
    let a_max = a_grid.iter().copied().fold(S::zero(), S::max);
    let pgrid = PdeGrid::centered(scenario.x0, S::lit(6.0), scenario.n_x, S::zero(), scenario.horizon, a_max)?;
    let pde = solve_pde(&pgrid, &scenario.claim, &scenario.driver, &a_grid, &scenario.intensity, scenario.mode)?;
    let pde_value = pde.v0(scenario.x0);

    let family = build_measure_family(scenario.band, scenario.n_measures)?;
    let tgrid = TimeGrid::new(S::zero(), scenario.horizon, scenario.n_steps)?;
    let bundles = simulate_family(&tgrid, &family, &ConstantVolatility, scenario.x0, scenario.n_paths, scenario.seed)?;
    let aux = solve_auxiliary_2bsde(
        &family,
        &bundles,
        &ConstantVolatility,
        &scenario.claim,
        &scenario.driver,
        &scenario.intensity,
        scenario.mode,
        SecondOrderOptions {
            basis_degree: scenario.basis_degree,
            track_members: false,
            se_batches: scenario.se_batches,
        },
    )?;
    let defaults = sample_family_defaults(&scenario.intensity, &bundles, scenario.seed ^ 0x5EED)?;
    let full = assemble_erratic_solution(&aux, &bundles, &scenario.claim, defaults)?;
    let mc_se = aux.y0_se;
    let tol = (S::lit(2.0) * mc_se).max(S::lit(0.02) * pde_value.abs());
    Ok(FkReport {
        pde_value,
        mc_value: full.y0,
        mc_se,
        tol,
        pass: (pde_value - full.y0).abs() <= tol,
    })
}

/// Largest `|v - exact|` over the nodes within `radius` of `center` at `t0`.
pub fn max_error_near<S: Scalar>(pde: &PdeSolution<S>, exact: impl Fn(S) -> S, center: S, radius: S) -> S {
    pde.xs()
        .iter()
        .zip(pde.v.index_axis(Axis(0), 0))
        .filter(|(x, _)| (**x - center).abs() <= radius)
        .map(|(&x, &v)| (v - exact(x)).abs())
        .fold(S::zero(), S::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{decompose_claim, ClaimSpec, Utility};
    use approx::assert_abs_diff_eq;

    fn band_grid() -> Vec<f64> {
        variance_grid((0.1, 0.3), 9).unwrap()
    }

    fn square() -> Claim<f64> {
        decompose_claim(&ClaimSpec::power(1.0, 2), Utility::Identity).unwrap()
    }

    fn h_args(gamma: f64) -> HamiltonianArgs<f64> {
        HamiltonianArgs {
            t: 0.0,
            x: 1.0,
            y: 0.0,
            z: 0.0,
            u: 0.0,
            gamma,
            lambda: 0.0,
        }
    }

    #[test]
    fn hamiltonian_brute_force() {
        let zero = Driver::zero();
        assert_eq!(biconjugate_hamiltonian(&zero, &[0.0], &h_args(5.0)).unwrap().0, 0.0);
        let (h, a) = biconjugate_hamiltonian(&zero, &band_grid(), &h_args(2.0)).unwrap();
        assert_abs_diff_eq!(h, 0.09, epsilon = 1e-12);
        assert_abs_diff_eq!(a, 0.09, epsilon = 1e-12);
        let (h, a) = biconjugate_hamiltonian(&zero, &band_grid(), &h_args(-2.0)).unwrap();
        assert_abs_diff_eq!(h, -0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(a, 0.01, epsilon = 1e-12);
        assert!(matches!(
            biconjugate_hamiltonian(&zero, &[], &h_args(1.0)),
            Err(Error::EmptyGrid(_))
        ));
    }

    fn bsb(n_x: usize, lambda: f64) -> PdeSolution<f64> {
        let grid = PdeGrid::centered(1.0, 6.0, n_x, 0.0, 1.0, 0.09).unwrap();
        let intensity = IntensityModel::constant(lambda, 10.0).unwrap();
        let driver = Driver::linear(0.0, lambda > 0.0, 0.0);
        solve_pde(&grid, &square(), &driver, &band_grid(), &intensity, Mode::Sup).unwrap()
    }

    #[test]
    fn barenblatt_quadratic() {
        let pde = bsb(101, 0.0);
        assert_abs_diff_eq!(pde.v0(1.0), 1.09, epsilon = 1e-2);
        let n = pde.grid.time.n_steps();
        for (j, x) in pde.xs().into_iter().enumerate() {
            assert_eq!(pde.v[[n, j]], x * x);
        }
        assert!(pde.min_k_density() >= -1e-8);
    }

    #[test]
    fn jump_driver_phi_ode() {
        let pde = bsb(101, 1.0);
        let exact = 1.0 + 0.09 * (1.0 - (-1.0f64).exp());
        assert_abs_diff_eq!(pde.v0(1.0), exact, epsilon = 1e-2);
        assert!(pde.min_k_density() >= -1e-8);
    }

    #[test]
    fn constants_are_fixed_points() {
        let grid = PdeGrid::with_cfl(-1.0, 3.0, 41, 0.0, 1.0, 0.09).unwrap();
        let claim = decompose_claim(&ClaimSpec::terminal_g(|_, _| 2.5), Utility::Identity).unwrap();
        let intensity = IntensityModel::constant(3.0, 10.0).unwrap();
        let pde = solve_pde(&grid, &claim, &Driver::linear(0.0, true, 0.0), &band_grid(), &intensity, Mode::Sup).unwrap();
        assert!(pde.v.iter().all(|&v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn rejects_cfl_violation_and_state_intensity() {
        let tg = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert!(matches!(
            PdeGrid::new(-1.0, 3.0, 101, tg, 0.09),
            Err(Error::CflViolation { .. })
        ));
        let grid = PdeGrid::with_cfl(-1.0, 3.0, 41, 0.0, 1.0, 0.09).unwrap();
        let state = IntensityModel::state_functional(|_, x: f64| x.abs().min(1.0), 1.0).unwrap();
        assert!(matches!(
            solve_pde(&grid, &square(), &Driver::zero(), &band_grid(), &state, Mode::Sup),
            Err(Error::NotMarkovian(_))
        ));
    }

    #[test]
    fn refinement_ratio() {
        let call = decompose_claim(&ClaimSpec::<f64>::Call { strike: 1.0 }, Utility::Identity).unwrap();
        let run = |n_x: usize| {
            let grid = PdeGrid::centered(1.0, 6.0, n_x, 0.0, 1.0, 0.09).unwrap();
            solve_pde(&grid, &call, &Driver::zero(), &[0.01, 0.09], &IntensityModel::zero(), Mode::Sup)
                .unwrap()
                .v0(1.0)
        };
        // Bachelier call at σ = 0.3, at the money
        let exact = 0.3 / (2.0 * std::f64::consts::PI).sqrt();
        let e1 = (run(41) - exact).abs();
        let e2 = (run(81) - exact).abs();
        let ratio = e1 / e2;
        assert!((1.5..=4.0).contains(&ratio), "{e1} {e2} {ratio}");
    }

    #[test]
    fn raising_g_never_lowers_v() {
        let grid = PdeGrid::with_cfl(-1.0, 3.0, 41, 0.0, 1.0, 0.09).unwrap();
        let lo = square();
        let hi = decompose_claim(
            &ClaimSpec::terminal_g(|_, x: f64| x * x + 0.2 * (-(x - 1.0).powi(2)).exp()),
            Utility::Identity,
        )
        .unwrap();
        let intensity = IntensityModel::constant(0.5, 10.0).unwrap();
        let d = Driver::linear(0.0, true, 0.0);
        let a = solve_pde(&grid, &lo, &d, &band_grid(), &intensity, Mode::Sup).unwrap();
        let b = solve_pde(&grid, &hi, &d, &band_grid(), &intensity, Mode::Sup).unwrap();
        assert!(a.v.iter().zip(b.v.iter()).all(|(x, y)| y >= x));
    }

    #[test]
    fn fk_path_switches_at_default() {
        let pde = bsb(101, 1.0);
        let tg = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let mut path = vec![1.0; 11];
        path[4] = 0.9;
        let a_hat = vec![0.01; 10];
        let out = piecewise_fk_assemble(&pde, &tg, &path, &a_hat, DefaultSample::at(0.4, 1.0));
        for k in 4..=10 {
            assert_abs_diff_eq!(out.y[k], 0.81, epsilon = 1e-9);
            assert_eq!(out.u[k], 0.0);
            assert_eq!(out.k[k], out.k[3]);
        }
        assert_abs_diff_eq!(out.u[3], 1.0 - pde.value_at(0.3, 1.0), epsilon = 1e-9);
        assert!(out.k[3] > 0.0);
        let none = piecewise_fk_assemble(&pde, &tg, &path, &a_hat, DefaultSample::no_default(1.0));
        assert_abs_diff_eq!(none.y[4], pde.value_at(0.4, 0.9), epsilon = 1e-12);
    }

    #[test]
    fn fk_consistency_trivial() {
        let claim = decompose_claim(&ClaimSpec::power(1.0, 1), Utility::Identity).unwrap();
        let rep = fk_consistency_check(&FkScenario {
            band: (0.2, 0.2),
            n_measures: 1,
            x0: 1.0,
            horizon: 1.0,
            claim,
            driver: Driver::zero(),
            intensity: IntensityModel::zero(),
            mode: Mode::Sup,
            n_paths: 2000,
            n_steps: 10,
            n_x: 61,
            a_grid_n: 1,
            seed: 3,
            basis_degree: 2,
            se_batches: 4,
        })
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_abs_diff_eq!(rep.pde_value, 1.0, epsilon = 1e-9);
    }
}
