//! Drift/volatility control with default: the driver
//! `f = -k y - c + μ z + λ u`, its sup-sup and inf-sup Hamiltonians over
//! finite control grids, the Isaacs gate, value solves through the
//! second-order layer, and Monte Carlo scoring of feedback controls.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::bsde_solver::{Driver, DriverArgs, Lipschitz};
use crate::claims::Claim;
use crate::default_model::IntensityModel;
use crate::error::{Error, Result};
use crate::scalar::{mean_and_se, Scalar};
use crate::second_order::{
    check_minimality, solve_auxiliary_2bsde, MinimalityReport, Mode, SecondOrderOptions, SecondOrderSolution,
};
use crate::sde_sim::{simulate_family, ConstantVolatility, MeasureFamily, MeasureSpec, TimeGrid};

const BLOCK: usize = 4096;
const OBJECTIVE_STREAM_TAG: u64 = 0xC0 << 56;

type CoeffFn<S> = Arc<dyn Fn(S, S, S, S) -> S + Send + Sync>;
type VolFn<S> = Arc<dyn Fn(S, S, S) -> S + Send + Sync>;

/// Control grids and coefficients. `mu`, `k`, `c` take `(t, x, a, b)`;
/// `sigma` takes `(t, x, b)`.
#[derive(Clone)]
pub struct ControlSpec<S> {
    pub a_grid: Vec<S>,
    pub b_grid: Vec<S>,
    mu: CoeffFn<S>,
    sigma: VolFn<S>,
    k: CoeffFn<S>,
    c: CoeffFn<S>,
    /// Override for the `V(Σ)` matching tolerance.
    pub tol_sigma: Option<S>,
    pub tol_isaacs: S,
    /// Declared bounds on `|μ|` and `|k|`.
    pub mu_bound: S,
    pub k_bound: S,
}

impl<S: Scalar> std::fmt::Debug for ControlSpec<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlSpec")
            .field("a_grid", &self.a_grid)
            .field("b_grid", &self.b_grid)
            .field("tol_sigma", &self.tol_sigma)
            .field("tol_isaacs", &self.tol_isaacs)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> ControlSpec<S> {
    /// Zero drift, discount and cost.
    pub fn new(a_grid: Vec<S>, b_grid: Vec<S>, sigma: impl Fn(S, S, S) -> S + Send + Sync + 'static) -> Result<Self> {
        if a_grid.is_empty() {
            return Err(Error::EmptyGrid("a_grid"));
        }
        if b_grid.is_empty() {
            return Err(Error::EmptyGrid("b_grid"));
        }
        Ok(Self {
            a_grid,
            b_grid,
            mu: Arc::new(|_, _, _, _| S::zero()),
            sigma: Arc::new(sigma),
            k: Arc::new(|_, _, _, _| S::zero()),
            c: Arc::new(|_, _, _, _| S::zero()),
            tol_sigma: None,
            tol_isaacs: S::lit(1e-9),
            mu_bound: S::zero(),
            k_bound: S::zero(),
        })
    }

    pub fn with_drift(mut self, bound: S, mu: impl Fn(S, S, S, S) -> S + Send + Sync + 'static) -> Self {
        self.mu = Arc::new(mu);
        self.mu_bound = bound;
        self
    }

    pub fn with_discount(mut self, bound: S, k: impl Fn(S, S, S, S) -> S + Send + Sync + 'static) -> Self {
        self.k = Arc::new(k);
        self.k_bound = bound;
        self
    }

    pub fn with_cost(mut self, c: impl Fn(S, S, S, S) -> S + Send + Sync + 'static) -> Self {
        self.c = Arc::new(c);
        self
    }

    pub fn mu(&self, t: S, x: S, a: S, b: S) -> S {
        (self.mu)(t, x, a, b)
    }

    pub fn sigma(&self, t: S, x: S, b: S) -> S {
        (self.sigma)(t, x, b)
    }

    pub fn discount(&self, t: S, x: S, a: S, b: S) -> S {
        (self.k)(t, x, a, b)
    }

    pub fn cost(&self, t: S, x: S, a: S, b: S) -> S {
        (self.c)(t, x, a, b)
    }

    /// Half the smallest gap between distinct `σ²` values on the B-grid.
    pub fn sigma_tolerance(&self, t: S, x: S) -> S {
        if let Some(tol) = self.tol_sigma {
            return tol;
        }
        let mut s2: Vec<S> = self.b_grid.iter().map(|&b| self.sigma(t, x, b).powi(2)).collect();
        s2.sort_by(|a, b| a.partial_cmp(b).expect("finite volatility"));
        let floor = S::lit(1e-9) * (S::one() + s2.last().copied().unwrap_or(S::zero()).abs());
        let gap = s2
            .windows(2)
            .map(|w| w[1] - w[0])
            .filter(|g| *g > floor)
            .fold(S::infinity(), S::min);
        if gap.is_finite() {
            S::lit(0.5) * gap
        } else {
            floor
        }
    }

    /// `V_t(x, Σ)`: indices of B-grid controls with `σ(t, x, b)² ≈ Σ`.
    pub fn volatility_set(&self, t: S, x: S, sigma2: S) -> Result<Vec<usize>> {
        let tol = self.sigma_tolerance(t, x);
        let set: Vec<usize> = (0..self.b_grid.len())
            .filter(|&i| (self.sigma(t, x, self.b_grid[i]).powi(2) - sigma2).abs() <= tol)
            .collect();
        if set.is_empty() {
            Err(Error::EmptyVolatilitySet {
                t: t.to_f64_lossy(),
                x: x.to_f64_lossy(),
                sigma2: sigma2.to_f64_lossy(),
            })
        } else {
            Ok(set)
        }
    }
}

/// `f = -k y - c + μ z + λ u` for one control pair.
#[allow(clippy::too_many_arguments)]
pub fn driver_f<S: Scalar>(spec: &ControlSpec<S>, t: S, x: S, y: S, z: S, u: S, a: S, b: S, lambda: S) -> S {
    -spec.discount(t, x, a, b) * y - spec.cost(t, x, a, b) + spec.mu(t, x, a, b) * z + lambda * u
}

/// State at which the Hamiltonians are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianPoint<S> {
    pub t: S,
    pub x: S,
    pub y: S,
    pub z: S,
    pub u: S,
    pub lambda: S,
    pub sigma2: S,
}

impl<S: Scalar> HamiltonianPoint<S> {
    pub fn from_driver_args(args: &DriverArgs<S>) -> Self {
        Self {
            t: args.t,
            x: args.x,
            y: args.y,
            z: args.z,
            u: args.u,
            lambda: args.lambda,
            sigma2: args.a_hat,
        }
    }
}

/// Optimum of the Hamiltonian with the attaining control pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianValue<S> {
    pub value: S,
    pub a: S,
    pub b: S,
}

fn f_at<S: Scalar>(spec: &ControlSpec<S>, p: &HamiltonianPoint<S>, a: S, b: S) -> S {
    driver_f(spec, p.t, p.x, p.y, p.z, p.u, a, b, p.lambda)
}

fn sup_over_a<S: Scalar>(spec: &ControlSpec<S>, p: &HamiltonianPoint<S>, b: S) -> (S, S) {
    let mut best = f_at(spec, p, spec.a_grid[0], b);
    let mut arg = spec.a_grid[0];
    for &a in &spec.a_grid[1..] {
        let v = f_at(spec, p, a, b);
        if v > best {
            best = v;
            arg = a;
        }
    }
    (best, arg)
}

fn outer_b<S: Scalar>(spec: &ControlSpec<S>, p: &HamiltonianPoint<S>, set: &[usize], mode: Mode) -> HamiltonianValue<S> {
    let b0 = spec.b_grid[set[0]];
    let (v0, a0) = sup_over_a(spec, p, b0);
    let mut best = HamiltonianValue { value: v0, a: a0, b: b0 };
    for &i in &set[1..] {
        let b = spec.b_grid[i];
        let (v, a) = sup_over_a(spec, p, b);
        if mode.improves(v, best.value) {
            best = HamiltonianValue { value: v, a, b };
        }
    }
    best
}

/// `F̄ = sup_{b ∈ V(Σ)} sup_a f`.
pub fn hamiltonian_sup_sup<S: Scalar>(spec: &ControlSpec<S>, p: &HamiltonianPoint<S>) -> Result<HamiltonianValue<S>> {
    let set = spec.volatility_set(p.t, p.x, p.sigma2)?;
    Ok(outer_b(spec, p, &set, Mode::Sup))
}

/// `F̲ = inf_{b ∈ V(Σ)} sup_a f`.
pub fn hamiltonian_inf_sup<S: Scalar>(spec: &ControlSpec<S>, p: &HamiltonianPoint<S>) -> Result<HamiltonianValue<S>> {
    let set = spec.volatility_set(p.t, p.x, p.sigma2)?;
    Ok(outer_b(spec, p, &set, Mode::Inf))
}

/// `sup_a inf_{b ∈ V(Σ)} f`.
pub fn hamiltonian_sup_inf<S: Scalar>(spec: &ControlSpec<S>, p: &HamiltonianPoint<S>) -> Result<HamiltonianValue<S>> {
    let set = spec.volatility_set(p.t, p.x, p.sigma2)?;
    let inner = |a: S| {
        let mut best = f_at(spec, p, a, spec.b_grid[set[0]]);
        let mut arg = spec.b_grid[set[0]];
        for &i in &set[1..] {
            let v = f_at(spec, p, a, spec.b_grid[i]);
            if v < best {
                best = v;
                arg = spec.b_grid[i];
            }
        }
        (best, arg)
    };
    let (v0, b0) = inner(spec.a_grid[0]);
    let mut best = HamiltonianValue {
        value: v0,
        a: spec.a_grid[0],
        b: b0,
    };
    for &a in &spec.a_grid[1..] {
        let (v, b) = inner(a);
        if v > best.value {
            best = HamiltonianValue { value: v, a, b };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsaacsReport<S> {
    pub max_gap: S,
    pub worst_probe: Option<HamiltonianPoint<S>>,
    pub n_probes: usize,
    pub tol: S,
    pub pass: bool,
}

/// Compares `inf_b sup_a f` with `sup_a inf_b f` at every probe.
pub fn check_isaacs<S: Scalar>(spec: &ControlSpec<S>, probes: &[HamiltonianPoint<S>]) -> Result<IsaacsReport<S>> {
    let gaps = probes
        .par_iter()
        .map(|p| -> Result<S> {
            let upper = hamiltonian_inf_sup(spec, p)?.value;
            let lower = hamiltonian_sup_inf(spec, p)?.value;
            Ok((upper - lower).abs())
        })
        .collect::<Result<Vec<S>>>()?;
    let mut max_gap = S::zero();
    let mut worst = None;
    for (p, g) in probes.iter().zip(gaps) {
        if g > max_gap || worst.is_none() {
            max_gap = max_gap.max(g);
            worst = Some(*p);
        }
    }
    Ok(IsaacsReport {
        max_gap,
        worst_probe: worst,
        n_probes: probes.len(),
        tol: spec.tol_isaacs,
        pass: max_gap <= spec.tol_isaacs,
    })
}

/// Random probes over `[t0, T] x [x_lo, x_hi]` with `y, z, u ∈ [-2, 2]`,
/// `λ ∈ [0, 1]` and `Σ` drawn from the attainable `σ²` values.
pub fn default_probes<S: Scalar>(
    spec: &ControlSpec<S>,
    grid: &TimeGrid<S>,
    x_range: (S, S),
    n: usize,
    seed: u64,
) -> Vec<HamiltonianPoint<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t0, t1) = (grid.t0().to_f64_lossy(), grid.horizon().to_f64_lossy());
    let (x0, x1) = (x_range.0.to_f64_lossy(), x_range.1.to_f64_lossy());
    (0..n)
        .map(|_| {
            let t = S::lit(t0 + (t1 - t0) * rng.gen::<f64>());
            let x = S::lit(x0 + (x1 - x0) * rng.gen::<f64>());
            let b = spec.b_grid[rng.gen_range(0..spec.b_grid.len())];
            HamiltonianPoint {
                t,
                x,
                y: S::lit(rng.gen_range(-2.0..2.0)),
                z: S::lit(rng.gen_range(-2.0..2.0)),
                u: S::lit(rng.gen_range(-2.0..2.0)),
                lambda: S::lit(rng.gen_range(0.0..1.0)),
                sigma2: spec.sigma(t, x, b).powi(2),
            }
        })
        .collect()
}

/// Distinct volatilities generated by the B-grid, ascending. The value
/// solvers need `σ(t, x, b)` independent of `(t, x)`; this is checked on
/// `probes`.
pub fn member_sigmas<S: Scalar>(spec: &ControlSpec<S>, grid: &TimeGrid<S>, probes: &[(S, S)]) -> Result<Vec<S>> {
    let t0 = grid.t0();
    let x_ref = probes.first().map(|p| p.1).unwrap_or(S::zero());
    let mut sig: Vec<S> = Vec::new();
    for &b in &spec.b_grid {
        let s = spec.sigma(t0, x_ref, b);
        if !(s > S::zero()) {
            return Err(Error::NonPositiveVolatility {
                path: 0,
                step: 0,
                value: s.to_f64_lossy(),
            });
        }
        for &(t, x) in probes {
            let st = spec.sigma(t, x, b);
            if (st - s).abs() > S::lit(1e-12) * (S::one() + s) {
                return Err(Error::InvalidParameter {
                    name: "sigma",
                    reason: format!("σ(t, x, {b}) varies with the state; the value solvers need it constant"),
                });
            }
        }
        sig.push(s);
    }
    sig.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let tol = spec.sigma_tolerance(t0, x_ref);
    let mut out: Vec<S> = Vec::new();
    for s in sig {
        if out.last().is_none_or(|&l: &S| (s * s - l * l).abs() > tol) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Generator handed to the second-order layer: `F̄` or `F̲` at the
/// realized `Σ = â`. The volatility sets are read off the B-grid at
/// `(t0, x_ref)`, which is exact when `σ` does not depend on the state
/// (see [`member_sigmas`]).
pub fn control_driver<S: Scalar>(spec: &ControlSpec<S>, mode: Mode, lambda_cap: S, t0: S, x_ref: S) -> Driver<S> {
    let lipschitz = Lipschitz {
        c_y: spec.k_bound,
        c_z: spec.mu_bound,
        c_u: lambda_cap,
    };
    let sig2: Vec<S> = spec.b_grid.iter().map(|&b| spec.sigma(t0, x_ref, b).powi(2)).collect();
    let tol = spec.sigma_tolerance(t0, x_ref);
    let spec = spec.clone();
    Driver::new(
        move |args: &DriverArgs<S>| {
            let set: Vec<usize> = (0..sig2.len())
                .filter(|&i| (sig2[i] - args.a_hat).abs() <= tol)
                .collect();
            if set.is_empty() {
                return S::nan();
            }
            outer_b(&spec, &HamiltonianPoint::from_driver_args(args), &set, mode).value
        },
        lipschitz,
    )
}

/// Feedback controls on a `(time step, x node)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField<S> {
    pub grid: TimeGrid<S>,
    pub x_nodes: Vec<S>,
    /// `[n_steps, n_x]`.
    pub a: Array2<S>,
    pub b: Array2<S>,
}

impl<S: Scalar> ControlField<S> {
    /// Constant controls.
    pub fn constant(grid: TimeGrid<S>, x_nodes: Vec<S>, a: S, b: S) -> Self {
        let shape = (grid.n_steps(), x_nodes.len());
        Self {
            grid,
            x_nodes,
            a: Array2::from_elem(shape, a),
            b: Array2::from_elem(shape, b),
        }
    }

    fn node(&self, x: S) -> usize {
        let n = self.x_nodes.len();
        if n == 1 {
            return 0;
        }
        let lo = self.x_nodes[0];
        let dx = (self.x_nodes[n - 1] - lo) / S::from_usize_lossy(n - 1);
        let j = ((x - lo) / dx).round();
        if j <= S::zero() {
            0
        } else {
            j.to_usize().unwrap_or(n - 1).min(n - 1)
        }
    }

    /// Controls at the step containing `t` and the node nearest `x`.
    pub fn at(&self, k: usize, x: S) -> (S, S) {
        let k = k.min(self.grid.n_steps() - 1);
        let j = self.node(x);
        (self.a[[k, j]], self.b[[k, j]])
    }
}

/// Monte Carlo estimate of `J = E[𝒦_{T∧τ} Φ(ξ) - ∫_0^{T∧τ} 𝒦 c dt]` under
/// the given feedback controls. Returns `(J, SE)`.
pub fn estimate_objective<S: Scalar>(
    spec: &ControlSpec<S>,
    controls: &ControlField<S>,
    claim: &Claim<S>,
    intensity: &IntensityModel<S>,
    x0: S,
    n_paths: usize,
    seed: u64,
) -> Result<(S, S)> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter {
            name: "n_paths",
            reason: "need at least one path".into(),
        });
    }
    let grid = controls.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let sqdt = dt.sqrt();
    let blocks: Vec<usize> = (0..n_paths.div_ceil(BLOCK)).collect();
    let scores: Vec<Vec<S>> = blocks
        .par_iter()
        .map(|&blk| -> Result<Vec<S>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(OBJECTIVE_STREAM_TAG | blk as u64);
            let len = BLOCK.min(n_paths - blk * BLOCK);
            let mut out = Vec::with_capacity(len);
            let mut path = vec![S::zero(); n + 1];
            for _ in 0..len {
                let e = S::lit(rng.sample::<f64, _>(Exp1));
                let mut hazard = S::zero();
                let mut log_disc = S::zero();
                let mut running = S::zero();
                let mut tau = S::infinity();
                let mut disc_at_tau = S::one();
                path[0] = x0;
                for k in 0..n {
                    let t = grid.time(k);
                    let x = path[k];
                    let (a, b) = controls.at(k, x);
                    let disc = (-log_disc).exp();
                    // default inside (t_k, t_{k+1}]
                    let rate = intensity.rate(t, Some(x))?;
                    let next_hazard = hazard + rate * dt;
                    let frac = if next_hazard >= e && rate > S::zero() {
                        Some(((e - hazard) / (rate * dt)).max(S::zero()).min(S::one()))
                    } else {
                        None
                    };
                    let h = frac.map_or(dt, |f| f * dt);
                    running += disc * spec.cost(t, x, a, b) * h;
                    let kr = spec.discount(t, x, a, b);
                    if let Some(f) = frac {
                        tau = t + f * dt;
                        disc_at_tau = (-(log_disc + kr * h)).exp();
                        // states after tau are never read
                        for p in path.iter_mut().skip(k + 1) {
                            *p = x;
                        }
                        break;
                    }
                    hazard = next_hazard;
                    log_disc += kr * dt;
                    let z: f64 = rng.sample(StandardNormal);
                    path[k + 1] = x + spec.mu(t, x, a, b) * dt + spec.sigma(t, x, b) * sqdt * S::lit(z);
                }
                let payoff = if tau.is_finite() {
                    disc_at_tau * claim.default_value(&grid, tau, &path)
                } else {
                    (-log_disc).exp() * claim.terminal_value(&grid, &path)
                };
                out.push(payoff - running);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<S> = scores.into_iter().flatten().collect();
    Ok(mean_and_se(&all))
}

/// Optimizes `½ σ(b)² Γ + sup_a f(.., a, b)` over the whole B-grid (max in
/// `Mode::Sup`, min in `Mode::Inf`), lowest index on ties.
pub fn full_hamiltonian_opt<S: Scalar>(
    spec: &ControlSpec<S>,
    point: &HamiltonianPoint<S>,
    gamma: S,
    mode: Mode,
) -> HamiltonianValue<S> {
    let eval = |b: S| {
        let s2 = spec.sigma(point.t, point.x, b).powi(2);
        let (v, a) = sup_over_a(spec, point, b);
        HamiltonianValue {
            value: S::lit(0.5) * s2 * gamma + v,
            a,
            b,
        }
    };
    let mut best = eval(spec.b_grid[0]);
    for &b in &spec.b_grid[1..] {
        let h = eval(b);
        if mode.improves(h.value, best.value) {
            best = h;
        }
    }
    best
}

/// Simulation and regression settings for the value solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlProblem<S> {
    pub x0: S,
    pub grid: TimeGrid<S>,
    pub n_paths: usize,
    pub seed: u64,
    pub options: SecondOrderOptions,
    /// Number of x nodes in the extracted control field.
    pub n_x_nodes: usize,
}

#[derive(Debug, Clone)]
pub struct ControlSolution<S> {
    pub value: S,
    pub se: S,
    pub field: ControlField<S>,
    pub solution: SecondOrderSolution<S>,
    pub minimality: MinimalityReport<S>,
    /// Mean `K_T` under the member selected by `b*(t0, x0)`.
    pub k_at_optimum: S,
    pub isaacs: Option<IsaacsReport<S>>,
}

type ValueParts<S> = (SecondOrderSolution<S>, ControlField<S>, MinimalityReport<S>, S);

fn solve_value<S: Scalar>(
    spec: &ControlSpec<S>,
    claim: &Claim<S>,
    intensity: &IntensityModel<S>,
    problem: &ControlProblem<S>,
    mode: Mode,
) -> Result<ValueParts<S>> {
    let grid = problem.grid;
    let sigmas = member_sigmas(spec, &grid, &[(grid.t0(), problem.x0), (grid.horizon(), problem.x0 + S::one())])?;
    let band = (sigmas[0], *sigmas.last().expect("non-empty"));
    let family = MeasureFamily::new(sigmas.iter().map(|&s| MeasureSpec::driftless(s)).collect(), band)?;
    let bundles = simulate_family(&grid, &family, &ConstantVolatility, problem.x0, problem.n_paths, problem.seed)?;
    let driver = control_driver(spec, mode, intensity.cap(), grid.t0(), problem.x0);
    let sol = solve_auxiliary_2bsde(&family, &bundles, &ConstantVolatility, claim, &driver, intensity, mode, problem.options)?;

    // field over the spread of the simulated states
    let mut lo = S::infinity();
    let mut hi = S::neg_infinity();
    for b in &bundles {
        for &x in b.x.iter() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let n_x = problem.n_x_nodes.max(1);
    let x_nodes: Vec<S> = if n_x == 1 || hi <= lo {
        vec![problem.x0]
    } else {
        (0..n_x)
            .map(|j| lo + (hi - lo) * S::from_usize_lossy(j) / S::from_usize_lossy(n_x - 1))
            .collect()
    };
    let n = grid.n_steps();
    let mut a = Array2::<S>::zeros((n, x_nodes.len()));
    let mut bf = Array2::<S>::zeros((n, x_nodes.len()));
    let t_next_default = |k: usize, x: S| claim.default_fn(grid.time(k), x).expect("markov claim");
    for k in 0..n {
        let t = grid.time(k);
        // read curvature from the first step whose fits are not constant
        let k_gamma = (k..n).find(|&i| !sol.envelopes[i].is_degenerate()).unwrap_or(k);
        let (lo_k, hi_k) = bundles.iter().fold((S::infinity(), S::neg_infinity()), |acc, b| {
            b.x.column(k_gamma)
                .iter()
                .fold(acc, |(l, h), &x| (l.min(x), h.max(x)))
        });
        for (j, &x_node) in x_nodes.iter().enumerate() {
            let x = x_node.max(lo_k).min(hi_k);
            let env = &sol.envelopes[k];
            let y = env.value(x);
            let (z, gamma) = sol.envelopes[k_gamma].value_derivatives(x);
            let base = HamiltonianPoint {
                t,
                x,
                y,
                z,
                u: t_next_default(k, x) - y,
                lambda: intensity.rate(t, Some(x))?,
                sigma2: S::zero(),
            };
            let h = full_hamiltonian_opt(spec, &base, gamma, mode);
            a[[k, j]] = h.a;
            bf[[k, j]] = h.b;
        }
    }
    let minimality = check_minimality(&sol, None);
    let (_, m0) = sol.envelopes[0].eval(problem.x0);
    let k_at_opt = sol.k_terminal_means()[m0];
    Ok((
        sol,
        ControlField {
            grid,
            x_nodes,
            a,
            b: bf,
        },
        minimality,
        k_at_opt,
    ))
}

/// `V̄₀`: the agent controls drift and volatility.
pub fn solve_control_value<S: Scalar>(
    spec: &ControlSpec<S>,
    claim: &Claim<S>,
    intensity: &IntensityModel<S>,
    problem: &ControlProblem<S>,
) -> Result<ControlSolution<S>> {
    let (solution, field, minimality, k_at_optimum) = solve_value(spec, claim, intensity, problem, Mode::Sup)?;
    Ok(ControlSolution {
        value: solution.y0,
        se: solution.y0_se,
        field,
        minimality,
        k_at_optimum,
        solution,
        isaacs: None,
    })
}

/// `V̲₀`: nature picks the volatility. Refused unless the Isaacs condition
/// holds on `probes`.
pub fn solve_robust_value<S: Scalar>(
    spec: &ControlSpec<S>,
    claim: &Claim<S>,
    intensity: &IntensityModel<S>,
    problem: &ControlProblem<S>,
    probes: &[HamiltonianPoint<S>],
) -> Result<ControlSolution<S>> {
    let isaacs = check_isaacs(spec, probes)?;
    if !isaacs.pass {
        return Err(Error::IsaacsViolation {
            gap: isaacs.max_gap.to_f64_lossy(),
        });
    }
    let (solution, field, minimality, k_at_optimum) = solve_value(spec, claim, intensity, problem, Mode::Inf)?;
    Ok(ControlSolution {
        value: solution.y0,
        se: solution.y0_se,
        field,
        minimality,
        k_at_optimum,
        solution,
        isaacs: Some(isaacs),
    })
}

/// Uniform grid on `[lo, hi]` with `n` points.
pub fn uniform_grid<S: Scalar>(lo: S, hi: S, n: usize) -> Vec<S> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * S::from_usize_lossy(i) / S::from_usize_lossy(n - 1)
                }
            })
            .collect(),
    }
}
