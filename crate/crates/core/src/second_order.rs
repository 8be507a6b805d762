//! The second-order layer: envelope over the measure family, extraction of
//! the nondecreasing processes `K^P`, pasting at the default time, and the
//! minimality, DPP and comparison harnesses.
//!
//! Per step `k` and measure `P`, the conditional value
//! `p^P_k(x) = E_P[Y^b_{k+1} + F^P dt | X_k = x]` is regressed on the pooled
//! nodes of every bundle. The envelope is `Y^b_k = max_P p^P_k` (or `min` in
//! [`Mode::Inf`]), kept as the list of per-measure fits so it can be
//! evaluated anywhere. `K^P` accumulates the gap `|Y^b_k - p^P_k|` along the
//! paths of `P`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bsde_solver::{regression_step, solve_with_terminal, BsdeOptions, Driver, DriverArgs, StepInputs};
use crate::claims::Claim;
use crate::default_model::{DefaultSample, IntensityModel};
use crate::error::{Error, Result};
use crate::regression::PolyFit;
use crate::scalar::{mean, std_dev, Scalar};
use crate::sde_sim::{Dynamics, MeasureFamily, PathBundle, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Sup,
    Inf,
}

impl Mode {
    /// `a` strictly improves on `b` in this mode.
    #[inline]
    pub fn improves<S: Scalar>(self, a: S, b: S) -> bool {
        match self {
            Mode::Sup => a > b,
            Mode::Inf => a < b,
        }
    }

    /// Nonnegative gap between the envelope and a dominated value.
    #[inline]
    pub fn gap<S: Scalar>(self, envelope: S, value: S) -> S {
        match self {
            Mode::Sup => envelope - value,
            Mode::Inf => value - envelope,
        }
    }
}

/// Optimum over the per-measure fitted values at one time step.
#[derive(Debug, Clone)]
pub struct Envelope<S> {
    mode: Mode,
    values: Vec<PolyFit<S>>,
    grads: Vec<PolyFit<S>>,
}

impl<S: Scalar> Envelope<S> {
    /// Value and index of the attaining measure (lowest index on ties).
    pub fn eval(&self, x: S) -> (S, usize) {
        let mut best = self.values[0].eval(x);
        let mut arg = 0;
        for (m, fit) in self.values.iter().enumerate().skip(1) {
            let v = fit.eval(x);
            if self.mode.improves(v, best) {
                best = v;
                arg = m;
            }
        }
        (best, arg)
    }

    pub fn value(&self, x: S) -> S {
        self.eval(x).0
    }

    /// `Z^b` at `x`: the gradient fit of the attaining measure.
    pub fn grad(&self, x: S) -> S {
        let (_, m) = self.eval(x);
        self.grads[m].eval(x)
    }

    /// First and second `x`-derivatives of the attaining value fit.
    pub fn value_derivatives(&self, x: S) -> (S, S) {
        let (_, m) = self.eval(x);
        (self.values[m].derivative(x), self.values[m].second_derivative(x))
    }

    /// All fits are constants, as happens at a deterministic start.
    pub fn is_degenerate(&self) -> bool {
        self.values.iter().all(|g| g.degree() == 0)
    }

    /// Fitted conditional value of one member.
    pub fn member_value(&self, m: usize, x: S) -> S {
        self.values[m].eval(x)
    }

    pub fn n_members(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecondOrderOptions {
    pub basis_degree: usize,
    /// Also propagate each member's own BSDE to measure envelope dominance.
    pub track_members: bool,
    /// When at least 2, `y0_se` is the batch-means error over this many
    /// independent re-solves on disjoint path batches. Otherwise it is the
    /// pathwise replay error, which leaves out regression-fit noise.
    pub se_batches: usize,
}

impl Default for SecondOrderOptions {
    fn default() -> Self {
        Self {
            basis_degree: 3,
            track_members: true,
            se_batches: 0,
        }
    }
}

/// Solution of the auxiliary 2BSDE, optionally pasted at default times.
#[derive(Debug, Clone)]
pub struct SecondOrderSolution<S> {
    pub mode: Mode,
    pub grid: TimeGrid<S>,
    pub sigmas: Vec<S>,
    /// Envelope per step `0..n_steps`.
    pub envelopes: Vec<Envelope<S>>,
    /// Per member, `[n_paths, n_steps + 1]`: `Y` along that member's paths.
    pub y: Vec<Array2<S>>,
    /// Per member: jump size `(xi_a - Y^b) 1_{t < tau}`.
    pub u: Vec<Array2<S>>,
    /// Per member: nondecreasing `K^P`, `K^P_0 = 0`.
    pub k_per_measure: Vec<Array2<S>>,
    /// `[n_steps][n_members]`: number of pooled nodes where each member attains.
    pub argopt_counts: Vec<Vec<usize>>,
    pub y0: S,
    pub y0_se: S,
    /// Time-0 value of each member's own BSDE (empty unless tracked).
    pub member_y0: Vec<S>,
    /// Largest amount by which a member's own BSDE beats the envelope.
    pub dominance_violation: S,
    /// Total negative K increment removed by clamping.
    pub clamp_mass: S,
    pub residual_rms: Vec<S>,
    pub degree_fallbacks: usize,
    /// Default times per member and path once pasted.
    pub defaults: Option<Vec<Vec<DefaultSample<S>>>>,
}

impl<S: Scalar> SecondOrderSolution<S> {
    pub fn n_members(&self) -> usize {
        self.sigmas.len()
    }

    /// Member attaining the envelope at most pooled nodes of step `k`.
    pub fn argopt(&self, k: usize) -> usize {
        let counts = &self.argopt_counts[k.min(self.argopt_counts.len() - 1)];
        let mut best = 0;
        for (m, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = m;
            }
        }
        best
    }

    /// `E[K^P_{T ∧ tau}]` per member.
    pub fn k_terminal_means(&self) -> Vec<S> {
        let n = self.grid.n_steps();
        self.k_per_measure
            .iter()
            .map(|k| mean(&k.column(n).to_vec()))
            .collect()
    }

    /// Cross-path mean of `K^P_{t_k}` per member.
    pub fn k_means_at(&self, k: usize) -> Vec<S> {
        self.k_per_measure
            .iter()
            .map(|a| mean(&a.column(k).to_vec()))
            .collect()
    }

    pub fn y_mean(&self, k: usize) -> S {
        pooled_mean(&self.y, k)
    }

    pub fn u_mean(&self, k: usize) -> S {
        pooled_mean(&self.u, k)
    }

    /// Largest decrease found in any stored `K^P` path (zero when monotone).
    pub fn k_monotonicity_defect(&self) -> S {
        let mut worst = S::zero();
        for k in &self.k_per_measure {
            for row in k.rows() {
                if row[0] != S::zero() {
                    worst = worst.max(row[0].abs());
                }
                for w in row.as_slice().expect("standard layout").windows(2) {
                    worst = worst.max(w[0] - w[1]);
                }
            }
        }
        worst
    }
}

fn pooled_mean<S: Scalar>(arrays: &[Array2<S>], k: usize) -> S {
    let mut sum = S::zero();
    let mut n = 0usize;
    for a in arrays {
        for &v in a.column(k) {
            sum += v;
            n += 1;
        }
    }
    sum / S::from_usize_lossy(n.max(1))
}

fn check_bundles<S: Scalar>(family: &MeasureFamily<S>, bundles: &[PathBundle<S>]) -> Result<TimeGrid<S>> {
    if family.is_empty() || bundles.is_empty() {
        return Err(Error::EmptyFamily);
    }
    if bundles.len() != family.len() {
        return Err(Error::InconsistentBundles(format!(
            "{} bundles for {} members",
            bundles.len(),
            family.len()
        )));
    }
    let grid = bundles[0].grid;
    let x0 = bundles[0].x0();
    for b in bundles {
        if b.grid != grid {
            return Err(Error::InconsistentBundles("time grids differ".into()));
        }
        if b.x0() != x0 {
            return Err(Error::InconsistentBundles("initial states differ".into()));
        }
    }
    Ok(grid)
}

fn require_markov<S: Scalar>(claim: &Claim<S>) -> Result<()> {
    if claim.is_markov() {
        Ok(())
    } else {
        Err(Error::UnsupportedClaim(
            "the second-order solvers need a Markov claim form".into(),
        ))
    }
}

struct MemberStep<S> {
    env: crate::bsde_solver::StepOutputs<S>,
    own: Option<PolyFit<S>>,
    increments: Vec<S>,
}

/// Solves the auxiliary 2BSDE on `[t0, T]` over a finite measure family.
#[allow(clippy::too_many_arguments)]
pub fn solve_auxiliary_2bsde<S: Scalar>(
    family: &MeasureFamily<S>,
    bundles: &[PathBundle<S>],
    dynamics: &dyn Dynamics<S>,
    claim: &Claim<S>,
    driver: &Driver<S>,
    intensity: &IntensityModel<S>,
    mode: Mode,
    options: SecondOrderOptions,
) -> Result<SecondOrderSolution<S>> {
    let mut sol = solve_once(family, bundles, dynamics, claim, driver, intensity, mode, options)?;
    let n_batches = options.se_batches;
    if n_batches >= 2 {
        let inner = SecondOrderOptions {
            track_members: false,
            se_batches: 0,
            ..options
        };
        let y0s = (0..n_batches)
            .map(|b| {
                let part: Vec<PathBundle<S>> = bundles.iter().map(|x| x.batch(b, n_batches)).collect();
                solve_once(family, &part, dynamics, claim, driver, intensity, mode, inner).map(|s| s.y0)
            })
            .collect::<Result<Vec<S>>>()?;
        sol.y0_se = std_dev(&y0s) / S::from_usize_lossy(n_batches).sqrt();
    }
    Ok(sol)
}

#[allow(clippy::too_many_arguments)]
fn solve_once<S: Scalar>(
    family: &MeasureFamily<S>,
    bundles: &[PathBundle<S>],
    dynamics: &dyn Dynamics<S>,
    claim: &Claim<S>,
    driver: &Driver<S>,
    intensity: &IntensityModel<S>,
    mode: Mode,
    options: SecondOrderOptions,
) -> Result<SecondOrderSolution<S>> {
    let grid = check_bundles(family, bundles)?;
    require_markov(claim)?;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let horizon = grid.horizon();
    let n_members = family.len();
    let terminal = |x: S| claim.terminal_fn(horizon, x).expect("markov claim");

    let mut envelopes: Vec<Envelope<S>> = Vec::with_capacity(n_steps);
    let mut own_fits: Vec<Option<PolyFit<S>>> = vec![None; n_members];
    let mut argopt_counts = vec![vec![0usize; n_members]; n_steps];
    let mut residual_rms = vec![S::zero(); n_steps];
    let mut dominance = S::neg_infinity();
    let mut fallbacks = 0usize;
    // pathwise replay of Y_0 along each member's own bundle
    let offsets: Vec<usize> = bundles
        .iter()
        .scan(0, |acc, b| {
            let o = *acc;
            *acc += b.n_paths();
            Some(o)
        })
        .collect();
    let mut replay: Vec<Vec<S>> = bundles
        .iter()
        .map(|b| b.x.column(n_steps).iter().map(|&x| terminal(x)).collect())
        .collect();

    for k in (0..n_steps).rev() {
        let t = grid.time(k);
        let t_next = grid.time(k + 1);
        let xs: Vec<S> = bundles.iter().flat_map(|b| b.x.column(k).to_vec()).collect();
        let dw: Vec<S> = bundles.iter().flat_map(|b| b.dw.column(k).to_vec()).collect();
        let lambda = xs
            .iter()
            .map(|&x| intensity.rate(t, Some(x)))
            .collect::<Result<Vec<S>>>()?;
        let next_env = envelopes.last();

        let steps: Vec<MemberStep<S>> = family
            .members()
            .par_iter()
            .enumerate()
            .map(|(m, spec)| -> Result<MemberStep<S>> {
                let mut sigma = Vec::with_capacity(xs.len());
                let mut x_next = Vec::with_capacity(xs.len());
                for (i, &x) in xs.iter().enumerate() {
                    let s = dynamics.volatility(t, x, spec);
                    if !(s > S::zero()) {
                        return Err(Error::NonPositiveVolatility {
                            path: i,
                            step: k,
                            value: s.to_f64_lossy(),
                        });
                    }
                    sigma.push(s);
                    x_next.push(x + dynamics.drift(t, x, spec) * dt + s * dw[i]);
                }
                let y_next: Vec<S> = match next_env {
                    None => x_next.iter().map(|&x| terminal(x)).collect(),
                    Some(e) => x_next.iter().map(|&x| e.value(x)).collect(),
                };
                let xi_a_next: Vec<S> = x_next
                    .iter()
                    .map(|&x| claim.default_fn(t_next, x).expect("markov claim"))
                    .collect();
                let inputs = StepInputs {
                    t,
                    dt,
                    xs: &xs,
                    dw: &dw,
                    sigma: &sigma,
                    y_next: &y_next,
                    xi_a_next: &xi_a_next,
                    lambda: &lambda,
                };
                let env = regression_step(&inputs, driver, options.basis_degree);
                let own_range = offsets[m]..offsets[m] + bundles[m].n_paths();
                let increments: Vec<S> = own_range
                    .map(|i| env.residual[i] + env.y[i] - y_next[i])
                    .collect();
                let own = if options.track_members {
                    let own_next: Vec<S> = match &own_fits[m] {
                        None => x_next.iter().map(|&x| terminal(x)).collect(),
                        Some(f) => x_next.iter().map(|&x| f.eval(x)).collect(),
                    };
                    let out = regression_step(
                        &StepInputs {
                            y_next: &own_next,
                            ..inputs
                        },
                        driver,
                        options.basis_degree,
                    );
                    Some(out.value)
                } else {
                    None
                };
                Ok(MemberStep { env, own, increments })
            })
            .collect::<Result<Vec<_>>>()?;

        let envelope = Envelope {
            mode,
            values: steps.iter().map(|s| s.env.value.clone()).collect(),
            grads: steps.iter().map(|s| s.env.grad.clone()).collect(),
        };
        for &x in &xs {
            let (v, arg) = envelope.eval(x);
            argopt_counts[k][arg] += 1;
            if options.track_members {
                for s in &steps {
                    let own = s.own.as_ref().expect("tracked").eval(x);
                    dominance = dominance.max(-mode.gap(v, own));
                }
            }
        }
        if k > 0 {
            fallbacks += steps.iter().filter(|s| s.env.value_info.fell_back()).count();
        }
        residual_rms[k] = mean(
            &steps
                .iter()
                .map(|s| {
                    (s.env.residual.iter().map(|&r| r * r).sum::<S>() / S::from_usize_lossy(xs.len())).sqrt()
                })
                .collect::<Vec<_>>(),
        );
        for (m, s) in steps.iter().enumerate() {
            for (r, inc) in replay[m].iter_mut().zip(&s.increments) {
                *r += *inc;
            }
        }
        for (m, s) in steps.into_iter().enumerate() {
            own_fits[m] = s.own;
        }
        envelopes.push(envelope);
    }
    envelopes.reverse();

    let x0 = bundles[0].x0();
    let (y0, m0) = envelopes[0].eval(x0);
    let y0_se = std_dev(&replay[m0]) / S::from_usize_lossy(replay[m0].len()).sqrt();
    let member_y0: Vec<S> = own_fits.iter().flatten().map(|f| f.eval(x0)).collect();

    let mut clamp_mass = S::zero();
    let mut y_paths = Vec::with_capacity(n_members);
    let mut u_paths = Vec::with_capacity(n_members);
    let mut k_paths = Vec::with_capacity(n_members);
    for (m, b) in bundles.iter().enumerate() {
        let n = b.n_paths();
        let mut y = Array2::<S>::zeros((n, n_steps + 1));
        let mut u = Array2::<S>::zeros((n, n_steps + 1));
        let mut kk = Array2::<S>::zeros((n, n_steps + 1));
        for i in 0..n {
            for k in 0..=n_steps {
                let x = b.x[[i, k]];
                let t = grid.time(k);
                let yv = if k == n_steps {
                    terminal(x)
                } else {
                    let (v, _) = envelopes[k].eval(x);
                    let gap = mode.gap(v, envelopes[k].member_value(m, x));
                    if gap < S::zero() {
                        clamp_mass += -gap;
                    }
                    kk[[i, k + 1]] = kk[[i, k]] + gap.max(S::zero());
                    v
                };
                y[[i, k]] = yv;
                u[[i, k]] = claim.default_fn(t, x).expect("markov claim") - yv;
            }
        }
        y_paths.push(y);
        u_paths.push(u);
        k_paths.push(kk);
    }

    Ok(SecondOrderSolution {
        mode,
        grid,
        sigmas: family.sigmas(),
        envelopes,
        y: y_paths,
        u: u_paths,
        k_per_measure: k_paths,
        argopt_counts,
        y0,
        y0_se,
        member_y0,
        dominance_violation: if options.track_members {
            dominance.max(S::zero())
        } else {
            S::zero()
        },
        clamp_mass,
        residual_rms,
        degree_fallbacks: fallbacks,
        defaults: None,
    })
}

/// Pastes the auxiliary solution at the default times:
/// `Y = Y^b 1_{t<tau} + xi_a_tau 1_{t>=tau}`, `U = (xi_a - Y^b) 1_{t<tau}`,
/// and `K^P` stopped at `tau`.
pub fn assemble_erratic_solution<S: Scalar>(
    aux: &SecondOrderSolution<S>,
    bundles: &[PathBundle<S>],
    claim: &Claim<S>,
    defaults: Vec<Vec<DefaultSample<S>>>,
) -> Result<SecondOrderSolution<S>> {
    if defaults.len() != bundles.len() || bundles.len() != aux.y.len() {
        return Err(Error::InconsistentBundles(format!(
            "{} default sets, {} bundles, {} members",
            defaults.len(),
            bundles.len(),
            aux.y.len()
        )));
    }
    let grid = aux.grid;
    let n_steps = grid.n_steps();
    let mut out = aux.clone();
    for (m, b) in bundles.iter().enumerate() {
        if defaults[m].len() != b.n_paths() {
            return Err(Error::InconsistentBundles(format!(
                "member {m}: {} default samples for {} paths",
                defaults[m].len(),
                b.n_paths()
            )));
        }
        for (i, d) in defaults[m].iter().enumerate() {
            if !d.occurred_before {
                continue;
            }
            let path = b.x.row(i);
            let path = path.as_slice().expect("standard layout");
            let at_default = claim.default_value(&grid, d.tau, path);
            let mut k_stop = None;
            for k in 0..=n_steps {
                if grid.time(k) >= d.tau {
                    let ks = *k_stop.get_or_insert(k);
                    out.y[m][[i, k]] = at_default;
                    out.u[m][[i, k]] = S::zero();
                    out.k_per_measure[m][[i, k]] = aux.k_per_measure[m][[i, ks]];
                }
            }
        }
    }
    let all: Vec<S> = out.y.iter().flat_map(|a| a.column(0).to_vec()).collect();
    out.y0 = mean(&all);
    out.defaults = Some(defaults);
    Ok(out)
}

/// Samples one default time per path of every bundle.
pub fn sample_family_defaults<S: Scalar>(
    intensity: &IntensityModel<S>,
    bundles: &[PathBundle<S>],
    seed: u64,
) -> Result<Vec<Vec<DefaultSample<S>>>> {
    bundles
        .iter()
        .map(|b| intensity.sample_defaults_for(b, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimalityReport<S> {
    pub k_terminal_means: Vec<S>,
    pub min_value: S,
    pub argmin: usize,
    pub argmin_sigma: S,
    /// Member attaining the envelope at most nodes, pooled over steps.
    pub argopt_majority: usize,
    pub tol: S,
    pub pass: bool,
}

/// Minimality: the smallest member-wise `E[K^P_{T ∧ tau}]` must vanish.
pub fn check_minimality<S: Scalar>(solution: &SecondOrderSolution<S>, tol: Option<S>) -> MinimalityReport<S> {
    let means = solution.k_terminal_means();
    let mut argmin = 0;
    for (m, &v) in means.iter().enumerate() {
        if v < means[argmin] {
            argmin = m;
        }
    }
    let mut totals = vec![0usize; solution.n_members()];
    for counts in &solution.argopt_counts {
        for (m, &c) in counts.iter().enumerate() {
            totals[m] += c;
        }
    }
    let argopt_majority = (0..totals.len()).fold(0, |b, m| if totals[m] > totals[b] { m } else { b });
    let tol = tol.unwrap_or_else(|| S::lit(0.02) * solution.y0.abs() + S::lit(0.01));
    MinimalityReport {
        min_value: means[argmin],
        argmin,
        argmin_sigma: solution.sigmas[argmin],
        k_terminal_means: means.clone(),
        argopt_majority,
        tol,
        pass: means[argmin] <= tol,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DppReport<S> {
    pub full_value: S,
    pub two_stage_value: S,
    pub t_mid: S,
    pub snapped: bool,
    pub rel_discrepancy: S,
    pub tol: S,
    pub pass: bool,
}

/// Dynamic programming check: the full-horizon value against the optimum
/// over members of the jump BSDE on `[t0, t_mid]` whose terminal value is the
/// full solution at `t_mid`.
#[allow(clippy::too_many_arguments)]
pub fn check_dpp<S: Scalar>(
    family: &MeasureFamily<S>,
    bundles: &[PathBundle<S>],
    dynamics: &dyn Dynamics<S>,
    claim: &Claim<S>,
    driver: &Driver<S>,
    intensity: &IntensityModel<S>,
    mode: Mode,
    t_mid: S,
    options: SecondOrderOptions,
) -> Result<DppReport<S>> {
    let grid = check_bundles(family, bundles)?;
    let k_mid = grid.nearest_index(t_mid);
    if k_mid == 0 || k_mid >= grid.n_steps() {
        return Err(Error::InvalidParameter {
            name: "t_mid",
            reason: format!("{t_mid} must lie strictly inside the horizon"),
        });
    }
    let snapped_t = grid.time(k_mid);
    let full = solve_auxiliary_2bsde(
        family,
        bundles,
        dynamics,
        claim,
        driver,
        intensity,
        mode,
        SecondOrderOptions {
            track_members: false,
            ..options
        },
    )?;
    let envelope = &full.envelopes[k_mid];
    let stage = bundles
        .par_iter()
        .map(|b| -> Result<S> {
            let short = b.truncated(k_mid)?;
            let terminal: Vec<S> = short.x.column(k_mid).iter().map(|&x| envelope.value(x)).collect();
            let sol = solve_with_terminal(
                &short,
                &terminal,
                claim,
                driver,
                intensity,
                BsdeOptions {
                    basis_degree: options.basis_degree,
                },
            )?;
            Ok(sol.y0)
        })
        .collect::<Result<Vec<S>>>()?;
    let two_stage = stage
        .iter()
        .copied()
        .fold(stage[0], |best, v| if mode.improves(v, best) { v } else { best });
    let tol = S::lit(0.02);
    let rel = (full.y0 - two_stage).abs() / full.y0.abs().max(S::epsilon());
    Ok(DppReport {
        full_value: full.y0,
        two_stage_value: two_stage,
        t_mid: snapped_t,
        snapped: snapped_t != t_mid,
        rel_discrepancy: rel,
        tol,
        pass: rel <= tol,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport<S> {
    pub y0_a: S,
    pub y0_b: S,
    /// Smallest `Y^A - Y^B` over all steps and pooled nodes.
    pub min_gap: S,
    pub violations: usize,
    pub nodes_checked: usize,
    pub tol: S,
    pub pass: bool,
}

/// Everything two solutions must share for a comparison.
pub struct ComparisonSetup<'a, S> {
    pub family: &'a MeasureFamily<S>,
    pub bundles: &'a [PathBundle<S>],
    pub dynamics: &'a dyn Dynamics<S>,
    pub intensity: &'a IntensityModel<S>,
    pub mode: Mode,
    pub options: SecondOrderOptions,
    pub tol: S,
    pub probe_seed: u64,
}

/// Comparison check: with `xi_b^A >= xi_b^B`, equal `xi_a` and
/// `F^A >= F^B`, the solutions must satisfy `Y^A >= Y^B - tol` everywhere.
pub fn compare_solutions<S: Scalar>(
    claim_a: &Claim<S>,
    claim_b: &Claim<S>,
    driver_a: &Driver<S>,
    driver_b: &Driver<S>,
    setup: &ComparisonSetup<'_, S>,
) -> Result<ComparisonReport<S>> {
    let grid = check_bundles(setup.family, setup.bundles)?;
    require_markov(claim_a)?;
    require_markov(claim_b)?;
    let horizon = grid.horizon();
    let n_steps = grid.n_steps();

    // preconditions on the simulated states
    let exact = |a: S, b: S| (a - b).abs() <= S::lit(1e-12) * (S::one() + a.abs().max(b.abs()));
    for b in setup.bundles {
        for (i, &x) in b.x.column(n_steps).iter().enumerate() {
            let ta = claim_a.terminal_fn(horizon, x).expect("markov");
            let tb = claim_b.terminal_fn(horizon, x).expect("markov");
            if ta < tb {
                return Err(Error::PreconditionViolated(format!(
                    "xi_b^A < xi_b^B on path {i} of member {} (x = {x})",
                    b.measure_index
                )));
            }
        }
        for k in (0..=n_steps).step_by((n_steps / 10).max(1)) {
            let t = grid.time(k);
            for &x in b.x.column(k).iter().take(200) {
                if !exact(claim_a.default_fn(t, x).expect("markov"), claim_b.default_fn(t, x).expect("markov")) {
                    return Err(Error::PreconditionViolated(format!("xi_a differs at t = {t}, x = {x}")));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(setup.probe_seed);
    let sig = setup.family.sigmas();
    for _ in 0..500 {
        let b = &setup.bundles[rng.gen_range(0..setup.bundles.len())];
        let k = rng.gen_range(0..n_steps);
        let x = b.x[[rng.gen_range(0..b.n_paths()), k]];
        let t = grid.time(k);
        let y = S::lit(rng.gen_range(-3.0..3.0));
        let xi_a = claim_a.default_fn(t, x).expect("markov");
        let args = DriverArgs {
            t,
            x,
            y,
            z: S::lit(rng.gen_range(-3.0..3.0)),
            u: xi_a - y,
            a_hat: {
                let s = sig[rng.gen_range(0..sig.len())];
                s * s
            },
            lambda: setup.intensity.rate(t, Some(x))?,
        };
        if driver_a.eval(&args) < driver_b.eval(&args) {
            return Err(Error::PreconditionViolated(format!("F^A < F^B at {args:?}")));
        }
    }

    let solve = |claim: &Claim<S>, driver: &Driver<S>| {
        solve_auxiliary_2bsde(
            setup.family,
            setup.bundles,
            setup.dynamics,
            claim,
            driver,
            setup.intensity,
            setup.mode,
            SecondOrderOptions {
                track_members: false,
                ..setup.options
            },
        )
    };
    let sol_a = solve(claim_a, driver_a)?;
    let sol_b = solve(claim_b, driver_b)?;

    let mut min_gap = S::infinity();
    let mut violations = 0usize;
    let mut checked = 0usize;
    for b in setup.bundles {
        for k in 0..=n_steps {
            for &x in b.x.column(k) {
                let (ya, yb) = if k == n_steps {
                    (
                        claim_a.terminal_fn(horizon, x).expect("markov"),
                        claim_b.terminal_fn(horizon, x).expect("markov"),
                    )
                } else {
                    (sol_a.envelopes[k].value(x), sol_b.envelopes[k].value(x))
                };
                let gap = ya - yb;
                min_gap = min_gap.min(gap);
                if gap < -setup.tol {
                    violations += 1;
                }
                checked += 1;
            }
        }
    }
    Ok(ComparisonReport {
        y0_a: sol_a.y0,
        y0_b: sol_b.y0,
        min_gap,
        violations,
        nodes_checked: checked,
        tol: setup.tol,
        pass: violations == 0 && sol_a.y0 >= sol_b.y0 - setup.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{decompose_claim, ClaimSpec, Utility};
    use crate::sde_sim::{build_measure_family, simulate_family, ConstantVolatility};

    fn setup(band: (f64, f64), n: usize, n_paths: usize, n_steps: usize) -> (MeasureFamily<f64>, Vec<PathBundle<f64>>) {
        let family = build_measure_family(band, n).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
        let bundles = simulate_family(&grid, &family, &ConstantVolatility, 1.0, n_paths, 42).unwrap();
        (family, bundles)
    }

    fn square() -> Claim<f64> {
        decompose_claim(&ClaimSpec::power(1.0, 2), Utility::Identity).unwrap()
    }

    #[test]
    fn single_member_matches_plain_bsde() {
        let (family, bundles) = setup((0.2, 0.2), 1, 4000, 20);
        let claim = square();
        let sol = solve_auxiliary_2bsde(
            &family,
            &bundles,
            &ConstantVolatility,
            &claim,
            &Driver::zero(),
            &IntensityModel::zero(),
            Mode::Sup,
            SecondOrderOptions::default(),
        )
        .unwrap();
        let plain = crate::bsde_solver::solve_brownian_bsde(
            &bundles[0],
            &claim,
            &Driver::zero(),
            &IntensityModel::zero(),
            BsdeOptions::default(),
        )
        .unwrap();
        assert!((sol.y0 - plain.y0).abs() < 2e-3, "{} vs {}", sol.y0, plain.y0);
        assert!(sol.k_terminal_means()[0].abs() < 1e-12);
        assert_eq!(sol.k_monotonicity_defect(), 0.0);
    }

    #[test]
    fn barenblatt_quadratic_sup_and_inf() {
        let (family, bundles) = setup((0.1, 0.3), 3, 5000, 20);
        let claim = square();
        let run = |mode| {
            solve_auxiliary_2bsde(
                &family,
                &bundles,
                &ConstantVolatility,
                &claim,
                &Driver::zero(),
                &IntensityModel::zero(),
                mode,
                SecondOrderOptions::default(),
            )
            .unwrap()
        };
        let sup = run(Mode::Sup);
        let inf = run(Mode::Inf);
        assert!((sup.y0 - 1.09).abs() < 0.02, "sup {}", sup.y0);
        assert!((inf.y0 - 1.01).abs() < 0.02, "inf {}", inf.y0);
        assert!(sup.dominance_violation < 5e-3, "{}", sup.dominance_violation);
        assert!(inf.dominance_violation < 5e-3, "{}", inf.dominance_violation);
        assert_eq!(sup.argopt(5), 2);
        assert_eq!(inf.argopt(5), 0);
        let rep = check_minimality(&sup, None);
        assert!(rep.pass);
        assert_eq!(rep.argmin, 2);
        // K under the low-vol member: (0.09 - 0.01) T
        assert!((rep.k_terminal_means[0] - 0.08).abs() < 0.01, "{:?}", rep.k_terminal_means);
        assert_eq!(sup.k_monotonicity_defect(), 0.0);
    }

    #[test]
    fn concave_payoff_prefers_low_vol() {
        let (family, bundles) = setup((0.1, 0.3), 3, 3000, 10);
        let claim = decompose_claim(&ClaimSpec::power(-1.0, 2), Utility::Identity).unwrap();
        let sol = solve_auxiliary_2bsde(
            &family,
            &bundles,
            &ConstantVolatility,
            &claim,
            &Driver::zero(),
            &IntensityModel::zero(),
            Mode::Sup,
            SecondOrderOptions::default(),
        )
        .unwrap();
        assert_eq!(check_minimality(&sol, None).argmin, 0);
        assert!((sol.y0 + 1.01).abs() < 0.02);
    }

    #[test]
    fn pasting_freezes_at_default() {
        let (family, bundles) = setup((0.1, 0.3), 2, 500, 10);
        let claim = square();
        let aux = solve_auxiliary_2bsde(
            &family,
            &bundles,
            &ConstantVolatility,
            &claim,
            &Driver::zero(),
            &IntensityModel::zero(),
            Mode::Sup,
            SecondOrderOptions::default(),
        )
        .unwrap();
        let mut defaults = vec![vec![DefaultSample::no_default(1.0); 500]; 2];
        defaults[0][3] = DefaultSample::at(0.5, 1.0);
        let out = assemble_erratic_solution(&aux, &bundles, &claim, defaults).unwrap();
        let x = bundles[0].x[[3, 5]];
        for k in 5..=10 {
            assert_eq!(out.y[0][[3, k]], x * x);
            assert_eq!(out.u[0][[3, k]], 0.0);
            assert_eq!(out.k_per_measure[0][[3, k]], aux.k_per_measure[0][[3, 5]]);
        }
        assert_eq!(out.y[0].row(4), aux.y[0].row(4));
        assert_eq!(out.y[1], aux.y[1]);
        assert_eq!(out.k_monotonicity_defect(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (family, bundles) = setup((0.1, 0.3), 2, 100, 5);
        let running = decompose_claim(&ClaimSpec::stopped_running(|x: f64| x), Utility::Identity).unwrap();
        let err = solve_auxiliary_2bsde(
            &family,
            &bundles,
            &ConstantVolatility,
            &running,
            &Driver::zero(),
            &IntensityModel::zero(),
            Mode::Sup,
            SecondOrderOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnsupportedClaim(_)));
        let err = solve_auxiliary_2bsde(
            &family,
            &bundles[..1],
            &ConstantVolatility,
            &square(),
            &Driver::zero(),
            &IntensityModel::zero(),
            Mode::Sup,
            SecondOrderOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InconsistentBundles(_)));
    }

    #[test]
    fn comparison_detects_violated_precondition() {
        let (family, bundles) = setup((0.1, 0.3), 2, 300, 5);
        let setup = ComparisonSetup {
            family: &family,
            bundles: &bundles,
            dynamics: &ConstantVolatility,
            intensity: &IntensityModel::zero(),
            mode: Mode::Sup,
            options: SecondOrderOptions::default(),
            tol: 1e-3,
            probe_seed: 1,
        };
        let lo = decompose_claim(&ClaimSpec::split(|_, x: f64| x * x, |_, _| 0.0), Utility::Identity).unwrap();
        let hi = decompose_claim(&ClaimSpec::split(|_, x: f64| x * x + 0.1, |_, _| 0.0), Utility::Identity).unwrap();
        let err = compare_solutions(&lo, &hi, &Driver::zero(), &Driver::zero(), &setup).unwrap_err();
        assert!(matches!(err, Error::PreconditionViolated(_)));
        let rep = compare_solutions(&hi, &lo, &Driver::zero(), &Driver::zero(), &setup).unwrap();
        assert!(rep.pass);
        assert!((rep.y0_a - rep.y0_b - 0.1).abs() < 1e-6);
    }
}
