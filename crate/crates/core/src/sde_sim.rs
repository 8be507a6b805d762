//! Euler–Maruyama simulation of the state process under each member of a
//! finite measure family.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ndarray::parallel::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Paths simulated per generator stream. Fixed so results do not depend on
/// the number of worker threads.
const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<S> {
    t0: S,
    horizon: S,
    n_steps: usize,
}

impl<S: Scalar> TimeGrid<S> {
    pub fn new(t0: S, horizon: S, n_steps: usize) -> Result<Self> {
        if !(t0 < horizon) {
            return Err(Error::InvalidParameter {
                name: "horizon",
                reason: format!("need t0 < T, got t0 = {t0}, T = {horizon}"),
            });
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter {
                name: "n_steps",
                reason: "must be at least 1".into(),
            });
        }
        Ok(Self {
            t0,
            horizon,
            n_steps,
        })
    }

    pub fn t0(&self) -> S {
        self.t0
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> S {
        (self.horizon - self.t0) / S::from_usize_lossy(self.n_steps)
    }

    #[inline]
    pub fn time(&self, k: usize) -> S {
        if k == self.n_steps {
            self.horizon
        } else {
            self.t0 + self.dt() * S::from_usize_lossy(k)
        }
    }

    pub fn times(&self) -> Vec<S> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Index of the grid node closest to `t` (clamped to the grid).
    pub fn nearest_index(&self, t: S) -> usize {
        let raw = ((t - self.t0) / self.dt()).round();
        raw.max(S::zero())
            .to_usize()
            .unwrap_or(0)
            .min(self.n_steps)
    }

    /// Index of the last node with `t_k <= t` (clamped to the grid). Times
    /// within rounding distance of a node count as that node.
    pub fn floor_index(&self, t: S) -> usize {
        if t <= self.t0 {
            return 0;
        }
        if t >= self.horizon {
            return self.n_steps;
        }
        let r = (t - self.t0) / self.dt();
        let nudge = r.abs().max(S::one()) * S::epsilon() * S::lit(64.0);
        (r + nudge).floor().to_usize().unwrap_or(0).min(self.n_steps)
    }

    /// Grid on `[t0, time(k)]`, sharing the first `k` steps.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        let k = k.min(self.n_steps);
        Self::new(self.t0, self.time(k), k)
    }
}

/// One member of the discretized measure family: a constant volatility
/// control and an optional drift control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureSpec<S> {
    pub sigma_ctrl: S,
    pub drift_ctrl: Option<S>,
}

impl<S: Scalar> MeasureSpec<S> {
    pub fn driftless(sigma: S) -> Self {
        Self {
            sigma_ctrl: sigma,
            drift_ctrl: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFamily<S> {
    members: Vec<MeasureSpec<S>>,
    band: (S, S),
}

impl<S: Scalar> MeasureFamily<S> {
    pub fn new(members: Vec<MeasureSpec<S>>, band: (S, S)) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyFamily);
        }
        check_band(band)?;
        if let Some(m) = members
            .iter()
            .find(|m| m.sigma_ctrl < band.0 || m.sigma_ctrl > band.1)
        {
            return Err(Error::InvalidParameter {
                name: "sigma_ctrl",
                reason: format!(
                    "{} outside the band [{}, {}]",
                    m.sigma_ctrl, band.0, band.1
                ),
            });
        }
        Ok(Self { members, band })
    }

    pub fn members(&self) -> &[MeasureSpec<S>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn band(&self) -> (S, S) {
        self.band
    }

    pub fn sigmas(&self) -> Vec<S> {
        self.members.iter().map(|m| m.sigma_ctrl).collect()
    }
}

fn check_band<S: Scalar>(band: (S, S)) -> Result<()> {
    if !(band.0 > S::zero()) || !(band.0 <= band.1) || !band.1.is_finite() {
        return Err(Error::InvalidParameter {
            name: "sigma_band",
            reason: format!("need 0 < sigma_min <= sigma_max, got [{}, {}]", band.0, band.1),
        });
    }
    Ok(())
}

/// Uniform grid of constant-volatility members spanning the band, endpoints
/// included.
pub fn build_measure_family<S: Scalar>(band: (S, S), n_members: usize) -> Result<MeasureFamily<S>> {
    check_band(band)?;
    if n_members == 0 {
        return Err(Error::EmptyFamily);
    }
    let members = if n_members == 1 || band.0 == band.1 {
        vec![MeasureSpec::driftless(band.0)]
    } else {
        let step = (band.1 - band.0) / S::from_usize_lossy(n_members - 1);
        (0..n_members)
            .map(|i| {
                let sigma = if i == n_members - 1 {
                    band.1
                } else {
                    band.0 + step * S::from_usize_lossy(i)
                };
                MeasureSpec::driftless(sigma)
            })
            .collect()
    };
    MeasureFamily::new(members, band)
}

/// State coefficients `mu(t, x; spec)` and `sigma(t, x; spec)`.
pub trait Dynamics<S>: Send + Sync {
    fn drift(&self, t: S, x: S, spec: &MeasureSpec<S>) -> S;
    fn volatility(&self, t: S, x: S, spec: &MeasureSpec<S>) -> S;

    /// Whether the drift vanishes identically.
    fn is_driftless(&self) -> bool {
        false
    }
}

/// `dX = a dt + b dW` with `(a, b)` read straight from the measure spec.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantVolatility;

impl<S: Scalar> Dynamics<S> for ConstantVolatility {
    fn drift(&self, _t: S, _x: S, spec: &MeasureSpec<S>) -> S {
        spec.drift_ctrl.unwrap_or_else(S::zero)
    }

    fn volatility(&self, _t: S, _x: S, spec: &MeasureSpec<S>) -> S {
        spec.sigma_ctrl
    }
}

type CoeffFn<S> = Arc<dyn Fn(S, S, &MeasureSpec<S>) -> S + Send + Sync>;

/// Dynamics given by closures.
#[derive(Clone)]
pub struct FnDynamics<S> {
    drift: CoeffFn<S>,
    volatility: CoeffFn<S>,
    driftless: bool,
}

impl<S: Scalar> FnDynamics<S> {
    pub fn new(
        drift: impl Fn(S, S, &MeasureSpec<S>) -> S + Send + Sync + 'static,
        volatility: impl Fn(S, S, &MeasureSpec<S>) -> S + Send + Sync + 'static,
    ) -> Self {
        Self {
            drift: Arc::new(drift),
            volatility: Arc::new(volatility),
            driftless: false,
        }
    }

    pub fn driftless(volatility: impl Fn(S, S, &MeasureSpec<S>) -> S + Send + Sync + 'static) -> Self {
        Self {
            drift: Arc::new(|_, _, _| S::zero()),
            volatility: Arc::new(volatility),
            driftless: true,
        }
    }
}

impl<S> fmt::Debug for FnDynamics<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnDynamics")
            .field("driftless", &self.driftless)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> Dynamics<S> for FnDynamics<S> {
    fn drift(&self, t: S, x: S, spec: &MeasureSpec<S>) -> S {
        (self.drift)(t, x, spec)
    }

    fn volatility(&self, t: S, x: S, spec: &MeasureSpec<S>) -> S {
        (self.volatility)(t, x, spec)
    }

    fn is_driftless(&self) -> bool {
        self.driftless
    }
}

/// Simulated paths under one measure.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle<S> {
    /// State values, `[n_paths, n_steps + 1]`.
    pub x: Array2<S>,
    /// Brownian increments, `[n_paths, n_steps]`.
    pub dw: Array2<S>,
    /// Quadratic-variation density `sigma(t_k, X_k)^2`, `[n_paths, n_steps]`.
    pub a_hat: Array2<S>,
    pub measure_index: usize,
    pub spec: MeasureSpec<S>,
    pub grid: TimeGrid<S>,
    pub seed: u64,
}

impl<S: Scalar> PathBundle<S> {
    pub fn n_paths(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn x0(&self) -> S {
        self.x[[0, 0]]
    }

    pub fn path(&self, i: usize) -> ndarray::ArrayView1<'_, S> {
        self.x.row(i)
    }

    /// Rows of batch `b` when the paths are cut into `n_batches` contiguous
    /// slices of near-equal size.
    pub fn batch(&self, b: usize, n_batches: usize) -> Self {
        let n = self.n_paths();
        let n_batches = n_batches.clamp(1, n.max(1));
        let lo = b * n / n_batches;
        let hi = (b + 1) * n / n_batches;
        Self {
            x: self.x.slice(ndarray::s![lo..hi, ..]).to_owned(),
            dw: self.dw.slice(ndarray::s![lo..hi, ..]).to_owned(),
            a_hat: self.a_hat.slice(ndarray::s![lo..hi, ..]).to_owned(),
            measure_index: self.measure_index,
            spec: self.spec,
            grid: self.grid,
            seed: self.seed,
        }
    }

    /// Bundle restricted to the first `k` steps.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        let k = k.min(self.n_steps());
        Ok(Self {
            x: self.x.slice(ndarray::s![.., ..=k]).to_owned(),
            dw: self.dw.slice(ndarray::s![.., ..k]).to_owned(),
            a_hat: self.a_hat.slice(ndarray::s![.., ..k]).to_owned(),
            measure_index: self.measure_index,
            spec: self.spec,
            grid: self.grid.truncated(k)?,
            seed: self.seed,
        })
    }
}

fn stream_id(measure_index: usize, block: usize) -> u64 {
    ((measure_index as u64) << 32) | block as u64
}

/// Standard normal increments scaled by `sqrt(dt)`, generated blockwise.
fn brownian_increments<S: Scalar>(
    n_paths: usize,
    n_steps: usize,
    dt: S,
    seed: u64,
    measure_index: usize,
) -> Array2<S> {
    let sqrt_dt = dt.sqrt().to_f64_lossy();
    let mut dw = Array2::<S>::zeros((n_paths, n_steps));
    dw.axis_chunks_iter_mut(Axis(0), BLOCK)
        .into_par_iter()
        .enumerate()
        .for_each(|(block, mut chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(measure_index, block));
            for v in chunk.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = S::lit(z * sqrt_dt);
            }
        });
    dw
}

/// Euler–Maruyama paths of `dX = mu dt + sigma dW` from `x0`.
pub fn simulate_paths<S: Scalar>(
    grid: &TimeGrid<S>,
    spec: &MeasureSpec<S>,
    dynamics: &dyn Dynamics<S>,
    x0: S,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle<S>> {
    simulate_member(grid, spec, 0, dynamics, x0, n_paths, seed)
}

fn simulate_member<S: Scalar>(
    grid: &TimeGrid<S>,
    spec: &MeasureSpec<S>,
    measure_index: usize,
    dynamics: &dyn Dynamics<S>,
    x0: S,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle<S>> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter {
            name: "n_paths",
            reason: "must be at least 1".into(),
        });
    }
    let dw = brownian_increments(n_paths, grid.n_steps(), grid.dt(), seed, measure_index);
    let mut bundle = simulate_with_increments(grid, spec, dynamics, x0, dw)?;
    bundle.measure_index = measure_index;
    bundle.seed = seed;
    Ok(bundle)
}

/// Euler–Maruyama paths driven by caller-supplied Brownian increments.
pub fn simulate_with_increments<S: Scalar>(
    grid: &TimeGrid<S>,
    spec: &MeasureSpec<S>,
    dynamics: &dyn Dynamics<S>,
    x0: S,
    dw: Array2<S>,
) -> Result<PathBundle<S>> {
    let n_steps = grid.n_steps();
    if dw.ncols() != n_steps {
        return Err(Error::InvalidParameter {
            name: "dw",
            reason: format!("expected {n_steps} columns, got {}", dw.ncols()),
        });
    }
    let n_paths = dw.nrows();
    let dt = grid.dt();
    let times = grid.times();
    let mut x = Array2::<S>::zeros((n_paths, n_steps + 1));
    let mut a_hat = Array2::<S>::zeros((n_paths, n_steps));

    x.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(a_hat.axis_iter_mut(Axis(0)))
        .zip(dw.axis_iter(Axis(0)))
        .enumerate()
        .try_for_each(|(i, ((mut xr, mut ar), dwr))| {
            xr[0] = x0;
            for k in 0..n_steps {
                let xk = xr[k];
                let sigma = dynamics.volatility(times[k], xk, spec);
                if !(sigma > S::zero()) {
                    return Err(if sigma.is_nan() {
                        Error::NonFinite { path: i, step: k }
                    } else {
                        Error::NonPositiveVolatility {
                            path: i,
                            step: k,
                            value: sigma.to_f64_lossy(),
                        }
                    });
                }
                let next = xk + dynamics.drift(times[k], xk, spec) * dt + sigma * dwr[k];
                if !next.is_finite() {
                    return Err(Error::NonFinite { path: i, step: k + 1 });
                }
                ar[k] = sigma * sigma;
                xr[k + 1] = next;
            }
            Ok(())
        })?;

    Ok(PathBundle {
        x,
        dw,
        a_hat,
        measure_index: 0,
        spec: *spec,
        grid: *grid,
        seed: 0,
    })
}

/// One bundle per family member, each on its own generator stream.
pub fn simulate_family<S: Scalar>(
    grid: &TimeGrid<S>,
    family: &MeasureFamily<S>,
    dynamics: &dyn Dynamics<S>,
    x0: S,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathBundle<S>>> {
    family
        .members()
        .par_iter()
        .enumerate()
        .map(|(m, spec)| simulate_member(grid, spec, m, dynamics, x0, n_paths, seed))
        .collect()
}

/// Realized variance `(dX)^2 / dt` per step, `[n_paths, n_steps]`.
pub fn estimate_quadratic_variation<S: Scalar>(bundle: &PathBundle<S>) -> Array2<S> {
    let dt = bundle.grid.dt();
    let n_steps = bundle.n_steps();
    Array2::from_shape_fn((bundle.n_paths(), n_steps), |(i, k)| {
        let dx = bundle.x[[i, k + 1]] - bundle.x[[i, k]];
        dx * dx / dt
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::mean_and_se;

    #[test]
    fn grid_basics() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.floor_index(0.3), 1);
        assert_eq!(g.floor_index(0.5), 2);
        assert_eq!(g.nearest_index(0.6), 2);
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn family_grids() {
        let f = build_measure_family((0.2, 0.2), 1).unwrap();
        assert_eq!(f.sigmas(), vec![0.2]);
        let f = build_measure_family((0.1f64, 0.3), 3).unwrap();
        let s = f.sigmas();
        assert_eq!(s.len(), 3);
        assert!((s[0] - 0.1).abs() < 1e-15 && (s[1] - 0.2).abs() < 1e-15 && s[2] == 0.3);
        assert_eq!(build_measure_family((0.1, 0.3), 2).unwrap().sigmas(), vec![0.1, 0.3]);
        assert!(build_measure_family((0.0, 0.3), 2).is_err());
        assert!(build_measure_family((0.3, 0.1), 2).is_err());
        assert!(build_measure_family((0.1, 0.3), 0).is_err());
    }

    #[test]
    fn injected_zero_noise_gives_flat_paths() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let spec = MeasureSpec::driftless(1e-3);
        let b = simulate_with_increments(&g, &spec, &ConstantVolatility, 1.0, Array2::zeros((3, 10)))
            .unwrap();
        assert!(b.x.iter().all(|&v| v == 1.0));
        assert!(b.a_hat.iter().all(|&a| a > 0.0));
        assert!(estimate_quadratic_variation(&b).iter().all(|&q| q == 0.0));
    }

    #[test]
    fn small_vol_paths_track_scaled_brownian_motion() {
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let eps = 1e-2;
        let b = simulate_paths(&g, &MeasureSpec::driftless(eps), &ConstantVolatility, 1.0, 4, 3).unwrap();
        for i in 0..4 {
            let w: f64 = b.dw.row(i).sum();
            assert!((b.x[[i, 20]] - (1.0 + eps * w)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_positive_volatility() {
        let g = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let dynamics = FnDynamics::driftless(|_, _, _| 0.0);
        let err = simulate_paths(&g, &MeasureSpec::driftless(0.2), &dynamics, 1.0, 2, 1).unwrap_err();
        assert!(matches!(err, Error::NonPositiveVolatility { path: 0, step: 0, .. }));
        let dynamics = FnDynamics::driftless(|_, _, _| f64::NAN);
        let err = simulate_paths(&g, &MeasureSpec::driftless(0.2), &dynamics, 1.0, 2, 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn arithmetic_brownian_moments() {
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let b = simulate_paths(&g, &MeasureSpec::driftless(0.2), &ConstantVolatility, 1.0, 20_000, 7)
            .unwrap();
        let xt: Vec<f64> = b.x.column(20).to_vec();
        let (m, se) = mean_and_se(&xt);
        assert!((m - 1.0).abs() < 3.0 * se, "mean {m} se {se}");
        // variance of the sample variance of a normal: 2 s^4 / (n - 1)
        let var: f64 = xt.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xt.len() - 1) as f64;
        let var_se = (2.0 * 0.04f64.powi(2) / (xt.len() - 1) as f64).sqrt();
        assert!((var - 0.04).abs() < 3.0 * var_se, "var {var}");
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let spec = MeasureSpec::driftless(0.3);
        let a = simulate_paths(&g, &spec, &ConstantVolatility, 1.0, 9000, 11).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_paths(&g, &spec, &ConstantVolatility, 1.0, 9000, 11).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn realized_variance_matches_model() {
        let g = TimeGrid::new(0.0f64, 1.0, 10_000).unwrap();
        let b = simulate_paths(&g, &MeasureSpec::driftless(0.2), &ConstantVolatility, 1.0, 1, 5).unwrap();
        let qv = estimate_quadratic_variation(&b);
        let avg = qv.mean().unwrap();
        assert!((avg - 0.04).abs() < 0.05 * 0.04, "avg {avg}");

        let dynamics = FnDynamics::driftless(|t: f64, _, _| if t < 0.5 { 0.1 } else { 0.3 });
        let b = simulate_paths(&g, &MeasureSpec::driftless(0.2), &dynamics, 1.0, 1, 5).unwrap();
        let qv = estimate_quadratic_variation(&b);
        let first = qv.slice(ndarray::s![0, ..5000]).mean().unwrap();
        let second = qv.slice(ndarray::s![0, 5000..]).mean().unwrap();
        assert!((first - 0.01).abs() < 0.1 * 0.01, "first {first}");
        assert!((second - 0.09).abs() < 0.1 * 0.09, "second {second}");
    }

    #[test]
    fn halving_dt_strong_error_shrinks() {
        // Constant sigma: Euler is exact, so compare against the same Brownian
        // path on the coarse grid.
        let fine = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let coarse = TimeGrid::new(0.0, 1.0, 32).unwrap();
        let dyn_ = FnDynamics::driftless(|_, x: f64, _| 0.2 * (1.0 + 0.5 * x.sin()));
        let bf = simulate_paths(&fine, &MeasureSpec::driftless(0.2), &dyn_, 1.0, 2000, 3).unwrap();
        let dwc = Array2::from_shape_fn((2000, 32), |(i, k)| bf.dw[[i, 2 * k]] + bf.dw[[i, 2 * k + 1]]);
        let bc = simulate_with_increments(&coarse, &MeasureSpec::driftless(0.2), &dyn_, 1.0, dwc).unwrap();
        let err: f64 = (0..2000)
            .map(|i| (bf.x[[i, 64]] - bc.x[[i, 32]]).abs())
            .sum::<f64>()
            / 2000.0;
        // O(sqrt(dt)) bound with a generous constant
        assert!(err < (1.0f64 / 32.0).sqrt(), "strong error {err}");
    }
}
