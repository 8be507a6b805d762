//! Exogenous default time: intensity, cumulative hazard, survival curve and
//! inverse-hazard sampling of `tau`.
//!
//! The intensity never depends on the measure, so every quantity here is
//! shared by all members of a measure family.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sde_sim::{PathBundle, TimeGrid};

/// Stream tag keeping default draws apart from the Brownian streams.
const DEFAULT_STREAM_TAG: u64 = 0xD5 << 56;
const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityKind {
    Constant,
    DeterministicPiecewise,
    StateFunctional,
}

type StateRate<S> = Arc<dyn Fn(S, S) -> S + Send + Sync>;

#[derive(Clone)]
enum Rate<S> {
    Constant(S),
    Piecewise { breakpoints: Vec<S>, rates: Vec<S> },
    State(StateRate<S>),
}

/// Hazard rate `lambda(t, x)` bounded by a declared cap.
#[derive(Clone)]
pub struct IntensityModel<S> {
    rate: Rate<S>,
    cap: S,
}

impl<S: Scalar> fmt::Debug for IntensityModel<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("IntensityModel");
        d.field("kind", &self.kind()).field("cap", &self.cap);
        match &self.rate {
            Rate::Constant(r) => d.field("rate", r),
            Rate::Piecewise { breakpoints, rates } => {
                d.field("breakpoints", breakpoints).field("rates", rates)
            }
            Rate::State(_) => d.field("rate", &"<fn>"),
        };
        d.finish()
    }
}

fn check_cap<S: Scalar>(cap: S) -> Result<()> {
    if !(cap >= S::zero()) || !cap.is_finite() {
        return Err(Error::InvalidParameter {
            name: "intensity.cap",
            reason: format!("must be finite and nonnegative, got {cap}"),
        });
    }
    Ok(())
}

fn check_rate<S: Scalar>(rate: S, cap: S) -> Result<()> {
    if !(rate >= S::zero()) || rate > cap {
        return Err(Error::InvalidParameter {
            name: "intensity.rate",
            reason: format!("{rate} outside [0, {cap}]"),
        });
    }
    Ok(())
}

impl<S: Scalar> IntensityModel<S> {
    pub fn constant(rate: S, cap: S) -> Result<Self> {
        check_cap(cap)?;
        check_rate(rate, cap)?;
        Ok(Self {
            rate: Rate::Constant(rate),
            cap,
        })
    }

    /// Zero intensity: default never happens.
    pub fn zero() -> Self {
        Self {
            rate: Rate::Constant(S::zero()),
            cap: S::zero(),
        }
    }

    /// `rates[j]` applies on `[breakpoints[j-1], breakpoints[j])`, with
    /// `rates[0]` before the first breakpoint and the last rate after the
    /// final one.
    pub fn piecewise(breakpoints: Vec<S>, rates: Vec<S>, cap: S) -> Result<Self> {
        check_cap(cap)?;
        if rates.len() != breakpoints.len() + 1 {
            return Err(Error::InvalidParameter {
                name: "intensity.breakpoints",
                reason: format!(
                    "{} breakpoints need {} rates, got {}",
                    breakpoints.len(),
                    breakpoints.len() + 1,
                    rates.len()
                ),
            });
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter {
                name: "intensity.breakpoints",
                reason: "must be strictly increasing".into(),
            });
        }
        for &r in &rates {
            check_rate(r, cap)?;
        }
        Ok(Self {
            rate: Rate::Piecewise { breakpoints, rates },
            cap,
        })
    }

    /// State-dependent intensity `lambda(t, x)`; values are checked against
    /// the cap when evaluated.
    pub fn state_functional(f: impl Fn(S, S) -> S + Send + Sync + 'static, cap: S) -> Result<Self> {
        check_cap(cap)?;
        Ok(Self {
            rate: Rate::State(Arc::new(f)),
            cap,
        })
    }

    pub fn kind(&self) -> IntensityKind {
        match self.rate {
            Rate::Constant(_) => IntensityKind::Constant,
            Rate::Piecewise { .. } => IntensityKind::DeterministicPiecewise,
            Rate::State(_) => IntensityKind::StateFunctional,
        }
    }

    pub fn cap(&self) -> S {
        self.cap
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self.rate, Rate::State(_))
    }

    /// `true` when the intensity is identically zero.
    pub fn is_zero(&self) -> bool {
        match &self.rate {
            Rate::Constant(r) => *r == S::zero(),
            Rate::Piecewise { rates, .. } => rates.iter().all(|&r| r == S::zero()),
            Rate::State(_) => self.cap == S::zero(),
        }
    }

    /// `lambda(t, x)`. The state is required only for state-functional models.
    pub fn rate(&self, t: S, x: Option<S>) -> Result<S> {
        let value = match &self.rate {
            Rate::Constant(r) => return Ok(*r),
            Rate::Piecewise { breakpoints, rates } => {
                return Ok(rates[breakpoints.partition_point(|&b| b <= t)]);
            }
            Rate::State(f) => f(t, x.ok_or(Error::MissingPath)?),
        };
        if !(value >= S::zero()) || value > self.cap {
            return Err(Error::IntensityOutOfRange {
                t: t.to_f64_lossy(),
                value: value.to_f64_lossy(),
                cap: self.cap.to_f64_lossy(),
            });
        }
        Ok(value)
    }

    fn node_rate(&self, grid: &TimeGrid<S>, path: Option<&[S]>, k: usize) -> Result<S> {
        match (&self.rate, path) {
            (Rate::State(_), None) => Err(Error::MissingPath),
            (_, p) => self.rate(grid.time(k), p.map(|p| p[k])),
        }
    }

    fn check_time(&self, grid: &TimeGrid<S>, t: S) -> Result<()> {
        if t < grid.t0() || t > grid.horizon() || t.is_nan() {
            return Err(Error::TimeOutOfRange {
                t: t.to_f64_lossy(),
                t0: grid.t0().to_f64_lossy(),
                horizon: grid.horizon().to_f64_lossy(),
            });
        }
        Ok(())
    }

    /// `Lambda_t` by left-endpoint quadrature on `grid`.
    pub fn cumulative_hazard(&self, grid: &TimeGrid<S>, path: Option<&[S]>, t: S) -> Result<S> {
        self.check_time(grid, t)?;
        if matches!(self.rate, Rate::State(_)) && path.is_none() {
            return Err(Error::MissingPath);
        }
        let mut acc = S::zero();
        for k in 0..grid.n_steps() {
            let left = grid.time(k);
            if left >= t {
                break;
            }
            let right = grid.time(k + 1).min(t);
            acc += self.node_rate(grid, path, k)? * (right - left);
        }
        Ok(acc)
    }

    /// `exp(-Lambda_t)`.
    pub fn survival_probability(&self, grid: &TimeGrid<S>, path: Option<&[S]>, t: S) -> Result<S> {
        Ok((-self.cumulative_hazard(grid, path, t)?).exp())
    }

    /// `Lambda` at every grid node.
    pub fn hazard_nodes(&self, grid: &TimeGrid<S>, path: Option<&[S]>) -> Result<Vec<S>> {
        let dt = grid.dt();
        let mut out = Vec::with_capacity(grid.n_steps() + 1);
        let mut acc = S::zero();
        out.push(acc);
        for k in 0..grid.n_steps() {
            acc += self.node_rate(grid, path, k)? * dt;
            out.push(acc);
        }
        Ok(out)
    }

    /// Inverse-hazard draw: `tau = inf { t : Lambda_t >= E }`, `E ~ Exp(1)`.
    pub fn sample_default<R: Rng + ?Sized>(
        &self,
        grid: &TimeGrid<S>,
        path: Option<&[S]>,
        rng: &mut R,
    ) -> Result<DefaultSample<S>> {
        let e: f64 = rng.sample(Exp1);
        self.invert_hazard(grid, path, S::lit(e))
    }

    fn invert_hazard(&self, grid: &TimeGrid<S>, path: Option<&[S]>, e: S) -> Result<DefaultSample<S>> {
        let horizon = grid.horizon();
        let dt = grid.dt();
        let mut acc = S::zero();
        for k in 0..grid.n_steps() {
            let rate = self.node_rate(grid, path, k)?;
            let next = acc + rate * dt;
            if next >= e && rate > S::zero() {
                let tau = grid.time(k) + (e - acc) / rate;
                // tau > t0 because E > 0 almost surely
                let tau = tau.max(grid.time(k)).min(horizon);
                return Ok(DefaultSample::at(tau.max(S::min_positive_value()), horizon));
            }
            acc = next;
        }
        Ok(DefaultSample::no_default(horizon))
    }

    /// `n` independent default times for a deterministic intensity.
    pub fn sample_defaults(&self, grid: &TimeGrid<S>, n: usize, seed: u64) -> Result<Vec<DefaultSample<S>>> {
        if !self.is_deterministic() {
            return Err(Error::MissingPath);
        }
        let lambda = self.hazard_nodes(grid, None)?;
        let blocks: Vec<usize> = (0..n.div_ceil(BLOCK)).collect();
        let draws: Vec<Vec<DefaultSample<S>>> = blocks
            .par_iter()
            .map(|&b| {
                let mut rng = block_rng(seed, b);
                let len = BLOCK.min(n - b * BLOCK);
                (0..len)
                    .map(|_| {
                        let e: f64 = rng.sample(Exp1);
                        invert_nodes(grid, &lambda, S::lit(e))
                    })
                    .collect()
            })
            .collect();
        Ok(draws.into_iter().flatten().collect())
    }

    /// One default time per path of `bundle`.
    pub fn sample_defaults_for(&self, bundle: &PathBundle<S>, seed: u64) -> Result<Vec<DefaultSample<S>>> {
        let grid = bundle.grid;
        if self.is_deterministic() {
            return self.sample_defaults(&grid, bundle.n_paths(), seed ^ bundle.measure_index as u64);
        }
        let n = bundle.n_paths();
        let blocks: Vec<usize> = (0..n.div_ceil(BLOCK)).collect();
        let draws: Result<Vec<Vec<DefaultSample<S>>>> = blocks
            .par_iter()
            .map(|&b| {
                let mut rng = block_rng(seed ^ bundle.measure_index as u64, b);
                let start = b * BLOCK;
                let end = (start + BLOCK).min(n);
                (start..end)
                    .map(|i| {
                        let row = bundle.x.row(i);
                        let path = row.as_slice().expect("standard layout");
                        self.sample_default(&grid, Some(path), &mut rng)
                    })
                    .collect()
            })
            .collect();
        Ok(draws?.into_iter().flatten().collect())
    }
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DEFAULT_STREAM_TAG | block as u64);
    rng
}

fn invert_nodes<S: Scalar>(grid: &TimeGrid<S>, lambda: &[S], e: S) -> DefaultSample<S> {
    let horizon = grid.horizon();
    if lambda[lambda.len() - 1] < e {
        return DefaultSample::no_default(horizon);
    }
    let k = lambda.partition_point(|&l| l < e).max(1) - 1;
    let rate = (lambda[k + 1] - lambda[k]) / grid.dt();
    let tau = grid.time(k) + (e - lambda[k]) / rate;
    DefaultSample::at(tau.max(S::min_positive_value()).min(horizon), horizon)
}

/// A sampled default time. `tau` is `T + 1` when no default occurs on
/// `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefaultSample<S> {
    pub tau: S,
    pub occurred_before: bool,
}

impl<S: Scalar> DefaultSample<S> {
    pub fn at(tau: S, horizon: S) -> Self {
        Self {
            tau,
            occurred_before: tau <= horizon,
        }
    }

    pub fn no_default(horizon: S) -> Self {
        Self {
            tau: horizon + S::one(),
            occurred_before: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid<f64> {
        TimeGrid::new(0.0, 1.0, 100).unwrap()
    }

    #[test]
    fn cumulative_hazard_examples() {
        let g = grid();
        let zero = IntensityModel::constant(0.0, 1.0).unwrap();
        assert_eq!(zero.cumulative_hazard(&g, None, 1.0).unwrap(), 0.0);
        let one = IntensityModel::constant(1.0, 1.0).unwrap();
        assert!((one.cumulative_hazard(&g, None, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let pw = IntensityModel::piecewise(vec![0.5], vec![2.0, 0.0], 2.0).unwrap();
        assert!((pw.cumulative_hazard(&g, None, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn survival_examples() {
        let g = grid();
        let one = IntensityModel::constant(1.0, 1.0).unwrap();
        assert!((one.survival_probability(&g, None, 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(one.survival_probability(&g, None, 0.0).unwrap(), 1.0);
        let zero = IntensityModel::<f64>::zero();
        assert_eq!(zero.survival_probability(&g, None, 0.7).unwrap(), 1.0);
        let two = IntensityModel::constant(2.0, 2.0).unwrap();
        assert!((two.survival_probability(&g, None, 0.5).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let g = grid();
        let one = IntensityModel::constant(1.0, 1.0).unwrap();
        assert!(matches!(
            one.cumulative_hazard(&g, None, 1.5),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(one.cumulative_hazard(&g, None, -0.1).is_err());
        let state = IntensityModel::state_functional(|_, x: f64| x.abs(), 5.0).unwrap();
        assert_eq!(state.cumulative_hazard(&g, None, 0.5), Err(Error::MissingPath));
        assert!(IntensityModel::constant(2.0, 1.0).is_err());
        assert!(IntensityModel::constant(-0.1, 1.0).is_err());
        let path = vec![10.0; 101];
        assert!(matches!(
            state.cumulative_hazard(&g, Some(&path), 0.5),
            Err(Error::IntensityOutOfRange { .. })
        ));
    }

    #[test]
    fn state_functional_uses_path() {
        let g = grid();
        let state = IntensityModel::state_functional(|_, x: f64| x * x, 4.0).unwrap();
        let path: Vec<f64> = (0..=100).map(|k| if k < 50 { 1.0 } else { 0.0 }).collect();
        assert!((state.cumulative_hazard(&g, Some(&path), 1.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_intensity_never_defaults() {
        let g = grid();
        let s = IntensityModel::<f64>::zero().sample_defaults(&g, 1000, 1).unwrap();
        assert!(s.iter().all(|d| !d.occurred_before && d.tau > 1.0));
    }

    #[test]
    fn capped_intensity_leaves_survivors() {
        let g = grid();
        let m = IntensityModel::constant(3.0, 3.0).unwrap();
        let s = m.sample_defaults(&g, 10_000, 2).unwrap();
        let survivors = s.iter().filter(|d| !d.occurred_before).count();
        assert!(survivors > 0);
        assert!(s.iter().all(|d| d.tau > 0.0 && d.occurred_before == (d.tau <= 1.0)));
    }

    #[test]
    fn single_draw_matches_batch_inversion() {
        let g = grid();
        let m = IntensityModel::piecewise(vec![0.3], vec![0.5, 2.0], 2.0).unwrap();
        let lambda = m.hazard_nodes(&g, None).unwrap();
        for e in [0.01, 0.1, 0.15, 0.7, 1.5, 2.0] {
            let a = m.invert_hazard(&g, None, e).unwrap();
            let b = invert_nodes(&g, &lambda, e);
            assert!((a.tau - b.tau).abs() < 1e-12, "{e}: {a:?} {b:?}");
        }
    }
}
