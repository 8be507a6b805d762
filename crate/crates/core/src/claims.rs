//! Terminal claims paid at `T ∧ tau`, split into the pre-default payoff
//! `xi_b` (paid at `T` if no default) and the at-default process `xi_a`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sde_sim::TimeGrid;

type MarkovFn<S> = Arc<dyn Fn(S, S) -> S + Send + Sync>;
type RunningFn<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

/// Monotone utility applied on top of the claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Utility {
    #[default]
    Identity,
    /// `Phi(x) = -exp(-x)`.
    ExpNeg,
}

impl Utility {
    pub fn apply<S: Scalar>(self, v: S) -> S {
        match self {
            Utility::Identity => v,
            Utility::ExpNeg => -(-v).exp(),
        }
    }
}

/// The canonical claim forms that admit a constructive decomposition.
#[derive(Clone)]
pub enum ClaimSpec<S> {
    /// `xi = 1_{tau > T}`.
    Survival,
    /// `xi = g(T ∧ tau, X_{T ∧ tau})`.
    TerminalG(MarkovFn<S>),
    /// `xi = (X_{T ∧ tau} - K)^+`.
    Call { strike: S },
    /// `xi = int_0^{T ∧ tau} h(X_s) ds` (path dependent).
    StoppedRunning(RunningFn<S>),
    /// Separately specified `xi_b = G(T, X_T)` and `xi_a_t = g(t, X_t)`.
    Split {
        terminal: MarkovFn<S>,
        at_default: MarkovFn<S>,
    },
}

impl<S: Scalar> ClaimSpec<S> {
    pub fn terminal_g(g: impl Fn(S, S) -> S + Send + Sync + 'static) -> Self {
        ClaimSpec::TerminalG(Arc::new(g))
    }

    /// `g(x) = scale * x^power`.
    pub fn power(scale: S, power: i32) -> Self {
        ClaimSpec::TerminalG(Arc::new(move |_, x: S| scale * x.powi(power)))
    }

    pub fn split(
        terminal: impl Fn(S, S) -> S + Send + Sync + 'static,
        at_default: impl Fn(S, S) -> S + Send + Sync + 'static,
    ) -> Self {
        ClaimSpec::Split {
            terminal: Arc::new(terminal),
            at_default: Arc::new(at_default),
        }
    }

    pub fn stopped_running(h: impl Fn(S) -> S + Send + Sync + 'static) -> Self {
        ClaimSpec::StoppedRunning(Arc::new(h))
    }
}

impl<S> fmt::Debug for ClaimSpec<S>
where
    S: fmt::Debug,
{
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClaimSpec::Survival => f.write_str("Survival"),
            ClaimSpec::TerminalG(_) => f.write_str("TerminalG(<fn>)"),
            ClaimSpec::Call { strike } => f.debug_struct("Call").field("strike", strike).finish(),
            ClaimSpec::StoppedRunning(_) => f.write_str("StoppedRunning(<fn>)"),
            ClaimSpec::Split { .. } => f.write_str("Split(<fn>, <fn>)"),
        }
    }
}

#[derive(Clone)]
enum Form<S> {
    Markov {
        terminal: MarkovFn<S>,
        at_default: MarkovFn<S>,
    },
    Running(RunningFn<S>),
}

/// A claim with its `(xi_b, xi_a)` decomposition and utility.
#[derive(Clone)]
pub struct Claim<S> {
    form: Form<S>,
    utility: Utility,
}

impl<S: Scalar> fmt::Debug for Claim<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let form = match self.form {
            Form::Markov { .. } => "markov",
            Form::Running(_) => "running",
        };
        f.debug_struct("Claim")
            .field("form", &form)
            .field("utility", &self.utility)
            .finish()
    }
}

/// Builds the `(xi_b, xi_a)` pair for a canonical claim form.
pub fn decompose_claim<S: Scalar>(spec: &ClaimSpec<S>, utility: Utility) -> Result<Claim<S>> {
    let form = match spec {
        ClaimSpec::Survival => Form::Markov {
            terminal: Arc::new(|_, _| S::one()),
            at_default: Arc::new(|_, _| S::zero()),
        },
        ClaimSpec::TerminalG(g) => Form::Markov {
            terminal: g.clone(),
            at_default: g.clone(),
        },
        ClaimSpec::Split {
            terminal,
            at_default,
        } => Form::Markov {
            terminal: terminal.clone(),
            at_default: at_default.clone(),
        },
        ClaimSpec::Call { strike } => {
            if !strike.is_finite() {
                return Err(Error::UnsupportedClaim(format!("call strike {strike} is not finite")));
            }
            let k = *strike;
            let g: MarkovFn<S> = Arc::new(move |_, x: S| (x - k).max(S::zero()));
            Form::Markov {
                terminal: g.clone(),
                at_default: g,
            }
        }
        ClaimSpec::StoppedRunning(h) => Form::Running(h.clone()),
    };
    Ok(Claim { form, utility })
}

impl<S: Scalar> Claim<S> {
    pub fn utility(&self) -> Utility {
        self.utility
    }

    /// Markov claims have `xi_b = G(X_T)` and `xi_a_t = g(t, X_t)`.
    pub fn is_markov(&self) -> bool {
        !matches!(self.form, Form::Running(_))
    }

    /// Raw pre-default payoff from the full path on `grid`.
    pub fn xi_b(&self, grid: &TimeGrid<S>, path: &[S]) -> S {
        match &self.form {
            Form::Markov { terminal, .. } => terminal(grid.horizon(), path[grid.n_steps()]),
            Form::Running(h) => running_integral(h.as_ref(), grid, path, grid.horizon()),
        }
    }

    /// Raw at-default payoff at time `t`; reads the path only up to `t`.
    pub fn xi_a(&self, grid: &TimeGrid<S>, t: S, path: &[S]) -> S {
        match &self.form {
            Form::Markov { at_default, .. } => at_default(t, path[grid.floor_index(t)]),
            Form::Running(h) => running_integral(h.as_ref(), grid, path, t),
        }
    }

    /// `Phi(xi_b)` as a function of the terminal state. `None` for
    /// path-dependent claims.
    pub fn terminal_fn(&self, horizon: S, x: S) -> Option<S> {
        let raw = match &self.form {
            Form::Markov { terminal, .. } => terminal(horizon, x),
            Form::Running(_) => return None,
        };
        Some(self.utility.apply(raw))
    }

    /// `Phi(xi_a_t)` as a function of `(t, X_t)`. `None` for path-dependent
    /// claims.
    pub fn default_fn(&self, t: S, x: S) -> Option<S> {
        let raw = match &self.form {
            Form::Markov { at_default, .. } => at_default(t, x),
            Form::Running(_) => return None,
        };
        Some(self.utility.apply(raw))
    }

    /// `Phi(xi_b)` along a path.
    pub fn terminal_value(&self, grid: &TimeGrid<S>, path: &[S]) -> S {
        self.utility.apply(self.xi_b(grid, path))
    }

    /// `Phi(xi_a_t)` along a path.
    pub fn default_value(&self, grid: &TimeGrid<S>, t: S, path: &[S]) -> S {
        self.utility.apply(self.xi_a(grid, t, path))
    }

    /// `Phi(xi_b) 1_{T < tau} + Phi(xi_a_tau) 1_{tau <= T}`.
    pub fn evaluate(&self, grid: &TimeGrid<S>, path: &[S], tau: S) -> S {
        if tau > grid.horizon() {
            self.terminal_value(grid, path)
        } else {
            self.default_value(grid, tau, path)
        }
    }
}

/// Free-function form of [`Claim::evaluate`].
pub fn evaluate_claim<S: Scalar>(claim: &Claim<S>, grid: &TimeGrid<S>, path: &[S], tau: S) -> S {
    claim.evaluate(grid, path, tau)
}

/// Left-endpoint integral of `h(X)` over `[t0, t]`.
fn running_integral<S: Scalar>(h: &(dyn Fn(S) -> S + Send + Sync), grid: &TimeGrid<S>, path: &[S], t: S) -> S {
    let mut acc = S::zero();
    for (k, &x) in path.iter().enumerate().take(grid.n_steps()) {
        let left = grid.time(k);
        if left >= t {
            break;
        }
        acc += h(x) * (grid.time(k + 1).min(t) - left);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> TimeGrid<f64> {
        TimeGrid::new(0.0, 1.0, 10).unwrap()
    }

    #[test]
    fn survival_split() {
        let g = grid();
        let c = decompose_claim(&ClaimSpec::Survival, Utility::Identity).unwrap();
        let path = vec![1.0; 11];
        assert_eq!(c.xi_b(&g, &path), 1.0);
        assert_eq!(c.xi_a(&g, 0.4, &path), 0.0);
        assert_eq!(c.evaluate(&g, &path, 2.0), 1.0);
        assert_eq!(c.evaluate(&g, &path, 0.4), 0.0);
    }

    #[test]
    fn square_and_call_split() {
        let g = grid();
        let sq = decompose_claim(&ClaimSpec::power(1.0, 2), Utility::Identity).unwrap();
        let path: Vec<f64> = (0..=10).map(|k| 1.0 + 0.1 * k as f64).collect();
        assert!((sq.xi_b(&g, &path) - 4.0).abs() < 1e-12);
        assert!((sq.xi_a(&g, 0.3, &path) - 1.69).abs() < 1e-12);
        let ones = vec![1.0; 11];
        assert_eq!(sq.evaluate(&g, &ones, 0.5), 1.0);

        let call = decompose_claim(&ClaimSpec::Call { strike: 1.0 }, Utility::Identity).unwrap();
        let mut p = vec![1.0; 11];
        p[3] = 1.2;
        assert!((call.evaluate(&g, &p, 0.3) - 0.2).abs() < 1e-12);
        assert!((call.xi_b(&g, &path) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn running_claim_is_predictable() {
        let g = grid();
        let c = decompose_claim(&ClaimSpec::stopped_running(|x: f64| x), Utility::Identity).unwrap();
        assert!(!c.is_markov());
        let mut path = vec![1.0; 11];
        let before = c.xi_a(&g, 0.5, &path);
        for v in path.iter_mut().skip(6) {
            *v = 100.0;
        }
        assert_eq!(before, c.xi_a(&g, 0.5, &path));
        assert!((before - 0.5).abs() < 1e-12);
        assert!(c.terminal_fn(1.0, 1.0).is_none());
    }

    #[test]
    fn utility_applied_after_split() {
        let g = grid();
        let c = decompose_claim(&ClaimSpec::power(1.0, 1), Utility::ExpNeg).unwrap();
        let path = vec![0.5; 11];
        assert!((c.evaluate(&g, &path, 5.0) + (-0.5f64).exp()).abs() < 1e-15);
        assert!((c.default_fn(0.2, 0.5).unwrap() + (-0.5f64).exp()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn decomposition_matches_direct_payoff(
            steps in proptest::collection::vec(-0.2f64..0.2, 10),
            tau in 0.0f64..2.0,
            strike in 0.5f64..1.5,
        ) {
            let g = grid();
            let mut path = vec![1.0];
            for s in steps { let last = *path.last().unwrap(); path.push(last + s); }
            let call = decompose_claim(&ClaimSpec::Call { strike }, Utility::Identity).unwrap();
            let stop = if tau > 1.0 { 1.0 } else { tau };
            let direct = (path[g.floor_index(stop)] - strike).max(0.0);
            prop_assert_eq!(call.evaluate(&g, &path, tau), direct);
        }

        #[test]
        fn monotone_transport(shift in 0.0f64..1.0, x in -3.0f64..3.0, t in 0.0f64..1.0) {
            let lo = decompose_claim(
                &ClaimSpec::split(|_, x: f64| x * x, |_, x: f64| x), Utility::Identity).unwrap();
            let hi = decompose_claim(
                &ClaimSpec::split(move |_, x: f64| x * x + shift, |_, x: f64| x), Utility::Identity).unwrap();
            prop_assert_eq!(hi.default_fn(t, x), lo.default_fn(t, x));
            prop_assert!(hi.terminal_fn(1.0, x).unwrap() >= lo.terminal_fn(1.0, x).unwrap());
        }
    }
}
