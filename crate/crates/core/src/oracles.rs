//! Reference values computed without the solver code: a trinomial lattice
//! for the uncertain-volatility value and a few closed forms.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::second_order::Mode;

/// Recombining trinomial lattice with spacing `h = σ_max √dt`.
pub struct TreeOracle<'a> {
    pub n_levels: usize,
    pub band: (f64, f64),
    pub x0: f64,
    pub horizon: f64,
    pub payoff: &'a dyn Fn(f64) -> f64,
}

impl fmt::Debug for TreeOracle<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TreeOracle")
            .field("n_levels", &self.n_levels)
            .field("band", &self.band)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

/// Backward induction, optimizing each node over `{σ_min, σ_max}`.
pub fn tree_value(oracle: &TreeOracle<'_>, mode: Mode) -> f64 {
    let n = oracle.n_levels.max(1);
    let dt = oracle.horizon / n as f64;
    let (s_lo, s_hi) = oracle.band;
    let h = s_hi * dt.sqrt();
    if h == 0.0 {
        return (oracle.payoff)(oracle.x0);
    }
    let p_lo = s_lo * s_lo * dt / (2.0 * h * h);
    let p_hi = 0.5;
    let width = 2 * n + 1;
    let mut values: Vec<f64> = (0..width)
        .map(|j| (oracle.payoff)(oracle.x0 + (j as f64 - n as f64) * h))
        .collect();
    for level in (0..n).rev() {
        // nodes j - level .. j + level of the level-`level` slice
        let mut next = vec![0.0; 2 * level + 1];
        for (i, slot) in next.iter_mut().enumerate() {
            let j = i + (n - level);
            let (down, mid, up) = (values[j - 1], values[j], values[j + 1]);
            let e = |p: f64| p * up + p * down + (1.0 - 2.0 * p) * mid;
            let (a, b) = (e(p_lo), e(p_hi));
            *slot = match mode {
                Mode::Sup => a.max(b),
                Mode::Inf => a.min(b),
            };
        }
        // re-center the slice inside a full-width buffer
        let mut full = vec![0.0; width];
        full[(n - level)..(n + level + 1)].copy_from_slice(&next);
        values = full;
    }
    values[n]
}

/// Closed-form scenario families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeFamily {
    /// `e^{-λT}`.
    Survival,
    /// `e^{-rT}`.
    Discount,
    /// `x0² + σ² T`.
    BsbQuadratic,
    /// `x0² + σ² (1 - e^{-λT}) / λ`.
    JumpQuadratic,
    /// Terminal `p x²`, drift control `a` with running cost `a²`:
    /// `p x0² / (1 - pT) - σ² ln(1 - pT)`.
    LqControl,
}

impl FromStr for OdeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "survival" => Ok(Self::Survival),
            "discount" => Ok(Self::Discount),
            "bsb_quadratic" => Ok(Self::BsbQuadratic),
            "jump_quadratic" => Ok(Self::JumpQuadratic),
            "lq_control" => Ok(Self::LqControl),
            other => Err(Error::InvalidParameter {
                name: "family",
                reason: format!("unknown closed-form family `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OdeParams {
    pub r: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub x0: f64,
    pub horizon: f64,
    /// Terminal weight `p` of [`OdeFamily::LqControl`].
    pub weight: f64,
}

pub fn ode_oracle(family: OdeFamily, p: &OdeParams) -> Result<f64, Error> {
    let t = p.horizon;
    let s2 = p.sigma * p.sigma;
    Ok(match family {
        OdeFamily::Survival => (-p.lambda * t).exp(),
        OdeFamily::Discount => (-p.r * t).exp(),
        OdeFamily::BsbQuadratic => p.x0 * p.x0 + s2 * t,
        OdeFamily::JumpQuadratic => {
            let phi = if p.lambda == 0.0 {
                s2 * t
            } else {
                s2 * (1.0 - (-p.lambda * t).exp()) / p.lambda
            };
            p.x0 * p.x0 + phi
        }
        OdeFamily::LqControl => {
            let pt = p.weight * t;
            if pt >= 1.0 {
                return Err(Error::InvalidParameter {
                    name: "weight",
                    reason: format!("p T = {pt} makes the value infinite"),
                });
            }
            p.weight * p.x0 * p.x0 / (1.0 - pt) - s2 * (1.0 - pt).ln()
        }
    })
}

/// Convenience wrapper taking the family by name.
pub fn ode_oracle_named(family: &str, params: &OdeParams) -> Result<f64, Error> {
    ode_oracle(family.parse()?, params)
}
