//! Scenario configuration: `[section]` headers, `key = value` lines and `#`
//! comments. Every key has a default; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityKind {
    Constant,
    Piecewise,
    State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimKind {
    Survival,
    TerminalG,
    Call,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilityKind {
    Identity,
    ExpNeg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Sup,
    Inf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub sde_x0: f64,
    pub sde_horizon: f64,
    pub sde_sigma_band: (f64, f64),
    pub sde_n_measures: usize,
    pub sde_n_paths: usize,
    pub sde_n_steps: usize,
    pub sde_seed: Option<u64>,

    pub intensity_kind: IntensityKind,
    pub intensity_rate: Vec<f64>,
    pub intensity_breakpoints: Vec<f64>,
    pub intensity_cap: f64,

    pub claim_kind: ClaimKind,
    pub claim_strike: f64,
    pub claim_utility: UtilityKind,
    pub claim_g_power: i32,
    pub claim_g_scale: f64,

    pub bsde_basis_degree: usize,
    pub bsde_se_batches: usize,

    pub driver_discount: f64,
    pub driver_jump: bool,
    pub driver_constant: f64,

    pub pde_x_min: Option<f64>,
    pub pde_x_max: Option<f64>,
    pub pde_n_x: usize,
    pub pde_a_grid_n: usize,

    pub control_a_min: f64,
    pub control_a_max: f64,
    pub control_a_n: usize,
    pub control_cost_scale: f64,
    pub control_drift_scale: f64,
    pub control_discount: f64,
    pub control_n_eval_paths: usize,
    pub control_n_x_nodes: usize,
    pub control_isaacs_probes: usize,

    pub run_mode: RunMode,
    pub run_seed: u64,
    pub run_output_dir: String,
    pub run_t_mid: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            sde_x0: 1.0,
            sde_horizon: 1.0,
            sde_sigma_band: (0.1, 0.3),
            sde_n_measures: 5,
            sde_n_paths: 20_000,
            sde_n_steps: 20,
            sde_seed: None,
            intensity_kind: IntensityKind::Constant,
            intensity_rate: vec![0.0],
            intensity_breakpoints: Vec::new(),
            intensity_cap: 10.0,
            claim_kind: ClaimKind::TerminalG,
            claim_strike: 1.0,
            claim_utility: UtilityKind::Identity,
            claim_g_power: 2,
            claim_g_scale: 1.0,
            bsde_basis_degree: 3,
            bsde_se_batches: 8,
            driver_discount: 0.0,
            driver_jump: false,
            driver_constant: 0.0,
            pde_x_min: None,
            pde_x_max: None,
            pde_n_x: 400,
            pde_a_grid_n: 9,
            control_a_min: -1.0,
            control_a_max: 1.0,
            control_a_n: 81,
            control_cost_scale: 1.0,
            control_drift_scale: 1.0,
            control_discount: 0.0,
            control_n_eval_paths: 100_000,
            control_n_x_nodes: 41,
            control_isaacs_probes: 100,
            run_mode: RunMode::Sup,
            run_seed: 42,
            run_output_dir: "out".to_string(),
            run_t_mid: 0.5,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse::<T>()
        .map_err(|_| invalid(key, format!("cannot parse `{v}`")))
}

fn finite(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(invalid(key, format!("`{v}` is not a finite number")))
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| finite(key, s.trim())).collect()
}

fn optional(key: &str, v: &str) -> Result<Option<f64>, ConfigError> {
    if v == "auto" || v.is_empty() {
        Ok(None)
    } else {
        finite(key, v).map(Some)
    }
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got `{v}`"))),
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl Scenario {
    /// Reads a config file and applies `overrides` (`section.key=value`).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut sc = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?;
            sc.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                message: format!("override `{o}` is not key=value"),
            })?;
            sc.set(k.trim(), v.trim())?;
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut sc = Self::default();
        sc.apply_text(text)?;
        sc.validate()?;
        Ok(sc)
    }

    fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: i + 1,
                    message: format!("unterminated section header `{line}`"),
                })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let sec = section.as_deref().ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: "key outside of any [section]".to_string(),
            })?;
            self.set(&format!("{sec}.{}", k.trim()), v.trim())?;
        }
        Ok(())
    }

    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "sde.x0" => self.sde_x0 = finite(key, v)?,
            "sde.horizon" => self.sde_horizon = finite(key, v)?,
            "sde.sigma_band" => {
                let xs = list(key, v)?;
                if xs.len() != 2 {
                    return Err(invalid(key, "expected `lo, hi`"));
                }
                self.sde_sigma_band = (xs[0], xs[1]);
            }
            "sde.n_measures" => self.sde_n_measures = num(key, v)?,
            "sde.n_paths" => self.sde_n_paths = num(key, v)?,
            "sde.n_steps" => self.sde_n_steps = num(key, v)?,
            "sde.seed" => self.sde_seed = if v == "auto" { None } else { Some(num(key, v)?) },
            "intensity.kind" => {
                self.intensity_kind = match v {
                    "constant" => IntensityKind::Constant,
                    "piecewise" => IntensityKind::Piecewise,
                    "state" => IntensityKind::State,
                    _ => return Err(invalid(key, format!("unknown kind `{v}`"))),
                }
            }
            "intensity.rate" => self.intensity_rate = list(key, v)?,
            "intensity.breakpoints" => self.intensity_breakpoints = list(key, v)?,
            "intensity.cap" => self.intensity_cap = finite(key, v)?,
            "claim.kind" => {
                self.claim_kind = match v {
                    "survival" => ClaimKind::Survival,
                    "terminal_g" => ClaimKind::TerminalG,
                    "call" => ClaimKind::Call,
                    _ => return Err(invalid(key, format!("unknown kind `{v}`"))),
                }
            }
            "claim.strike" => self.claim_strike = finite(key, v)?,
            "claim.utility" => {
                self.claim_utility = match v {
                    "identity" => UtilityKind::Identity,
                    "exp_neg" => UtilityKind::ExpNeg,
                    _ => return Err(invalid(key, format!("unknown utility `{v}`"))),
                }
            }
            "claim.g_power" => self.claim_g_power = num(key, v)?,
            "claim.g_scale" => self.claim_g_scale = finite(key, v)?,
            "bsde.basis_degree" => self.bsde_basis_degree = num(key, v)?,
            "bsde.scheme" => {
                if v != "explicit" {
                    return Err(invalid(key, format!("only `explicit` is available, got `{v}`")));
                }
            }
            "bsde.se_batches" => self.bsde_se_batches = num(key, v)?,
            "driver.discount" => self.driver_discount = finite(key, v)?,
            "driver.jump" => self.driver_jump = boolean(key, v)?,
            "driver.constant" => self.driver_constant = finite(key, v)?,
            "pde.x_min" => self.pde_x_min = optional(key, v)?,
            "pde.x_max" => self.pde_x_max = optional(key, v)?,
            "pde.n_x" => self.pde_n_x = num(key, v)?,
            "pde.a_grid_n" => self.pde_a_grid_n = num(key, v)?,
            "control.a_min" => self.control_a_min = finite(key, v)?,
            "control.a_max" => self.control_a_max = finite(key, v)?,
            "control.a_n" => self.control_a_n = num(key, v)?,
            "control.cost_scale" => self.control_cost_scale = finite(key, v)?,
            "control.drift_scale" => self.control_drift_scale = finite(key, v)?,
            "control.discount" => self.control_discount = finite(key, v)?,
            "control.n_eval_paths" => self.control_n_eval_paths = num(key, v)?,
            "control.n_x_nodes" => self.control_n_x_nodes = num(key, v)?,
            "control.isaacs_probes" => self.control_isaacs_probes = num(key, v)?,
            "run.mode" => {
                self.run_mode = match v {
                    "sup" => RunMode::Sup,
                    "inf" => RunMode::Inf,
                    _ => return Err(invalid(key, format!("expected sup or inf, got `{v}`"))),
                }
            }
            "run.seed" => self.run_seed = num(key, v)?,
            "run.output_dir" => self.run_output_dir = v.to_string(),
            "run.t_mid" => self.run_t_mid = finite(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (lo, hi) = self.sde_sigma_band;
        if !(lo > 0.0) {
            return Err(invalid("sde.sigma_band", format!("lower volatility must be positive, got {lo}")));
        }
        if hi < lo {
            return Err(invalid("sde.sigma_band", format!("upper volatility {hi} is below {lo}")));
        }
        if !(self.sde_horizon > 0.0) {
            return Err(invalid("sde.horizon", "must be positive"));
        }
        for (key, n) in [
            ("sde.n_measures", self.sde_n_measures),
            ("sde.n_paths", self.sde_n_paths),
            ("sde.n_steps", self.sde_n_steps),
            ("control.a_n", self.control_a_n),
            ("control.n_eval_paths", self.control_n_eval_paths),
            ("control.n_x_nodes", self.control_n_x_nodes),
            ("pde.a_grid_n", self.pde_a_grid_n),
        ] {
            if n == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if self.pde_n_x < 3 {
            return Err(invalid("pde.n_x", "need at least 3 spatial nodes"));
        }
        if let (Some(a), Some(b)) = (self.pde_x_min, self.pde_x_max) {
            if b <= a {
                return Err(invalid("pde.x_max", format!("{b} is not above pde.x_min = {a}")));
            }
        }
        if !(self.intensity_cap >= 0.0) {
            return Err(invalid("intensity.cap", "must be nonnegative"));
        }
        match self.intensity_kind {
            IntensityKind::Constant | IntensityKind::State => {
                if self.intensity_rate.len() != 1 {
                    return Err(invalid("intensity.rate", "expected a single rate"));
                }
            }
            IntensityKind::Piecewise => {
                if self.intensity_rate.len() != self.intensity_breakpoints.len() + 1 {
                    return Err(invalid(
                        "intensity.rate",
                        "piecewise intensity needs one more rate than breakpoints",
                    ));
                }
            }
        }
        if self.intensity_rate.iter().any(|&r| r < 0.0 || r > self.intensity_cap) {
            return Err(invalid("intensity.rate", "rates must lie in [0, intensity.cap]"));
        }
        if self.control_a_max < self.control_a_min {
            return Err(invalid("control.a_max", "below control.a_min"));
        }
        if !(self.run_t_mid > 0.0 && self.run_t_mid < self.sde_horizon) {
            return Err(invalid("run.t_mid", "must lie strictly inside (0, sde.horizon)"));
        }
        Ok(())
    }

    /// Seed for path simulation.
    pub fn sim_seed(&self) -> u64 {
        self.sde_seed.unwrap_or(self.run_seed)
    }

    /// The resolved configuration in loadable form.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mode = match self.run_mode {
            RunMode::Sup => "sup",
            RunMode::Inf => "inf",
        };
        let ik = match self.intensity_kind {
            IntensityKind::Constant => "constant",
            IntensityKind::Piecewise => "piecewise",
            IntensityKind::State => "state",
        };
        let ck = match self.claim_kind {
            ClaimKind::Survival => "survival",
            ClaimKind::TerminalG => "terminal_g",
            ClaimKind::Call => "call",
        };
        let ut = match self.claim_utility {
            UtilityKind::Identity => "identity",
            UtilityKind::ExpNeg => "exp_neg",
        };
        let _ = write!(
            s,
            "[sde]\nx0 = {}\nhorizon = {}\nsigma_band = {}, {}\nn_measures = {}\nn_paths = {}\nn_steps = {}\nseed = {}\n\n",
            self.sde_x0,
            self.sde_horizon,
            self.sde_sigma_band.0,
            self.sde_sigma_band.1,
            self.sde_n_measures,
            self.sde_n_paths,
            self.sde_n_steps,
            self.sde_seed.map_or_else(|| "auto".to_string(), |v| v.to_string()),
        );
        let _ = write!(
            s,
            "[intensity]\nkind = {ik}\nrate = {}\nbreakpoints = {}\ncap = {}\n\n",
            join(&self.intensity_rate),
            join(&self.intensity_breakpoints),
            self.intensity_cap
        );
        let _ = write!(
            s,
            "[claim]\nkind = {ck}\nstrike = {}\nutility = {ut}\ng_power = {}\ng_scale = {}\n\n",
            self.claim_strike, self.claim_g_power, self.claim_g_scale
        );
        let _ = write!(
            s,
            "[bsde]\nbasis_degree = {}\nscheme = explicit\nse_batches = {}\n\n",
            self.bsde_basis_degree, self.bsde_se_batches
        );
        let _ = write!(
            s,
            "[driver]\ndiscount = {}\njump = {}\nconstant = {}\n\n",
            self.driver_discount, self.driver_jump, self.driver_constant
        );
        let _ = write!(
            s,
            "[pde]\nx_min = {}\nx_max = {}\nn_x = {}\na_grid_n = {}\n\n",
            opt(self.pde_x_min),
            opt(self.pde_x_max),
            self.pde_n_x,
            self.pde_a_grid_n
        );
        let _ = write!(
            s,
            "[control]\na_min = {}\na_max = {}\na_n = {}\ncost_scale = {}\ndrift_scale = {}\ndiscount = {}\nn_eval_paths = {}\nn_x_nodes = {}\nisaacs_probes = {}\n\n",
            self.control_a_min,
            self.control_a_max,
            self.control_a_n,
            self.control_cost_scale,
            self.control_drift_scale,
            self.control_discount,
            self.control_n_eval_paths,
            self.control_n_x_nodes,
            self.control_isaacs_probes
        );
        let _ = write!(
            s,
            "[run]\nmode = {mode}\nseed = {}\noutput_dir = {}\nt_mid = {}\n",
            self.run_seed, self.run_output_dir, self.run_t_mid
        );
        s
    }
}
