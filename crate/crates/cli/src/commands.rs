//! Pipelines behind each subcommand.

use std::fmt::Write as _;

use erratic2bsde::bsde_solver::{solve_brownian_bsde, solve_jump_bsde, BsdeOptions, Driver};
use erratic2bsde::claims::{decompose_claim, ClaimSpec, Utility};
use erratic2bsde::default_model::IntensityModel;
use erratic2bsde::erratic_control::{
    check_isaacs, default_probes, estimate_objective, solve_control_value, solve_robust_value, uniform_grid,
    ControlProblem, ControlSolution, ControlSpec,
};
use erratic2bsde::oracles::{ode_oracle, tree_value, OdeFamily, OdeParams, TreeOracle};
use erratic2bsde::pde_solver::{solve_pde, variance_grid, PdeGrid};
use erratic2bsde::sde_sim::{build_measure_family, simulate_family, simulate_paths, ConstantVolatility, MeasureSpec, TimeGrid};
use erratic2bsde::second_order::{
    assemble_erratic_solution, check_minimality, sample_family_defaults, solve_auxiliary_2bsde, SecondOrderOptions,
};
use erratic2bsde::{Claim64, Error, Mode};

use crate::config::{ClaimKind, IntensityKind, RunMode, Scenario, UtilityKind};
use crate::output::Csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    SolveBsde,
    Solve2bsde,
    SolvePde,
    Control,
    Robust,
    Verify { oracles: bool },
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveBsde => "solve-bsde",
            Command::Solve2bsde => "solve-2bsde",
            Command::SolvePde => "solve-pde",
            Command::Control => "control",
            Command::Robust => "robust",
            Command::Verify { .. } => "verify",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub csv: Csv,
    pub report: String,
    /// `Some(false)` when a verification check failed.
    pub verified: Option<bool>,
}

pub fn execute(cmd: Command, sc: &Scenario) -> Result<Outcome, Error> {
    match cmd {
        Command::Simulate => simulate(sc),
        Command::SolveBsde => solve_bsde(sc),
        Command::Solve2bsde => solve_2bsde(sc),
        Command::SolvePde => solve_pde_cmd(sc),
        Command::Control => control(sc, false),
        Command::Robust => control(sc, true),
        Command::Verify { oracles } => verify(sc, oracles),
    }
}

fn mode(sc: &Scenario) -> Mode {
    match sc.run_mode {
        RunMode::Sup => Mode::Sup,
        RunMode::Inf => Mode::Inf,
    }
}

fn time_grid(sc: &Scenario) -> Result<TimeGrid<f64>, Error> {
    TimeGrid::new(0.0, sc.sde_horizon, sc.sde_n_steps)
}

pub fn intensity(sc: &Scenario) -> Result<IntensityModel<f64>, Error> {
    let cap = sc.intensity_cap;
    match sc.intensity_kind {
        IntensityKind::Constant => IntensityModel::constant(sc.intensity_rate[0], cap),
        IntensityKind::Piecewise => {
            IntensityModel::piecewise(sc.intensity_breakpoints.clone(), sc.intensity_rate.clone(), cap)
        }
        IntensityKind::State => {
            let rate = sc.intensity_rate[0];
            IntensityModel::state_functional(move |_, x: f64| (rate * x.abs()).min(cap), cap)
        }
    }
}

pub fn claim(sc: &Scenario) -> Result<Claim64, Error> {
    let spec = match sc.claim_kind {
        ClaimKind::Survival => ClaimSpec::Survival,
        ClaimKind::TerminalG => ClaimSpec::power(sc.claim_g_scale, sc.claim_g_power),
        ClaimKind::Call => ClaimSpec::Call { strike: sc.claim_strike },
    };
    let utility = match sc.claim_utility {
        UtilityKind::Identity => Utility::Identity,
        UtilityKind::ExpNeg => Utility::ExpNeg,
    };
    decompose_claim(&spec, utility)
}

fn driver(sc: &Scenario) -> Driver<f64> {
    Driver::linear(sc.driver_discount, sc.driver_jump, sc.driver_constant)
}

fn mean_sd(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

fn simulate(sc: &Scenario) -> Result<Outcome, Error> {
    let grid = time_grid(sc)?;
    let family = build_measure_family(sc.sde_sigma_band, sc.sde_n_measures)?;
    let bundles = simulate_family(&grid, &family, &ConstantVolatility, sc.sde_x0, sc.sde_n_paths, sc.sim_seed())?;
    let mut csv = Csv::new((0..=grid.n_steps()).map(|k| format!("t_{k}")));
    let mut body = String::from("member,sigma,first_row,mean_x_T,sd_x_T\n");
    for (m, b) in bundles.iter().enumerate() {
        for row in b.x.rows() {
            csv.row(row.as_slice().expect("standard layout"));
        }
        let (mx, sx) = mean_sd(b.x.column(grid.n_steps()).iter().copied());
        let _ = writeln!(body, "{m},{},{},{mx},{sx}", b.spec.sigma_ctrl, m * b.n_paths() + 1);
    }
    Ok(Outcome {
        csv,
        report: body,
        verified: None,
    })
}

fn solve_bsde(sc: &Scenario) -> Result<Outcome, Error> {
    let grid = time_grid(sc)?;
    let sigma = sc.sde_sigma_band.1;
    let bundle = simulate_paths(
        &grid,
        &MeasureSpec::driftless(sigma),
        &ConstantVolatility,
        sc.sde_x0,
        sc.sde_n_paths,
        sc.sim_seed(),
    )?;
    let claim = claim(sc)?;
    let lambda = intensity(sc)?;
    let options = BsdeOptions {
        basis_degree: sc.bsde_basis_degree,
    };
    let sol = solve_brownian_bsde(&bundle, &claim, &driver(sc), &lambda, options)?;
    let defaults = lambda.sample_defaults_for(&bundle, sc.run_seed ^ 0xD3FA)?;
    let jump = solve_jump_bsde(&bundle, &sol, &claim, &defaults)?;

    let n = grid.n_steps();
    let mut csv = Csv::new(["t", "y_mean", "y_sd", "z_mean", "residual_rms"]);
    for k in 0..=n {
        let (ym, ys) = mean_sd(jump.y.column(k).iter().copied());
        let (z, r) = if k < n {
            (
                mean_sd(jump.z.column(k).iter().copied()).0.to_string(),
                sol.residual_rms[k].to_string(),
            )
        } else {
            (String::new(), String::new())
        };
        csv.text_row([grid.time(k).to_string(), ym.to_string(), ys.to_string(), z, r]);
    }
    let mut body = String::new();
    let _ = writeln!(body, "sigma = {sigma}");
    let _ = writeln!(body, "y0_before_default = {}", sol.y0);
    let _ = writeln!(body, "y0_se = {}", sol.y0_se);
    let _ = writeln!(body, "y0 = {}", jump.y0);
    let _ = writeln!(body, "degree_fallbacks = {}", sol.degree_fallbacks.len());
    let _ = writeln!(body, "residual_lag1_autocorrelation = {}", sol.residual_lag1_autocorrelation());
    Ok(Outcome {
        csv,
        report: body,
        verified: None,
    })
}

fn second_order_options(sc: &Scenario) -> SecondOrderOptions {
    SecondOrderOptions {
        basis_degree: sc.bsde_basis_degree,
        track_members: true,
        se_batches: sc.bsde_se_batches,
    }
}

fn solve_2bsde(sc: &Scenario) -> Result<Outcome, Error> {
    let grid = time_grid(sc)?;
    let family = build_measure_family(sc.sde_sigma_band, sc.sde_n_measures)?;
    let bundles = simulate_family(&grid, &family, &ConstantVolatility, sc.sde_x0, sc.sde_n_paths, sc.sim_seed())?;
    let claim = claim(sc)?;
    let lambda = intensity(sc)?;
    let aux = solve_auxiliary_2bsde(
        &family,
        &bundles,
        &ConstantVolatility,
        &claim,
        &driver(sc),
        &lambda,
        mode(sc),
        second_order_options(sc),
    )?;
    let sol = if lambda.is_zero() {
        aux
    } else {
        let defaults = sample_family_defaults(&lambda, &bundles, sc.run_seed ^ 0xD3FA)?;
        assemble_erratic_solution(&aux, &bundles, &claim, defaults)?
    };
    let min = check_minimality(&sol, None);

    let mut header = vec!["t".to_string(), "y_env_mean".into(), "u_mean".into(), "argopt_sigma".into()];
    header.extend(sol.sigmas.iter().map(|s| format!("k_{s}")));
    let mut csv = Csv::new(header);
    for k in 0..=grid.n_steps() {
        let mut row = vec![grid.time(k), sol.y_mean(k), sol.u_mean(k), sol.sigmas[sol.argopt(k)]];
        row.extend(sol.k_means_at(k));
        csv.row(&row);
    }
    let mut body = String::new();
    let _ = writeln!(body, "mode = {:?}", sol.mode);
    let _ = writeln!(body, "y0 = {}", sol.y0);
    let _ = writeln!(body, "y0_se = {}", sol.y0_se);
    for (m, (s, v)) in sol.sigmas.iter().zip(&sol.member_y0).enumerate() {
        let _ = writeln!(body, "member {m}: sigma = {s}, y0 = {v}, k_T = {}", min.k_terminal_means[m]);
    }
    let _ = writeln!(body, "dominance_violation = {}", sol.dominance_violation);
    let _ = writeln!(body, "clamp_mass = {}", sol.clamp_mass);
    let _ = writeln!(body, "k_monotonicity_defect = {}", sol.k_monotonicity_defect());
    let _ = writeln!(
        body,
        "minimality: {} (min k_T = {} at sigma = {}, tol = {})",
        pass_fail(min.pass),
        min.min_value,
        min.argmin_sigma,
        min.tol
    );
    Ok(Outcome {
        csv,
        report: body,
        verified: None,
    })
}

fn pde_grid(sc: &Scenario, a_max: f64) -> Result<PdeGrid<f64>, Error> {
    match (sc.pde_x_min, sc.pde_x_max) {
        (Some(lo), Some(hi)) => PdeGrid::with_cfl(lo, hi, sc.pde_n_x, 0.0, sc.sde_horizon, a_max),
        (lo, hi) => {
            let auto = PdeGrid::centered(sc.sde_x0, 6.0, sc.pde_n_x, 0.0, sc.sde_horizon, a_max)?;
            PdeGrid::with_cfl(
                lo.unwrap_or(auto.x_min),
                hi.unwrap_or(auto.x_max),
                sc.pde_n_x,
                0.0,
                sc.sde_horizon,
                a_max,
            )
        }
    }
}

fn solve_pde_cmd(sc: &Scenario) -> Result<Outcome, Error> {
    let a_grid = variance_grid(sc.sde_sigma_band, sc.pde_a_grid_n)?;
    let a_max = a_grid.iter().copied().fold(0.0, f64::max);
    let grid = pde_grid(sc, a_max)?;
    let sol = solve_pde(&grid, &claim(sc)?, &driver(sc), &a_grid, &intensity(sc)?, mode(sc))?;
    let xs = grid.xs();
    let mut header = vec!["t".to_string()];
    header.extend(xs.iter().map(|x| x.to_string()));
    let mut csv = Csv::new(header);
    for (k, row) in sol.v.rows().into_iter().enumerate() {
        let mut r = vec![grid.time.time(k)];
        r.extend(row.iter().copied());
        csv.row(&r);
    }
    let mut body = String::new();
    let _ = writeln!(body, "mode = {:?}", sol.mode);
    let _ = writeln!(body, "x_range = [{}, {}], n_x = {}", grid.x_min, grid.x_max, grid.n_x);
    let _ = writeln!(body, "n_t = {}, dt = {}, cfl_limit = {}", grid.time.n_steps(), grid.dt(), grid.cfl_limit(a_max));
    let _ = writeln!(body, "v0 = {}", sol.v0(sc.sde_x0));
    let _ = writeln!(body, "min_k_density = {}", sol.min_k_density());
    Ok(Outcome {
        csv,
        report: body,
        verified: None,
    })
}

pub fn control_spec(sc: &Scenario) -> Result<ControlSpec<f64>, Error> {
    let a_grid = uniform_grid(sc.control_a_min, sc.control_a_max, sc.control_a_n);
    let b_grid = build_measure_family(sc.sde_sigma_band, sc.sde_n_measures)?.sigmas();
    let a_bound = sc.control_a_min.abs().max(sc.control_a_max.abs());
    let (drift, cost, disc) = (sc.control_drift_scale, sc.control_cost_scale, sc.control_discount);
    Ok(ControlSpec::new(a_grid, b_grid, |_, _, b| b)?
        .with_drift(drift.abs() * a_bound, move |_, _, a, _| drift * a)
        .with_cost(move |_, _, a, _| cost * a * a)
        .with_discount(disc.abs(), move |_, _, _, _| disc))
}

fn control(sc: &Scenario, robust: bool) -> Result<Outcome, Error> {
    let spec = control_spec(sc)?;
    let claim = claim(sc)?;
    let lambda = intensity(sc)?;
    let grid = time_grid(sc)?;
    let problem = ControlProblem {
        x0: sc.sde_x0,
        grid,
        n_paths: sc.sde_n_paths,
        seed: sc.sim_seed(),
        options: second_order_options(sc),
        n_x_nodes: sc.control_n_x_nodes,
    };
    let sol: ControlSolution<f64> = if robust {
        let spread = 4.0 * sc.sde_sigma_band.1 * sc.sde_horizon.sqrt();
        let probes = default_probes(
            &spec,
            &grid,
            (sc.sde_x0 - spread, sc.sde_x0 + spread),
            sc.control_isaacs_probes,
            sc.run_seed ^ 0x15AAC5,
        );
        solve_robust_value(&spec, &claim, &lambda, &problem, &probes)?
    } else {
        solve_control_value(&spec, &claim, &lambda, &problem)?
    };
    let (j, j_se) = estimate_objective(
        &spec,
        &sol.field,
        &claim,
        &lambda,
        sc.sde_x0,
        sc.control_n_eval_paths,
        sc.run_seed ^ 0x0B1EC7,
    )?;

    let mut csv = Csv::new(["t", "x_node", "a_star", "b_star"]);
    for k in 0..grid.n_steps() {
        for (jx, &x) in sol.field.x_nodes.iter().enumerate() {
            csv.row(&[grid.time(k), x, sol.field.a[[k, jx]], sol.field.b[[k, jx]]]);
        }
    }
    let mut body = String::new();
    let _ = writeln!(body, "value = {}", sol.value);
    let _ = writeln!(body, "value_se = {}", sol.se);
    let _ = writeln!(body, "objective_at_extracted_controls = {j}");
    let _ = writeln!(body, "objective_se = {j_se}");
    let _ = writeln!(body, "k_at_optimum = {}", sol.k_at_optimum);
    let _ = writeln!(
        body,
        "minimality: {} (min k_T = {} at sigma = {})",
        pass_fail(sol.minimality.pass),
        sol.minimality.min_value,
        sol.minimality.argmin_sigma
    );
    if let Some(is) = &sol.isaacs {
        let _ = writeln!(
            body,
            "isaacs: {} (max gap {} over {} probes, tol {})",
            pass_fail(is.pass),
            is.max_gap,
            is.n_probes,
            is.tol
        );
    }
    Ok(Outcome {
        csv,
        report: body,
        verified: None,
    })
}

fn pass_fail(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

struct Check {
    name: &'static str,
    value: f64,
    expected: f64,
    tolerance: f64,
    pass: bool,
}

impl Check {
    fn abs(name: &'static str, value: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            name,
            value,
            expected,
            tolerance,
            pass: (value - expected).abs() <= tolerance,
        }
    }

    fn rel(name: &'static str, value: f64, expected: f64, rel: f64) -> Self {
        Self::abs(name, value, expected, rel * expected.abs())
    }
}

/// Golden scenarios with closed-form or lattice answers.
fn verify(sc: &Scenario, oracles: bool) -> Result<Outcome, Error> {
    let seed = sc.run_seed;
    let mut checks = Vec::new();
    let unit = TimeGrid::new(0.0, 1.0, 50)?;
    let lambda1 = IntensityModel::constant(1.0, 10.0)?;
    let survival_exact = ode_oracle(
        OdeFamily::Survival,
        &OdeParams {
            lambda: 1.0,
            horizon: 1.0,
            ..OdeParams::default()
        },
    )?;

    let p = lambda1.survival_probability(&unit, None, 1.0)?;
    checks.push(Check::abs("survival_probability", p, survival_exact, 1e-3));

    let n = 100_000;
    let samples = lambda1.sample_defaults(&unit, n, seed)?;
    let hit = samples.iter().filter(|d| d.occurred_before).count() as f64 / n as f64;
    let se = (hit * (1.0 - hit) / n as f64).sqrt();
    checks.push(Check::abs("default_frequency", hit, 1.0 - survival_exact, 3.0 * se));

    let survival = decompose_claim(&ClaimSpec::Survival, Utility::Identity)?;
    let fine = TimeGrid::new(0.0, 1.0, 500)?;
    let bond_paths = simulate_paths(&fine, &MeasureSpec::driftless(0.2), &ConstantVolatility, 1.0, 2000, seed)?;
    let bond = solve_brownian_bsde(
        &bond_paths,
        &survival,
        &Driver::linear(0.0, true, 0.0),
        &lambda1,
        BsdeOptions::default(),
    )?;
    checks.push(Check::abs("defaultable_bond", bond.y0, survival_exact, 1e-3));

    let quad = decompose_claim(&ClaimSpec::power(1.0, 2), Utility::Identity)?;
    let family = build_measure_family((0.1, 0.3), 5)?;
    let grid20 = TimeGrid::new(0.0, 1.0, 20)?;
    let bundles = simulate_family(&grid20, &family, &ConstantVolatility, 1.0, 20_000, seed)?;
    for (name, m, expected) in [("bsb_sup", Mode::Sup, 1.09), ("bsb_inf", Mode::Inf, 1.01)] {
        let sol = solve_auxiliary_2bsde(
            &family,
            &bundles,
            &ConstantVolatility,
            &quad,
            &Driver::zero(),
            &IntensityModel::zero(),
            m,
            SecondOrderOptions::default(),
        )?;
        checks.push(Check::rel(name, sol.y0, expected, 0.02));
    }

    let a_grid = variance_grid((0.1, 0.3), 9)?;
    let pgrid = PdeGrid::centered(1.0, 6.0, 400, 0.0, 1.0, 0.09)?;
    let pde = solve_pde(&pgrid, &quad, &Driver::linear(0.0, true, 0.0), &a_grid, &lambda1, Mode::Sup)?;
    let jump_exact = ode_oracle(
        OdeFamily::JumpQuadratic,
        &OdeParams {
            lambda: 1.0,
            sigma: 0.3,
            x0: 1.0,
            horizon: 1.0,
            ..OdeParams::default()
        },
    )?;
    checks.push(Check::abs("pde_jump_quadratic", pde.v0(1.0), jump_exact, 1e-2));

    let decoupled = ControlSpec::new(uniform_grid(-1.0, 1.0, 21), vec![0.1, 0.2, 0.3], |_, _, b| b)?
        .with_drift(1.0, |_, _, a, _| a)
        .with_cost(|_, _, a, _| a * a);
    let probes = default_probes(&decoupled, &grid20, (0.0, 2.0), 200, seed);
    let isaacs = check_isaacs(&decoupled, &probes)?;
    checks.push(Check::abs("isaacs_decoupled", isaacs.max_gap, 0.0, isaacs.tol));

    if oracles {
        let payoff = |x: f64| x * x;
        let tree = |n_levels: usize, m: Mode| {
            tree_value(
                &TreeOracle {
                    n_levels,
                    band: (0.1, 0.3),
                    x0: 1.0,
                    horizon: 1.0,
                    payoff: &payoff,
                },
                m,
            )
        };
        for (name, m, sigma) in [("tree_vs_ode_sup", Mode::Sup, 0.3), ("tree_vs_ode_inf", Mode::Inf, 0.1)] {
            let ode = ode_oracle(
                OdeFamily::BsbQuadratic,
                &OdeParams {
                    sigma,
                    x0: 1.0,
                    horizon: 1.0,
                    ..OdeParams::default()
                },
            )?;
            checks.push(Check::abs(name, tree(200, m), ode, 5e-3));
        }
        checks.push(Check::abs("ode_jump_quadratic", jump_exact, 1.0 + 0.09 * (1.0 - (-1.0f64).exp()), 1e-12));
        let call = |x: f64| (x - 1.0).max(0.0);
        let call_tree = |n_levels: usize| {
            tree_value(
                &TreeOracle {
                    n_levels,
                    band: (0.1, 0.3),
                    x0: 1.0,
                    horizon: 1.0,
                    payoff: &call,
                },
                Mode::Sup,
            )
        };
        let coarse = (call_tree(50) - call_tree(100)).abs();
        let fine = (call_tree(100) - call_tree(200)).abs();
        checks.push(Check {
            name: "tree_self_convergence",
            value: fine,
            expected: 0.0,
            tolerance: coarse,
            pass: fine <= coarse,
        });
    }

    let mut csv = Csv::new(["check", "value", "expected", "tolerance", "status"]);
    let mut body = String::new();
    for c in &checks {
        csv.text_row([
            c.name.to_string(),
            c.value.to_string(),
            c.expected.to_string(),
            c.tolerance.to_string(),
            pass_fail(c.pass).to_string(),
        ]);
        let _ = writeln!(
            body,
            "{} {}: value {} expected {} tolerance {}",
            pass_fail(c.pass),
            c.name,
            c.value,
            c.expected,
            c.tolerance
        );
    }
    let all = checks.iter().all(|c| c.pass);
    let _ = writeln!(body, "overall: {}", pass_fail(all));
    Ok(Outcome {
        csv,
        report: body,
        verified: Some(all),
    })
}
