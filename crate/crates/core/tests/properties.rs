use proptest::prelude::*;

use erratic2bsde::bsde_solver::{solve_brownian_bsde, BsdeOptions, Driver};
use erratic2bsde::claims::{decompose_claim, ClaimSpec, Utility};
use erratic2bsde::default_model::IntensityModel;
use erratic2bsde::erratic_control::{
    full_hamiltonian_opt, hamiltonian_inf_sup, hamiltonian_sup_inf, uniform_grid, ControlSpec, HamiltonianPoint,
};
use erratic2bsde::oracles::{tree_value, TreeOracle};
use erratic2bsde::pde_solver::{solve_pde, variance_grid, PdeGrid};
use erratic2bsde::regression::PolyFit;
use erratic2bsde::sde_sim::{build_measure_family, simulate_family, simulate_paths, ConstantVolatility, MeasureSpec, TimeGrid};
use erratic2bsde::second_order::{solve_auxiliary_2bsde, SecondOrderOptions};
use erratic2bsde::Mode;

fn grid(n: usize) -> TimeGrid<f64> {
    TimeGrid::new(0.0, 1.0, n).unwrap()
}

fn point(z: f64, sigma2: f64) -> HamiltonianPoint<f64> {
    HamiltonianPoint {
        t: 0.0,
        x: 0.0,
        y: 0.0,
        z,
        u: 0.0,
        lambda: 0.0,
        sigma2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hazard_is_monotone(
        rates in proptest::collection::vec(0.0f64..3.0, 3),
        b1 in 0.1f64..0.5,
        gap in 0.05f64..0.4,
        t1 in 0.0f64..1.0,
        dt in 0.0f64..1.0,
    ) {
        let g = grid(40);
        let model = IntensityModel::piecewise(vec![b1, b1 + gap], rates, 3.0).unwrap();
        let t2 = (t1 + dt).min(1.0);
        let (h1, h2) = (
            model.cumulative_hazard(&g, None, t1).unwrap(),
            model.cumulative_hazard(&g, None, t2).unwrap(),
        );
        prop_assert!(h1 <= h2);
        let (s1, s2) = (
            model.survival_probability(&g, None, t1).unwrap(),
            model.survival_probability(&g, None, t2).unwrap(),
        );
        prop_assert!(s1 >= s2);
    }

    #[test]
    fn realized_variance_stays_in_band(lo in 0.05f64..0.3, width in 0.0f64..0.3, n in 1usize..5, seed in any::<u64>()) {
        let band = (lo, lo + width);
        let family = build_measure_family(band, n).unwrap();
        let bundles = simulate_family(&grid(8), &family, &ConstantVolatility, 1.0, 50, seed).unwrap();
        for b in &bundles {
            for &a in b.a_hat.iter() {
                prop_assert!(a >= band.0 * band.0 * (1.0 - 1e-12) && a <= band.1 * band.1 * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn fit_recovers_cubic(c in proptest::collection::vec(-2.0f64..2.0, 4), x in -1.0f64..1.0) {
        let xs: Vec<f64> = (0..40).map(|i| -1.5 + 3.0 * i as f64 / 39.0).collect();
        let f = |x: f64| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x;
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let (fit, _) = PolyFit::fit(&xs, &ys, 3);
        prop_assert!((fit.eval(x) - f(x)).abs() < 1e-8);
        prop_assert!((fit.derivative(x) - (c[1] + 2.0 * c[2] * x + 3.0 * c[3] * x * x)).abs() < 1e-7);
        prop_assert!((fit.second_derivative(x) - (2.0 * c[2] + 6.0 * c[3] * x)).abs() < 1e-6);
    }

    #[test]
    fn isaacs_lower_never_exceeds_upper(
        a_costs in proptest::collection::vec(-1.0f64..1.0, 4),
        b_costs in proptest::collection::vec(-1.0f64..1.0, 3),
        cross in -1.0f64..1.0,
        z in -2.0f64..2.0,
    ) {
        let spec = ControlSpec::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 1.0, 2.0], |_, _, _| 0.2)
            .unwrap()
            .with_drift(3.0 * cross.abs(), move |_, _, a, b| cross * a * b)
            .with_cost(move |_, _, a, b| a_costs[a as usize] + b_costs[b as usize]);
        let p = point(z, 0.04);
        let upper = hamiltonian_inf_sup(&spec, &p).unwrap().value;
        let lower = hamiltonian_sup_inf(&spec, &p).unwrap().value;
        prop_assert!(lower <= upper + 1e-12);
    }

    #[test]
    fn argmax_invariant_under_common_scaling(z in -1.5f64..1.5, scale in 0.1f64..10.0) {
        let a_grid = uniform_grid(-1.0, 1.0, 201);
        let base = ControlSpec::new(a_grid.clone(), vec![0.2], |_, _, b| b)
            .unwrap()
            .with_drift(1.0, |_, _, a, _| a)
            .with_cost(|_, _, a, _| a * a);
        let scaled = ControlSpec::new(a_grid, vec![0.2], |_, _, b| b)
            .unwrap()
            .with_drift(scale, move |_, _, a, _| scale * a)
            .with_cost(move |_, _, a, _| scale * a * a);
        let p = point(z, 0.04);
        let a0 = full_hamiltonian_opt(&base, &p, 0.0, Mode::Sup).a;
        let a1 = full_hamiltonian_opt(&scaled, &p, 0.0, Mode::Sup).a;
        prop_assert_eq!(a0, a1);
        prop_assert!((a0 - (z / 2.0).clamp(-1.0, 1.0)).abs() <= 0.005 + 1e-12);
    }

    #[test]
    fn tree_sup_dominates_inf(k in 0.5f64..1.5, w in 0.0f64..2.0) {
        let payoff = move |x: f64| (x - k).max(0.0) + w * (k - x).max(0.0);
        let tree = |mode| tree_value(
            &TreeOracle { n_levels: 60, band: (0.1, 0.3), x0: 1.0, horizon: 1.0, payoff: &payoff },
            mode,
        );
        prop_assert!(tree(Mode::Sup) >= tree(Mode::Inf) - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bsde_terminal_is_exact(scale in 0.1f64..2.0, power in 1i32..4, seed in any::<u64>()) {
        let b = simulate_paths(&grid(10), &MeasureSpec::driftless(0.2), &ConstantVolatility, 1.0, 300, seed).unwrap();
        let claim = decompose_claim(&ClaimSpec::power(scale, power), Utility::Identity).unwrap();
        let sol = solve_brownian_bsde(&b, &claim, &Driver::linear(0.1, false, 0.2), &IntensityModel::zero(), BsdeOptions::default()).unwrap();
        for i in 0..300 {
            prop_assert_eq!(sol.y[[i, 10]], scale * b.x[[i, 10]].powi(power));
        }
    }

    #[test]
    fn second_order_k_is_nondecreasing_and_dominated(
        lo in 0.05f64..0.2,
        width in 0.05f64..0.3,
        convex in any::<bool>(),
        sup in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let family = build_measure_family((lo, lo + width), 3).unwrap();
        let bundles = simulate_family(&grid(8), &family, &ConstantVolatility, 1.0, 4000, seed).unwrap();
        let sign = if convex { 1.0 } else { -1.0 };
        let claim = decompose_claim(&ClaimSpec::power(sign, 2), Utility::Identity).unwrap();
        let mode = if sup { Mode::Sup } else { Mode::Inf };
        let sol = solve_auxiliary_2bsde(
            &family, &bundles, &ConstantVolatility, &claim, &Driver::zero(), &IntensityModel::zero(),
            mode, SecondOrderOptions::default(),
        ).unwrap();
        prop_assert_eq!(sol.k_monotonicity_defect(), 0.0);
        // regression noise scales with the payoff range over the pooled nodes
        let scale = bundles.iter().flat_map(|b| b.x.column(8).to_vec()).fold(0.0f64, |m, x| m.max(x * x));
        prop_assert!(sol.dominance_violation <= 1e-2 * scale, "{} vs scale {scale}", sol.dominance_violation);
        for &k in &sol.k_terminal_means() {
            prop_assert!(k >= 0.0);
        }
    }

    #[test]
    fn pde_is_monotone_and_terminal_exact(bump in 0.0f64..0.5, lambda in 0.0f64..1.5) {
        let a_grid = variance_grid((0.1, 0.3), 5).unwrap();
        let pg = PdeGrid::centered(1.0, 6.0, 61, 0.0, 1.0, 0.09).unwrap();
        let intensity = IntensityModel::constant(lambda, 10.0).unwrap();
        let driver = Driver::linear(0.0, true, 0.0);
        let lo = decompose_claim(&ClaimSpec::terminal_g(|_, x: f64| (x - 1.0).max(0.0)), Utility::Identity).unwrap();
        let hi = decompose_claim(
            &ClaimSpec::terminal_g(move |_, x: f64| (x - 1.0).max(0.0) + bump * (-x * x).exp()),
            Utility::Identity,
        ).unwrap();
        let v_lo = solve_pde(&pg, &lo, &driver, &a_grid, &intensity, Mode::Sup).unwrap();
        let v_hi = solve_pde(&pg, &hi, &driver, &a_grid, &intensity, Mode::Sup).unwrap();
        for (a, b) in v_hi.v.iter().zip(v_lo.v.iter()) {
            prop_assert!(a >= b);
        }
        let n = pg.time.n_steps();
        for (j, x) in pg.xs().into_iter().enumerate() {
            prop_assert_eq!(v_lo.v[[n, j]], (x - 1.0).max(0.0));
        }
    }
}

#[test]
fn single_and_double_precision_agree() {
    let run = |n_paths| {
        let g32 = TimeGrid::<f32>::new(0.0, 1.0, 10).unwrap();
        let fam32 = build_measure_family((0.1f32, 0.3), 3).unwrap();
        let b32 = simulate_family(&g32, &fam32, &ConstantVolatility, 1.0f32, n_paths, 3).unwrap();
        let c32 = decompose_claim(&ClaimSpec::power(1.0f32, 2), Utility::Identity).unwrap();
        let s32 = solve_auxiliary_2bsde(
            &fam32, &b32, &ConstantVolatility, &c32, &Driver::zero(), &IntensityModel::zero(),
            Mode::Sup, SecondOrderOptions::default(),
        )
        .unwrap();

        let fam64 = build_measure_family((0.1f64, 0.3), 3).unwrap();
        let b64 = simulate_family(&grid(10), &fam64, &ConstantVolatility, 1.0f64, n_paths, 3).unwrap();
        let c64 = decompose_claim(&ClaimSpec::power(1.0f64, 2), Utility::Identity).unwrap();
        let s64 = solve_auxiliary_2bsde(
            &fam64, &b64, &ConstantVolatility, &c64, &Driver::zero(), &IntensityModel::zero(),
            Mode::Sup, SecondOrderOptions::default(),
        )
        .unwrap();
        (s32.y0 as f64, s64.y0)
    };
    let (v32, v64) = run(4000);
    assert!((v32 - v64).abs() < 5e-3, "{v32} vs {v64}");
    assert!((v64 - 1.09).abs() < 0.03);
}
