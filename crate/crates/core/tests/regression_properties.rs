use fbsindy::dictionary::{Library, LibrarySpec};
use fbsindy::dynamics::{integrate, vdp_system, ControlAffineSystem, Excitation, InputSignal};
use fbsindy::regression::{
    build_constraint_m, build_stacked, identify, solve, sweep, Coefficients, Diagnostics, RegressionConfig,
    RegressionError, SparseModel,
};
use fbsindy::symexpr::Expression;
use fbsindy::Dataset;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn vdp_data() -> Dataset {
    integrate(&vdp_system(1.0, 1.0, 1.0), &[2.0, 0.0], &InputSignal::Open(Excitation::default()), 0.01, 99).unwrap()
}

/// Ten seconds of the same plant with derivatives replaced by finite
/// differences, so the regression sees truncation error.
fn vdp_data_estimated() -> Dataset {
    let d = integrate(&vdp_system(1.0, 1.0, 1.0), &[2.0, 0.0], &InputSignal::Open(Excitation::default()), 0.01, 999)
        .unwrap();
    let bare =
        Dataset::new(d.times().to_vec(), d.states().clone(), None, d.input().to_vec(), d.output().to_vec()).unwrap();
    bare.estimate_derivatives(false).unwrap()
}

fn true_vdp_coefficients(lib: &Library) -> Coefficients {
    let n = 2;
    let at =
        |entries: &[Expression], s: &str| entries.iter().position(|e| *e == Expression::parse(s, n).unwrap()).unwrap();
    let mut co = Coefficients::zeros(lib);
    co.xi_tilde[(at(&lib.theta_f_entries, "x2"), 0)] = 1.0;
    co.xi_tilde[(at(&lib.theta_f_entries, "x1"), 1)] = -1.0;
    co.xi_tilde[(at(&lib.theta_f_entries, "x2"), 1)] = 2.0;
    co.xi_tilde[(at(&lib.theta_f_entries, "x1^2*x2"), 1)] = -2.0;
    co.xi_hat[(at(&lib.theta_g_entries, "u"), 1)] = 1.0;
    co.zeta[at(&lib.phi_entries, "x1")] = 1.0;
    co
}

fn active(m: &SparseModel) -> usize {
    active_in(&m.diagnostics)
}

fn active_in(d: &Diagnostics) -> usize {
    d.active_xi_tilde + d.active_xi_hat + d.active_zeta
}

#[test]
fn stacked_system_blocks_and_true_residual() {
    let d = vdp_data();
    let set = Library::new(&LibrarySpec::default(), 2).unwrap().evaluate(&d).unwrap();
    let st = build_stacked(&set, &d).unwrap();
    assert_eq!(st.a.shape(), (300, 44));
    // off-diagonal blocks are exactly zero
    let col_blocks = [(0, 20), (20, 20), (40, 4)];
    for (rb, (c0, w)) in col_blocks.iter().enumerate() {
        for other in (0..3).filter(|&r| r != rb) {
            assert!(st.a.view((other * 100, *c0), (100, *w)).iter().all(|&v| v == 0.0));
        }
    }
    let eta = st.pack(&true_vdp_coefficients(&set.library));
    let res = (&st.a * eta - &st.z).amax();
    assert!(res <= 1e-8, "residual {res}");
}

#[test]
fn aggregated_m_is_sum_of_outer_products() {
    let d = vdp_data();
    let set = Library::new(&LibrarySpec::default(), 2).unwrap().evaluate(&d).unwrap();
    let cm = build_constraint_m(&set, &d);
    let mut brute = DMatrix::<f64>::zeros(cm.l.ncols(), cm.g.ncols());
    for i in 0..d.len() {
        for a in 0..cm.l.ncols() {
            for b in 0..cm.g.ncols() {
                brute[(a, b)] += cm.l[(i, a)] * cm.g[(i, b)];
            }
        }
    }
    let scale = brute.amax().max(1.0);
    assert!((&cm.aggregated - &brute).amax() <= 1e-12 * scale);
}

#[test]
fn true_vdp_model_satisfies_constraint() {
    let d = vdp_data();
    let set = Library::new(&LibrarySpec::default(), 2).unwrap().evaluate(&d).unwrap();
    let co = true_vdp_coefficients(&set.library);
    let gc = fbsindy::regression::build_general_constraint(&co, &set, &d, 2).unwrap();
    assert!(gc.max_residual(fbsindy::regression::ConstraintMode::PerSample) <= 1e-10);
}

#[test]
fn sparsity_is_monotone_in_lambda() {
    for d in [vdp_data(), vdp_data_estimated()] {
        let mut prev = usize::MAX;
        for lambda in [0.0, 1e-4, 1e-3, 0.01, 0.05, 0.2, 0.5, 1.0, 1.5] {
            let cfg = RegressionConfig { lambda, ..Default::default() };
            let size = match identify(&d, &LibrarySpec::default(), &cfg) {
                Ok(m) => active(&m),
                Err(RegressionError::Infeasible { model, .. })
                | Err(RegressionError::ConstraintViolation { model, .. }) => active(&model),
                Err(RegressionError::NonConvergence { diagnostics, .. }) => active_in(&diagnostics),
                Err(e) => panic!("lambda {lambda}: {e}"),
            };
            assert!(size <= prev, "lambda {lambda}: {size} active after {prev}");
            prev = size;
        }
    }
}

#[test]
fn returned_coefficients_respect_threshold() {
    for lambda in [0.01, 0.05, 0.1] {
        let d = vdp_data_estimated();
        let m = identify(&d, &LibrarySpec::default(), &RegressionConfig { lambda, ..Default::default() }).unwrap();
        let co = &m.coefficients;
        for v in co.xi_tilde.iter().chain(co.xi_hat.iter()).chain(co.zeta.iter()) {
            assert!(*v == 0.0 || v.abs() >= lambda, "{v} below {lambda}");
        }
    }
}

#[test]
fn one_more_sweep_is_a_fixed_point() {
    for d in [vdp_data(), vdp_data_estimated()] {
        let cfg = RegressionConfig::default();
        let set = Library::new(&LibrarySpec::default(), 2).unwrap().evaluate(&d).unwrap();
        let m = solve(&set, &d, &cfg).unwrap();
        let again = sweep(&m, &set, &d, &cfg).unwrap();
        let change = again.coefficients.max_change(&m.coefficients);
        assert!(change <= cfg.coef_tol, "sweep moved coefficients by {change:e}");
    }
}

#[test]
fn estimated_derivatives_are_reported() {
    let d = vdp_data();
    let bare =
        Dataset::new(d.times().to_vec(), d.states().clone(), None, d.input().to_vec(), d.output().to_vec()).unwrap();
    let m = identify(&bare, &LibrarySpec::default(), &RegressionConfig::default()).unwrap();
    assert!(m.diagnostics.derivatives_estimated);
    assert!(m.g[0].is_empty());
}

type Plant = (f64, Vec<(usize, usize, f64)>, Vec<(usize, f64)>);

/// Random two-state polynomial plant with `u` entering the second state and
/// `y = x1`. The first state always carries an `x2` term so the output is not
/// frozen.
fn random_plant() -> impl Strategy<Value = Plant> {
    let coef = || prop_oneof![-1.5..-0.5f64, 0.5..1.5f64];
    let drift_term = (0usize..2, 1usize..10, prop_oneof![-1.5..-0.3f64, 0.3..1.5f64]);
    let input_term = (0usize..3, coef());
    (coef(), prop::collection::vec(drift_term, 0..4), prop::collection::vec(input_term, 1..3))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn recovers_support_of_random_plants((link, drift, input) in random_plant()) {
        let n = 2;
        let lib = Library::new(&LibrarySpec::default(), n).unwrap();
        let mut truth = Coefficients::zeros(&lib);
        truth.xi_tilde[(2, 0)] = link;
        for (l, a, v) in drift {
            truth.xi_tilde[(a, l)] = v;
        }
        // input field on the second state only, from entries {1, x1, x2}
        for (j, v) in input {
            truth.xi_hat[(j, 1)] = v;
        }
        truth.zeta[1] = 1.0;
        let f = truth.drift(&lib);
        let g = truth.input_field(&lib);
        let plant = ControlAffineSystem::new(f, g, Expression::var(n, 0)).unwrap();
        let data = integrate(&plant, &[0.5, -0.3], &InputSignal::Open(Excitation::default()), 0.01, 99);
        prop_assume!(data.is_ok());
        let d = data.unwrap();
        prop_assume!(d.states().amax() < 10.0);
        let m = identify(&d, &LibrarySpec::default(), &RegressionConfig::default()).unwrap();
        let support = |c: &Coefficients| -> Vec<bool> {
            c.xi_tilde.iter().chain(c.xi_hat.iter()).chain(c.zeta.iter()).map(|&v| v != 0.0).collect()
        };
        prop_assert_eq!(support(&m.coefficients), support(&truth));
        prop_assert!(m.coefficients.max_change(&truth) < 1e-6);
    }
}
