use fbsindy::control::{gains_from_poles, synthesize, ControllerSpec, GainSource, ReferenceSignal};
use fbsindy::dynamics::{chain_integrator, simulate_closed_loop, vdp_system, ControlAffineSystem};
use fbsindy::lie::relative_degree;
use num_complex::Complex64;

fn controller(sys: &ControlAffineSystem, source: GainSource) -> ControllerSpec {
    let chain = relative_degree(sys, 1e-8, sys.n_states()).unwrap();
    synthesize(&chain, &source).unwrap()
}

fn real_poles(p: &[f64]) -> GainSource {
    GainSource::Poles(p.iter().map(|&re| Complex64::new(re, 0.0)).collect())
}

#[test]
fn real_poles_give_two_exponential_envelope() {
    let sys = vdp_system(1.0, 1.0, 1.0);
    let ctrl = controller(&sys, real_poles(&[-2.0, -6.0]));
    assert_eq!(ctrl.gains, vec![12.0, 8.0]);
    let d = simulate_closed_loop(&sys, &ctrl, &ReferenceSignal::Zero, &[2.0, 0.0], 0.01, 500).unwrap();
    // y'' + 8 y' + 12 y = 0 with y(0) = 2, y'(0) = 0
    for (t, y) in d.times().iter().zip(d.output()) {
        let exact = 3.0 * (-2.0 * t).exp() - (-6.0 * t).exp();
        assert!((y - exact).abs() < 1e-6, "t = {t}: {y} vs {exact}");
    }
}

#[test]
fn complex_poles_give_damped_oscillation() {
    let sys = vdp_system(1.0, 1.0, 1.0);
    let poles = vec![Complex64::new(-1.0, 2.0), Complex64::new(-1.0, -2.0)];
    let ctrl = controller(&sys, GainSource::Poles(poles));
    assert_eq!(ctrl.gains, vec![5.0, 2.0]);
    let d = simulate_closed_loop(&sys, &ctrl, &ReferenceSignal::Zero, &[2.0, 0.0], 0.01, 500).unwrap();
    for (t, y) in d.times().iter().zip(d.output()) {
        let exact = (-t).exp() * (2.0 * (2.0 * t).cos() + (2.0 * t).sin());
        assert!((y - exact).abs() < 1e-6, "t = {t}: {y} vs {exact}");
    }
}

#[test]
fn constant_reference_is_reached() {
    let sys = vdp_system(1.0, 1.0, 1.0);
    let ctrl = controller(&sys, GainSource::Gains(vec![5.0, 4.0]));
    let d =
        simulate_closed_loop(&sys, &ctrl, &ReferenceSignal::Constant { value: 0.5 }, &[-1.0, 1.0], 0.01, 1500).unwrap();
    let last = d.len() - 1;
    assert!((d.output()[last] - 0.5).abs() < 1e-6);
    assert!(d.states()[(last, 1)].abs() < 1e-6);
}

#[test]
fn unstable_pole_still_simulates_and_diverges_from_reference() {
    let sys = vdp_system(1.0, 1.0, 1.0);
    let ctrl = controller(&sys, real_poles(&[1.0, -3.0]));
    assert_eq!(ctrl.gains, vec![-3.0, 2.0]);
    let d = simulate_closed_loop(&sys, &ctrl, &ReferenceSignal::Zero, &[0.1, 0.0], 0.01, 200).unwrap();
    // y = 0.075 e^t + 0.025 e^{-3t}
    let y_end = *d.output().last().unwrap();
    let exact = 0.075 * 2f64.exp() + 0.025 * (-6f64).exp();
    assert!((y_end - exact).abs() < 1e-6, "{y_end} vs {exact}");
}

#[test]
fn chain_integrator_tracks_a_sine() {
    let sys = chain_integrator(3);
    let ctrl = controller(&sys, real_poles(&[-1.0, -2.0, -3.0]));
    assert_eq!(
        ctrl.gains,
        gains_from_poles(&[Complex64::new(-1.0, 0.0), Complex64::new(-2.0, 0.0), Complex64::new(-3.0, 0.0)]).unwrap()
    );
    assert_eq!(ctrl.gains, vec![6.0, 11.0, 6.0]);
    let d = simulate_closed_loop(&sys, &ctrl, &ReferenceSignal::sine(), &[1.0, 0.0, 0.0], 0.01, 2000).unwrap();
    for (t, y) in d.times().iter().zip(d.output()).filter(|(t, _)| **t >= 12.0) {
        assert!((y - t.sin()).abs() < 1e-4, "t = {t}");
    }
}
