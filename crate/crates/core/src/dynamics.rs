//! Control-affine plants, excitation signals and fixed-step RK4 integration.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControllerSpec, ReferenceSignal};
use crate::data::{DataError, Dataset};
use crate::symexpr::{ExprError, Expression};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("invalid integration setup: {0}")]
    InvalidSetup(String),
    #[error("non-finite state at step {step}: trajectory diverged")]
    Divergence { step: usize },
    #[error("input evaluation failed at step {step}: {message}")]
    Input { step: usize, message: String },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// `xdot = f(x) + g(x) u`, `y = c(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAffineSystem {
    f: Vec<Expression>,
    g: Vec<Expression>,
    c: Expression,
}

impl ControlAffineSystem {
    pub fn new(f: Vec<Expression>, g: Vec<Expression>, c: Expression) -> Result<Self, DynamicsError> {
        let n = f.len();
        if n == 0 || g.len() != n {
            return Err(DynamicsError::InvalidSystem(format!("f has {} rows, g has {}", n, g.len())));
        }
        for e in f.iter().chain(&g).chain(std::iter::once(&c)) {
            if e.n_states() != n {
                return Err(DynamicsError::InvalidSystem(format!(
                    "expression over {} states in a {n}-state system",
                    e.n_states()
                )));
            }
            if e.depends_on_input() {
                return Err(DynamicsError::InvalidSystem(format!("'{e}' contains the input u")));
            }
        }
        if c.variables().len() > 1 {
            return Err(DynamicsError::InvalidSystem(format!("output '{c}' depends on more than one state")));
        }
        Ok(ControlAffineSystem { f, g, c })
    }

    pub fn n_states(&self) -> usize {
        self.f.len()
    }

    pub fn f(&self) -> &[Expression] {
        &self.f
    }

    pub fn g(&self) -> &[Expression] {
        &self.g
    }

    pub fn c(&self) -> &Expression {
        &self.c
    }

    /// Right-hand side `f(x) + g(x) u`.
    pub fn rhs(&self, x: &[f64], u: f64) -> Vec<f64> {
        self.f.iter().zip(&self.g).map(|(f, g)| f.eval(x, 0.0) + g.eval(x, 0.0) * u).collect()
    }

    pub fn output(&self, x: &[f64]) -> f64 {
        self.c.eval(x, 0.0)
    }
}

/// Van der Pol oscillator with input on the second state and `y = x1`.
pub fn vdp_system(theta: f64, sigma: f64, mu: f64) -> ControlAffineSystem {
    let n = 2;
    let a = 2.0 * theta * sigma;
    let f2 = Expression::monomial(n, a, &[0, 1])
        .add(&Expression::monomial(n, -a * mu, &[2, 1]))
        .and_then(|e| e.add(&Expression::monomial(n, -theta * theta, &[1, 0])))
        .expect("same dimension");
    ControlAffineSystem::new(
        vec![Expression::var(n, 1), f2],
        vec![Expression::zero(n), Expression::constant(n, 1.0)],
        Expression::var(n, 0),
    )
    .expect("valid by construction")
}

/// Integrator chain `x_i' = x_{i+1}`, `x_n' = u`, `y = x1`.
pub fn chain_integrator(n: usize) -> ControlAffineSystem {
    assert!(n >= 1);
    let mut f: Vec<Expression> = (1..n).map(|i| Expression::var(n, i)).collect();
    f.push(Expression::zero(n));
    let mut g = vec![Expression::zero(n); n];
    g[n - 1] = Expression::constant(n, 1.0);
    ControlAffineSystem::new(f, g, Expression::var(n, 0)).expect("valid by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Angular frequency in rad/s.
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Open-loop inputs that can be written to a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Excitation {
    Zero,
    Constant {
        value: f64,
    },
    SineSum {
        components: Vec<Sinusoid>,
    },
    /// Linear chirp from `f0` to `f1` Hz over `duration` seconds.
    Chirp {
        amplitude: f64,
        f0: f64,
        f1: f64,
        duration: f64,
    },
}

impl Default for Excitation {
    /// Three unit sinusoids at mutually incommensurate frequencies.
    fn default() -> Self {
        Excitation::SineSum {
            components: vec![
                Sinusoid { amplitude: 1.0, frequency: 1.3, phase: 0.0 },
                Sinusoid { amplitude: 1.0, frequency: 4.7, phase: 0.0 },
                Sinusoid { amplitude: 1.0, frequency: 9.1, phase: 0.0 },
            ],
        }
    }
}

impl Excitation {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Excitation::Zero => 0.0,
            Excitation::Constant { value } => *value,
            Excitation::SineSum { components } => {
                components.iter().map(|s| s.amplitude * (s.frequency * t + s.phase).sin()).sum()
            }
            Excitation::Chirp { amplitude, f0, f1, duration } => {
                let k = (f1 - f0) / duration;
                amplitude * (2.0 * PI * (f0 * t + 0.5 * k * t * t)).sin()
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Excitation::Zero => true,
            Excitation::Constant { value } => *value == 0.0,
            Excitation::SineSum { components } => components.iter().all(|s| s.amplitude == 0.0),
            Excitation::Chirp { amplitude, .. } => *amplitude == 0.0,
        }
    }
}

pub type FeedbackLaw = Arc<dyn Fn(f64, &[f64]) -> Result<f64, String> + Send + Sync>;

/// Input applied during integration: a pure function of `(t, x)`.
#[derive(Clone)]
pub enum InputSignal {
    Open(Excitation),
    Feedback(FeedbackLaw),
}

impl fmt::Debug for InputSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputSignal::Open(e) => f.debug_tuple("Open").field(e).finish(),
            InputSignal::Feedback(_) => f.write_str("Feedback(..)"),
        }
    }
}

impl From<Excitation> for InputSignal {
    fn from(e: Excitation) -> Self {
        InputSignal::Open(e)
    }
}

impl InputSignal {
    pub fn zero() -> Self {
        InputSignal::Open(Excitation::Zero)
    }

    pub fn feedback(law: impl Fn(f64, &[f64]) -> Result<f64, String> + Send + Sync + 'static) -> Self {
        InputSignal::Feedback(Arc::new(law))
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64, String> {
        match self {
            InputSignal::Open(e) => Ok(e.value(t)),
            InputSignal::Feedback(law) => law(t, x),
        }
    }
}

struct Stepper<'a> {
    sys: &'a ControlAffineSystem,
    input: &'a InputSignal,
}

impl Stepper<'_> {
    fn field(&self, t: f64, x: &[f64], step: usize) -> Result<(Vec<f64>, f64), DynamicsError> {
        let u = self.input.value(t, x).map_err(|message| DynamicsError::Input { step, message })?;
        if !u.is_finite() {
            return Err(DynamicsError::Input { step, message: format!("non-finite input {u}") });
        }
        Ok((self.sys.rhs(x, u), u))
    }
}

fn axpy(x: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// Classical RK4 from `x0` for `steps` steps of size `dt`. The returned
/// dataset has `steps + 1` rows (the initial point included); `Xdot` holds
/// the exact right-hand side and `u` the input applied at each sample.
pub fn integrate(
    sys: &ControlAffineSystem,
    x0: &[f64],
    input: &InputSignal,
    dt: f64,
    steps: usize,
) -> Result<Dataset, DynamicsError> {
    let n = sys.n_states();
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidSetup(format!("dt must be positive, got {dt}")));
    }
    if steps < 2 {
        return Err(DynamicsError::InvalidSetup(format!("steps must be >= 2, got {steps}")));
    }
    if x0.len() != n {
        return Err(DynamicsError::InvalidSetup(format!("x0 has {} entries, system has {n} states", x0.len())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::Divergence { step: 0 });
    }
    let st = Stepper { sys, input };
    let m = steps + 1;
    let mut times = Vec::with_capacity(m);
    let mut xs = Vec::with_capacity(m * n);
    let mut xdots = Vec::with_capacity(m * n);
    let mut us = Vec::with_capacity(m);
    let mut ys = Vec::with_capacity(m);

    let mut x = x0.to_vec();
    for step in 0..=steps {
        let t = step as f64 * dt;
        let (k1, u) = st.field(t, &x, step)?;
        times.push(t);
        xs.extend_from_slice(&x);
        xdots.extend_from_slice(&k1);
        us.push(u);
        ys.push(sys.output(&x));
        if step == steps {
            break;
        }
        let h = dt;
        let (k2, _) = st.field(t + 0.5 * h, &axpy(&x, 0.5 * h, &k1), step)?;
        let (k3, _) = st.field(t + 0.5 * h, &axpy(&x, 0.5 * h, &k2), step)?;
        let (k4, _) = st.field(t + h, &axpy(&x, h, &k3), step)?;
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Divergence { step: step + 1 });
        }
    }
    if xdots.iter().chain(&ys).any(|v| !v.is_finite()) {
        return Err(DynamicsError::Divergence { step: steps });
    }
    let states = DMatrix::from_row_slice(m, n, &xs);
    let derivatives = DMatrix::from_row_slice(m, n, &xdots);
    Ok(Dataset::new(times, states, Some(derivatives), us, ys)?)
}

/// Runs the plant under the controller's law, re-evaluated at every RK4
/// stage against the reference and its analytic derivatives.
pub fn simulate_closed_loop(
    sys: &ControlAffineSystem,
    controller: &ControllerSpec,
    reference: &ReferenceSignal,
    x0: &[f64],
    dt: f64,
    steps: usize,
) -> Result<Dataset, DynamicsError> {
    if controller.n_states() != sys.n_states() {
        return Err(DynamicsError::InvalidSetup(format!(
            "controller expects {} states, plant has {}",
            controller.n_states(),
            sys.n_states()
        )));
    }
    integrate(sys, x0, &feedback_input(controller, reference), dt, steps)
}

pub fn feedback_input(controller: &ControllerSpec, reference: &ReferenceSignal) -> InputSignal {
    let ctrl = controller.clone();
    let reference = reference.clone();
    InputSignal::feedback(move |t, x| ctrl.evaluate_law(x, &reference, t).map_err(|e| e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> ControlAffineSystem {
        ControlAffineSystem::new(
            vec![Expression::var(1, 0).scale(-1.0)],
            vec![Expression::zero(1)],
            Expression::var(1, 0),
        )
        .unwrap()
    }

    fn final_state(d: &Dataset) -> Vec<f64> {
        d.state(d.len() - 1)
    }

    #[test]
    fn exponential_decay_accuracy() {
        let d = integrate(&decay(), &[1.0], &InputSignal::zero(), 0.01, 100).unwrap();
        assert_eq!(d.len(), 101);
        assert!((d.times()[100] - 1.0).abs() < 1e-12);
        assert!((final_state(&d)[0] - (-1.0f64).exp()).abs() <= 1e-6);
    }

    #[test]
    fn fourth_order_convergence() {
        let exact = (-1.0f64).exp();
        let e1 = (final_state(&integrate(&decay(), &[1.0], &InputSignal::zero(), 0.1, 10).unwrap())[0] - exact).abs();
        let e2 = (final_state(&integrate(&decay(), &[1.0], &InputSignal::zero(), 0.05, 20).unwrap())[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn vdp_parameters() {
        let s = vdp_system(1.0, 1.0, 1.0);
        assert_eq!(s.f()[1].to_string(), "-x1 + 2*x2 - 2*x1^2*x2");
        assert_eq!(s.f()[0].to_string(), "x2");
        assert!(s.g()[0].is_empty());
        assert_eq!(s.g()[1].as_constant(), Some(1.0));
        assert_eq!(vdp_system(1.0, 1.0, 0.0).f()[1].to_string(), "-x1 + 2*x2");
        assert_eq!(vdp_system(2.0, 0.5, 3.0).g()[1].as_constant(), Some(1.0));
    }

    #[test]
    fn vdp_limit_cycle_bounded() {
        let d = integrate(&vdp_system(1.0, 1.0, 1.0), &[2.0, 0.0], &InputSignal::zero(), 0.01, 3000).unwrap();
        let max = d.states().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 5.0, "max |x| = {max}");
        // still oscillating at the end (not decayed to the origin)
        let tail = (2500..3001).map(|i| d.state(i)[0].abs()).fold(0.0, f64::max);
        assert!(tail > 1.0);
    }

    #[test]
    fn vdp_matches_fine_reference() {
        let sys = vdp_system(1.0, 1.0, 1.0);
        let coarse = integrate(&sys, &[2.0, 0.0], &InputSignal::zero(), 0.01, 3000).unwrap();
        let fine = integrate(&sys, &[2.0, 0.0], &InputSignal::zero(), 1e-4, 300_000).unwrap();
        let a = final_state(&coarse);
        let b = final_state(&fine);
        assert!((a[0] - b[0]).abs() < 1e-4 && (a[1] - b[1]).abs() < 1e-4, "{a:?} vs {b:?}");
    }

    #[test]
    fn invalid_setups() {
        let s = decay();
        assert!(matches!(integrate(&s, &[1.0], &InputSignal::zero(), 0.01, 0), Err(DynamicsError::InvalidSetup(_))));
        assert!(integrate(&s, &[1.0], &InputSignal::zero(), 0.01, 1).is_err());
        assert!(integrate(&s, &[1.0], &InputSignal::zero(), -0.01, 10).is_err());
        assert!(integrate(&s, &[1.0, 2.0], &InputSignal::zero(), 0.01, 10).is_err());
    }

    #[test]
    fn divergence_names_step() {
        let blowup = ControlAffineSystem::new(
            vec![Expression::monomial(1, 1.0, &[3])],
            vec![Expression::zero(1)],
            Expression::var(1, 0),
        )
        .unwrap();
        let err = integrate(&blowup, &[10.0], &InputSignal::zero(), 0.1, 1000).unwrap_err();
        match err {
            DynamicsError::Divergence { step } => assert!(step > 0 && step < 1000),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn system_validation() {
        let n = 2;
        let bad = ControlAffineSystem::new(
            vec![Expression::input(n), Expression::zero(n)],
            vec![Expression::zero(n), Expression::zero(n)],
            Expression::var(n, 0),
        );
        assert!(bad.is_err());
        let bad = ControlAffineSystem::new(
            vec![Expression::zero(n), Expression::zero(n)],
            vec![Expression::zero(n), Expression::zero(n)],
            Expression::var(n, 0).add(&Expression::var(n, 1)).unwrap(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn exact_derivatives_recorded() {
        let sys = vdp_system(1.0, 1.0, 1.0);
        let d = integrate(&sys, &[2.0, 0.0], &Excitation::default().into(), 0.01, 50).unwrap();
        let xd = d.derivatives().unwrap();
        for i in 0..d.len() {
            let x = d.state(i);
            let rhs = sys.rhs(&x, d.input()[i]);
            assert_eq!(xd[(i, 0)], rhs[0]);
            assert_eq!(xd[(i, 1)], rhs[1]);
            assert_eq!(d.output()[i], x[0]);
        }
    }

    #[test]
    fn feedback_equals_open_loop_for_same_rule() {
        let sys = vdp_system(1.0, 1.0, 1.0);
        let e = Excitation::default();
        let e2 = e.clone();
        let open = integrate(&sys, &[1.0, 0.5], &e.into(), 0.01, 200).unwrap();
        let fb = integrate(&sys, &[1.0, 0.5], &InputSignal::feedback(move |t, _| Ok(e2.value(t))), 0.01, 200).unwrap();
        assert_eq!(open, fb);
    }

    #[test]
    fn excitation_serde() {
        let e = Excitation::default();
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.contains("\"kind\":\"sine_sum\""));
        assert_eq!(serde_json::from_str::<Excitation>(&s).unwrap(), e);
        assert!(serde_json::from_str::<Excitation>(r#"{"kind":"constant","value":1,"bogus":1}"#).is_err());
        let c: Excitation =
            serde_json::from_str(r#"{"kind":"chirp","amplitude":1,"f0":0.1,"f1":2,"duration":1}"#).unwrap();
        assert_eq!(c.value(0.0), 0.0);
    }
}
