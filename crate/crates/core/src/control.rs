//! Feedback-linearizing tracking controller.
//!
//! For a chain of relative degree `r` with `alpha = Lf^r c` and
//! `beta = Lg Lf^{r-1} c` the law is
//!
//! ```text
//! u = (1/beta) * (-alpha + sum_i a_i (r^(i) - Lf^i c) + r^(r))
//! ```
//!
//! which turns the output dynamics into `e^(r) + a_{r-1} e^(r-1) + ... + a_0 e = 0`
//! for the tracking error `e = y - r`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{LieChain, LieError};
use crate::symexpr::{format_number, ExprError, Expression};

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("decoupling term Lg Lf^(r-1) c is zero")]
    BetaZero,
    #[error("expected {expected} gains, got {got}")]
    GainCount { expected: usize, got: usize },
    #[error("pole set is empty")]
    NoPoles,
    #[error("pole {0} has no complex-conjugate partner")]
    Conjugation(Complex64),
    #[error("decoupling term {value:e} is below the singularity guard")]
    Singular { value: f64 },
    #[error("control law evaluated to a non-finite value")]
    NonFinite,
    #[error("malformed controller: {0}")]
    Malformed(String),
}

const CONJ_TOL: f64 = 1e-12;
const SINGULARITY_GUARD: f64 = 1e-9;

/// Reference trajectory with exact derivatives of any order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSignal {
    Zero,
    Constant {
        value: f64,
    },
    /// `amplitude * sin(frequency * t + phase)`.
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl ReferenceSignal {
    pub fn sine() -> Self {
        ReferenceSignal::Sinusoid { amplitude: 1.0, frequency: 1.0, phase: 0.0 }
    }

    pub fn derivative(&self, order: usize, t: f64) -> f64 {
        match *self {
            ReferenceSignal::Zero => 0.0,
            ReferenceSignal::Constant { value } => {
                if order == 0 {
                    value
                } else {
                    0.0
                }
            }
            ReferenceSignal::Sinusoid { amplitude, frequency, phase } => {
                let arg = frequency * t + phase;
                let scale = amplitude * frequency.powi(order as i32);
                match order % 4 {
                    0 => scale * arg.sin(),
                    1 => scale * arg.cos(),
                    2 => -scale * arg.sin(),
                    _ => -scale * arg.cos(),
                }
            }
        }
    }

    /// `[r, r', ..., r^(order)]` at time `t`.
    pub fn derivatives(&self, order: usize, t: f64) -> Vec<f64> {
        (0..=order).map(|k| self.derivative(k, t)).collect()
    }
}

/// Coefficients `[a_0, ..., a_{r-1}]` of the monic polynomial with the given
/// roots. Complex poles must come in conjugate pairs.
pub fn gains_from_poles(poles: &[Complex64]) -> Result<Vec<f64>, ControlError> {
    if poles.is_empty() {
        return Err(ControlError::NoPoles);
    }
    let mut used = vec![false; poles.len()];
    for (i, p) in poles.iter().enumerate() {
        if used[i] || p.im.abs() <= CONJ_TOL * (1.0 + p.norm()) {
            continue;
        }
        let partner = (0..poles.len())
            .find(|&j| j != i && !used[j] && (poles[j] - p.conj()).norm() <= CONJ_TOL * (1.0 + p.norm()));
        match partner {
            Some(j) => {
                used[i] = true;
                used[j] = true;
            }
            None => return Err(ControlError::Conjugation(*p)),
        }
    }
    if poles.iter().any(|p| p.re >= 0.0) {
        let list: Vec<String> = poles.iter().map(|p| p.to_string()).collect();
        log::warn!("poles [{}] include a non-negative real part: closed loop will not converge", list.join(", "));
    }
    // ascending coefficients, leading 1 last
    let mut poly = vec![Complex64::new(1.0, 0.0)];
    for p in poles {
        let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
        for (k, c) in poly.iter().enumerate() {
            next[k + 1] += c;
            next[k] -= c * p;
        }
        poly = next;
    }
    poly.pop();
    Ok(poly.iter().map(|c| c.re).collect())
}

pub fn poles_are_stable(poles: &[Complex64]) -> bool {
    poles.iter().all(|p| p.re < 0.0)
}

/// Where the error-dynamics coefficients come from.
#[derive(Debug, Clone, PartialEq)]
pub enum GainSource {
    Gains(Vec<f64>),
    Poles(Vec<Complex64>),
}

/// `u = (numerator(x) + sum_k w_k r^(k)) / denominator(x)`. When the
/// decoupling term is constant it is folded in and the denominator is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLaw {
    pub numerator: Expression,
    pub reference_weights: Vec<f64>,
    pub denominator: Expression,
}

impl ControlLaw {
    pub fn evaluate(&self, x: &[f64], refs: &[f64]) -> Result<f64, ControlError> {
        let den = self.denominator.evaluate(x, 0.0)?;
        if den.abs() < SINGULARITY_GUARD {
            return Err(ControlError::Singular { value: den });
        }
        let mut num = self.numerator.evaluate(x, 0.0)?;
        for (w, r) in self.reference_weights.iter().zip(refs) {
            num += w * r;
        }
        let u = num / den;
        if u.is_finite() {
            Ok(u)
        } else {
            Err(ControlError::NonFinite)
        }
    }
}

impl std::fmt::Display for ControlLaw {
    /// Expanded form, e.g. `-4*x1 - 6*x2 + 2*x1^2*x2 + 5*r + 4*r' + r''`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = if self.numerator.is_empty() { String::new() } else { self.numerator.to_string() };
        for (k, &w) in self.reference_weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let name = format!("r{}", "'".repeat(k));
            let mag = if w.abs() == 1.0 { name } else { format!("{}*{}", format_number(w.abs()), name) };
            match (s.is_empty(), w < 0.0) {
                (true, true) => s = format!("-{mag}"),
                (true, false) => s = mag,
                (false, true) => s.push_str(&format!(" - {mag}")),
                (false, false) => s.push_str(&format!(" + {mag}")),
            }
        }
        if s.is_empty() {
            s.push('0');
        }
        match self.denominator.as_constant() {
            Some(1.0) => write!(f, "{s}"),
            _ => write!(f, "({s})/({})", self.denominator),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSpec {
    pub relative_degree: usize,
    /// `Lf^r c`.
    pub alpha: Expression,
    /// `Lg Lf^{r-1} c`.
    pub beta: Expression,
    /// `[Lf^0 c, ..., Lf^{r-1} c]`.
    pub lf_powers: Vec<Expression>,
    pub gains: Vec<f64>,
    pub poles: Option<Vec<Complex64>>,
    pub law: ControlLaw,
}

pub fn synthesize(chain: &LieChain, source: &GainSource) -> Result<ControllerSpec, ControlError> {
    let n = chain.n_states();
    let r = chain.require_degree()?;
    if r != n {
        return Err(LieError::InternalDynamics { r, n }.into());
    }
    let (gains, poles) = match source {
        GainSource::Gains(g) => (g.clone(), None),
        GainSource::Poles(p) => (gains_from_poles(p)?, Some(p.clone())),
    };
    if gains.len() != r {
        return Err(ControlError::GainCount { expected: r, got: gains.len() });
    }
    let alpha = chain.lf_powers[r].clone();
    let beta = chain.lg_mixed[r - 1].clone();
    if beta.is_zero(0.0) {
        return Err(ControlError::BetaZero);
    }
    let mut numerator = alpha.scale(-1.0);
    for (i, a) in gains.iter().enumerate() {
        numerator = numerator.sub(&chain.lf_powers[i].scale(*a))?;
    }
    let mut weights = gains.clone();
    weights.push(1.0);
    let law = match beta.as_constant() {
        Some(b) => ControlLaw {
            numerator: numerator.scale(1.0 / b),
            reference_weights: weights.iter().map(|w| w / b).collect(),
            denominator: Expression::constant(n, 1.0),
        },
        None => ControlLaw { numerator, reference_weights: weights, denominator: beta.clone() },
    };
    Ok(ControllerSpec { relative_degree: r, alpha, beta, lf_powers: chain.lf_powers[..r].to_vec(), gains, poles, law })
}

impl ControllerSpec {
    pub fn n_states(&self) -> usize {
        self.alpha.n_states()
    }

    pub fn evaluate_law(&self, x: &[f64], reference: &ReferenceSignal, t: f64) -> Result<f64, ControlError> {
        self.law.evaluate(x, &reference.derivatives(self.relative_degree, t))
    }

    /// Residuals of substituting the law into `y^(r) = alpha + beta u`,
    /// compared against `sum a_i (r^(i) - Lf^i c) + r^(r)`: the state part
    /// and the reference weights. Both vanish for an exact synthesis.
    pub fn cancellation_residual(&self) -> Result<(Expression, Vec<f64>), ControlError> {
        // beta / denominator: a constant when beta was folded, 1 otherwise
        let ratio = match (self.beta.as_constant(), self.law.denominator.as_constant()) {
            (Some(b), Some(d)) => b / d,
            _ => 1.0,
        };
        let mut state = self.alpha.add(&self.law.numerator.scale(ratio))?;
        for (i, a) in self.gains.iter().enumerate() {
            state = state.add(&self.lf_powers[i].scale(*a))?;
        }
        let mut expected = self.gains.clone();
        expected.push(1.0);
        let refs = self.law.reference_weights.iter().zip(&expected).map(|(w, e)| w * ratio - e).collect();
        Ok((state, refs))
    }

    /// Factored display: `x1 - 2*x2 + 2*x1^2*x2 + 5*(r - x1) + 4*(r' - x2) + r''`.
    pub fn display_law(&self) -> String {
        let r = self.relative_degree;
        let neg_alpha = self.alpha.scale(-1.0);
        let mut parts = Vec::new();
        if !neg_alpha.is_empty() {
            parts.push(neg_alpha.to_string());
        }
        for (i, a) in self.gains.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            let rname = format!("r{}", "'".repeat(i));
            let inner = if self.lf_powers[i].is_empty() {
                rname
            } else {
                format!("({} - {})", rname, paren_if_needed(&self.lf_powers[i]))
            };
            parts.push(format!("{}*{}", format_number(*a), inner));
        }
        parts.push(format!("r{}", "'".repeat(r)));
        let body = parts.join(" + ").replace("+ -", "- ");
        match self.beta.as_constant() {
            Some(1.0) => body,
            Some(b) => format!("({body})/{}", format_number(b)),
            None => format!("({body})/({})", self.beta),
        }
    }

    pub fn to_file(&self) -> ControllerFile {
        ControllerFile {
            n_states: self.n_states(),
            relative_degree: self.relative_degree,
            gains: self.gains.clone(),
            poles: self.poles.as_ref().map(|p| p.iter().map(|c| [c.re, c.im]).collect()),
            alpha: self.alpha.to_string(),
            beta: self.beta.to_string(),
            lf_powers: self.lf_powers.iter().map(|e| e.to_string()).collect(),
            law: LawFile {
                numerator: self.law.numerator.to_string(),
                reference_weights: self.law.reference_weights.clone(),
                denominator: self.law.denominator.to_string(),
                display: self.display_law(),
                expanded: self.law.to_string(),
            },
        }
    }

    pub fn from_file(file: &ControllerFile) -> Result<ControllerSpec, ControlError> {
        let n = file.n_states;
        let r = file.relative_degree;
        let parse = |s: &str| Expression::parse(s, n);
        if file.gains.len() != r || file.lf_powers.len() != r || file.law.reference_weights.len() != r + 1 {
            return Err(ControlError::Malformed(format!(
                "relative degree {r} with {} gains, {} Lie powers, {} reference weights",
                file.gains.len(),
                file.lf_powers.len(),
                file.law.reference_weights.len()
            )));
        }
        Ok(ControllerSpec {
            relative_degree: r,
            alpha: parse(&file.alpha)?,
            beta: parse(&file.beta)?,
            lf_powers: file.lf_powers.iter().map(|s| parse(s)).collect::<Result<_, _>>()?,
            gains: file.gains.clone(),
            poles: file.poles.as_ref().map(|p| p.iter().map(|[re, im]| Complex64::new(*re, *im)).collect()),
            law: ControlLaw {
                numerator: parse(&file.law.numerator)?,
                reference_weights: file.law.reference_weights.clone(),
                denominator: parse(&file.law.denominator)?,
            },
        })
    }
}

fn paren_if_needed(e: &Expression) -> String {
    if e.len() > 1 || e.terms().first().is_some_and(|t| t.coefficient() < 0.0) {
        format!("({e})")
    } else {
        e.to_string()
    }
}

/// JSON form of a controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerFile {
    pub n_states: usize,
    pub relative_degree: usize,
    pub gains: Vec<f64>,
    pub poles: Option<Vec<[f64; 2]>>,
    pub alpha: String,
    pub beta: String,
    pub lf_powers: Vec<String>,
    pub law: LawFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawFile {
    pub numerator: String,
    pub reference_weights: Vec<f64>,
    pub denominator: String,
    pub display: String,
    pub expanded: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::vdp_system;
    use crate::lie::relative_degree;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn vdp_chain() -> LieChain {
        relative_degree(&vdp_system(1.0, 1.0, 1.0), 1e-6, 2).unwrap()
    }

    #[test]
    fn pole_expansion() {
        assert_eq!(gains_from_poles(&[c(-2.0, 0.0), c(-6.0, 0.0)]).unwrap(), vec![12.0, 8.0]);
        assert_eq!(gains_from_poles(&[c(-2.0, 1.0), c(-2.0, -1.0)]).unwrap(), vec![5.0, 4.0]);
        assert_eq!(gains_from_poles(&[c(-1.0, 0.0)]).unwrap(), vec![1.0]);
        assert_eq!(gains_from_poles(&[c(-2.0, 1.0), c(-2.0, 2.0)]), Err(ControlError::Conjugation(c(-2.0, 1.0))));
        assert_eq!(gains_from_poles(&[]), Err(ControlError::NoPoles));
        // unstable poles only warn
        assert_eq!(gains_from_poles(&[c(1.0, 0.0)]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn vdp_law_with_explicit_gains() {
        let spec = synthesize(&vdp_chain(), &GainSource::Gains(vec![5.0, 4.0])).unwrap();
        assert_eq!(spec.display_law(), "x1 - 2*x2 + 2*x1^2*x2 + 5*(r - x1) + 4*(r' - x2) + r''");
        assert_eq!(spec.law.to_string(), "-4*x1 - 6*x2 + 2*x1^2*x2 + 5*r + 4*r' + r''");
    }

    #[test]
    fn law_from_stated_poles() {
        let spec = synthesize(&vdp_chain(), &GainSource::Poles(vec![c(-2.0, 0.0), c(-6.0, 0.0)])).unwrap();
        assert_eq!(spec.gains, vec![12.0, 8.0]);
        assert_eq!(spec.display_law(), "x1 - 2*x2 + 2*x1^2*x2 + 12*(r - x1) + 8*(r' - x2) + r''");
    }

    #[test]
    fn beta_two_halves_the_law() {
        let sys = vdp_system(1.0, 1.0, 1.0);
        let g2 = vec![sys.g()[0].clone(), Expression::constant(2, 2.0)];
        let sys2 = crate::dynamics::ControlAffineSystem::new(sys.f().to_vec(), g2, sys.c().clone()).unwrap();
        let chain2 = relative_degree(&sys2, 1e-6, 2).unwrap();
        let a = synthesize(&vdp_chain(), &GainSource::Gains(vec![5.0, 4.0])).unwrap();
        let b = synthesize(&chain2, &GainSource::Gains(vec![5.0, 4.0])).unwrap();
        assert_eq!(b.law.numerator, a.law.numerator.scale(0.5));
        assert_eq!(b.law.reference_weights, vec![2.5, 2.0, 0.5]);
        let r = ReferenceSignal::sine();
        for (x, t) in [([2.0, 0.0], 0.0), ([0.3, -1.0], 1.7)] {
            let ua = a.evaluate_law(&x, &r, t).unwrap();
            let ub = b.evaluate_law(&x, &r, t).unwrap();
            assert!((ub - 0.5 * ua).abs() < 1e-12);
        }
    }

    #[test]
    fn law_values() {
        let spec = synthesize(&vdp_chain(), &GainSource::Gains(vec![5.0, 4.0])).unwrap();
        assert_eq!(spec.evaluate_law(&[0.0, 0.0], &ReferenceSignal::Zero, 0.0).unwrap(), 0.0);
        assert_eq!(spec.evaluate_law(&[2.0, 0.0], &ReferenceSignal::Zero, 0.0).unwrap(), -8.0);
        assert_eq!(spec.evaluate_law(&[0.0, 0.0], &ReferenceSignal::sine(), 0.0).unwrap(), 4.0);
    }

    #[test]
    fn exact_cancellation() {
        for gains in [vec![5.0, 4.0], vec![12.0, 8.0], vec![0.3, 7.1]] {
            let spec = synthesize(&vdp_chain(), &GainSource::Gains(gains)).unwrap();
            let (state, refs) = spec.cancellation_residual().unwrap();
            assert!(state.is_zero(1e-10), "{state}");
            assert!(refs.iter().all(|r| r.abs() <= 1e-10));
        }
    }

    #[test]
    fn state_dependent_beta_is_guarded() {
        let n = 2;
        let sys = vdp_system(1.0, 1.0, 1.0);
        let g = vec![
            Expression::zero(n),
            Expression::parse("1 + x1^2", n).unwrap().sub(&Expression::constant(n, 1.0)).unwrap(),
        ];
        let sys = crate::dynamics::ControlAffineSystem::new(sys.f().to_vec(), g, sys.c().clone()).unwrap();
        let chain = relative_degree(&sys, 1e-6, 2).unwrap();
        let spec = synthesize(&chain, &GainSource::Gains(vec![5.0, 4.0])).unwrap();
        assert_eq!(spec.law.denominator.to_string(), "x1^2");
        assert!(matches!(
            spec.evaluate_law(&[0.0, 1.0], &ReferenceSignal::Zero, 0.0),
            Err(ControlError::Singular { .. })
        ));
        assert!(spec.evaluate_law(&[1.0, 1.0], &ReferenceSignal::Zero, 0.0).is_ok());
        let (state, refs) = spec.cancellation_residual().unwrap();
        assert!(state.is_zero(1e-10));
        assert!(refs.iter().all(|r| r.abs() <= 1e-10));
        assert!(spec.display_law().ends_with("/(x1^2)"));
    }

    #[test]
    fn synthesis_errors() {
        let chain = vdp_chain();
        assert_eq!(
            synthesize(&chain, &GainSource::Gains(vec![1.0])),
            Err(ControlError::GainCount { expected: 2, got: 1 })
        );
        let mut undefined = chain.clone();
        undefined.relative_degree = None;
        assert!(matches!(synthesize(&undefined, &GainSource::Gains(vec![1.0, 2.0])), Err(ControlError::Lie(_))));
    }

    #[test]
    fn reference_derivatives() {
        let r = ReferenceSignal::Sinusoid { amplitude: 2.0, frequency: 3.0, phase: 0.5 };
        let t = 0.7;
        let d = r.derivatives(4, t);
        let a = 3.0 * t + 0.5;
        assert!((d[0] - 2.0 * a.sin()).abs() < 1e-12);
        assert!((d[1] - 6.0 * a.cos()).abs() < 1e-12);
        assert!((d[2] + 18.0 * a.sin()).abs() < 1e-12);
        assert!((d[3] + 54.0 * a.cos()).abs() < 1e-12);
        assert!((d[4] - 162.0 * a.sin()).abs() < 1e-9);
        assert_eq!(ReferenceSignal::Constant { value: 3.0 }.derivatives(2, 1.0), vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn file_round_trip() {
        let spec = synthesize(&vdp_chain(), &GainSource::Poles(vec![c(-2.0, 1.0), c(-2.0, -1.0)])).unwrap();
        let json = serde_json::to_string_pretty(&spec.to_file()).unwrap();
        let back: ControllerFile = serde_json::from_str(&json).unwrap();
        assert_eq!(ControllerSpec::from_file(&back).unwrap(), spec);
    }
}
