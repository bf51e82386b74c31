//! Exact symbolic expressions over the dictionary function class.
//!
//! An [`Expression`] is a canonical sum of [`Term`]s. Each term is a real
//! coefficient times a monomial in the state variables, a product of
//! `sin(j*x_i)` / `cos(j*x_i)` atoms and a power of the scalar input `u`.
//! This class is closed under addition, multiplication and partial
//! differentiation, which is all the Lie-derivative machinery needs.
//!
//! Text form (used in config files, reports and JSON):
//!
//! ```text
//! -1.001*x1 + 2*x2 - 2*x1^2*x2 + 1.001*u
//! 0.5*sin(2*x1)*cos(x2)*u^2
//! ```
//!
//! State variables are 1-based in text (`x1` is state index 0).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("dimension mismatch: {left} vs {right} states")]
    DimensionMismatch { left: usize, right: usize },
    #[error("state index {index} out of range for {n_states} states")]
    IndexOutOfRange { index: usize, n_states: usize },
    #[error("non-finite evaluation input")]
    NonFinite,
    #[error("term has no input factor to strip")]
    NoInputFactor,
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrigKind {
    Sin,
    Cos,
}

/// `sin(freq * x_var)` or `cos(freq * x_var)`, with `freq >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrigAtom {
    pub var: usize,
    pub freq: u32,
    pub kind: TrigKind,
}

impl TrigAtom {
    pub fn sin(freq: u32, var: usize) -> Self {
        assert!(freq >= 1, "trig frequency must be >= 1");
        TrigAtom { var, freq, kind: TrigKind::Sin }
    }

    pub fn cos(freq: u32, var: usize) -> Self {
        assert!(freq >= 1, "trig frequency must be >= 1");
        TrigAtom { var, freq, kind: TrigKind::Cos }
    }

    fn value(&self, x: &[f64]) -> f64 {
        let arg = f64::from(self.freq) * x[self.var];
        match self.kind {
            TrigKind::Sin => arg.sin(),
            TrigKind::Cos => arg.cos(),
        }
    }

    /// Derivative w.r.t. its own variable as (factor, atom).
    fn derivative(&self) -> (f64, TrigAtom) {
        let j = f64::from(self.freq);
        match self.kind {
            TrigKind::Sin => (j, TrigAtom { kind: TrigKind::Cos, ..*self }),
            TrigKind::Cos => (-j, TrigAtom { kind: TrigKind::Sin, ..*self }),
        }
    }
}

impl fmt::Display for TrigAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            TrigKind::Sin => "sin",
            TrigKind::Cos => "cos",
        };
        if self.freq == 1 {
            write!(f, "{}(x{})", name, self.var + 1)
        } else {
            write!(f, "{}({}*x{})", name, self.freq, self.var + 1)
        }
    }
}

/// The non-coefficient part of a term. Ordered so that printed output is
/// stable: input power first (so `u` terms trail), then trig-atom count,
/// then graded lexicographic on the monomial, then the trig atoms.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signature {
    monomial: Vec<u32>,
    trig: Vec<TrigAtom>,
    input_power: u32,
}

impl Signature {
    fn degree(&self) -> u32 {
        self.monomial.iter().sum()
    }
}

impl Ord for Signature {
    fn cmp(&self, other: &Self) -> Ordering {
        self.input_power
            .cmp(&other.input_power)
            .then(self.trig.len().cmp(&other.trig.len()))
            .then(self.degree().cmp(&other.degree()))
            // x1^2 before x1*x2 before x2^2
            .then_with(|| other.monomial.cmp(&self.monomial))
            .then_with(|| self.trig.cmp(&other.trig))
    }
}

impl PartialOrd for Signature {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    coefficient: f64,
    sig: Signature,
}

impl Term {
    pub fn new(coefficient: f64, monomial: Vec<u32>, mut trig_atoms: Vec<TrigAtom>, input_power: u32) -> Self {
        assert!(trig_atoms.iter().all(|a| a.freq >= 1), "trig frequency must be >= 1");
        trig_atoms.sort();
        Term { coefficient, sig: Signature { monomial, trig: trig_atoms, input_power } }
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    pub fn monomial(&self) -> &[u32] {
        &self.sig.monomial
    }

    pub fn trig_atoms(&self) -> &[TrigAtom] {
        &self.sig.trig
    }

    pub fn input_power(&self) -> u32 {
        self.sig.input_power
    }

    pub fn signature(&self) -> &Signature {
        &self.sig
    }

    fn product(&self, other: &Term) -> Term {
        let monomial = self.sig.monomial.iter().zip(&other.sig.monomial).map(|(a, b)| a + b).collect();
        let mut trig = self.sig.trig.clone();
        trig.extend_from_slice(&other.sig.trig);
        Term::new(self.coefficient * other.coefficient, monomial, trig, self.sig.input_power + other.sig.input_power)
    }

    fn eval(&self, x: &[f64], u: f64) -> f64 {
        let mut v = self.coefficient;
        for (xi, &p) in x.iter().zip(&self.sig.monomial) {
            if p > 0 {
                v *= xi.powi(p as i32);
            }
        }
        for atom in &self.sig.trig {
            v *= atom.value(x);
        }
        if self.sig.input_power > 0 {
            v *= u.powi(self.sig.input_power as i32);
        }
        v
    }

    /// Renders the factors without the coefficient; empty for a constant.
    fn factors(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, &p) in self.sig.monomial.iter().enumerate() {
            match p {
                0 => {}
                1 => out.push(format!("x{}", i + 1)),
                _ => out.push(format!("x{}^{}", i + 1, p)),
            }
        }
        out.extend(self.sig.trig.iter().map(|a| a.to_string()));
        match self.sig.input_power {
            0 => {}
            1 => out.push("u".to_string()),
            q => out.push(format!("u^{q}")),
        }
        out
    }
}

/// Canonical sum of terms over `n_states` state variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    n_states: usize,
    terms: Vec<Term>,
}

impl Expression {
    pub fn zero(n_states: usize) -> Self {
        Expression { n_states, terms: Vec::new() }
    }

    pub fn constant(n_states: usize, value: f64) -> Self {
        Self::from_terms_unchecked(n_states, vec![Term::new(value, vec![0; n_states], vec![], 0)])
    }

    /// The state variable `x_{index+1}`.
    pub fn var(n_states: usize, index: usize) -> Self {
        Self::monomial(n_states, 1.0, &unit(n_states, index))
    }

    pub fn monomial(n_states: usize, coefficient: f64, exponents: &[u32]) -> Self {
        assert_eq!(exponents.len(), n_states);
        Self::from_terms_unchecked(n_states, vec![Term::new(coefficient, exponents.to_vec(), vec![], 0)])
    }

    pub fn input(n_states: usize) -> Self {
        Self::from_terms_unchecked(n_states, vec![Term::new(1.0, vec![0; n_states], vec![], 1)])
    }

    pub fn trig(n_states: usize, atom: TrigAtom) -> Self {
        assert!(atom.var < n_states);
        Self::from_terms_unchecked(n_states, vec![Term::new(1.0, vec![0; n_states], vec![atom], 0)])
    }

    pub fn from_terms(n_states: usize, terms: Vec<Term>) -> Result<Self, ExprError> {
        for t in &terms {
            if t.sig.monomial.len() != n_states {
                return Err(ExprError::DimensionMismatch { left: n_states, right: t.sig.monomial.len() });
            }
            if let Some(a) = t.sig.trig.iter().find(|a| a.var >= n_states) {
                return Err(ExprError::IndexOutOfRange { index: a.var, n_states });
            }
        }
        Ok(Self::from_terms_unchecked(n_states, terms))
    }

    fn from_terms_unchecked(n_states: usize, terms: Vec<Term>) -> Self {
        let mut acc: BTreeMap<Signature, f64> = BTreeMap::new();
        for t in terms {
            *acc.entry(t.sig).or_insert(0.0) += t.coefficient;
        }
        let terms =
            acc.into_iter().filter(|(_, c)| *c != 0.0).map(|(sig, coefficient)| Term { coefficient, sig }).collect();
        Expression { n_states, terms }
    }

    /// Re-sorts and merges terms. Expressions are always kept canonical, so
    /// this is the identity on any value built through the public API.
    pub fn canonicalize(&self) -> Self {
        Self::from_terms_unchecked(self.n_states, self.terms.clone())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn check_dims(&self, other: &Expression) -> Result<(), ExprError> {
        if self.n_states != other.n_states {
            return Err(ExprError::DimensionMismatch { left: self.n_states, right: other.n_states });
        }
        Ok(())
    }

    pub fn add(&self, other: &Expression) -> Result<Expression, ExprError> {
        self.check_dims(other)?;
        let terms = self.terms.iter().chain(&other.terms).cloned().collect();
        Ok(Self::from_terms_unchecked(self.n_states, terms))
    }

    pub fn sub(&self, other: &Expression) -> Result<Expression, ExprError> {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Expression) -> Result<Expression, ExprError> {
        self.check_dims(other)?;
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                terms.push(a.product(b));
            }
        }
        Ok(Self::from_terms_unchecked(self.n_states, terms))
    }

    pub fn scale(&self, factor: f64) -> Expression {
        let terms =
            self.terms.iter().map(|t| Term { coefficient: t.coefficient * factor, sig: t.sig.clone() }).collect();
        Self::from_terms_unchecked(self.n_states, terms)
    }

    /// Exact partial derivative with respect to state `index`.
    pub fn partial(&self, index: usize) -> Result<Expression, ExprError> {
        if index >= self.n_states {
            return Err(ExprError::IndexOutOfRange { index, n_states: self.n_states });
        }
        let mut out = Vec::new();
        for t in &self.terms {
            let p = t.sig.monomial[index];
            if p > 0 {
                let mut monomial = t.sig.monomial.clone();
                monomial[index] -= 1;
                out.push(Term::new(t.coefficient * f64::from(p), monomial, t.sig.trig.clone(), t.sig.input_power));
            }
            for (pos, atom) in t.sig.trig.iter().enumerate() {
                if atom.var != index {
                    continue;
                }
                let (factor, d) = atom.derivative();
                let mut trig = t.sig.trig.clone();
                trig[pos] = d;
                out.push(Term::new(t.coefficient * factor, t.sig.monomial.clone(), trig, t.sig.input_power));
            }
        }
        Ok(Self::from_terms_unchecked(self.n_states, out))
    }

    /// Evaluates at state `x` and input `u`, rejecting non-finite inputs.
    pub fn evaluate(&self, x: &[f64], u: f64) -> Result<f64, ExprError> {
        if x.len() != self.n_states {
            return Err(ExprError::DimensionMismatch { left: self.n_states, right: x.len() });
        }
        if !u.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(ExprError::NonFinite);
        }
        Ok(self.eval(x, u))
    }

    /// Unchecked evaluation for inner loops. `x.len()` must equal `n_states`.
    #[inline]
    pub fn eval(&self, x: &[f64], u: f64) -> f64 {
        debug_assert_eq!(x.len(), self.n_states);
        self.terms.iter().map(|t| t.eval(x, u)).sum()
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.terms.iter().all(|t| t.coefficient.abs() <= tol)
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.iter().fold(0.0, |m, t| m.max(t.coefficient.abs()))
    }

    /// Drops terms whose coefficient magnitude is at most `tol`.
    pub fn prune(&self, tol: f64) -> Expression {
        let terms = self.terms.iter().filter(|t| t.coefficient.abs() > tol).cloned().collect();
        Expression { n_states: self.n_states, terms }
    }

    pub fn max_input_power(&self) -> u32 {
        self.terms.iter().map(|t| t.sig.input_power).max().unwrap_or(0)
    }

    /// Divides out one factor of `u` from every term.
    pub fn strip_input(&self) -> Result<Expression, ExprError> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            if t.sig.input_power == 0 {
                return Err(ExprError::NoInputFactor);
            }
            let mut t = t.clone();
            t.sig.input_power -= 1;
            terms.push(t);
        }
        Ok(Expression { n_states: self.n_states, terms })
    }

    /// Sorted state indices the expression depends on.
    pub fn variables(&self) -> Vec<usize> {
        let mut used = vec![false; self.n_states];
        for t in &self.terms {
            for (i, &p) in t.sig.monomial.iter().enumerate() {
                if p > 0 {
                    used[i] = true;
                }
            }
            for a in &t.sig.trig {
                used[a.var] = true;
            }
        }
        used.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn depends_on_input(&self) -> bool {
        self.max_input_power() > 0
    }

    /// `Some(c)` when the expression is a constant (including zero).
    pub fn as_constant(&self) -> Option<f64> {
        match self.terms.as_slice() {
            [] => Some(0.0),
            [t] if t.sig.input_power == 0 && t.sig.trig.is_empty() && t.sig.monomial.iter().all(|&p| p == 0) => {
                Some(t.coefficient)
            }
            _ => None,
        }
    }

    /// Coefficient of the term with the given signature, 0 when absent.
    pub fn coefficient_of(&self, monomial: &[u32], trig_atoms: &[TrigAtom], input_power: u32) -> f64 {
        let mut trig = trig_atoms.to_vec();
        trig.sort();
        let key = Signature { monomial: monomial.to_vec(), trig, input_power };
        self.terms.iter().find(|t| t.sig == key).map_or(0.0, |t| t.coefficient)
    }

    /// Coefficient of a pure monomial term without trig or input factors.
    pub fn monomial_coefficient(&self, monomial: &[u32]) -> f64 {
        self.coefficient_of(monomial, &[], 0)
    }

    /// Largest coefficient difference between two expressions.
    pub fn max_coefficient_distance(&self, other: &Expression) -> Result<f64, ExprError> {
        Ok(self.sub(other)?.max_abs_coefficient())
    }

    pub fn parse(text: &str, n_states: usize) -> Result<Expression, ExprError> {
        Parser::new(text, n_states).parse()
    }
}

fn unit(n: usize, i: usize) -> Vec<u32> {
    let mut v = vec![0; n];
    v[i] = 1;
    v
}

pub(crate) fn format_number(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, t) in self.terms.iter().enumerate() {
            let neg = t.coefficient < 0.0;
            match (i, neg) {
                (0, true) => write!(f, "-")?,
                (0, false) => {}
                (_, true) => write!(f, " - ")?,
                (_, false) => write!(f, " + ")?,
            }
            let mag = t.coefficient.abs();
            let factors = t.factors();
            if factors.is_empty() {
                write!(f, "{}", format_number(mag))?;
            } else if mag == 1.0 {
                write!(f, "{}", factors.join("*"))?;
            } else {
                write!(f, "{}*{}", format_number(mag), factors.join("*"))?;
            }
        }
        Ok(())
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    n: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, n: usize) -> Self {
        Parser { src, pos: 0, n }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Parse { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected '{c}'"))
        }
    }

    fn parse(mut self) -> Result<Expression, ExprError> {
        let mut terms = Vec::new();
        self.skip_ws();
        let mut sign = if self.eat('-') {
            -1.0
        } else {
            self.eat('+');
            1.0
        };
        loop {
            let mut t = self.term()?;
            t.coefficient *= sign;
            terms.push(t);
            self.skip_ws();
            if self.eat('+') {
                sign = 1.0;
            } else if self.eat('-') {
                sign = -1.0;
            } else {
                break;
            }
        }
        self.skip_ws();
        if self.pos != self.src.len() {
            return self.err("unexpected trailing input");
        }
        Ok(Expression::from_terms_unchecked(self.n, terms))
    }

    fn term(&mut self) -> Result<Term, ExprError> {
        let mut t = Term::new(1.0, vec![0; self.n], vec![], 0);
        loop {
            self.factor(&mut t)?;
            if !self.eat('*') {
                break;
            }
        }
        t.sig.trig.sort();
        Ok(t)
    }

    fn ident(&mut self) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphabetic() {
                self.pos += 1;
            } else {
                break;
            }
        }
        &self.src[start..self.pos]
    }

    fn integer(&mut self) -> Result<u32, ExprError> {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        self.src[start..self.pos].parse().or_else(|_| self.err("expected integer"))
    }

    fn var_index(&mut self) -> Result<usize, ExprError> {
        let k = self.integer()? as usize;
        if k == 0 || k > self.n {
            return self.err(format!("state x{k} out of range for {} states", self.n));
        }
        Ok(k - 1)
    }

    fn power(&mut self) -> Result<u32, ExprError> {
        if self.eat('^') {
            self.integer()
        } else {
            Ok(1)
        }
    }

    fn number(&mut self) -> Result<f64, ExprError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() {
            let c = bytes[self.pos] as char;
            let exp_sign =
                (c == '-' || c == '+') && self.pos > start && matches!(bytes[self.pos - 1] as char, 'e' | 'E');
            if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.src[start..self.pos].parse().or_else(|_| self.err("bad number"))
    }

    fn factor(&mut self, t: &mut Term) -> Result<(), ExprError> {
        self.skip_ws();
        match self.peek() {
            Some(c) if c.is_ascii_digit() || c == '.' => {
                t.coefficient *= self.number()?;
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let save = self.pos;
                let id = self.ident();
                match id {
                    "x" => {
                        let i = self.var_index()?;
                        t.sig.monomial[i] += self.power()?;
                    }
                    "u" => t.sig.input_power += self.power()?,
                    "sin" | "cos" => {
                        self.expect('(')?;
                        self.skip_ws();
                        let freq = if matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                            let j = self.integer()?;
                            self.expect('*')?;
                            j
                        } else {
                            1
                        };
                        if freq == 0 {
                            return self.err("trig frequency must be >= 1");
                        }
                        self.skip_ws();
                        if self.ident() != "x" {
                            return self.err("expected state variable inside trig");
                        }
                        let var = self.var_index()?;
                        self.expect(')')?;
                        let kind = if id == "sin" { TrigKind::Sin } else { TrigKind::Cos };
                        t.sig.trig.push(TrigAtom { var, freq, kind });
                    }
                    _ => {
                        self.pos = save;
                        return self.err(format!("unknown symbol '{id}'"));
                    }
                }
            }
            _ => return self.err("expected factor"),
        }
        Ok(())
    }
}
