//! Lie derivatives, relative degree and normal-form coordinates.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::dictionary::Library;
use crate::dynamics::ControlAffineSystem;
use crate::symexpr::{ExprError, Expression};

#[derive(Debug, Error, PartialEq)]
pub enum LieError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("vector field has {field} components for an expression over {n} states")]
    FieldLength { field: usize, n: usize },
    #[error("relative degree is undefined up to order {0}")]
    Undefined(usize),
    #[error("internal dynamics present: relative degree {r} < {n} states")]
    InternalDynamics { r: usize, n: usize },
    #[error("recursion order {order} out of range 0..={max}")]
    OrderOutOfRange { order: usize, max: usize },
    #[error("coefficient shape mismatch: {0}")]
    Shape(String),
}

/// Derivative of `e` along the vector field `field`: `sum_i de/dx_i field_i`.
pub fn lie_along(e: &Expression, field: &[Expression]) -> Result<Expression, LieError> {
    if field.len() != e.n_states() {
        return Err(LieError::FieldLength { field: field.len(), n: e.n_states() });
    }
    let mut acc = Expression::zero(e.n_states());
    for (i, fi) in field.iter().enumerate() {
        if fi.is_empty() {
            continue;
        }
        let d = e.partial(i)?;
        if d.is_empty() {
            continue;
        }
        acc = acc.add(&d.mul(fi)?)?;
    }
    Ok(acc)
}

pub fn lie_f(e: &Expression, sys: &ControlAffineSystem) -> Result<Expression, LieError> {
    lie_along(e, sys.f())
}

pub fn lie_g(e: &Expression, sys: &ControlAffineSystem) -> Result<Expression, LieError> {
    lie_along(e, sys.g())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LieChain {
    pub c: Expression,
    /// `[Lf^0 c, Lf^1 c, ..., Lf^r c]` (up to `Lf^max_r c` when undefined).
    pub lf_powers: Vec<Expression>,
    /// `[Lg Lf^0 c, ..., Lg Lf^{r-1} c]`.
    pub lg_mixed: Vec<Expression>,
    pub relative_degree: Option<usize>,
}

impl LieChain {
    pub fn n_states(&self) -> usize {
        self.c.n_states()
    }

    pub fn require_degree(&self) -> Result<usize, LieError> {
        self.relative_degree.ok_or(LieError::Undefined(self.lg_mixed.len()))
    }

    /// `Lg Lf^{r-1} c`.
    pub fn decoupling(&self) -> Result<&Expression, LieError> {
        let r = self.require_degree()?;
        Ok(&self.lg_mixed[r - 1])
    }

    pub fn report(&self) -> ChainReport {
        ChainReport {
            relative_degree: self.relative_degree,
            lf_powers: self.lf_powers.iter().map(|e| e.to_string()).collect(),
            lg_mixed: self.lg_mixed.iter().map(|e| e.to_string()).collect(),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, e) in self.lf_powers.iter().enumerate() {
            s.push_str(&format!("Lf^{k} c(x) = {e}\n"));
        }
        for (k, e) in self.lg_mixed.iter().enumerate() {
            s.push_str(&format!("Lg Lf^{k} c(x) = {e}\n"));
        }
        match self.relative_degree {
            Some(r) => s.push_str(&format!("relative degree r = {r}\n")),
            None => s.push_str("relative degree undefined\n"),
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainReport {
    pub relative_degree: Option<usize>,
    pub lf_powers: Vec<String>,
    pub lg_mixed: Vec<String>,
}

/// Smallest `r <= max_r` with `Lg Lf^{r-1} c` not zero at tolerance `tol`.
pub fn relative_degree(sys: &ControlAffineSystem, tol: f64, max_r: usize) -> Result<LieChain, LieError> {
    let c = sys.c().clone();
    let mut lf_powers = vec![c.clone()];
    let mut lg_mixed = Vec::new();
    let mut degree = None;
    for r in 1..=max_r {
        let prev = &lf_powers[r - 1];
        let lg = lie_g(prev, sys)?;
        let next = lie_f(prev, sys)?;
        let found = !lg.is_zero(tol);
        lg_mixed.push(lg);
        lf_powers.push(next);
        if found {
            degree = Some(r);
            break;
        }
    }
    Ok(LieChain { c, lf_powers, lg_mixed, relative_degree: degree })
}

/// Coordinates `[c, Lf c, ..., Lf^{n-1} c]` for a full-relative-degree chain.
pub fn normal_form(sys: &ControlAffineSystem, chain: &LieChain) -> Result<Vec<Expression>, LieError> {
    let n = sys.n_states();
    let r = chain.require_degree()?;
    if r < n {
        return Err(LieError::InternalDynamics { r, n });
    }
    Ok(chain.lf_powers[..n].to_vec())
}

/// Text rendering of the transformed system in normal-form coordinates.
pub fn render_normal_form(chain: &LieChain, coordinates: &[Expression]) -> String {
    let n = coordinates.len();
    let mut s = String::new();
    for (i, q) in coordinates.iter().enumerate() {
        s.push_str(&format!("z{} = {}\n", i + 1, q));
    }
    for i in 1..n {
        s.push_str(&format!("z{}' = z{}\n", i, i + 1));
    }
    if let (Some(lf), Some(lg)) = (chain.lf_powers.get(n), chain.lg_mixed.get(n - 1)) {
        s.push_str(&format!("z{n}' = {lf} + ({lg})*u\n"));
    }
    s.push_str("y = z1\n");
    s
}

/// One level of the dictionary recursion: a `p_y x (p_x * n)` array of
/// expressions `N[j][a*n + l]` such that
/// `Lf^k c = sum_j sum_{a,l} zeta_j N[j][a*n+l] Xi_tilde[a][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NMatrix {
    pub order: usize,
    pub n_states: usize,
    pub p_x: usize,
    pub entries: Vec<Vec<Expression>>,
}

impl NMatrix {
    /// Contracts each row with `xi_tilde`, giving `Lf^k phi_j` per row.
    pub fn contract_rows(&self, xi_tilde: &DMatrix<f64>) -> Result<Vec<Expression>, LieError> {
        let n = self.n_states;
        self.entries
            .iter()
            .map(|row| {
                let mut acc = Expression::zero(n);
                for a in 0..self.p_x {
                    for l in 0..n {
                        let w = xi_tilde[(a, l)];
                        if w != 0.0 {
                            acc = acc.add(&row[a * n + l].scale(w))?;
                        }
                    }
                }
                Ok(acc)
            })
            .collect()
    }

    /// `zeta^T N Xi_tilde`.
    pub fn contract(&self, zeta: &DVector<f64>, xi_tilde: &DMatrix<f64>) -> Result<Expression, LieError> {
        let rows = self.contract_rows(xi_tilde)?;
        let mut acc = Expression::zero(self.n_states);
        for (j, r) in rows.iter().enumerate() {
            if zeta[j] != 0.0 {
                acc = acc.add(&r.scale(zeta[j]))?;
            }
        }
        Ok(acc)
    }
}

fn check_xi(lib: &Library, xi_tilde: &DMatrix<f64>) -> Result<(), LieError> {
    if xi_tilde.shape() != (lib.p_x(), lib.n_states) {
        return Err(LieError::Shape(format!(
            "Xi_tilde is {:?}, library needs ({}, {})",
            xi_tilde.shape(),
            lib.p_x(),
            lib.n_states
        )));
    }
    Ok(())
}

/// Builds `N_1, ..., N_order` by differentiating the previous level
/// (contracted with `xi_tilde`) and multiplying by the drift library:
/// `N_1 = (dPhi/dx)^T theta_f`, `N_{k+1} = N_k' theta_f`.
pub fn n_recursion(lib: &Library, xi_tilde: &DMatrix<f64>, order: usize) -> Result<Vec<NMatrix>, LieError> {
    let n = lib.n_states;
    if order > n {
        return Err(LieError::OrderOutOfRange { order, max: n });
    }
    check_xi(lib, xi_tilde)?;
    let theta = &lib.theta_f_entries;
    let mut out: Vec<NMatrix> = Vec::with_capacity(order);
    let mut prev_rows: Vec<Expression> = lib.phi_entries.clone();
    for k in 1..=order {
        let mut entries = Vec::with_capacity(prev_rows.len());
        for p in &prev_rows {
            let grads: Vec<Expression> = (0..n).map(|l| p.partial(l)).collect::<Result<_, _>>()?;
            let mut row = Vec::with_capacity(theta.len() * n);
            for th in theta {
                for g in &grads {
                    row.push(g.mul(th)?);
                }
            }
            entries.push(row);
        }
        let level = NMatrix { order: k, n_states: n, p_x: theta.len(), entries };
        prev_rows = level.contract_rows(xi_tilde)?;
        out.push(level);
    }
    Ok(out)
}

/// `Lf^k c` of the coefficient model via the dictionary recursion.
pub fn lf_power_via_n(
    lib: &Library,
    zeta: &DVector<f64>,
    xi_tilde: &DMatrix<f64>,
    k: usize,
) -> Result<Expression, LieError> {
    if zeta.len() != lib.p_y() {
        return Err(LieError::Shape(format!("zeta has {} entries, library needs {}", zeta.len(), lib.p_y())));
    }
    if k == 0 {
        let mut c = Expression::zero(lib.n_states);
        for (j, phi) in lib.phi_entries.iter().enumerate() {
            c = c.add(&phi.scale(zeta[j]))?;
        }
        return Ok(c);
    }
    let levels = n_recursion(lib, xi_tilde, k)?;
    levels[k - 1].contract(zeta, xi_tilde)
}
