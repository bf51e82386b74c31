//! Stacked sparse regression of drift, input field and output map under a
//! relative-degree constraint.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::dictionary::{evaluate_l_matrix, DictionaryError, DictionarySet, Library, LibrarySpec};
use crate::dynamics::{ControlAffineSystem, DynamicsError};
use crate::lie::{lie_along, LieError};
use crate::linalg::{eq_lstsq, lstsq, select_columns};
use crate::symexpr::{ExprError, Expression};

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error("invalid regression config: {0}")]
    InvalidConfig(String),
    #[error("dataset has no derivative columns")]
    MissingDerivatives,
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("constraint order {r} exceeds the number of states {n}")]
    OrderTooLarge { r: usize, n: usize },
    #[error("alternating solve did not converge in {iterations} iterations (last change {change:e})")]
    NonConvergence { iterations: usize, change: f64, diagnostics: Box<Diagnostics> },
    #[error("infeasible: thresholding emptied {blocks:?}; lower lambda or widen the library")]
    Infeasible { blocks: Vec<String>, model: Box<SparseModel> },
    #[error("constraint residual {residual:e} exceeds tolerance {tol:e}")]
    ConstraintViolation { residual: f64, tol: f64, model: Box<SparseModel> },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Plain stacked STLS without coupling.
    Off,
    /// One equation per sample and order.
    PerSample,
    /// Equations summed over samples, one per order.
    Aggregated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    AlternatingConstrained,
    Penalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub lambda: f64,
    /// Threshold/re-solve sweeps per block solve.
    pub max_outer_iters: usize,
    /// Alternations between the state block and the output block.
    pub max_alt_iters: usize,
    pub constraint_tol: f64,
    /// Convergence tolerance on the largest coefficient change.
    pub coef_tol: f64,
    pub constraint_mode: ConstraintMode,
    pub solver_mode: SolverMode,
    pub penalty_weight: f64,
    /// Target relative degree; constraints `Lg Lf^k c = 0` for `k < r - 1`.
    pub relative_degree: usize,
    pub normalize_zeta: bool,
    pub normalize_columns: bool,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            lambda: 0.05,
            max_outer_iters: 10,
            max_alt_iters: 50,
            constraint_tol: 1e-6,
            coef_tol: 1e-9,
            constraint_mode: ConstraintMode::PerSample,
            solver_mode: SolverMode::AlternatingConstrained,
            penalty_weight: 1e8,
            relative_degree: 2,
            normalize_zeta: true,
            normalize_columns: false,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<(), RegressionError> {
        let bad = |m: &str| Err(RegressionError::InvalidConfig(m.to_string()));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and >= 0");
        }
        if self.max_outer_iters == 0 || self.max_alt_iters == 0 {
            return bad("iteration limits must be positive");
        }
        if !(self.constraint_tol > 0.0 && self.coef_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.penalty_weight.is_finite() && self.penalty_weight > 0.0) {
            return bad("penalty_weight must be positive");
        }
        if self.relative_degree == 0 {
            return bad("relative_degree must be >= 1");
        }
        Ok(())
    }
}

/// Coefficient blocks: `xi_tilde` is `p_x x n`, `xi_hat` is `p_u x n`, `zeta` has `p_y` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub xi_tilde: DMatrix<f64>,
    pub xi_hat: DMatrix<f64>,
    pub zeta: DVector<f64>,
}

fn combine(entries: &[Expression], weights: impl Iterator<Item = f64>, n: usize) -> Expression {
    let mut acc = Expression::zero(n);
    for (e, w) in entries.iter().zip(weights) {
        if w != 0.0 {
            acc = acc.add(&e.scale(w)).expect("library entries share the state count");
        }
    }
    acc
}

impl Coefficients {
    pub fn zeros(lib: &Library) -> Self {
        let n = lib.n_states;
        Coefficients {
            xi_tilde: DMatrix::zeros(lib.p_x(), n),
            xi_hat: DMatrix::zeros(lib.p_u(), n),
            zeta: DVector::zeros(lib.p_y()),
        }
    }

    fn check(&self, lib: &Library) -> Result<(), RegressionError> {
        let n = lib.n_states;
        if self.xi_tilde.shape() != (lib.p_x(), n)
            || self.xi_hat.shape() != (lib.p_u(), n)
            || self.zeta.len() != lib.p_y()
        {
            return Err(RegressionError::Malformed("coefficient shapes do not match the library".into()));
        }
        Ok(())
    }

    pub fn drift(&self, lib: &Library) -> Vec<Expression> {
        (0..lib.n_states)
            .map(|l| combine(&lib.theta_f_entries, self.xi_tilde.column(l).iter().copied(), lib.n_states))
            .collect()
    }

    /// Input vector field with the `u` factor removed.
    pub fn input_field(&self, lib: &Library) -> Vec<Expression> {
        let stripped = lib.theta_g_stripped();
        (0..lib.n_states).map(|l| combine(&stripped, self.xi_hat.column(l).iter().copied(), lib.n_states)).collect()
    }

    pub fn output_map(&self, lib: &Library) -> Expression {
        combine(&lib.phi_entries, self.zeta.iter().copied(), lib.n_states)
    }

    pub fn max_change(&self, other: &Coefficients) -> f64 {
        let a = (&self.xi_tilde - &other.xi_tilde).amax();
        let b = (&self.xi_hat - &other.xi_hat).amax();
        let c = if self.zeta.is_empty() { 0.0 } else { (&self.zeta - &other.zeta).amax() };
        a.max(b).max(c)
    }

    /// State block packed per state: `[xi_tilde_1, xi_hat_1, ..., xi_tilde_n, xi_hat_n]`.
    fn pack_states(&self) -> DVector<f64> {
        let (p_x, n) = self.xi_tilde.shape();
        let p_u = self.xi_hat.nrows();
        let w = p_x + p_u;
        let mut v = DVector::zeros(n * w);
        for l in 0..n {
            v.rows_mut(l * w, p_x).copy_from(&self.xi_tilde.column(l));
            v.rows_mut(l * w + p_x, p_u).copy_from(&self.xi_hat.column(l));
        }
        v
    }

    fn set_state(&mut self, l: usize, block: &DVector<f64>) {
        let p_x = self.xi_tilde.nrows();
        let p_u = self.xi_hat.nrows();
        self.xi_tilde.set_column(l, &block.rows(0, p_x));
        self.xi_hat.set_column(l, &block.rows(p_x, p_u));
    }

    fn state_block(&self, l: usize) -> DVector<f64> {
        let p_x = self.xi_tilde.nrows();
        let p_u = self.xi_hat.nrows();
        let mut v = DVector::zeros(p_x + p_u);
        v.rows_mut(0, p_x).copy_from(&self.xi_tilde.column(l));
        v.rows_mut(p_x, p_u).copy_from(&self.xi_hat.column(l));
        v
    }
}

/// Joint linear system `A eta = z` over all blocks.
///
/// `A` is `(n+1) m x P` with `[theta_f theta_g]` repeated block-diagonally
/// per state and `phi` in the last block; `eta = [xi_tilde_1, xi_hat_1, ..., zeta]`.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    pub a: DMatrix<f64>,
    pub z: DVector<f64>,
    pub n_states: usize,
    pub p_x: usize,
    pub p_u: usize,
    pub p_y: usize,
}

pub fn build_stacked(set: &DictionarySet, d: &Dataset) -> Result<StackedSystem, RegressionError> {
    let xdot = d.derivatives().ok_or(RegressionError::MissingDerivatives)?;
    let (m, n) = (set.n_samples(), set.n_states());
    let (p_x, p_u, p_y) = (set.theta_f.ncols(), set.theta_g.ncols(), set.phi.ncols());
    let w = p_x + p_u;
    let mut a = DMatrix::zeros((n + 1) * m, n * w + p_y);
    let mut z = DVector::zeros((n + 1) * m);
    for l in 0..n {
        a.view_mut((l * m, l * w), (m, p_x)).copy_from(&set.theta_f);
        a.view_mut((l * m, l * w + p_x), (m, p_u)).copy_from(&set.theta_g);
        z.rows_mut(l * m, m).copy_from(&xdot.column(l));
    }
    a.view_mut((n * m, n * w), (m, p_y)).copy_from(&set.phi);
    z.rows_mut(n * m, m).copy_from(&DVector::from_column_slice(d.output()));
    Ok(StackedSystem { a, z, n_states: n, p_x, p_u, p_y })
}

impl StackedSystem {
    pub fn pack(&self, c: &Coefficients) -> DVector<f64> {
        let states = c.pack_states();
        let mut v = DVector::zeros(states.len() + self.p_y);
        v.rows_mut(0, states.len()).copy_from(&states);
        v.rows_mut(states.len(), self.p_y).copy_from(&c.zeta);
        v
    }

    pub fn unpack(&self, eta: &DVector<f64>) -> Coefficients {
        let (n, p_x, p_u) = (self.n_states, self.p_x, self.p_u);
        let w = p_x + p_u;
        let mut c = Coefficients {
            xi_tilde: DMatrix::zeros(p_x, n),
            xi_hat: DMatrix::zeros(p_u, n),
            zeta: eta.rows(n * w, self.p_y).into_owned(),
        };
        for l in 0..n {
            c.set_state(l, &eta.rows(l * w, w).into_owned());
        }
        c
    }
}

/// The relative-degree-two constraint in matrix form: per sample
/// `(zeta . L_i)(G_i . xi_hat_k) = 0`, aggregated `zeta^T M xi_hat_k = 0`
/// with `M = sum_i L_i^T G_i`.
#[derive(Debug, Clone)]
pub struct ConstraintM {
    pub l: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub aggregated: DMatrix<f64>,
    /// Every input sample is zero, so the constraint carries no information.
    pub vacuous: bool,
}

pub fn build_constraint_m(set: &DictionarySet, d: &Dataset) -> ConstraintM {
    let l = evaluate_l_matrix(&set.library, d);
    let g = set.theta_g.clone();
    let aggregated = l.transpose() * &g;
    let vacuous = d.input().iter().all(|&u| u == 0.0);
    if vacuous {
        log::warn!("input is identically zero: the relative-degree constraint is vacuous");
    }
    ConstraintM { l, g, aggregated, vacuous }
}

impl ConstraintM {
    pub fn residuals(&self, zeta: &DVector<f64>, xi_hat_k: &DVector<f64>) -> DVector<f64> {
        (&self.l * zeta).component_mul(&(&self.g * xi_hat_k))
    }

    pub fn aggregated_residual(&self, zeta: &DVector<f64>, xi_hat_k: &DVector<f64>) -> f64 {
        zeta.dot(&(&self.aggregated * xi_hat_k))
    }
}

/// Residuals `R_{k,i} = (Lg Lf^k c)(x_i) u_i` for `k = 0..r-2` of a
/// coefficient model, with their linearisations in each block.
pub struct GeneralConstraint {
    pub order: usize,
    points: Vec<Vec<f64>>,
    u: Vec<f64>,
    theta_g: DMatrix<f64>,
    theta_f_entries: Vec<Expression>,
    phi_entries: Vec<Expression>,
    f: Vec<Expression>,
    g: Vec<Expression>,
    /// `Lf^k c`, `k = 0..r-2`.
    lf: Vec<Expression>,
    lg_lf: Vec<Expression>,
    p_x: usize,
    p_u: usize,
}

pub fn build_general_constraint(
    coeffs: &Coefficients,
    set: &DictionarySet,
    d: &Dataset,
    r: usize,
) -> Result<GeneralConstraint, RegressionError> {
    let lib = &set.library;
    let n = lib.n_states;
    if r > n {
        return Err(RegressionError::OrderTooLarge { r, n });
    }
    coeffs.check(lib)?;
    let f = coeffs.drift(lib);
    let g = coeffs.input_field(lib);
    let mut lf = Vec::new();
    let mut lg_lf = Vec::new();
    let mut cur = coeffs.output_map(lib);
    for k in 0..r.saturating_sub(1) {
        if k > 0 {
            cur = lie_along(&cur, &f)?;
        }
        lg_lf.push(lie_along(&cur, &g)?);
        lf.push(cur.clone());
    }
    Ok(GeneralConstraint {
        order: r,
        points: (0..d.len()).map(|i| d.state(i)).collect(),
        u: d.input().to_vec(),
        theta_g: set.theta_g.clone(),
        theta_f_entries: lib.theta_f_entries.clone(),
        phi_entries: lib.phi_entries.clone(),
        f,
        g,
        lf,
        lg_lf,
        p_x: lib.p_x(),
        p_u: lib.p_u(),
    })
}

impl GeneralConstraint {
    fn n_orders(&self) -> usize {
        self.lf.len()
    }

    fn m(&self) -> usize {
        self.points.len()
    }

    /// `(r-1) x m` matrix of per-sample residuals.
    pub fn residual_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_orders(), self.m(), |k, i| self.lg_lf[k].eval(&self.points[i], 0.0) * self.u[i])
    }

    /// Residual vector in the layout of `mode` (order-major per sample, or summed per order).
    pub fn residual_vector(&self, mode: ConstraintMode) -> DVector<f64> {
        let r = self.residual_matrix();
        match mode {
            ConstraintMode::Aggregated => DVector::from_fn(r.nrows(), |k, _| r.row(k).sum()),
            _ => DVector::from_iterator(r.len(), r.transpose().iter().copied()),
        }
    }

    pub fn max_residual(&self, mode: ConstraintMode) -> f64 {
        let v = self.residual_vector(mode);
        if v.is_empty() {
            0.0
        } else {
            v.amax()
        }
    }

    fn per_sample_rows(&self, cols: usize, mut value: impl FnMut(usize, usize, usize) -> f64) -> DMatrix<f64> {
        let m = self.m();
        let mut out = DMatrix::zeros(self.n_orders() * m, cols);
        for k in 0..self.n_orders() {
            for i in 0..m {
                for c in 0..cols {
                    out[(k * m + i, c)] = value(k, i, c);
                }
            }
        }
        out
    }

    fn shape_rows(&self, rows: DMatrix<f64>, mode: ConstraintMode) -> DMatrix<f64> {
        if mode != ConstraintMode::Aggregated {
            return rows;
        }
        let m = self.m();
        DMatrix::from_fn(self.n_orders(), rows.ncols(), |k, c| rows.view((k * m, c), (m, 1)).sum())
    }

    /// Rows of the constraint as a linear map of `zeta` (exact: the
    /// residual is linear in `zeta`).
    pub fn zeta_jacobian(&self, mode: ConstraintMode) -> Result<DMatrix<f64>, RegressionError> {
        let p_y = self.phi_entries.len();
        let mut lg_phi: Vec<Vec<Expression>> = vec![Vec::with_capacity(p_y); self.n_orders()];
        for phi in &self.phi_entries {
            let mut cur = phi.clone();
            for (k, row) in lg_phi.iter_mut().enumerate() {
                if k > 0 {
                    cur = lie_along(&cur, &self.f)?;
                }
                row.push(lie_along(&cur, &self.g)?);
            }
        }
        let rows = self.per_sample_rows(p_y, |k, i, j| lg_phi[k][j].eval(&self.points[i], 0.0) * self.u[i]);
        Ok(self.shape_rows(rows, mode))
    }

    /// Jacobian of the residual with respect to the packed state block.
    /// Columns outside `active` are left at zero.
    pub fn state_jacobian(&self, mode: ConstraintMode, active: &[bool]) -> Result<DMatrix<f64>, RegressionError> {
        let n = self.f.len();
        let (p_x, p_u) = (self.p_x, self.p_u);
        let w = p_x + p_u;
        let m = self.m();
        let mut rows = DMatrix::zeros(self.n_orders() * m, n * w);
        // d(Lf^k c)/dx_l for the input-field block
        let grads: Vec<Vec<Expression>> = self
            .lf
            .iter()
            .map(|e| (0..n).map(|l| e.partial(l)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<_, _>>()?;
        for l in 0..n {
            for j in 0..p_u {
                let col = l * w + p_x + j;
                if !active[col] {
                    continue;
                }
                for k in 0..self.n_orders() {
                    for i in 0..m {
                        rows[(k * m + i, col)] = grads[k][l].eval(&self.points[i], 0.0) * self.theta_g[(i, j)];
                    }
                }
            }
        }
        // drift block: D_0 = 0, D_k = Lf D_{k-1} + (d Lf^{k-1} c / dx_l) theta_a
        if self.n_orders() > 1 {
            for l in 0..n {
                for a in 0..p_x {
                    let col = l * w + a;
                    if !active[col] {
                        continue;
                    }
                    let mut dk = Expression::zero(n);
                    for k in 1..self.n_orders() {
                        dk = lie_along(&dk, &self.f)?.add(&grads[k - 1][l].mul(&self.theta_f_entries[a])?)?;
                        let lg = lie_along(&dk, &self.g)?;
                        if lg.is_empty() {
                            continue;
                        }
                        for i in 0..m {
                            rows[(k * m + i, col)] = lg.eval(&self.points[i], 0.0) * self.u[i];
                        }
                    }
                }
            }
        }
        Ok(self.shape_rows(rows, mode))
    }
}

/// Solver bookkeeping reported with every model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    pub state_residual_norms: Vec<f64>,
    pub output_residual_norm: f64,
    pub constraint_residual: f64,
    pub constraint_mode: Option<ConstraintMode>,
    pub relative_degree: usize,
    pub active_xi_tilde: usize,
    pub active_xi_hat: usize,
    pub active_zeta: usize,
    pub alt_iterations: usize,
    pub converged: bool,
    pub forced_blocks: Vec<String>,
    pub zeta_scale: f64,
    pub derivatives_estimated: bool,
    pub warnings: Vec<String>,
}

/// Identified model: coefficients, the reconstructed expressions and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseModel {
    pub library: Library,
    pub coefficients: Coefficients,
    pub f: Vec<Expression>,
    /// Input field with `u` stripped.
    pub g: Vec<Expression>,
    pub c: Expression,
    pub diagnostics: Diagnostics,
}

impl SparseModel {
    pub fn from_coefficients(
        library: Library,
        coefficients: Coefficients,
        diagnostics: Diagnostics,
    ) -> Result<Self, RegressionError> {
        coefficients.check(&library)?;
        let f = coefficients.drift(&library);
        let g = coefficients.input_field(&library);
        let c = coefficients.output_map(&library);
        Ok(SparseModel { library, coefficients, f, g, c, diagnostics })
    }

    pub fn n_states(&self) -> usize {
        self.library.n_states
    }

    pub fn system(&self) -> Result<ControlAffineSystem, RegressionError> {
        Ok(ControlAffineSystem::new(self.f.clone(), self.g.clone(), self.c.clone())?)
    }

    /// Identified equations, one line per state plus the output.
    pub fn equations(&self) -> String {
        let n = self.n_states();
        let mut s = String::new();
        for l in 0..n {
            let rhs = self.f[l].add(&self.g[l].mul(&Expression::input(n)).expect("same n")).expect("same n");
            let _ = writeln!(s, "x{}' = {}", l + 1, rhs);
        }
        let _ = writeln!(s, "y = {}", self.c);
        s
    }

    fn table_rows(&self) -> Vec<(String, Vec<f64>)> {
        let lib = &self.library;
        let n = self.n_states();
        let co = &self.coefficients;
        let mut rows = Vec::new();
        let zeta_of = |e: &Expression| lib.phi_entries.iter().position(|p| p == e).map(|j| co.zeta[j]).unwrap_or(0.0);
        for (a, e) in lib.theta_f_entries.iter().enumerate() {
            let mut v = Vec::with_capacity(2 * n + 1);
            for l in 0..n {
                v.push(co.xi_tilde[(a, l)]);
                v.push(0.0);
            }
            v.push(zeta_of(e));
            rows.push((e.to_string(), v));
        }
        for (j, e) in lib.theta_g_entries.iter().enumerate() {
            let mut v = Vec::with_capacity(2 * n + 1);
            for l in 0..n {
                v.push(0.0);
                v.push(co.xi_hat[(j, l)]);
            }
            v.push(0.0);
            rows.push((e.to_string(), v));
        }
        for (j, e) in lib.phi_entries.iter().enumerate() {
            if lib.theta_f_entries.contains(e) {
                continue;
            }
            let mut v = vec![0.0; 2 * n];
            v.push(co.zeta[j]);
            rows.push((e.to_string(), v));
        }
        rows
    }

    fn table_header(&self) -> Vec<String> {
        let mut h = vec!["entry".to_string()];
        for l in 1..=self.n_states() {
            h.push(format!("xi_tilde_{l}"));
            h.push(format!("xi_hat_{l}"));
        }
        h.push("zeta".into());
        h
    }

    /// Coefficient table: drift entries, then input entries, then output
    /// entries not already listed.
    pub fn coefficient_table_csv(&self) -> String {
        let mut s = self.table_header().join(",");
        s.push('\n');
        for (name, vals) in self.table_rows() {
            s.push_str(&name);
            for v in vals {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn coefficient_table_text(&self) -> String {
        let header = self.table_header();
        let rows = self.table_rows();
        let w0 = rows.iter().map(|(n, _)| n.len()).chain([header[0].len()]).max().unwrap_or(5);
        let mut s = format!("{:<w0$}", header[0]);
        for h in &header[1..] {
            let _ = write!(s, " {h:>11}");
        }
        s.push('\n');
        for (name, vals) in rows {
            let _ = write!(s, "{name:<w0$}");
            for v in vals {
                if v == 0.0 {
                    let _ = write!(s, " {:>11}", "0");
                } else {
                    let _ = write!(s, " {v:>11.6}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_file(&self) -> ModelFile {
        let lib = &self.library;
        let strs = |v: &[Expression]| v.iter().map(|e| e.to_string()).collect::<Vec<_>>();
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        ModelFile {
            n_states: lib.n_states,
            library: lib.spec.clone(),
            theta_f_entries: strs(&lib.theta_f_entries),
            theta_g_entries: strs(&lib.theta_g_entries),
            phi_entries: strs(&lib.phi_entries),
            xi_tilde: rows(&self.coefficients.xi_tilde),
            xi_hat: rows(&self.coefficients.xi_hat),
            zeta: self.coefficients.zeta.iter().copied().collect(),
            f: strs(&self.f),
            g: strs(&self.g),
            c: self.c.to_string(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self, RegressionError> {
        let lib = Library::new(&file.library, file.n_states)?;
        let strs = |v: &[Expression]| v.iter().map(|e| e.to_string()).collect::<Vec<_>>();
        if strs(&lib.theta_f_entries) != file.theta_f_entries
            || strs(&lib.theta_g_entries) != file.theta_g_entries
            || strs(&lib.phi_entries) != file.phi_entries
        {
            return Err(RegressionError::Malformed("library entries do not match the library spec".into()));
        }
        let mat = |rows: &[Vec<f64>], p: usize, what: &str| -> Result<DMatrix<f64>, RegressionError> {
            if rows.len() != p || rows.iter().any(|r| r.len() != file.n_states) {
                return Err(RegressionError::Malformed(format!("{what} must be {p} x {}", file.n_states)));
            }
            Ok(DMatrix::from_fn(p, file.n_states, |i, j| rows[i][j]))
        };
        let coefficients = Coefficients {
            xi_tilde: mat(&file.xi_tilde, lib.p_x(), "xi_tilde")?,
            xi_hat: mat(&file.xi_hat, lib.p_u(), "xi_hat")?,
            zeta: DVector::from_column_slice(&file.zeta),
        };
        if coefficients.zeta.len() != lib.p_y() {
            return Err(RegressionError::Malformed(format!("zeta must have {} entries", lib.p_y())));
        }
        if coefficients
            .xi_tilde
            .iter()
            .chain(coefficients.xi_hat.iter())
            .chain(coefficients.zeta.iter())
            .any(|v| !v.is_finite())
        {
            return Err(RegressionError::Malformed("non-finite coefficient".into()));
        }
        SparseModel::from_coefficients(lib, coefficients, file.diagnostics.clone())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), RegressionError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, RegressionError> {
        let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        SparseModel::from_file(&file)
    }
}

/// On-disk model. Expression strings are informational; coefficients and
/// the library spec are authoritative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub n_states: usize,
    pub library: LibrarySpec,
    pub theta_f_entries: Vec<String>,
    pub theta_g_entries: Vec<String>,
    pub phi_entries: Vec<String>,
    pub xi_tilde: Vec<Vec<f64>>,
    pub xi_hat: Vec<Vec<f64>>,
    pub zeta: Vec<f64>,
    pub f: Vec<String>,
    pub g: Vec<String>,
    pub c: String,
    pub diagnostics: Diagnostics,
}

/// Zeroes every entry with magnitude below `lambda`. Returns the thresholded
/// coefficients, the surviving indices and whether nothing survived.
pub fn threshold_pass(coeffs: &DVector<f64>, lambda: f64) -> (DVector<f64>, Vec<usize>, bool) {
    let mut out = coeffs.clone();
    let mut active = Vec::new();
    for (i, v) in out.iter_mut().enumerate() {
        if v.abs() < lambda {
            *v = 0.0;
        } else {
            active.push(i);
        }
    }
    let empty = active.is_empty();
    (out, active, empty)
}

struct StlsOutcome {
    x: DVector<f64>,
    /// Column kept alive to stop a required block from emptying.
    forced: Option<usize>,
    /// Magnitude each column had when it was thresholded away.
    removed: Vec<(usize, f64)>,
}

struct Constraint<'a> {
    c: &'a DMatrix<f64>,
    h: &'a DVector<f64>,
}

fn solve_subset(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    cons: Option<&Constraint>,
    cols: &[usize],
    cfg: &RegressionConfig,
) -> DVector<f64> {
    let mut a_s = select_columns(a, cols);
    let mut scale = vec![1.0; cols.len()];
    if cfg.normalize_columns {
        for (j, s) in scale.iter_mut().enumerate() {
            let norm = a_s.column(j).norm();
            if norm > 0.0 {
                *s = 1.0 / norm;
                a_s.column_mut(j).scale_mut(*s);
            }
        }
    }
    let x = match cons {
        None => lstsq(&a_s, b),
        Some(k) => {
            let mut c_s = select_columns(k.c, cols);
            for (j, s) in scale.iter().enumerate() {
                c_s.column_mut(j).scale_mut(*s);
            }
            match cfg.solver_mode {
                SolverMode::AlternatingConstrained => eq_lstsq(&a_s, b, &c_s, k.h),
                SolverMode::Penalty => {
                    let rho = cfg.penalty_weight.sqrt();
                    let (ma, mc) = (a_s.nrows(), c_s.nrows());
                    let mut big = DMatrix::zeros(ma + mc, cols.len());
                    big.rows_mut(0, ma).copy_from(&a_s);
                    big.rows_mut(ma, mc).copy_from(&(c_s * rho));
                    let mut rhs = DVector::zeros(ma + mc);
                    rhs.rows_mut(0, ma).copy_from(b);
                    rhs.rows_mut(ma, mc).copy_from(&(k.h * rho));
                    lstsq(&big, &rhs)
                }
            }
        }
    };
    DVector::from_iterator(cols.len(), x.iter().zip(&scale).map(|(v, s)| v * s))
}

/// Sequential thresholded least squares started from the support `init`.
fn stls(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    cons: Option<&Constraint>,
    init: &[bool],
    required: &[usize],
    cfg: &RegressionConfig,
) -> StlsOutcome {
    let p = a.ncols();
    let mut active = init.to_vec();
    let mut pinned: Option<usize> = None;
    let mut removed = Vec::new();
    let mut x = DVector::zeros(p);
    for _ in 0..cfg.max_outer_iters {
        let cols: Vec<usize> = (0..p).filter(|&j| active[j]).collect();
        x = DVector::zeros(p);
        if cols.is_empty() {
            break;
        }
        let sub = solve_subset(a, b, cons, &cols, cfg);
        for (v, &j) in sub.iter().zip(&cols) {
            x[j] = *v;
        }
        let small: Vec<usize> =
            cols.iter().copied().filter(|&j| x[j].abs() < cfg.lambda && Some(j) != pinned).collect();
        if small.is_empty() {
            break;
        }
        for &j in &small {
            active[j] = false;
            removed.push((j, x[j]));
        }
        if !required.is_empty() && pinned.is_none() && required.iter().all(|&j| !active[j]) {
            let keep = required
                .iter()
                .copied()
                .filter(|j| small.contains(j))
                .max_by(|&i, &j| x[i].abs().total_cmp(&x[j].abs()));
            if let Some(j) = keep {
                active[j] = true;
                pinned = Some(j);
            }
        }
    }
    // the sweep budget may run out between a solve and its threshold
    for j in 0..p {
        if !active[j] || (x[j].abs() < cfg.lambda && Some(j) != pinned) {
            x[j] = 0.0;
        }
    }
    StlsOutcome { x, forced: pinned, removed }
}

/// Alternating solver state.
struct Solver<'a> {
    set: &'a DictionarySet,
    d: &'a Dataset,
    cfg: &'a RegressionConfig,
    a_state: DMatrix<f64>,
    xdot: DMatrix<f64>,
    y: DVector<f64>,
    zeta_required: Vec<usize>,
    forced: Vec<String>,
}

impl<'a> Solver<'a> {
    fn new(set: &'a DictionarySet, d: &'a Dataset, cfg: &'a RegressionConfig) -> Result<Self, RegressionError> {
        let xdot = d.derivatives().ok_or(RegressionError::MissingDerivatives)?.clone();
        let (m, p_x, p_u) = (set.n_samples(), set.theta_f.ncols(), set.theta_g.ncols());
        let mut a_state = DMatrix::zeros(m, p_x + p_u);
        a_state.columns_mut(0, p_x).copy_from(&set.theta_f);
        a_state.columns_mut(p_x, p_u).copy_from(&set.theta_g);
        let zeta_required = set
            .library
            .phi_entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.as_constant().is_none())
            .map(|(j, _)| j)
            .collect();
        Ok(Solver {
            set,
            d,
            cfg,
            a_state,
            xdot,
            y: DVector::from_column_slice(d.output()),
            zeta_required,
            forced: Vec::new(),
        })
    }

    fn n(&self) -> usize {
        self.set.n_states()
    }

    fn width(&self) -> usize {
        self.a_state.ncols()
    }

    fn constrained(&self) -> bool {
        self.cfg.constraint_mode != ConstraintMode::Off && self.cfg.relative_degree >= 2
    }

    fn note_forced(&mut self, what: String) {
        if !self.forced.contains(&what) {
            log::warn!("thresholding would empty {what}; kept its largest entry");
            self.forced.push(what);
        }
    }

    fn initial(&mut self) -> Coefficients {
        let mut co = Coefficients::zeros(&self.set.library);
        let all = vec![true; self.width()];
        let mut removed_hat: Vec<(usize, usize, f64)> = Vec::new();
        let p_x = self.set.theta_f.ncols();
        for l in 0..self.n() {
            let out = stls(&self.a_state, &self.xdot.column(l).into_owned(), None, &all, &[], self.cfg);
            co.set_state(l, &out.x);
            removed_hat.extend(out.removed.iter().filter(|(j, _)| *j >= p_x).map(|&(j, v)| (l, j - p_x, v)));
        }
        self.ensure_input_field(&mut co, &removed_hat);
        self.zeta_step(&mut co, None);
        co
    }

    /// Keeps the input field from vanishing entirely.
    fn ensure_input_field(&mut self, co: &mut Coefficients, removed: &[(usize, usize, f64)]) {
        if co.xi_hat.iter().any(|&v| v != 0.0) {
            return;
        }
        if let Some(&(l, j, v)) = removed.iter().max_by(|a, b| a.2.abs().total_cmp(&b.2.abs())) {
            co.xi_hat[(j, l)] = v;
            self.note_forced("xi_hat".into());
        }
    }

    fn zeta_step(&mut self, co: &mut Coefficients, jac: Option<&DMatrix<f64>>) {
        let init: Vec<bool> =
            if jac.is_none() { vec![true; co.zeta.len()] } else { co.zeta.iter().map(|&v| v != 0.0).collect() };
        let h = jac.map(|j| DVector::zeros(j.nrows()));
        let cons = jac.zip(h.as_ref()).map(|(c, h)| Constraint { c, h });
        let out = stls(&self.set.phi, &self.y, cons.as_ref(), &init, &self.zeta_required, self.cfg);
        if out.forced.is_some() {
            self.note_forced("zeta".into());
        }
        co.zeta = out.x;
    }

    fn state_step(&mut self, co: &mut Coefficients) -> Result<(), RegressionError> {
        let mode = self.cfg.constraint_mode;
        let r = self.cfg.relative_degree;
        let gc = build_general_constraint(co, self.set, self.d, r)?;
        let eta0 = co.pack_states();
        let active: Vec<bool> = eta0.iter().map(|&v| v != 0.0).collect();
        let jac = gc.state_jacobian(mode, &active)?;
        let h = if r == 2 { DVector::zeros(jac.nrows()) } else { &jac * &eta0 - gc.residual_vector(mode) };
        let (n, w, m) = (self.n(), self.width(), self.set.n_samples());
        let coupled: Vec<usize> =
            (0..n).filter(|&l| (0..w).any(|c| jac.column(l * w + c).iter().any(|&v| v != 0.0))).collect();
        let p_x = self.set.theta_f.ncols();
        let mut removed_hat = Vec::new();
        for l in (0..n).filter(|l| !coupled.contains(l)) {
            let init: Vec<bool> = active[l * w..(l + 1) * w].to_vec();
            let out = stls(&self.a_state, &self.xdot.column(l).into_owned(), None, &init, &[], self.cfg);
            removed_hat.extend(out.removed.iter().filter(|(j, _)| *j >= p_x).map(|&(j, v)| (l, j - p_x, v)));
            co.set_state(l, &out.x);
        }
        if !coupled.is_empty() {
            let g = coupled.len();
            let mut a = DMatrix::zeros(g * m, g * w);
            let mut b = DVector::zeros(g * m);
            let mut cols = Vec::with_capacity(g * w);
            for (s, &l) in coupled.iter().enumerate() {
                a.view_mut((s * m, s * w), (m, w)).copy_from(&self.a_state);
                b.rows_mut(s * m, m).copy_from(&self.xdot.column(l));
                cols.extend(l * w..(l + 1) * w);
            }
            let c = select_columns(&jac, &cols);
            let init: Vec<bool> = cols.iter().map(|&c| active[c]).collect();
            let cons = Constraint { c: &c, h: &h };
            let out = stls(&a, &b, Some(&cons), &init, &[], self.cfg);
            for (s, &l) in coupled.iter().enumerate() {
                co.set_state(l, &out.x.rows(s * w, w).into_owned());
            }
            for &(j, v) in &out.removed {
                let (s, jj) = (j / w, j % w);
                if jj >= p_x {
                    removed_hat.push((coupled[s], jj - p_x, v));
                }
            }
        }
        self.ensure_input_field(co, &removed_hat);
        Ok(())
    }

    fn alternate(&mut self, co: &mut Coefficients) -> Result<(), RegressionError> {
        self.state_step(co)?;
        let gc = build_general_constraint(co, self.set, self.d, self.cfg.relative_degree)?;
        let jac = gc.zeta_jacobian(self.cfg.constraint_mode)?;
        self.zeta_step(co, Some(&jac));
        Ok(())
    }

    fn finish(&self, mut co: Coefficients, iterations: usize, converged: bool) -> Result<SparseModel, RegressionError> {
        let lib = &self.set.library;
        let n = self.n();
        let mut diag = Diagnostics {
            constraint_mode: Some(self.cfg.constraint_mode),
            relative_degree: self.cfg.relative_degree,
            alt_iterations: iterations,
            converged,
            forced_blocks: self.forced.clone(),
            zeta_scale: 1.0,
            ..Default::default()
        };
        for l in 0..n {
            let res = &self.a_state * co.state_block(l) - self.xdot.column(l);
            diag.state_residual_norms.push(res.norm());
        }
        diag.output_residual_norm = (&self.set.phi * &co.zeta - &self.y).norm();
        if self.cfg.normalize_zeta {
            if let Some(big) = co.zeta.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).filter(|v| *v != 0.0)
            {
                co.zeta /= big;
                co.zeta.iter_mut().filter(|v| v.abs() < self.cfg.lambda).for_each(|v| *v = 0.0);
                diag.zeta_scale = big;
            }
        }
        diag.active_xi_tilde = co.xi_tilde.iter().filter(|&&v| v != 0.0).count();
        diag.active_xi_hat = co.xi_hat.iter().filter(|&&v| v != 0.0).count();
        diag.active_zeta = co.zeta.iter().filter(|&&v| v != 0.0).count();
        if self.set.underdetermined {
            diag.warnings.push("library is wider than the number of samples".into());
        }
        if self.d.input().iter().all(|&u| u == 0.0) {
            diag.warnings.push("input is identically zero; the constraint is vacuous".into());
        }
        let r_check = self.cfg.relative_degree.min(n);
        let gc = build_general_constraint(&co, self.set, self.d, r_check)?;
        let mode = match self.cfg.constraint_mode {
            ConstraintMode::Aggregated => ConstraintMode::Aggregated,
            _ => ConstraintMode::PerSample,
        };
        diag.constraint_residual = gc.max_residual(mode);
        let model = SparseModel::from_coefficients(lib.clone(), co, diag)?;
        if !self.forced.is_empty() {
            return Err(RegressionError::Infeasible { blocks: self.forced.clone(), model: Box::new(model) });
        }
        if self.constrained() && model.diagnostics.constraint_residual > self.cfg.constraint_tol {
            return Err(RegressionError::ConstraintViolation {
                residual: model.diagnostics.constraint_residual,
                tol: self.cfg.constraint_tol,
                model: Box::new(model),
            });
        }
        Ok(model)
    }
}

fn check_setup(set: &DictionarySet, d: &Dataset, cfg: &RegressionConfig) -> Result<(), RegressionError> {
    cfg.validate()?;
    let n = set.n_states();
    if d.n_states() != n || d.len() != set.n_samples() {
        return Err(RegressionError::Dictionary(DictionaryError::DimensionMismatch { data: d.n_states(), dict: n }));
    }
    if cfg.constraint_mode != ConstraintMode::Off && cfg.relative_degree > n {
        return Err(RegressionError::OrderTooLarge { r: cfg.relative_degree, n });
    }
    Ok(())
}

/// Runs the full regression on evaluated dictionaries. `d` must carry derivatives.
pub fn solve(set: &DictionarySet, d: &Dataset, cfg: &RegressionConfig) -> Result<SparseModel, RegressionError> {
    check_setup(set, d, cfg)?;
    let mut solver = Solver::new(set, d, cfg)?;
    let mut co = solver.initial();
    if !solver.forced.is_empty() || !solver.constrained() {
        return solver.finish(co, 0, true);
    }
    let mut change = f64::INFINITY;
    for it in 1..=cfg.max_alt_iters {
        let prev = co.clone();
        solver.alternate(&mut co)?;
        change = co.max_change(&prev);
        log::debug!("alternation {it}: max change {change:e}");
        if !solver.forced.is_empty() || change < cfg.coef_tol {
            return solver.finish(co, it, true);
        }
    }
    let diagnostics = match solver.finish(co, cfg.max_alt_iters, false) {
        Ok(m) => m.diagnostics,
        Err(RegressionError::ConstraintViolation { model, .. }) | Err(RegressionError::Infeasible { model, .. }) => {
            model.diagnostics
        }
        Err(e) => return Err(e),
    };
    Err(RegressionError::NonConvergence { iterations: cfg.max_alt_iters, change, diagnostics: Box::new(diagnostics) })
}

/// Builds the libraries on `d` and solves, estimating derivatives first
/// when the dataset has none.
pub fn identify(d: &Dataset, spec: &LibrarySpec, cfg: &RegressionConfig) -> Result<SparseModel, RegressionError> {
    let (data, estimated) = match d.derivatives() {
        Some(_) => (d.clone(), false),
        None => {
            log::warn!("no derivative columns; estimating them by finite differences");
            (d.estimate_derivatives(false).map_err(|e| RegressionError::InvalidConfig(e.to_string()))?, true)
        }
    };
    let set = Library::new(spec, data.n_states())?.evaluate(&data)?;
    let mut model = solve(&set, &data, cfg)?;
    model.diagnostics.derivatives_estimated = estimated;
    Ok(model)
}

/// One further state/output alternation started from `model`, followed by
/// the same normalisation. A converged model is a fixed point.
pub fn sweep(
    model: &SparseModel,
    set: &DictionarySet,
    d: &Dataset,
    cfg: &RegressionConfig,
) -> Result<SparseModel, RegressionError> {
    check_setup(set, d, cfg)?;
    let mut solver = Solver::new(set, d, cfg)?;
    let mut co = model.coefficients.clone();
    co.zeta *= model.diagnostics.zeta_scale;
    if solver.constrained() {
        solver.alternate(&mut co)?;
    } else {
        let p = solver.width();
        for l in 0..solver.n() {
            let init: Vec<bool> = co.state_block(l).iter().map(|&v| v != 0.0).collect();
            let out = stls(&solver.a_state, &solver.xdot.column(l).into_owned(), None, &init[..p], &[], cfg);
            co.set_state(l, &out.x);
        }
        let init: Vec<bool> = co.zeta.iter().map(|&v| v != 0.0).collect();
        let out = stls(&set.phi, &solver.y, None, &init, &solver.zeta_required, cfg);
        co.zeta = out.x;
    }
    solver.finish(co, model.diagnostics.alt_iterations + 1, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{chain_integrator, integrate, vdp_system, Excitation, InputSignal};

    fn vdp_data(steps: usize) -> Dataset {
        let sys = vdp_system(1.0, 1.0, 1.0);
        integrate(&sys, &[2.0, 0.0], &InputSignal::Open(Excitation::default()), 0.01, steps).unwrap()
    }

    fn spec2() -> LibrarySpec {
        LibrarySpec::default()
    }

    #[test]
    fn threshold_pass_basics() {
        let v = DVector::from_vec(vec![0.01, -0.2, 0.049, 0.05]);
        let (t, act, empty) = threshold_pass(&v, 0.05);
        assert_eq!(t.as_slice(), &[0.0, -0.2, 0.0, 0.05]);
        assert_eq!(act, vec![1, 3]);
        assert!(!empty);
        assert!(threshold_pass(&v, 1.0).2);
    }

    #[test]
    fn stacked_layout() {
        let d = vdp_data(99);
        let set = Library::new(&spec2(), 2).unwrap().evaluate(&d).unwrap();
        let st = build_stacked(&set, &d).unwrap();
        assert_eq!(st.a.shape(), (300, 2 * 20 + 4));
        let mut co = Coefficients::zeros(&set.library);
        co.xi_tilde[(3, 1)] = 1.5;
        co.xi_hat[(0, 0)] = -2.0;
        co.zeta[1] = 0.7;
        let eta = st.pack(&co);
        assert_eq!(st.unpack(&eta), co);
        assert_eq!(eta[20 + 3], 1.5);
        assert_eq!(eta[10], -2.0);
        assert_eq!(eta[41], 0.7);
        let no_deriv =
            Dataset::new(d.times().to_vec(), d.states().clone(), None, d.input().to_vec(), d.output().to_vec())
                .unwrap();
        assert!(matches!(build_stacked(&set, &no_deriv), Err(RegressionError::MissingDerivatives)));
    }

    #[test]
    fn vdp_recovery() {
        let d = vdp_data(99);
        let model = identify(&d, &spec2(), &RegressionConfig::default()).unwrap();
        let n = 2;
        let p = |s: &str| Expression::parse(s, n).unwrap();
        assert!(model.f[0].max_coefficient_distance(&p("x2")).unwrap() < 1e-6, "{}", model.f[0]);
        assert!(model.f[1].max_coefficient_distance(&p("-x1 + 2*x2 - 2*x1^2*x2")).unwrap() < 1e-6, "{}", model.f[1]);
        assert!(model.g[0].is_empty());
        assert!(model.g[1].max_coefficient_distance(&p("1")).unwrap() < 1e-6);
        assert!(model.c.max_coefficient_distance(&p("x1")).unwrap() < 1e-9);
        assert!(model.diagnostics.constraint_residual <= 1e-6);
        assert!(model.diagnostics.converged);
    }

    #[test]
    fn constraint_removes_spurious_input_on_output_state() {
        // data generated with u entering x1 too; the constraint must zero it
        let n = 2;
        let p = |s: &str| Expression::parse(s, n).unwrap();
        let sys = ControlAffineSystem::new(vec![p("x2"), p("-x1 + 2*x2 - 2*x1^2*x2")], vec![p("0.3"), p("1")], p("x1"))
            .unwrap();
        let d = integrate(&sys, &[2.0, 0.0], &InputSignal::Open(Excitation::default()), 0.01, 99).unwrap();
        let free = RegressionConfig { constraint_mode: ConstraintMode::Off, ..Default::default() };
        let m_free = identify(&d, &spec2(), &free).unwrap();
        assert!((m_free.g[0].as_constant().unwrap() - 0.3).abs() < 1e-6);
        let m = identify(&d, &spec2(), &RegressionConfig::default()).unwrap();
        assert!(m.g[0].is_empty(), "g1 = {}", m.g[0]);
        assert!(m.diagnostics.constraint_residual <= 1e-6);
        assert!(m.c.max_coefficient_distance(&p("x1")).unwrap() < 1e-9);
    }

    #[test]
    fn penalty_mode_matches_on_clean_data() {
        let d = vdp_data(99);
        let cfg = RegressionConfig { solver_mode: SolverMode::Penalty, ..Default::default() };
        let a = identify(&d, &spec2(), &cfg).unwrap();
        let b = identify(&d, &spec2(), &RegressionConfig::default()).unwrap();
        assert!(a.coefficients.max_change(&b.coefficients) < 1e-6);
    }

    #[test]
    fn aggregated_mode_runs() {
        let d = vdp_data(99);
        let cfg = RegressionConfig { constraint_mode: ConstraintMode::Aggregated, ..Default::default() };
        let m = identify(&d, &spec2(), &cfg).unwrap();
        assert!(m.diagnostics.constraint_residual <= 1e-6);
        assert!(m.g[0].is_empty());
    }

    #[test]
    fn m_matrix_matches_general_constraint_at_order_two() {
        let d = vdp_data(99);
        let set = Library::new(&spec2(), 2).unwrap().evaluate(&d).unwrap();
        let mut co = Coefficients::zeros(&set.library);
        for (i, v) in co.xi_hat.iter_mut().enumerate() {
            *v = 0.1 * (i as f64 + 1.0).sin();
        }
        for (i, v) in co.zeta.iter_mut().enumerate() {
            *v = (i as f64 + 0.5).cos();
        }
        let cm = build_constraint_m(&set, &d);
        let k = set.library.output_state_index();
        let r_m = cm.residuals(&co.zeta, &co.xi_hat.column(k).into_owned());
        let gc = build_general_constraint(&co, &set, &d, 2).unwrap();
        let r_g = gc.residual_matrix();
        for i in 0..d.len() {
            assert!((r_m[i] - r_g[(0, i)]).abs() <= 1e-12 * (1.0 + r_m[i].abs()), "sample {i}");
        }
        let agg = cm.aggregated_residual(&co.zeta, &co.xi_hat.column(k).into_owned());
        let agg_g = gc.residual_vector(ConstraintMode::Aggregated)[0];
        assert!((agg - agg_g).abs() <= 1e-10 * (1.0 + agg.abs()));
        assert!(matches!(
            build_general_constraint(&co, &set, &d, 3),
            Err(RegressionError::OrderTooLarge { r: 3, n: 2 })
        ));
    }

    #[test]
    fn single_sample_m_matrix() {
        // only the second sample carries input: M = L(x1 = 2)^T * 3
        let times = vec![0.0, 0.1, 0.2];
        let states = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 5.0]);
        let d = Dataset::new(times, states, None, vec![0.0, 3.0, 0.0], vec![1.0, 2.0, 5.0]).unwrap();
        // theta_g = [u, x1*u], phi = [1, x1]
        let spec = LibrarySpec { poly_order: 1, output_poly_order: 1, ..Default::default() };
        let set = Library::new(&spec, 1).unwrap().evaluate(&d).unwrap();
        let cm = build_constraint_m(&set, &d);
        assert_eq!(cm.aggregated, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 6.0]));
        assert!(!cm.vacuous);
    }

    #[test]
    fn state_jacobian_matches_finite_difference() {
        let sys = chain_integrator(3);
        let d = integrate(&sys, &[0.3, -0.2, 0.1], &InputSignal::Open(Excitation::default()), 0.01, 60).unwrap();
        let spec = LibrarySpec { poly_order: 2, ..Default::default() };
        let set = Library::new(&spec, 3).unwrap().evaluate(&d).unwrap();
        let mut co = Coefficients::zeros(&set.library);
        let mut s = 0.3;
        for v in co.xi_tilde.iter_mut().chain(co.xi_hat.iter_mut()) {
            s = (s * 3.7 + 0.11) % 1.0;
            *v = s - 0.5;
        }
        co.zeta[1] = 1.0;
        co.zeta[2] = 0.4;
        let gc = build_general_constraint(&co, &set, &d, 3).unwrap();
        let eta = co.pack_states();
        let jac = gc.state_jacobian(ConstraintMode::PerSample, &vec![true; eta.len()]).unwrap();
        let r0 = gc.residual_vector(ConstraintMode::PerSample);
        let w = set.theta_f.ncols() + set.theta_g.ncols();
        for col in [0usize, 2, 5, w + 1, w + 12, 2 * w + 3, 2 * w + 15] {
            let h = 1e-6;
            let mut cp = co.clone();
            let mut e = eta.clone();
            e[col] += h;
            for l in 0..3 {
                cp.set_state(l, &e.rows(l * w, w).into_owned());
            }
            let rp = build_general_constraint(&cp, &set, &d, 3).unwrap().residual_vector(ConstraintMode::PerSample);
            let mut em = eta.clone();
            em[col] -= h;
            for l in 0..3 {
                cp.set_state(l, &em.rows(l * w, w).into_owned());
            }
            let rm = build_general_constraint(&cp, &set, &d, 3).unwrap().residual_vector(ConstraintMode::PerSample);
            for i in 0..r0.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * h);
                assert!(
                    (fd - jac[(i, col)]).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "col {col} row {i}: {fd} vs {}",
                    jac[(i, col)]
                );
            }
        }
    }

    #[test]
    fn large_lambda_is_infeasible() {
        let d = vdp_data(99);
        let cfg = RegressionConfig { lambda: 10.0, ..Default::default() };
        match identify(&d, &spec2(), &cfg) {
            Err(RegressionError::Infeasible { blocks, .. }) => assert!(!blocks.is_empty()),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn zero_input_warns() {
        let sys = vdp_system(1.0, 1.0, 1.0);
        let d = integrate(&sys, &[2.0, 0.0], &InputSignal::zero(), 0.01, 99).unwrap();
        let set = Library::new(&spec2(), 2).unwrap().evaluate(&d).unwrap();
        assert!(build_constraint_m(&set, &d).vacuous);
        match identify(&d, &spec2(), &RegressionConfig::default()) {
            Ok(m) => assert!(m.diagnostics.warnings.iter().any(|w| w.contains("vacuous"))),
            Err(RegressionError::Infeasible { model, .. }) => {
                assert!(model.diagnostics.warnings.iter().any(|w| w.contains("vacuous")))
            }
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn order_three_rejected_for_two_states() {
        let d = vdp_data(99);
        let cfg = RegressionConfig { relative_degree: 3, ..Default::default() };
        assert!(matches!(identify(&d, &spec2(), &cfg), Err(RegressionError::OrderTooLarge { .. })));
    }

    #[test]
    fn model_file_round_trip() {
        let d = vdp_data(99);
        let model = identify(&d, &spec2(), &RegressionConfig::default()).unwrap();
        let json = serde_json::to_string(&model.to_file()).unwrap();
        let back = SparseModel::from_file(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, model);
        let mut bad = model.to_file();
        bad.zeta.pop();
        assert!(matches!(SparseModel::from_file(&bad), Err(RegressionError::Malformed(_))));
    }

    #[test]
    fn coefficient_table_shape() {
        let d = vdp_data(99);
        let model = identify(&d, &spec2(), &RegressionConfig::default()).unwrap();
        let csv = model.coefficient_table_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "entry,xi_tilde_1,xi_hat_1,xi_tilde_2,xi_hat_2,zeta");
        assert_eq!(lines.len(), 1 + 10 + 10);
        assert!(lines.iter().any(|l| l.starts_with("x1,")));
        assert!(model.equations().contains("x2' = "));
    }

    #[test]
    fn invalid_config_rejected() {
        let d = vdp_data(99);
        for cfg in [
            RegressionConfig { lambda: -1.0, ..Default::default() },
            RegressionConfig { relative_degree: 0, ..Default::default() },
            RegressionConfig { max_alt_iters: 0, ..Default::default() },
        ] {
            assert!(matches!(identify(&d, &spec2(), &cfg), Err(RegressionError::InvalidConfig(_))));
        }
    }
}
