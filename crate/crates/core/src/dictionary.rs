//! Candidate libraries for the drift, the input channel and the output map.
//!
//! Entry order of the drift library `theta_f`:
//! constant (optional), monomials by total degree `1..=poly_order` (graded
//! lexicographic inside each degree, `x1^2, x1*x2, x2^2`), then for each
//! trig frequency `j` all `sin(j*x_i)` followed by all `cos(j*x_i)`, then
//! (when enabled) cross-state trig products. The input library `theta_g`
//! is the same list multiplied by `u`. The output library `phi` is
//! `1, x_k, x_k^2, ..., x_k^q`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::symexpr::{Expression, TrigAtom};

#[derive(Debug, Error, PartialEq)]
pub enum DictionaryError {
    #[error("invalid library: {0}")]
    InvalidSpec(String),
    #[error("dataset has {data} states, dictionary was built for {dict}")]
    DimensionMismatch { data: usize, dict: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LibrarySpec {
    pub poly_order: u32,
    pub trig_orders: Vec<u32>,
    pub include_constant: bool,
    /// Zero-based index of the state the output depends on.
    pub output_state_index: usize,
    pub output_poly_order: u32,
    /// Adds `sin/cos(j*x_a) * sin/cos(j*x_b)` products for `a < b`.
    pub cross_trig: bool,
}

impl Default for LibrarySpec {
    fn default() -> Self {
        LibrarySpec {
            poly_order: 3,
            trig_orders: Vec::new(),
            include_constant: true,
            output_state_index: 0,
            output_poly_order: 3,
            cross_trig: false,
        }
    }
}

impl LibrarySpec {
    pub fn validate(&self, n_states: usize) -> Result<(), DictionaryError> {
        if n_states == 0 {
            return Err(DictionaryError::InvalidSpec("zero states".into()));
        }
        if self.poly_order == 0 && self.trig_orders.is_empty() {
            return Err(DictionaryError::InvalidSpec("poly_order must be >= 1 when trig_orders is empty".into()));
        }
        if self.trig_orders.contains(&0) {
            return Err(DictionaryError::InvalidSpec("trig frequencies must be >= 1".into()));
        }
        if self.output_state_index >= n_states {
            return Err(DictionaryError::InvalidSpec(format!(
                "output_state_index {} out of range for {n_states} states",
                self.output_state_index
            )));
        }
        Ok(())
    }
}

/// Exponent tuples of total degree `degree` over `n` variables, in
/// descending lexicographic order.
pub fn monomials_of_degree(n: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(n: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == n - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for p in (0..=left).rev() {
            prefix.push(p);
            rec(n, left - p, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, degree, &mut Vec::with_capacity(n), &mut out);
    out
}

/// Symbolic entries of the three libraries.
#[derive(Debug, Clone, PartialEq)]
pub struct Library {
    pub spec: LibrarySpec,
    pub n_states: usize,
    pub theta_f_entries: Vec<Expression>,
    pub theta_g_entries: Vec<Expression>,
    pub phi_entries: Vec<Expression>,
}

impl Library {
    pub fn new(spec: &LibrarySpec, n: usize) -> Result<Library, DictionaryError> {
        spec.validate(n)?;
        let mut f = Vec::new();
        if spec.include_constant {
            f.push(Expression::constant(n, 1.0));
        }
        for d in 1..=spec.poly_order {
            for m in monomials_of_degree(n, d) {
                f.push(Expression::monomial(n, 1.0, &m));
            }
        }
        for &j in &spec.trig_orders {
            for i in 0..n {
                f.push(Expression::trig(n, TrigAtom::sin(j, i)));
            }
            for i in 0..n {
                f.push(Expression::trig(n, TrigAtom::cos(j, i)));
            }
        }
        if spec.cross_trig {
            for &j in &spec.trig_orders {
                for a in 0..n {
                    for b in a + 1..n {
                        for fa in [TrigAtom::sin(j, a), TrigAtom::cos(j, a)] {
                            for fb in [TrigAtom::sin(j, b), TrigAtom::cos(j, b)] {
                                let e = Expression::trig(n, fa).mul(&Expression::trig(n, fb)).expect("same n");
                                f.push(e);
                            }
                        }
                    }
                }
            }
        }
        let u = Expression::input(n);
        let g = f.iter().map(|e| e.mul(&u).expect("same n")).collect();
        let k = spec.output_state_index;
        let phi = (0..=spec.output_poly_order)
            .map(|p| {
                let mut m = vec![0; n];
                m[k] = p;
                Expression::monomial(n, 1.0, &m)
            })
            .collect();
        Ok(Library { spec: spec.clone(), n_states: n, theta_f_entries: f, theta_g_entries: g, phi_entries: phi })
    }

    pub fn p_x(&self) -> usize {
        self.theta_f_entries.len()
    }

    pub fn p_u(&self) -> usize {
        self.theta_g_entries.len()
    }

    pub fn p_y(&self) -> usize {
        self.phi_entries.len()
    }

    pub fn output_state_index(&self) -> usize {
        self.spec.output_state_index
    }

    /// `theta_g` entries with the `u` factor removed.
    pub fn theta_g_stripped(&self) -> Vec<Expression> {
        self.theta_g_entries.iter().map(|e| e.strip_input().expect("library entries carry u")).collect()
    }

    /// Evaluates all libraries row by row on `d`.
    pub fn evaluate(&self, d: &Dataset) -> Result<DictionarySet, DictionaryError> {
        if d.n_states() != self.n_states {
            return Err(DictionaryError::DimensionMismatch { data: d.n_states(), dict: self.n_states });
        }
        let m = d.len();
        let mut theta_f = DMatrix::zeros(m, self.p_x());
        let mut theta_g = DMatrix::zeros(m, self.p_u());
        let mut phi = DMatrix::zeros(m, self.p_y());
        let u = d.input();
        for i in 0..m {
            let x = d.state(i);
            for (j, e) in self.theta_f_entries.iter().enumerate() {
                let v = e.eval(&x, 0.0);
                theta_f[(i, j)] = v;
                theta_g[(i, j)] = v * u[i];
            }
            for (j, e) in self.phi_entries.iter().enumerate() {
                phi[(i, j)] = e.eval(&x, 0.0);
            }
        }
        let width = (self.p_x() + self.p_u()).max(self.p_y());
        let underdetermined = m < width;
        if underdetermined {
            log::warn!("{m} samples for a library of width {width}: regression is underdetermined");
        }
        Ok(DictionarySet { library: self.clone(), theta_f, theta_g, phi, underdetermined })
    }
}

/// Symbolic libraries together with their evaluation on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionarySet {
    pub library: Library,
    pub theta_f: DMatrix<f64>,
    pub theta_g: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub underdetermined: bool,
}

pub fn build_dictionaries(spec: &LibrarySpec, d: &Dataset) -> Result<DictionarySet, DictionaryError> {
    Library::new(spec, d.n_states())?.evaluate(d)
}

impl DictionarySet {
    pub fn theta_f_entries(&self) -> &[Expression] {
        &self.library.theta_f_entries
    }

    pub fn theta_g_entries(&self) -> &[Expression] {
        &self.library.theta_g_entries
    }

    pub fn phi_entries(&self) -> &[Expression] {
        &self.library.phi_entries
    }

    pub fn n_states(&self) -> usize {
        self.library.n_states
    }

    pub fn n_samples(&self) -> usize {
        self.theta_f.nrows()
    }
}

/// `d phi_j / d x_k` for every output-library entry.
pub fn gradient_dictionary(lib: &Library) -> Vec<Expression> {
    let k = lib.output_state_index();
    lib.phi_entries.iter().map(|e| e.partial(k).expect("k validated")).collect()
}

/// Gradient dictionary evaluated on every sample: an `m x p_y` matrix.
pub fn evaluate_l_matrix(lib: &Library, d: &Dataset) -> DMatrix<f64> {
    let grad = gradient_dictionary(lib);
    DMatrix::from_fn(d.len(), grad.len(), |i, j| grad[j].eval(&d.state(i), 0.0))
}
