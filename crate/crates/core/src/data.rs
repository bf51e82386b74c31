//! Sampled trajectory data and its CSV form.
//!
//! CSV schema: header `t,x1,...,xn,u,y[,xdot1,...,xdotn]`, one sample per
//! row. Columns are matched by name; unknown extra columns are ignored on
//! load so that closed-loop trajectories (which carry reference columns)
//! can still be read back.

use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("non-finite value in column {column} at row {row}")]
    NonFinite { column: String, row: usize },
    #[error("unparsable value {value:?} in column {column} at row {row}")]
    BadValue { column: String, row: usize, value: String },
    #[error("non-increasing times at row {0}")]
    NonIncreasing(usize),
    #[error("non-uniform time grid at row {0}")]
    NonUniform(usize),
    #[error("m < {min}: dataset has {m} samples")]
    TooShort { m: usize, min: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Uniformly sampled trajectory of a single-input single-output system.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    times: Vec<f64>,
    states: DMatrix<f64>,
    derivatives: Option<DMatrix<f64>>,
    input: Vec<f64>,
    output: Vec<f64>,
}

const GRID_RTOL: f64 = 1e-9;

impl Dataset {
    pub fn new(
        times: Vec<f64>,
        states: DMatrix<f64>,
        derivatives: Option<DMatrix<f64>>,
        input: Vec<f64>,
        output: Vec<f64>,
    ) -> Result<Self, DataError> {
        let m = times.len();
        if m < 2 {
            return Err(DataError::TooShort { m, min: 2 });
        }
        if states.nrows() != m || input.len() != m || output.len() != m {
            return Err(DataError::Shape(format!(
                "times has {m} rows, X {}, u {}, y {}",
                states.nrows(),
                input.len(),
                output.len()
            )));
        }
        if let Some(d) = &derivatives {
            if d.shape() != states.shape() {
                return Err(DataError::Shape(format!("Xdot is {:?}, X is {:?}", d.shape(), states.shape())));
            }
        }
        check_finite("t", &times)?;
        check_finite("u", &input)?;
        check_finite("y", &output)?;
        for j in 0..states.ncols() {
            let col: Vec<f64> = states.column(j).iter().copied().collect();
            check_finite(&format!("x{}", j + 1), &col)?;
            if let Some(d) = &derivatives {
                let col: Vec<f64> = d.column(j).iter().copied().collect();
                check_finite(&format!("xdot{}", j + 1), &col)?;
            }
        }
        check_grid(&times)?;
        Ok(Dataset { times, states, derivatives, input, output })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.states.ncols()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn derivatives(&self) -> Option<&DMatrix<f64>> {
        self.derivatives.as_ref()
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn dt(&self) -> f64 {
        (self.times[self.len() - 1] - self.times[0]) / (self.len() - 1) as f64
    }

    /// State vector at sample `i`.
    pub fn state(&self, i: usize) -> Vec<f64> {
        self.states.row(i).iter().copied().collect()
    }

    pub fn with_derivatives(mut self, derivatives: DMatrix<f64>) -> Result<Self, DataError> {
        self.derivatives = Some(derivatives);
        Dataset::new(self.times, self.states, self.derivatives, self.input, self.output)
    }

    /// Fills `Xdot` by second-order finite differences: central on interior
    /// points, one-sided three-point stencils at both ends. Measured
    /// derivatives are kept unless `overwrite` is set.
    pub fn estimate_derivatives(&self, overwrite: bool) -> Result<Dataset, DataError> {
        let m = self.len();
        if m < 3 {
            return Err(DataError::TooShort { m, min: 3 });
        }
        if self.derivatives.is_some() && !overwrite {
            return Ok(self.clone());
        }
        let h = self.dt();
        let x = &self.states;
        let mut d = DMatrix::zeros(m, x.ncols());
        for j in 0..x.ncols() {
            d[(0, j)] = (-3.0 * x[(0, j)] + 4.0 * x[(1, j)] - x[(2, j)]) / (2.0 * h);
            for i in 1..m - 1 {
                d[(i, j)] = (x[(i + 1, j)] - x[(i - 1, j)]) / (2.0 * h);
            }
            d[(m - 1, j)] = (3.0 * x[(m - 1, j)] - 4.0 * x[(m - 2, j)] + x[(m - 3, j)]) / (2.0 * h);
        }
        let mut out = self.clone();
        out.derivatives = Some(d);
        Ok(out)
    }

    pub fn header(&self) -> Vec<String> {
        let n = self.n_states();
        let mut h = vec!["t".to_string()];
        h.extend((1..=n).map(|i| format!("x{i}")));
        h.push("u".into());
        h.push("y".into());
        if self.derivatives.is_some() {
            h.extend((1..=n).map(|i| format!("xdot{i}")));
        }
        h
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        self.save_csv_with(path, &[])
    }

    /// Writes the dataset followed by extra named columns of length `m`.
    pub fn save_csv_with(&self, path: impl AsRef<Path>, extra: &[(&str, &[f64])]) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file, extra)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W, extra: &[(&str, &[f64])]) -> Result<(), DataError> {
        let m = self.len();
        if m < 2 {
            return Err(DataError::TooShort { m, min: 2 });
        }
        for (name, col) in extra {
            if col.len() != m {
                return Err(DataError::Shape(format!("extra column {name} has {} rows, expected {m}", col.len())));
            }
        }
        let mut w = csv::Writer::from_writer(writer);
        let mut header = self.header();
        header.extend(extra.iter().map(|(n, _)| n.to_string()));
        w.write_record(&header)?;
        let n = self.n_states();
        let mut row = Vec::with_capacity(header.len());
        for i in 0..m {
            row.clear();
            row.push(self.times[i]);
            row.extend((0..n).map(|j| self.states[(i, j)]));
            row.push(self.input[i]);
            row.push(self.output[i]);
            if let Some(d) = &self.derivatives {
                row.extend((0..n).map(|j| d[(i, j)]));
            }
            row.extend(extra.iter().map(|(_, c)| c[i]));
            // `{}` on f64 prints the shortest string that round-trips exactly
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file)
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset, DataError> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| header.iter().position(|h| h == name);
        let require = |name: &str| find(name).ok_or_else(|| DataError::MissingColumn(name.to_string()));

        let t_col = require("t")?;
        let mut x_cols = Vec::new();
        while let Some(c) = find(&format!("x{}", x_cols.len() + 1)) {
            x_cols.push(c);
        }
        if x_cols.is_empty() {
            return Err(DataError::MissingColumn("x1".into()));
        }
        let n = x_cols.len();
        let u_col = require("u")?;
        let y_col = require("y")?;
        let xdot_cols: Vec<Option<usize>> = (1..=n).map(|i| find(&format!("xdot{i}"))).collect();
        let has_xdot = xdot_cols.iter().any(Option::is_some);
        let xdot_cols: Vec<usize> = if has_xdot {
            xdot_cols
                .iter()
                .enumerate()
                .map(|(i, c)| c.ok_or_else(|| DataError::MissingColumn(format!("xdot{}", i + 1))))
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };

        let mut times = Vec::new();
        let mut xs = Vec::new();
        let mut xdots = Vec::new();
        let mut input = Vec::new();
        let mut output = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(DataError::Ragged { row: row + 1, expected: header.len(), found: rec.len() });
            }
            let get = |c: usize| -> Result<f64, DataError> {
                let s = &rec[c];
                let v: f64 = s.parse().map_err(|_| DataError::BadValue {
                    column: header[c].clone(),
                    row: row + 1,
                    value: s.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(DataError::NonFinite { column: header[c].clone(), row: row + 1 });
                }
                Ok(v)
            };
            times.push(get(t_col)?);
            for &c in &x_cols {
                xs.push(get(c)?);
            }
            for &c in &xdot_cols {
                xdots.push(get(c)?);
            }
            input.push(get(u_col)?);
            output.push(get(y_col)?);
        }
        let m = times.len();
        if m < 2 {
            return Err(DataError::TooShort { m, min: 2 });
        }
        let states = DMatrix::from_row_slice(m, n, &xs);
        let derivatives = has_xdot.then(|| DMatrix::from_row_slice(m, n, &xdots));
        Dataset::new(times, states, derivatives, input, output)
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<(), DataError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(row) => Err(DataError::NonFinite { column: name.to_string(), row: row + 1 }),
        None => Ok(()),
    }
}

fn check_grid(times: &[f64]) -> Result<(), DataError> {
    for i in 1..times.len() {
        if times[i] <= times[i - 1] {
            return Err(DataError::NonIncreasing(i + 1));
        }
    }
    let h = times[1] - times[0];
    for i in 1..times.len() {
        let step = times[i] - times[i - 1];
        if (step - h).abs() > GRID_RTOL * h.abs().max(times[i].abs()) {
            return Err(DataError::NonUniform(i + 1));
        }
    }
    Ok(())
}
