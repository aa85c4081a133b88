use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::net::check_label;

/// Points `x_i ∈ R^d` (rows of `x`) with labels in `{−1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: DMatrix<f64>,
    y: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Invalid("dataset must have at least one point and one feature".into()));
        }
        crate::error::check_len("labels", x.nrows(), y.len())?;
        if x.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("dataset contains NaN or infinite values".into()));
        }
        for &label in &y {
            check_label(label)?;
        }
        Ok(LabeledDataset { x, y })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        for r in rows {
            crate::error::check_len("feature row", d, r.len())?;
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, c| rows[i][c]), y)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn has_both_classes(&self) -> bool {
        self.y.iter().any(|&t| t > 0.0) && self.y.iter().any(|&t| t < 0.0)
    }

    /// The dataset translated by `u` (every point becomes `x_i + u`).
    pub fn shifted(&self, u: &[f64]) -> Result<LabeledDataset> {
        crate::error::check_len("shift vector", self.dim(), u.len())?;
        let mut x = self.x.clone();
        for mut row in x.row_iter_mut() {
            for (t, s) in row.iter_mut().zip(u) {
                *t += s;
            }
        }
        LabeledDataset::new(x, self.y.clone())
    }

    /// Appends one point.
    pub fn with_point(&self, p: &[f64], label: f64) -> Result<LabeledDataset> {
        crate::error::check_len("point", self.dim(), p.len())?;
        let n = self.len();
        let x = self.x.clone().insert_row(n, 0.0);
        let mut x = x;
        for (c, t) in p.iter().enumerate() {
            x[(n, c)] = *t;
        }
        let mut y = self.y.clone();
        y.push(label);
        LabeledDataset::new(x, y)
    }
}
