use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Autonomous LTI plant `ẋ = Ax`, `y = Cx`, with the rows of `C` split into
/// contiguous per-node blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Plant {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    output_sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl Plant {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, output_sizes: Vec<usize>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Dimension(format!(
                "A must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if c.ncols() != n {
            return Err(Error::Dimension(format!(
                "C has {} columns, expected {n}",
                c.ncols()
            )));
        }
        if output_sizes.is_empty() {
            return Err(Error::Dimension("no nodes in the output partition".into()));
        }
        let total: usize = output_sizes.iter().sum();
        if total != c.nrows() {
            return Err(Error::Dimension(format!(
                "output partition covers {total} rows, C has {}",
                c.nrows()
            )));
        }
        if a.iter().chain(c.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Dimension("A and C must be finite".into()));
        }
        let offsets = output_sizes
            .iter()
            .scan(0, |acc, &m| {
                let start = *acc;
                *acc += m;
                Some(start)
            })
            .collect();
        Ok(Self {
            a,
            c,
            output_sizes,
            offsets,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn node_count(&self) -> usize {
        self.output_sizes.len()
    }

    pub fn output_sizes(&self) -> &[usize] {
        &self.output_sizes
    }

    /// Rows of `C` seen by node `i`.
    pub fn c_block(&self, i: usize) -> DMatrix<f64> {
        self.c
            .rows(self.offsets[i], self.output_sizes[i])
            .into_owned()
    }

    /// `y_i` extracted from the stacked output.
    pub fn output_block(&self, y: &DVector<f64>, i: usize) -> DVector<f64> {
        y.rows(self.offsets[i], self.output_sizes[i]).into_owned()
    }
}
