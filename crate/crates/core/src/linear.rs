use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct LinearRepr {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// Explicit affine map `y = W x + b` standing in for a learned linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinearRepr", into = "LinearRepr")]
pub struct LinearParams {
    rows: usize,
    cols: usize,
    /// Row-major, `rows * cols`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearParams {
    pub fn new(rows: usize, cols: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("linear map must have at least one row and column"));
        }
        if weight.len() != rows * cols || bias.len() != rows {
            return Err(Error::shape(format!(
                "expected {rows}x{cols} weight and {rows} bias, got {} weights and {} bias",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(Error::invalid("linear parameters must be finite"));
        }
        Ok(Self {
            rows,
            cols,
            weight,
            bias,
        })
    }

    pub fn from_rows(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let rows = weight.len();
        let cols = weight.first().map_or(0, Vec::len);
        if weight.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged weight matrix"));
        }
        Self::new(rows, cols, weight.into_iter().flatten().collect(), bias)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols], vec![0.0; rows])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn expect_shape(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::shape(format!(
                "{what}: expected {rows}x{cols} parameters, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Applies the map to the concatenation of `parts`.
    pub fn apply_concat(&self, parts: &[&[f64]]) -> Result<Vec<f64>> {
        let len: usize = parts.iter().map(|p| p.len()).sum();
        if len != self.cols {
            return Err(Error::shape(format!(
                "linear map expects {} inputs, got {len}",
                self.cols
            )));
        }
        let mut out = self.bias.clone();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            let mut col = 0;
            for part in parts {
                for x in *part {
                    *o += row[col] * x;
                    col += 1;
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_concat(&[x])
    }
}

impl TryFrom<LinearRepr> for LinearParams {
    type Error = Error;

    fn try_from(r: LinearRepr) -> Result<Self> {
        Self::from_rows(r.weight, r.bias)
    }
}

impl From<LinearParams> for LinearRepr {
    fn from(p: LinearParams) -> Self {
        LinearRepr {
            weight: p.weight.chunks(p.cols).map(<[f64]>::to_vec).collect(),
            bias: p.bias,
        }
    }
}
