use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Dense row-major matrix of embeddings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from rows of equal, nonzero length.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if !rows.is_empty() && dim == 0 {
            return Err(Error::Consistency("embedding rows have dimension 0".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Consistency(format!(
                    "row {i} has dimension {} but row 0 has {dim}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Consistency(format!("row {i} contains {v}")));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub(crate) fn empty(dim: usize) -> Self {
        Matrix {
            rows: 0,
            dim,
            data: Vec::new(),
        }
    }

    /// Copy with rows sorted lexicographically.
    pub fn canonicalized(&self) -> Matrix {
        self.stack_ordered(&self.canonical_order(), &Matrix::empty(self.dim), &[])
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn vstack(&self, other: &Matrix) -> Matrix {
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix {
            rows: self.rows + other.rows,
            dim: self.dim,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            dim: self.dim,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Rows of `self` followed by rows of `other`, taken in the given orders.
    pub(crate) fn stack_ordered(&self, order: &[usize], other: &Matrix, other_order: &[usize]) -> Matrix {
        debug_assert_eq!(self.dim, other.dim);
        let mut data = Vec::with_capacity((order.len() + other_order.len()) * self.dim);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        for &i in other_order {
            data.extend_from_slice(other.row(i));
        }
        Matrix {
            rows: order.len() + other_order.len(),
            dim: self.dim,
            data,
        }
    }

    /// Row indices sorted lexicographically by row content.
    pub(crate) fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.rows).collect();
        order.sort_by(|&a, &b| {
            self.row(a)
                .iter()
                .zip(self.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter_rows())
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_rows_rejected() {
        let err = Matrix::from_rows(vec![vec![1.0, 2.0], vec![1.0]]).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn canonical_order_sorts_rows() {
        let m = Matrix::from_rows(vec![vec![2.0, 0.0], vec![1.0, 5.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(m.canonical_order(), vec![2, 1, 0]);
    }
}
