use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Distance between two embedding vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// `1 - u.v / (|u| |v|)`, clamped to `[0, 2]`. Undefined for zero vectors.
    CosineDistance,
    L1,
    L2,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [
        DistanceMetric::CosineDistance,
        DistanceMetric::L1,
        DistanceMetric::L2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::CosineDistance => "cosine",
            DistanceMetric::L1 => "l1",
            DistanceMetric::L2 => "l2",
        }
    }

    /// Distance between two vectors of equal length. For cosine the caller
    /// must ensure both norms are nonzero.
    pub fn distance(self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            DistanceMetric::CosineDistance => {
                let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
                for (a, b) in u.iter().zip(v) {
                    dot += a * b;
                    uu += a * a;
                    vv += b * b;
                }
                cosine_from_parts(dot, uu.sqrt(), vv.sqrt())
            }
            DistanceMetric::L1 => u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum(),
            DistanceMetric::L2 => u
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Similarity used for the within/cross similarity distributions:
    /// `1 - d` for cosine, `-d` otherwise.
    pub fn similarity_from_distance(self, d: f64) -> f64 {
        match self {
            DistanceMetric::CosineDistance => 1.0 - d,
            DistanceMetric::L1 | DistanceMetric::L2 => -d,
        }
    }
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" | "cosine_distance" => Ok(DistanceMetric::CosineDistance),
            "l1" | "manhattan" | "cityblock" => Ok(DistanceMetric::L1),
            "l2" | "euclidean" => Ok(DistanceMetric::L2),
            other => Err(Error::Argument(format!("unknown distance metric {other:?}"))),
        }
    }
}

fn cosine_from_parts(dot: f64, norm_u: f64, norm_v: f64) -> f64 {
    (1.0 - dot / (norm_u * norm_v)).clamp(0.0, 2.0)
}

fn norms(m: &Matrix, metric: DistanceMetric, label: &'static str) -> Result<Vec<f64>> {
    if metric != DistanceMetric::CosineDistance {
        // Unused by the other metrics; one entry per row keeps callers zipping.
        return Ok(vec![0.0; m.rows()]);
    }
    m.iter_rows()
        .enumerate()
        .map(|(row, r)| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::DegenerateVector { matrix: label, row })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Dense `n x m` matrix of distances, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.cols + b]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Entry `(a, b)` is the distance between row `a` of `x` and row `b` of `y`.
pub fn pairwise_distances(x: &Matrix, y: &Matrix, metric: DistanceMetric) -> Result<DistanceMatrix> {
    if !x.is_empty() && !y.is_empty() && x.dim() != y.dim() {
        return Err(Error::Argument(format!(
            "dimension mismatch: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    let nx = norms(x, metric, "X")?;
    let ny = norms(y, metric, "Y")?;
    let mut values = Vec::with_capacity(x.rows() * y.rows());
    for (u, &nu) in x.iter_rows().zip(&nx) {
        for (v, &nv) in y.iter_rows().zip(&ny) {
            let d = if metric == DistanceMetric::CosineDistance {
                let dot: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
                cosine_from_parts(dot, nu, nv)
            } else {
                metric.distance(u, v)
            };
            values.push(d);
        }
    }
    Ok(DistanceMatrix {
        rows: x.rows(),
        cols: y.rows(),
        values,
    })
}
