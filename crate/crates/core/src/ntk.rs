//! Infinite-width and empirical NTK Gram matrices.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, symmetric_eigenvalues, Matrix};
use crate::model::{Dataset, NetworkState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Infinite,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub entries: Matrix,
    pub kind: KernelKind,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.entries.rows
    }
}

/// H_ij = x_i.x_j (pi - theta_ij) / (2 pi).
pub fn h_infinity(data: &Dataset) -> Result<KernelMatrix> {
    let n = data.n();
    let norms: Vec<f64> = (0..n).map(|i| norm2(data.x(i))).collect();
    if norms.iter().any(|&v| v == 0.0) {
        return Err(Error::ZeroVector("dataset input"));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    let ip = dot(data.x(i), data.x(j));
                    let cos = if i == j { 1.0 } else { (ip / (norms[i] * norms[j])).clamp(-1.0, 1.0) };
                    ip * (PI - cos.acos()) / (2.0 * PI)
                })
                .collect()
        })
        .collect();
    Ok(KernelMatrix {
        entries: Matrix::from_rows(&rows)?,
        kind: KernelKind::Infinite,
    })
}

/// H_ij = (x_i.x_j / m) sum_r 1{w_r.x_i >= 0} 1{w_r.x_j >= 0}.
pub fn empirical_ntk(net: &NetworkState, data: &Dataset) -> Result<KernelMatrix> {
    net.check_data(data)?;
    let n = data.n();
    let active: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..net.m()).map(|r| dot(net.row(r), data.x(i)) >= 0.0).collect())
        .collect();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let both = active[i].iter().zip(&active[j]).filter(|(a, b)| **a && **b).count();
            let v = dot(data.x(i), data.x(j)) * both as f64 / net.m() as f64;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(KernelMatrix {
        entries: k,
        kind: KernelKind::Empirical,
    })
}

pub fn min_eigenvalue(k: &KernelMatrix) -> Result<f64> {
    let eig = symmetric_eigenvalues(&k.entries)?;
    eig.first()
        .copied()
        .ok_or_else(|| Error::Degenerate("empty kernel matrix".into()))
}

pub fn kernel_frobenius_distance(k1: &KernelMatrix, k2: &KernelMatrix) -> Result<f64> {
    let (a, b) = (&k1.entries, &k2.entries);
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            expected: a.rows * a.cols,
            got: b.rows * b.cols,
            context: "kernel shapes differ",
        });
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
