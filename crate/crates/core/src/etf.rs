//! Fixed simplex equiangular tight frame used as the sub-grade classifier.
//!
//! Prototypes are stored row-major as `K x d`: row `j` is `e_j`. Rows have unit
//! norm and every distinct pair has inner product `-1/(K-1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtfMatrix {
    prototypes: Tensor,
    k: usize,
    d: usize,
    seed: u64,
}

/// `d x K` matrix with orthonormal columns, from a Gaussian draw
/// orthonormalized by modified Gram-Schmidt (two passes).
pub fn random_orthonormal(d: usize, k: usize, rng: &mut RngStream) -> Result<Tensor> {
    if d < k {
        return Err(Error::InfeasibleRotation { d, k });
    }
    // Column-major scratch: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();
    for _pass in 0..2 {
        for j in 0..k {
            let (done, rest) = cols.split_at_mut(j);
            let col = &mut rest[0];
            for prev in done.iter() {
                let proj: f64 = prev.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                col.iter_mut().zip(prev).for_each(|(c, p)| *c -= proj * p);
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-300 {
                return Err(Error::NonFinite(
                    "Gram-Schmidt produced a zero column".into(),
                ));
            }
            col.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut data = vec![0.0; d * k];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * k + j] = *v;
        }
    }
    Tensor::new(vec![d, k], data)
}

/// Builds `sqrt(K/(K-1)) U (I - 11^T/K)` and stores its columns as rows.
pub fn build_etf(d: usize, k: usize, rng: &mut RngStream) -> Result<EtfMatrix> {
    if k < 2 {
        return Err(Error::Config(format!("simplex ETF needs K >= 2, got {k}")));
    }
    let u = random_orthonormal(d, k, rng)?;
    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    // Column j of U(I - 11^T/K) is u_j minus the mean column.
    let mean_col: Vec<f64> = (0..d)
        .map(|i| u.row(i).iter().sum::<f64>() / k as f64)
        .collect();
    let mut rows = vec![0.0; k * d];
    for j in 0..k {
        for i in 0..d {
            rows[j * d + i] = scale * (u.at(i, j) - mean_col[i]);
        }
    }
    Ok(EtfMatrix {
        prototypes: Tensor::new(vec![k, d], rows)?,
        k,
        d,
        seed: rng.seed(),
    })
}

/// Max absolute deviation of the Gram matrix from `K/(K-1) δ_ij - 1/(K-1)`.
pub fn verify_etf(etf: &EtfMatrix) -> f64 {
    let k = etf.k;
    let kf = k as f64;
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let dot: f64 = etf.row(i).iter().zip(etf.row(j)).map(|(a, b)| a * b).sum();
            let delta = if i == j { 1.0 } else { 0.0 };
            let target = kf / (kf - 1.0) * delta - 1.0 / (kf - 1.0);
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

impl EtfMatrix {
    /// Wraps an arbitrary `K x d` matrix, e.g. to check a perturbed frame.
    pub fn from_prototypes(prototypes: Tensor, seed: u64) -> Result<Self> {
        if prototypes.rank() != 2 || prototypes.rows() < 2 {
            return Err(Error::Config(format!(
                "ETF prototypes must be a K x d matrix with K >= 2, got {:?}",
                prototypes.shape()
            )));
        }
        let (k, d) = (prototypes.shape()[0], prototypes.shape()[1]);
        Ok(Self {
            prototypes,
            k,
            d,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.prototypes.row(j)
    }

    /// Inner product between any two distinct prototypes.
    pub fn target_cross(&self) -> f64 {
        -1.0 / (self.k as f64 - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_dev_identity(u: &Tensor) -> f64 {
        let k = u.shape()[1];
        let utu = u.transpose().unwrap().matmul(u).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let t = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((utu.at(i, j) - t).abs());
            }
        }
        worst
    }

    #[test]
    fn orthonormal_square_and_tall() {
        let u = random_orthonormal(2, 2, &mut RngStream::new(11)).unwrap();
        assert!(gram_dev_identity(&u) < 1e-10);
        let u = random_orthonormal(8, 3, &mut RngStream::new(12)).unwrap();
        assert!(gram_dev_identity(&u) < 1e-10);
    }

    #[test]
    fn different_seeds_same_gram() {
        let a = random_orthonormal(6, 4, &mut RngStream::new(1)).unwrap();
        let b = random_orthonormal(6, 4, &mut RngStream::new(2)).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
        assert!(gram_dev_identity(&a) < 1e-10 && gram_dev_identity(&b) < 1e-10);
    }

    #[test]
    fn infeasible_rotation() {
        assert!(matches!(
            random_orthonormal(3, 4, &mut RngStream::new(0)),
            Err(Error::InfeasibleRotation { d: 3, k: 4 })
        ));
        assert!(matches!(
            build_etf(3, 4, &mut RngStream::new(0)),
            Err(Error::InfeasibleRotation { .. })
        ));
        assert!(matches!(
            build_etf(3, 1, &mut RngStream::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pair_inner_products() {
        let e = build_etf(5, 2, &mut RngStream::new(3)).unwrap();
        let dot: f64 = e.row(0).iter().zip(e.row(1)).map(|(a, b)| a * b).sum();
        assert!((dot + 1.0).abs() < 1e-10);

        let e = build_etf(9, 4, &mut RngStream::new(4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { -1.0 / 3.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn verify_fresh_and_broken() {
        let e = build_etf(256, 10, &mut RngStream::new(0)).unwrap();
        assert!(verify_etf(&e) < 1e-8);

        let k = 10.0_f64;
        let mut zeroed = e.prototypes().clone();
        zeroed.data_mut()[..256].iter_mut().for_each(|v| *v = 0.0);
        let z = EtfMatrix::from_prototypes(zeroed, 0).unwrap();
        assert!(verify_etf(&z) >= 1.0 / (k - 1.0));

        let doubled = EtfMatrix::from_prototypes(e.prototypes().map(|v| 2.0 * v), 0).unwrap();
        // diagonal 4 vs 1 dominates off-diagonal 3/(K-1)
        assert!((verify_etf(&doubled) - 3.0).abs() < 1e-8);
    }

    #[test]
    fn prototypes_sum_to_zero_and_deterministic() {
        let a = build_etf(16, 7, &mut RngStream::new(9)).unwrap();
        for i in 0..16 {
            let s: f64 = (0..7).map(|j| a.row(j)[i]).sum();
            assert!(s.abs() < 1e-8);
        }
        let b = build_etf(16, 7, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
    }
}
