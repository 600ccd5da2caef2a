use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numcore::{gemm, Tensor};

/// Mean-centred projection onto the leading principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d_out × d_in`, one component per row, descending eigenvalue order.
    pub components: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
}

impl PcaModel {
    pub fn fit(x: &Tensor, d_out: usize) -> Result<Self> {
        let (n, d_in) = (x.rows(), x.cols());
        if d_out == 0 || d_out > d_in {
            return Err(Error::Invalid(format!("cannot reduce {} dims to {}", d_in, d_out)));
        }
        if n == 0 {
            return Err(Error::Invalid("PCA on zero rows".into()));
        }
        let mut mean = vec![0.0; d_in];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut centered = x.data().to_vec();
        for row in centered.chunks_mut(d_in) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let mut cov = vec![0.0; d_in * d_in];
        gemm(d_in, n, d_in, &centered, true, &centered, false, &mut cov, false);
        let denom = n as f64;
        let cov = DMatrix::from_row_slice(d_in, d_in, &cov).map(|v| v / denom);
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..d_in).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let floor = top * 1e-10 + 1e-300;

        let mut components = vec![0.0; d_out * d_in];
        let mut eigenvalues = Vec::with_capacity(d_out);
        let mut deficient = 0;
        for (r, &col) in order.iter().take(d_out).enumerate() {
            let lambda = eig.eigenvalues[col];
            if lambda <= floor {
                deficient += 1;
                eigenvalues.push(0.0);
                continue;
            }
            eigenvalues.push(lambda);
            let v: Vec<f64> = (0..d_in).map(|j| eig.eigenvectors[(j, col)]).collect();
            // sign: largest-magnitude coordinate positive (first such on ties)
            let mut pivot = 0;
            for j in 1..d_in {
                if v[j].abs() > v[pivot].abs() {
                    pivot = j;
                }
            }
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d_in {
                components[r * d_in + j] = sign * v[j];
            }
        }
        if deficient > 0 {
            log::warn!("PCA: rank below {}; {} components padded with zeros", d_out, deficient);
        }
        Ok(PcaModel {
            mean,
            components,
            eigenvalues,
            d_in,
            d_out,
        })
    }

    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.d_in {
            return Err(Error::Invalid(format!("PCA expects dim {}, got {}", self.d_in, x.cols())));
        }
        let n = x.rows();
        let mut centered = x.data().to_vec();
        for row in centered.chunks_mut(self.d_in) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        let mut out = vec![0.0; n * self.d_out];
        gemm(n, self.d_in, self.d_out, &centered, false, &self.components, true, &mut out, false);
        Tensor::matrix(n, self.d_out, out)
    }
}

/// Fits PCA on `x` and returns the `d_text`-dimensional projection.
pub fn pca_reduce(x: &Tensor, d_text: usize) -> Result<Tensor> {
    PcaModel::fit(x, d_text)?.transform(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_rank_same_dim_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..40 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::matrix(40, 5, data).unwrap();
        let y = pca_reduce(&x, 5).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                let dx: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                let dy: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                assert!((dx.sqrt() - dy.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn points_on_diagonal_line() {
        let x = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, -3.0, -3.0]).unwrap();
        let model = PcaModel::fit(&x, 2).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((model.components[0] - s).abs() < 1e-9);
        assert!((model.components[1] - s).abs() < 1e-9);
        assert_eq!(model.eigenvalues[1], 0.0);
        // covariance of t·(1,1) with t = (0,1,2,-3): var(t) = 3.5, eigenvalue 2·var = 7
        assert!((model.eigenvalues[0] - 7.0).abs() < 1e-9);
        let y = PcaModel::fit(&x, 1).unwrap().transform(&x).unwrap();
        assert!((y.get2(1, 0) - (1.0 - 0.0) * 2.0 * s).abs() < 1e-9);
    }

    #[test]
    fn identical_rows_map_to_zero() {
        let x = Tensor::matrix(3, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let y = pca_reduce(&x, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_growing_dimension() {
        let x = Tensor::zeros(&[4, 2]);
        assert!(pca_reduce(&x, 3).is_err());
    }
}
