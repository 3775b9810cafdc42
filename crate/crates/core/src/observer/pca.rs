use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{CoreError, Result};

/// Mean-centred principal component analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// Rows are unit-length components, strongest first.
    pub components: DMatrix<f64>,
    /// Variance along each component.
    pub explained_variance: Vec<f64>,
    /// Variance of every eigen-direction, strongest first.
    pub all_variances: Vec<f64>,
}

impl Pca {
    /// Fits `n_components` on the rows of `samples`.
    pub fn fit(samples: &DMatrix<f64>, n_components: usize) -> Result<Self> {
        let (n, dim) = samples.shape();
        if n_components == 0 || n_components > dim {
            return Err(CoreError::Config(format!(
                "{n_components} components for {dim}-dimensional data"
            )));
        }
        if n < n_components.max(2) {
            return Err(CoreError::Config(format!(
                "{n} samples cannot support {n_components} components"
            )));
        }
        let mean = samples.row_mean().transpose();
        let mut centred = samples.clone();
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = DMatrix::zeros(n_components, dim);
        for (r, &i) in order.iter().take(n_components).enumerate() {
            let mut v = eig.eigenvectors.column(i).into_owned();
            // Fix the sign: largest-magnitude entry positive.
            let k = v.iamax();
            if v[k] < 0.0 {
                v = -v;
            }
            components.set_row(r, &v.transpose());
        }
        let all_variances: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        Ok(Self {
            mean,
            components,
            explained_variance: all_variances[..n_components].to_vec(),
            all_variances,
        })
    }

    /// Projects rows of `samples`; one output row per sample.
    pub fn transform(&self, samples: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centred = samples.clone();
        for mut row in centred.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centred * self.components.transpose()
    }

    /// Mean squared reconstruction error using the first `k` components.
    pub fn reconstruction_error(&self, samples: &DMatrix<f64>, k: usize) -> f64 {
        let k = k.min(self.components.nrows());
        let basis = self.components.rows(0, k).into_owned();
        let mut centred = samples.clone();
        for mut row in centred.row_iter_mut() {
            row -= self.mean.transpose();
        }
        let recon = (&centred * basis.transpose()) * &basis;
        (centred - recon).norm_squared() / samples.nrows() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_data_has_no_second_variance() {
        let x = DMatrix::from_fn(20, 3, |i, j| i as f64 * [1.0, -2.0, 0.5][j]);
        let pca = Pca::fit(&x, 2).unwrap();
        assert!(pca.explained_variance[1].abs() < 1e-9);
        assert!(pca.explained_variance[0] > 1.0);
    }

    #[test]
    fn orthonormal_axes_are_recovered() {
        // Variance 9 along x, 1 along y.
        let x = DMatrix::from_row_slice(4, 2, &[3.0, 0.0, -3.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let pca = Pca::fit(&x, 2).unwrap();
        assert!((pca.components[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((pca.components[(1, 1)].abs() - 1.0).abs() < 1e-12);
        let p = pca.transform(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert!((p[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_rejected() {
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert!(Pca::fit(&x, 2).is_err());
    }
}
