use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

use super::Matrix;

#[derive(Clone, Debug)]
pub struct PcaResult {
    /// `k × n`, orthonormal rows.
    pub components: Matrix,
    /// Eigenvalue share of each retained component, descending.
    pub explained_variance_ratio: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub mean: Vec<f64>,
}

impl PcaResult {
    /// Coordinates of `data` rows in the component basis.
    pub fn project(&self, data: &Matrix) -> Matrix {
        let mut centered = data.clone();
        let neg: Vec<f64> = self.mean.iter().map(|m| -m).collect();
        centered.add_row_broadcast(&neg);
        centered.matmul_t(&self.components)
    }
}

/// Top-`k` principal components from the eigendecomposition of the sample
/// covariance. Data with zero total variance yields all-zero ratios.
pub fn pca(data: &Matrix, k: usize) -> Result<PcaResult> {
    let (m, n) = data.shape();
    if m < 2 {
        return Err(Error::Insufficient(format!(
            "pca needs at least 2 rows, got {m}"
        )));
    }
    if k == 0 || k > m.min(n) {
        return Err(Error::invalid(format!(
            "pca: k = {k} outside 1..={}",
            m.min(n)
        )));
    }
    let mean = data.column_means();
    let mut centered = data.clone();
    let neg: Vec<f64> = mean.iter().map(|v| -v).collect();
    centered.add_row_broadcast(&neg);
    let mut cov = centered.t_matmul(&centered);
    cov.scale(1.0 / (m - 1) as f64);

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, cov.as_slice()));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();

    let mut components = Matrix::zeros(k, n);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(idx);
        // deterministic sign: largest-magnitude entry positive
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in col.iter().enumerate() {
            components[(row, j)] = sign * v;
        }
    }
    let explained_variance: Vec<f64> = values[..k].to_vec();
    let explained_variance_ratio = if total > 0.0 {
        explained_variance.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; k]
    };
    Ok(PcaResult {
        components,
        explained_variance_ratio,
        explained_variance,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::numerics::{dot, rng_from_seed};

    #[test]
    fn points_on_a_line() {
        let rows: Vec<[f64; 2]> = (0..10).map(|t| [t as f64, t as f64]).collect();
        let r = pca(&Matrix::from_rows(&rows).unwrap(), 2).unwrap();
        assert!((r.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(r.explained_variance_ratio[1].abs() < 1e-12);
    }

    #[test]
    fn isotropic_gaussian_splits_evenly() {
        let mut rng = rng_from_seed(5);
        let rows: Vec<[f64; 2]> = (0..20_000)
            .map(|_| {
                [
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ]
            })
            .collect();
        let r = pca(&Matrix::from_rows(&rows).unwrap(), 2).unwrap();
        for ratio in &r.explained_variance_ratio {
            assert!((ratio - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn zero_variance_gives_zero_ratios() {
        let rows = vec![[1.0, 2.0]; 5];
        let r = pca(&Matrix::from_rows(&rows).unwrap(), 1).unwrap();
        assert_eq!(r.explained_variance_ratio, vec![0.0]);
    }

    #[test]
    fn k_out_of_range() {
        let m = Matrix::zeros(3, 2);
        assert!(pca(&m, 0).is_err());
        assert!(pca(&m, 3).is_err());
    }

    #[test]
    fn components_orthonormal_and_reconstruct() {
        let mut rng = rng_from_seed(9);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let r = pca(&data, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let d = dot(r.components.row(i), r.components.row(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-6);
            }
        }
        let proj = r.project(&data);
        let back = proj.matmul(&r.components);
        for i in 0..data.rows() {
            for j in 0..5 {
                assert!((back[(i, j)] + r.mean[j] - data[(i, j)]).abs() < 1e-5);
            }
        }
        let ratios = &r.explained_variance_ratio;
        assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
    }
}
