//! Two-dimensional PCA embedding of standardized feature vectors.

use nalgebra::{DMatrix, SymmetricEigen};

use super::FeatureVector;
use crate::error::{Error, Result};

/// Standardizes each dimension to zero mean and unit variance. Constant
/// dimensions become zero.
pub fn standardize(rows: &[[f64; 7]]) -> Vec<[f64; 7]> {
    let n = rows.len() as f64;
    let mut out = rows.to_vec();
    for d in 0..7 {
        let mean = rows.iter().map(|r| r[d]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in &mut out {
            r[d] = if sd > 1e-12 { (r[d] - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Projects onto the top two principal components. Each component's sign
/// is chosen so that its largest-magnitude loading is positive.
pub fn embed_2d(vectors: &[FeatureVector]) -> Result<Vec<[f64; 2]>> {
    if vectors.len() < 2 {
        return Err(Error::Input(format!("embedding needs >= 2 vectors, got {}", vectors.len())));
    }
    let rows: Vec<[f64; 7]> = vectors.iter().map(FeatureVector::to_array).collect();
    Ok(pca_project(&standardize(&rows)))
}

pub(crate) fn pca_project(z: &[[f64; 7]]) -> Vec<[f64; 2]> {
    let n = z.len();
    let x = DMatrix::from_fn(n, 7, |i, j| z[i][j]);
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..7).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components: Vec<[f64; 7]> = order[..2]
        .iter()
        .map(|&k| {
            let mut v = [0.0; 7];
            for (j, vj) in v.iter_mut().enumerate() {
                *vj = eig.eigenvectors[(j, k)];
            }
            let lead = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
            v
        })
        .collect();
    z.iter()
        .map(|r| {
            let dot = |c: &[f64; 7]| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect()
}
