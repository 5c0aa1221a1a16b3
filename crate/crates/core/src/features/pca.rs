use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, IoContext, Result};

/// Eigenvalues are floored at this share of the largest one before the
/// whitening division.
const EIGEN_FLOOR_RATIO: f64 = 1e-6;
const EIGEN_FLOOR_ABS: f64 = 1e-12;

/// Mean-centred PCA projection with per-component whitening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaWhitening {
    mean: Vec<f32>,
    /// `output_dim x input_dim`, row-major, orthonormal rows.
    components: Vec<f32>,
    eigenvalues: Vec<f32>,
    input_dim: usize,
    output_dim: usize,
}

impl PcaWhitening {
    /// Fits on `samples` (all of equal length) keeping the `dims` leading
    /// components. Population covariance (divide by n).
    pub fn fit(samples: &[Vec<f32>], dims: usize) -> Result<Self> {
        let n = samples.len();
        if dims == 0 {
            return Err(Error::InvalidConfig("whitening needs at least one output dimension".into()));
        }
        if n < dims {
            return Err(Error::Insufficient(format!(
                "{n} samples cannot support {dims} whitened dimensions"
            )));
        }
        let d = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(shape_mismatch(d, bad.len()));
        }
        if dims > d {
            return Err(Error::InvalidConfig(format!(
                "cannot keep {dims} components of {d}-dimensional data"
            )));
        }
        let mut mean = vec![0.0f64; d];
        for s in samples {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centred = DMatrix::from_fn(n, d, |i, j| f64::from(samples[i][j]) - mean[j]);
        let cov = (centred.transpose() * &centred) / n as f64;
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let floor = (top * EIGEN_FLOOR_RATIO).max(EIGEN_FLOOR_ABS);

        let mut components = Vec::with_capacity(dims * d);
        let mut eigenvalues = Vec::with_capacity(dims);
        for &c in order.iter().take(dims) {
            let v = eig.eigenvectors.column(c);
            // fix the sign: the entry of largest magnitude is positive
            let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            components.extend(v.iter().map(|&x| (x * sign) as f32));
            eigenvalues.push(eig.eigenvalues[c].max(floor) as f32);
        }
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            components,
            eigenvalues,
            input_dim: d,
            output_dim: dims,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f32] {
        &self.eigenvalues
    }

    /// Row `i` of the projection.
    pub fn component(&self, i: usize) -> &[f32] {
        &self.components[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// `diag(lambda)^-1/2 P (v - mean)`, without normalisation.
    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.input_dim {
            return Err(shape_mismatch(self.input_dim, v.len()));
        }
        Ok((0..self.output_dim)
            .map(|i| {
                let dot: f64 = self
                    .component(i)
                    .iter()
                    .zip(v.iter().zip(&self.mean))
                    .map(|(&p, (&x, &m))| f64::from(p) * (f64::from(x) - f64::from(m)))
                    .sum();
                (dot / f64::from(self.eigenvalues[i]).sqrt()) as f32
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).context(|| format!("reading {}", path.display()))?;
        let pca: Self = serde_json::from_slice(&bytes)?;
        if pca.components.len() != pca.input_dim * pca.output_dim
            || pca.mean.len() != pca.input_dim
            || pca.eigenvalues.len() != pca.output_dim
        {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "inconsistent whitening dimensions".into(),
            });
        }
        Ok(pca)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn leading_component_follows_max_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // x = 3a, y = 3a + 0.5b: main axis is close to (1, 1)/sqrt(2)
        let samples: Vec<Vec<f32>> = (0..5000)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                vec![(3.0 * a) as f32, (3.0 * a + 0.5 * b) as f32]
            })
            .collect();
        let pca = PcaWhitening::fit(&samples, 1).unwrap();
        // analytic covariance [[9, 9], [9, 9.25]]
        let cov = nalgebra::Matrix2::new(9.0, 9.0, 9.0, 9.25);
        let eig = cov.symmetric_eigen();
        let i = if eig.eigenvalues[0] > eig.eigenvalues[1] { 0 } else { 1 };
        let axis = eig.eigenvectors.column(i);
        let c = pca.component(0);
        let cosine = f64::from(c[0]) * axis[0] + f64::from(c[1]) * axis[1];
        assert!(cosine.abs() > 0.99, "{cosine}");
    }

    #[test]
    fn mean_maps_to_zero() {
        let samples: Vec<Vec<f32>> = (0..50).map(|i| vec![i as f32, (i * i) as f32 * 0.1, 1.0]).collect();
        let pca = PcaWhitening::fit(&samples, 2).unwrap();
        let out = pca.apply(pca.mean()).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-4), "{out:?}");
    }

    #[test]
    fn duplicates_do_not_blow_up() {
        let samples = vec![vec![1.0f32, 2.0, 3.0]; 10];
        let pca = PcaWhitening::fit(&samples, 3).unwrap();
        let out = pca.apply(&[1.5, 2.0, 3.0]).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_few_samples() {
        let samples = vec![vec![0.0f32; 4]; 3];
        assert!(matches!(PcaWhitening::fit(&samples, 4), Err(Error::Insufficient(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let samples: Vec<Vec<f32>> = (0..20).map(|i| vec![i as f32, (i % 3) as f32]).collect();
        let pca = PcaWhitening::fit(&samples, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.json");
        pca.save(&path).unwrap();
        assert_eq!(PcaWhitening::load(&path).unwrap(), pca);
    }
}
