use std::collections::BTreeMap;

use super::features::FeatureVector;

/// Ridge regressor over sparse features.
#[derive(Debug, Clone, Default)]
pub struct SurrogateModel {
    pub weights: BTreeMap<String, f64>,
    pub training: Vec<(FeatureVector, f64)>,
    pub lambda: f64,
}

impl SurrogateModel {
    pub fn predict(&self, x: &FeatureVector) -> f64 {
        x.counts
            .iter()
            .filter_map(|(k, n)| self.weights.get(k).map(|w| w * f64::from(*n)))
            .sum()
    }

    /// `sum (w.x - y)^2 + lambda |w|^2` over the training set.
    pub fn objective(&self, weights: &BTreeMap<String, f64>) -> f64 {
        let probe = SurrogateModel {
            weights: weights.clone(),
            ..Default::default()
        };
        let loss: f64 = self
            .training
            .iter()
            .map(|(x, y)| (probe.predict(x) - y).powi(2))
            .sum();
        loss + self.lambda * weights.values().map(|w| w * w).sum::<f64>()
    }
}

/// Solves `(X^T X + lambda I) w = X^T y` over the union of observed keys.
pub fn ridge_fit(samples: &[(FeatureVector, f64)], lambda: f64) -> SurrogateModel {
    assert!(lambda > 0.0, "ridge lambda must be positive");
    let keys: Vec<&String> = {
        let mut ks: Vec<&String> = samples.iter().flat_map(|(x, _)| x.counts.keys()).collect();
        ks.sort();
        ks.dedup();
        ks
    };
    let index: BTreeMap<&String, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let d = keys.len();
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for (x, y) in samples {
        let row: Vec<(usize, f64)> = x.counts.iter().map(|(k, n)| (index[k], f64::from(*n))).collect();
        for &(i, xi) in &row {
            b[i] += xi * y;
            for &(j, xj) in &row {
                a[i * d + j] += xi * xj;
            }
        }
    }
    for i in 0..d {
        a[i * d + i] += lambda;
    }
    let w = solve_spd(&a, &b, d);
    SurrogateModel {
        weights: keys.into_iter().cloned().zip(w).collect(),
        training: samples.to_vec(),
        lambda,
    }
}

/// Cholesky solve of a symmetric positive definite system, with one round of
/// iterative refinement.
fn solve_spd(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                l[i * d + i] = (a[i * d + i] - s).max(f64::MIN_POSITIVE).sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    let substitute = |rhs: &[f64]| -> Vec<f64> {
        let mut z = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|k| l[i * d + k] * z[k]).sum();
            z[i] = (rhs[i] - s) / l[i * d + i];
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|k| l[k * d + i] * x[k]).sum();
            x[i] = (z[i] - s) / l[i * d + i];
        }
        x
    };
    let mut x = substitute(b);
    let residual: Vec<f64> = (0..d)
        .map(|i| b[i] - (0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>())
        .collect();
    for (xi, dx) in x.iter_mut().zip(substitute(&residual)) {
        *xi += dx;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(pairs: &[(&str, u32)]) -> FeatureVector {
        FeatureVector {
            counts: pairs.iter().map(|(k, n)| (k.to_string(), *n)).collect(),
        }
    }

    #[test]
    fn one_sample_by_hand() {
        let m = ridge_fit(&[(fv(&[("f", 1)]), 2.0)], 1.0);
        assert!((m.weights["f"] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn no_samples() {
        let m = ridge_fit(&[], 1.0);
        assert!(m.weights.is_empty());
        assert_eq!(m.predict(&fv(&[("a", 3)])), 0.0);
    }

    #[test]
    fn two_features_by_hand() {
        // X = [[1,0],[1,1]], y = [1,3], lambda = 1:
        // (X^T X + I) = [[3,1],[1,2]], X^T y = [4,3] -> w = [1, 1]
        let m = ridge_fit(&[(fv(&[("a", 1)]), 1.0), (fv(&[("a", 1), ("b", 1)]), 3.0)], 1.0);
        assert!((m.weights["a"] - 1.0).abs() < 1e-14);
        assert!((m.weights["b"] - 1.0).abs() < 1e-14);
    }
}
