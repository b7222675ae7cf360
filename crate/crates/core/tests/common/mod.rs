//! Shared helpers for the integration suites: the definition-literal
//! correlation oracle and constructed test patterns.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Normalized cross-correlation straight from the definition: for every
/// placement, recompute the template and window means, then the centered
/// products, all in f64. Deliberately independent of the fast kernel.
pub fn ncc_oracle(template: &Array2<f32>, target: &Array2<f32>) -> Array2<f64> {
    let (th, tw) = template.dim();
    let (rows, cols) = target.dim();
    let n = (th * tw) as f64;
    let mut out = Array2::<f64>::zeros((rows - th + 1, cols - tw + 1));
    for or in 0..out.nrows() {
        for oc in 0..out.ncols() {
            let mut mean_t = 0.0;
            let mut mean_w = 0.0;
            for i in 0..th {
                for j in 0..tw {
                    mean_t += template[(i, j)] as f64;
                    mean_w += target[(or + i, oc + j)] as f64;
                }
            }
            mean_t /= n;
            mean_w /= n;
            let (mut num, mut var_t, mut var_w) = (0.0, 0.0, 0.0);
            for i in 0..th {
                for j in 0..tw {
                    let a = template[(i, j)] as f64 - mean_t;
                    let b = target[(or + i, oc + j)] as f64 - mean_w;
                    num += a * b;
                    var_t += a * a;
                    var_w += b * b;
                }
            }
            if var_t > 1e-12 * n && var_w > 1e-12 * n {
                out[(or, oc)] = num / (var_t * var_w).sqrt();
            }
        }
    }
    out
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..1.0f32))
}

/// Zero-mean, unit-norm patterns that are mutually orthogonal as vectors,
/// so linear blends have exactly known pairwise correlations.
pub fn orthonormal_patterns(
    rng: &mut ChaCha8Rng,
    count: usize,
    rows: usize,
    cols: usize,
) -> Vec<Array2<f64>> {
    let n = rows * cols;
    assert!(count + 1 < n);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    // orthogonalize against the constant vector so every pattern is zero-mean
    basis.push(vec![1.0 / (n as f64).sqrt(); n]);
    while basis.len() < count + 1 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            for (x, b) in v.iter_mut().zip(b) {
                *x -= dot * b;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut v {
                *x /= norm;
            }
            basis.push(v);
        }
    }
    basis[1..]
        .iter()
        .map(|v| Array2::from_shape_vec((rows, cols), v.clone()).unwrap())
        .collect()
}

/// Affine-map a zero-mean pattern into non-negative magnitudes in
/// (0, 1); affine maps leave normalized correlations unchanged.
pub fn as_patch(pattern: &Array2<f64>) -> Array2<f32> {
    let peak = pattern.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-12);
    pattern.mapv(|v| (0.5 + 0.45 * v / peak) as f32)
}

/// `alpha * a + sqrt(1 - alpha^2) * b`; unit norm when a, b orthonormal.
pub fn blend(a: &Array2<f64>, b: &Array2<f64>, alpha: f64) -> Array2<f64> {
    a * alpha + b * (1.0 - alpha * alpha).sqrt()
}

pub fn plant(values: &mut Array2<f32>, patch: &Array2<f32>, row: usize, col: usize) {
    values
        .slice_mut(ndarray::s![row..row + patch.nrows(), col..col + patch.ncols()])
        .assign(patch);
}
