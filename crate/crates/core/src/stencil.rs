//! Finite-difference stencils shared by the Jacobian, NGF and smoothness terms.
//!
//! Central differences in the interior, one-sided differences on the faces.
//! Every forward operator has an exact adjoint here so gradients can be
//! pulled back through it.

use crate::Vec3;

/// `(plus, minus, scale)` index offsets along one axis at position `i` of `n`.
#[inline]
fn taps(i: usize, n: usize) -> (usize, usize, f64) {
    if i == 0 {
        (1, 0, 1.0)
    } else if i == n - 1 {
        (n - 1, n - 2, 1.0)
    } else {
        (i + 1, i - 1, 0.5)
    }
}

/// Flat indices and scale for the derivative along `axis` at voxel `c`.
#[inline]
pub(crate) fn axis_taps(dims: &[usize; 3], c: [usize; 3], axis: usize) -> (usize, usize, f64) {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let base = c[0] + dims[0] * (c[1] + dims[1] * c[2]) - c[axis] * stride;
    let (p, m, s) = taps(c[axis], dims[axis]);
    (base + p * stride, base + m * stride, s)
}

#[inline]
fn coords(dims: &[usize; 3], i: usize) -> [usize; 3] {
    [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
}

/// Spatial gradient of a scalar image, one vector per voxel.
pub(crate) fn gradient(data: &[f64], dims: &[usize; 3]) -> Vec<Vec3> {
    (0..data.len())
        .map(|i| {
            let c = coords(dims, i);
            std::array::from_fn(|a| {
                let (p, m, s) = axis_taps(dims, c, a);
                s * (data[p] - data[m])
            })
        })
        .collect()
}

/// Adjoint of [`gradient`]: maps per-voxel vector cotangents to a scalar image.
pub(crate) fn gradient_adjoint(g: &[Vec3], dims: &[usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for (i, gi) in g.iter().enumerate() {
        let c = coords(dims, i);
        for a in 0..3 {
            let (p, m, s) = axis_taps(dims, c, a);
            out[p] += s * gi[a];
            out[m] -= s * gi[a];
        }
    }
    out
}

/// Spatial derivative matrix of a vector field: `d[i][j] = d field_i / d x_j`.
pub(crate) fn vector_gradient(data: &[Vec3], dims: &[usize; 3]) -> Vec<[[f64; 3]; 3]> {
    (0..data.len())
        .map(|i| {
            let c = coords(dims, i);
            let mut d = [[0.0; 3]; 3];
            for j in 0..3 {
                let (p, m, s) = axis_taps(dims, c, j);
                for (comp, row) in d.iter_mut().enumerate() {
                    row[j] = s * (data[p][comp] - data[m][comp]);
                }
            }
            d
        })
        .collect()
}

/// Adjoint of [`vector_gradient`].
pub(crate) fn vector_gradient_adjoint(g: &[[[f64; 3]; 3]], dims: &[usize; 3]) -> Vec<Vec3> {
    let mut out = vec![[0.0; 3]; g.len()];
    for (i, gi) in g.iter().enumerate() {
        let c = coords(dims, i);
        for j in 0..3 {
            let (p, m, s) = axis_taps(dims, c, j);
            for comp in 0..3 {
                let w = s * gi[comp][j];
                if w != 0.0 {
                    out[p][comp] += w;
                    out[m][comp] -= w;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adjoint_identity_holds() {
        let dims = [4, 3, 5];
        let n = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<Vec3> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let df = gradient(&f, &dims);
        let lhs: f64 = df.iter().zip(&g).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        let at = gradient_adjoint(&g, &dims);
        let rhs: f64 = f.iter().zip(&at).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn vector_adjoint_identity_holds() {
        let dims = [3, 4, 3];
        let n = 36;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f: Vec<Vec3> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let g: Vec<[[f64; 3]; 3]> = (0..n)
            .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
            .collect();
        let df = vector_gradient(&f, &dims);
        let mut lhs = 0.0;
        for (a, b) in df.iter().zip(&g) {
            for i in 0..3 {
                for j in 0..3 {
                    lhs += a[i][j] * b[i][j];
                }
            }
        }
        let at = vector_gradient_adjoint(&g, &dims);
        let rhs: f64 = f
            .iter()
            .zip(&at)
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_data_has_exact_derivatives_everywhere() {
        let dims = [4, 4, 4];
        let f: Vec<f64> = (0..64)
            .map(|i| {
                let c = coords(&dims, i);
                2.0 * c[0] as f64 - c[1] as f64 + 0.5 * c[2] as f64
            })
            .collect();
        for d in gradient(&f, &dims) {
            assert_eq!(d, [2.0, -1.0, 0.5]);
        }
    }
}
