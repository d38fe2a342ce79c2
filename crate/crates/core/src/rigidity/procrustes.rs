//! Least-squares rigid alignment of paired point sets.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::mat3::{self, Mat3};
use crate::Vec3;

/// `x -> rotation * x + translation`, in voxel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
    /// Centroid of the source points of the fit. Informational only; it does
    /// not enter [`RigidTransform::apply`].
    pub center: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: mat3::IDENTITY,
        translation: [0.0; 3],
        center: [0.0; 3],
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        RigidTransform {
            rotation,
            translation,
            center: [0.0; 3],
        }
    }

    /// Rotation by `angle` radians about `axis` through `center`, then a shift.
    pub fn about(center: Vec3, axis: Vec3, angle: f64, shift: Vec3) -> Self {
        let rotation = mat3::rotation(axis, angle);
        let rc = mat3::mat_vec(&rotation, center);
        RigidTransform {
            rotation,
            translation: mat3::add(mat3::sub(center, rc), shift),
            center,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        mat3::add(mat3::mat_vec(&self.rotation, p), self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = mat3::transpose(&self.rotation);
        RigidTransform {
            rotation: rt,
            translation: mat3::scale(mat3::mat_vec(&rt, self.translation), -1.0),
            center: self.apply(self.center),
        }
    }

    /// `self ∘ other`.
    pub fn then_after(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: mat3::mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
            center: other.center,
        }
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let r = &self.rotation;
        ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Mean squared distance between `apply(p)` and `q` over the pairs.
    pub fn mean_residual(&self, corr: &PointCorrespondences) -> f64 {
        let n = corr.len() as f64;
        corr.pairs()
            .map(|(p, q)| mat3::norm2(mat3::sub(self.apply(p), q)))
            .sum::<f64>()
            / n
    }
}

/// Paired source and target points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCorrespondences {
    source: Vec<Vec3>,
    target: Vec<Vec3>,
}

impl PointCorrespondences {
    pub fn new(source: Vec<Vec3>, target: Vec<Vec3>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::InvalidValue(format!(
                "{} source points but {} target points",
                source.len(),
                target.len()
            )));
        }
        Ok(PointCorrespondences { source, target })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self) -> &[Vec3] {
        &self.source
    }

    pub fn target(&self) -> &[Vec3] {
        &self.target
    }

    pub fn pairs(&self) -> impl Iterator<Item = (Vec3, Vec3)> + '_ {
        self.source.iter().copied().zip(self.target.iter().copied())
    }
}

fn centroid(points: &[Vec3]) -> Vector3<f64> {
    let s = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p));
    s / points.len() as f64
}

/// Proper rotation and translation minimizing `sum |R p + t - q|^2`.
pub fn fit_rigid(corr: &PointCorrespondences) -> Result<RigidTransform> {
    if corr.len() < 3 {
        return Err(Error::degenerate(format!("{} points, need at least 3", corr.len())));
    }
    let pc = centroid(corr.source());
    let qc = centroid(corr.target());
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (p, q) in corr.pairs() {
        let dp = Vector3::from(p) - pc;
        let dq = Vector3::from(q) - qc;
        h += dp * dq.transpose();
        spread += dp * dp.transpose();
    }

    // collinear sources leave the rotation about their line undetermined
    let mut ev = spread.symmetric_eigenvalues();
    ev.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::degenerate("source points are collinear"));
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    // singular values come sorted in decreasing order, so the flip hits the smallest
    let r = v * fix * u.transpose();
    let t = qc - r * pc;

    Ok(RigidTransform {
        rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
        translation: [t[0], t[1], t[2]],
        center: [pc[0], pc[1], pc[2]],
    })
}
