//! Penalties that keep labeled bodies rigid under a displacement field.
//!
//! Every term is evaluated on the fixed grid over the voxels a body occupies
//! after warping (soft indicator above one half). Closest rigid transforms are
//! fitted per evaluation and treated as constants when differentiating.

pub mod procrustes;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{jacobian, jacobian_adjoint, warp_volume, warp_with_gradient, DisplacementField, VectorField};
use crate::mat3::{self, Mat3};
use crate::parallel::ordered_sum;
use crate::volume::{Cell, LabelVolume, Volume};

pub use procrustes::{fit_rigid, PointCorrespondences, RigidTransform};

/// Warped soft indicator value above which a voxel belongs to a body.
pub const BODY_THRESHOLD: f64 = 0.5;
const DICE_EPS: f64 = 1e-6;

/// One rigidity penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RigidityTerm {
    Pc,
    Oc,
    RigidDice,
    RigidField,
    Volume,
}

impl RigidityTerm {
    pub const ALL: [RigidityTerm; 5] = [
        RigidityTerm::Pc,
        RigidityTerm::Oc,
        RigidityTerm::RigidDice,
        RigidityTerm::RigidField,
        RigidityTerm::Volume,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RigidityTerm::Pc => "pc",
            RigidityTerm::Oc => "oc",
            RigidityTerm::RigidDice => "rigid_dice",
            RigidityTerm::RigidField => "rigid_field",
            RigidityTerm::Volume => "volume",
        }
    }

    /// Whether the term needs a closest-rigid fit per body.
    pub fn needs_fit(&self) -> bool {
        matches!(self, RigidityTerm::RigidDice | RigidityTerm::RigidField)
    }
}

impl fmt::Display for RigidityTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RigidityTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RigidityTerm::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown rigidity term '{s}'")))
    }
}

/// A body's closest rigid transform and the voxels it was fitted on.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyFrame {
    pub body: u16,
    /// Fixed-grid voxel indices used for the fit, ascending.
    pub points: Vec<usize>,
    pub transform: RigidTransform,
}

fn check_grid(labels: &LabelVolume, phi: &DisplacementField) -> Result<()> {
    labels.grid().ensure_matches(phi.grid(), "labels vs displacement")
}

/// Fixed-grid voxels whose warped soft indicator of `body` exceeds one half.
pub fn body_domain(labels: &LabelVolume, body: u16, phi: &DisplacementField) -> Result<Vec<usize>> {
    check_grid(labels, phi)?;
    let soft = warp_volume(&labels.indicator(body)?, phi);
    Ok(domain_of(&soft))
}

fn domain_of(soft: &Volume) -> Vec<usize> {
    soft.data()
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > BODY_THRESHOLD)
        .map(|(i, _)| i)
        .collect()
}

/// Evenly spaced deterministic subset of at most `cap` entries.
fn stratified(domain: Vec<usize>, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap > 0 && domain.len() > cap => {
            let n = domain.len();
            (0..cap).map(|k| domain[(2 * k + 1) * n / (2 * cap)]).collect()
        }
        _ => domain,
    }
}

/// Fits the closest rigid transform of one body, optionally on a capped subset.
pub fn body_frame(labels: &LabelVolume, body: u16, phi: &DisplacementField, cap: Option<usize>) -> Result<BodyFrame> {
    let points = stratified(body_domain(labels, body, phi)?, cap);
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry {
            body: Some(body),
            reason: format!("{} warped voxels, need at least 3", points.len()),
        });
    }
    let grid = phi.grid();
    let corr = PointCorrespondences::new(
        points.iter().map(|&i| grid.point(i)).collect(),
        points.iter().map(|&i| phi.map_index(i)).collect(),
    )?;
    let transform = fit_rigid(&corr).map_err(|e| e.with_body(body))?;
    Ok(BodyFrame { body, points, transform })
}

/// Closest rigid transform to `phi` on the warped voxels of `body`.
pub fn closest_rigid_of_body(labels: &LabelVolume, body: u16, phi: &DisplacementField) -> Result<RigidTransform> {
    Ok(body_frame(labels, body, phi, None)?.transform)
}

/// Indicator of `body` resampled under a rigid transform.
pub fn rigid_resample(labels: &LabelVolume, body: u16, t: &RigidTransform) -> Result<Volume> {
    let ind = labels.indicator(body)?;
    let grid = *labels.grid();
    let dims = grid.dims;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|i| Cell::new(&dims, t.apply(grid.point(i))).value(ind.data()))
        .collect();
    Volume::new(grid, data)
}

/// Soft Dice between the warped body and its rigidly moved copy; see
/// [`rigid_dice_with`].
pub fn rigid_dice_loss(labels: &LabelVolume, body: u16, phi: &DisplacementField) -> Result<(f64, VectorField)> {
    let frame = body_frame(labels, body, phi, None)?;
    rigid_dice_with(labels, &frame, phi)
}

/// `1 - 2 sum(A B) / (sum A^2 + sum B^2 + eps)` with `A` the warped soft
/// indicator and `B` the indicator under the frozen transform of `frame`.
pub fn rigid_dice_with(labels: &LabelVolume, frame: &BodyFrame, phi: &DisplacementField) -> Result<(f64, VectorField)> {
    check_grid(labels, phi)?;
    let (a, da) = warp_with_gradient(&labels.indicator(frame.body)?, phi)?;
    let b = rigid_resample(labels, frame.body, &frame.transform)?;
    let (a, b) = (a.data(), b.data());
    let s = ordered_sum(a.iter().zip(b).map(|(x, y)| x * y));
    let d = ordered_sum(a.iter().map(|x| x * x)) + ordered_sum(b.iter().map(|y| y * y)) + DICE_EPS;
    let loss = 1.0 - 2.0 * s / d;
    let data = a
        .iter()
        .zip(b)
        .zip(&da)
        .map(|((&x, &y), g)| mat3::scale(*g, -2.0 * y / d + 4.0 * s * x / (d * d)))
        .collect();
    Ok((loss, VectorField::new(*phi.grid(), data)?))
}

/// Mean squared distance between `phi` and its closest rigid transform over
/// the warped voxels of `body`.
pub fn rigid_field_loss(labels: &LabelVolume, body: u16, phi: &DisplacementField) -> Result<(f64, VectorField)> {
    let frame = body_frame(labels, body, phi, None)?;
    rigid_field_with(&frame, phi)
}

/// Rigid field residual on the frozen points and transform of `frame`.
pub fn rigid_field_with(frame: &BodyFrame, phi: &DisplacementField) -> Result<(f64, VectorField)> {
    let grid = *phi.grid();
    let n = frame.points.len();
    if n == 0 {
        return Err(Error::DegenerateGeometry {
            body: Some(frame.body),
            reason: "no fit points".into(),
        });
    }
    let mut grad = VectorField::zeros(grid);
    let mut residuals = Vec::with_capacity(n);
    for &i in &frame.points {
        let r = mat3::sub(phi.map_index(i), frame.transform.apply(grid.point(i)));
        residuals.push(mat3::norm2(r));
        grad.data_mut()[i] = mat3::scale(r, 2.0 / n as f64);
    }
    Ok((ordered_sum(residuals.into_iter()) / n as f64, grad))
}

/// Warped-body voxel sets of every body, in `body_ids` order.
pub fn body_domains(labels: &LabelVolume, phi: &DisplacementField) -> Result<Vec<Vec<usize>>> {
    labels.body_ids().iter().map(|&b| body_domain(labels, b, phi)).collect()
}

/// Per-body mean of a per-voxel Jacobian penalty, and the gradient of the
/// average over bodies.
fn jacobian_penalty(
    domains: &[Vec<usize>],
    phi: &DisplacementField,
    f: impl Fn(&Mat3) -> (f64, Mat3),
) -> (Vec<f64>, VectorField) {
    let grid = *phi.grid();
    let jac = jacobian(phi);
    let mut grad_j = vec![[[0.0; 3]; 3]; grid.len()];
    let nb = domains.len().max(1) as f64;
    let mut per_body = Vec::with_capacity(domains.len());
    for dom in domains {
        if dom.is_empty() {
            per_body.push(0.0);
            continue;
        }
        let w = 1.0 / (nb * dom.len() as f64);
        let mut vals = Vec::with_capacity(dom.len());
        for &i in dom {
            let (v, g) = f(&jac.data()[i]);
            vals.push(v);
            for r in 0..3 {
                for c in 0..3 {
                    grad_j[i][r][c] += w * g[r][c];
                }
            }
        }
        per_body.push(ordered_sum(vals.into_iter()) / dom.len() as f64);
    }
    (per_body, jacobian_adjoint(&grid, &grad_j))
}

fn body_mean(per_body: &[f64]) -> f64 {
    if per_body.is_empty() {
        0.0
    } else {
        ordered_sum(per_body.iter().copied()) / per_body.len() as f64
    }
}

fn pc_voxel(j: &Mat3) -> (f64, Mat3) {
    let r = mat3::det(j) - 1.0;
    let cof = mat3::cofactor(j);
    (r * r, cof.map(|row| row.map(|c| 2.0 * r * c)))
}

fn oc_voxel(j: &Mat3) -> (f64, Mat3) {
    let mut e = mat3::mat_mul(&mat3::transpose(j), j);
    for (k, row) in e.iter_mut().enumerate() {
        row[k] -= 1.0;
    }
    let v = e.iter().flatten().map(|x| x * x).sum();
    let je = mat3::mat_mul(j, &e);
    (v, je.map(|row| row.map(|c| 4.0 * c)))
}

/// Properness condition: mean `(det J - 1)^2` over each body, averaged over bodies.
pub fn pc_loss(labels: &LabelVolume, phi: &DisplacementField) -> Result<(f64, VectorField)> {
    Ok(pc_with(&body_domains(labels, phi)?, phi))
}

pub fn pc_with(domains: &[Vec<usize>], phi: &DisplacementField) -> (f64, VectorField) {
    let (per_body, grad) = pc_per_body(domains, phi);
    (body_mean(&per_body), grad)
}

/// Per-body properness values; the gradient is that of their mean.
pub fn pc_per_body(domains: &[Vec<usize>], phi: &DisplacementField) -> (Vec<f64>, VectorField) {
    jacobian_penalty(domains, phi, pc_voxel)
}

/// Orthonormal condition: mean `|J^T J - I|_F^2` over each body, averaged over bodies.
pub fn oc_loss(labels: &LabelVolume, phi: &DisplacementField) -> Result<(f64, VectorField)> {
    Ok(oc_with(&body_domains(labels, phi)?, phi))
}

pub fn oc_with(domains: &[Vec<usize>], phi: &DisplacementField) -> (f64, VectorField) {
    let (per_body, grad) = oc_per_body(domains, phi);
    (body_mean(&per_body), grad)
}

/// Per-body orthonormality values; the gradient is that of their mean.
pub fn oc_per_body(domains: &[Vec<usize>], phi: &DisplacementField) -> (Vec<f64>, VectorField) {
    jacobian_penalty(domains, phi, oc_voxel)
}

/// Squared relative change of each body's soft volume, averaged over bodies.
pub fn volume_loss(labels: &LabelVolume, phi: &DisplacementField) -> Result<(f64, VectorField)> {
    let (per_body, grad) = volume_per_body(labels, phi)?;
    Ok((body_mean(&per_body), grad))
}

/// Per-body squared relative soft-volume change; the gradient is that of their mean.
pub fn volume_per_body(labels: &LabelVolume, phi: &DisplacementField) -> Result<(Vec<f64>, VectorField)> {
    check_grid(labels, phi)?;
    let grid = *phi.grid();
    let bodies = labels.body_ids();
    let nb = bodies.len().max(1) as f64;
    let mut per_body = Vec::with_capacity(bodies.len());
    let mut grad = VectorField::zeros(grid);
    for &b in bodies {
        let ind = labels.indicator(b)?;
        let (a, da) = warp_with_gradient(&ind, phi)?;
        let before = labels.count(b) as f64;
        let after = ordered_sum(a.data().iter().copied());
        let r = (after - before) / before;
        per_body.push(r * r);
        let s = 2.0 * r / (before * nb);
        for (g, d) in grad.data_mut().iter_mut().zip(&da) {
            *g = mat3::add(*g, mat3::scale(*d, s));
        }
    }
    Ok((per_body, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use crate::Vec3;

    fn cube_labels(n: usize, lo: usize, hi: usize) -> LabelVolume {
        LabelVolume::from_fn(Grid::with_dims([n; 3]).unwrap(), |x, y, z| {
            u16::from([x, y, z].iter().all(|&c| (lo..hi).contains(&c)))
        })
    }

    fn centre(lo: usize, hi: usize) -> Vec3 {
        let c = (lo + hi - 1) as f64 / 2.0;
        [c; 3]
    }

    fn rigid_phi(grid: Grid, t: &RigidTransform) -> DisplacementField {
        DisplacementField::from_map(grid, |p| t.apply(p))
    }

    /// Scaling about `c` that grows a body by `s` in each direction.
    fn grow(grid: Grid, c: Vec3, s: f64) -> DisplacementField {
        DisplacementField::from_map(grid, move |p| mat3::add(c, mat3::scale(mat3::sub(p, c), 1.0 / s)))
    }

    fn fd_check(loss: impl Fn(&DisplacementField) -> f64, phi: &DisplacementField, grad: &VectorField, tol: f64) {
        let dir = VectorField::from_fn(*phi.grid(), |p| {
            [(p[0] * 1.3 + p[1]).sin(), (p[2] * 0.7 - p[0]).cos(), (p[1] * 0.9 + p[2] * 0.4).sin()]
        });
        let h = 1e-6;
        let shifted = |s: f64| {
            let mut f = phi.clone();
            f.add_scaled(&dir, s);
            f
        };
        let fd = (loss(&shifted(h)) - loss(&shifted(-h))) / (2.0 * h);
        let an = grad.dot(&dir);
        let scale = fd.abs().max(an.abs()).max(1e-8);
        assert!((fd - an).abs() / scale < tol, "fd {fd} vs analytic {an}");
    }

    #[test]
    fn identity_fit_is_identity() {
        let labels = cube_labels(10, 3, 7);
        let t = closest_rigid_of_body(&labels, 1, &DisplacementField::identity(*labels.grid())).unwrap();
        assert!(t.angle() < 1e-12);
        assert!(mat3::norm2(t.translation) < 1e-20);
    }

    #[test]
    fn recovers_small_rotation_about_centroid() {
        let labels = cube_labels(16, 4, 12);
        let c = centre(4, 12);
        let truth = RigidTransform::about(c, [0.2, 1.0, 0.3], 5f64.to_radians(), [0.0; 3]);
        let t = closest_rigid_of_body(&labels, 1, &rigid_phi(*labels.grid(), &truth)).unwrap();
        let diff = t.inverse().then_after(&truth);
        assert!(diff.angle() < 1e-3);
        assert!(mat3::norm2(mat3::sub(t.translation, truth.translation)).sqrt() < 1e-9);
    }

    #[test]
    fn shear_residual_matches_quaternion_fit() {
        let labels = cube_labels(12, 3, 9);
        let grid = *labels.grid();
        let phi = DisplacementField::from_map(grid, |p| [p[0] + 0.1 * p[1], p[1], p[2]]);
        let frame = body_frame(&labels, 1, &phi, None).unwrap();
        let corr = PointCorrespondences::new(
            frame.points.iter().map(|&i| grid.point(i)).collect(),
            frame.points.iter().map(|&i| phi.map_index(i)).collect(),
        )
        .unwrap();
        let oracle = procrustes::tests::horn_fit(&corr).mean_residual(&corr);
        let (loss, _) = rigid_field_loss(&labels, 1, &phi).unwrap();
        assert!(oracle > 1e-3);
        assert!((loss - oracle).abs() < 1e-9 * oracle.max(1.0), "{loss} vs {oracle}");
    }

    #[test]
    fn rigid_field_invariant_under_rigid_precomposition() {
        let labels = cube_labels(14, 4, 10);
        let grid = *labels.grid();
        let shear = |p: Vec3| [p[0] + 0.08 * (p[1] - 7.0), p[1], p[2] + 0.05 * (p[0] - 7.0)];
        let g = RigidTransform::about(centre(4, 10), [0.0, 0.0, 1.0], 0.05, [0.3, -0.2, 0.1]);
        let base = DisplacementField::from_map(grid, shear);
        let moved = DisplacementField::from_map(grid, |p| g.apply(shear(p)));
        let (a, _) = rigid_field_loss(&labels, 1, &base).unwrap();
        let (b, _) = rigid_field_loss(&labels, 1, &moved).unwrap();
        assert!(a > 1e-3);
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn global_rigid_motion_is_in_every_null_space() {
        let labels = cube_labels(16, 4, 12);
        let grid = *labels.grid();
        let t = RigidTransform::about(centre(4, 12), [1.0, 0.5, -0.3], 4f64.to_radians(), [0.4, -0.7, 0.25]);
        let phi = rigid_phi(grid, &t);
        assert!(rigid_field_loss(&labels, 1, &phi).unwrap().0 < 1e-6);
        assert!(rigid_dice_loss(&labels, 1, &phi).unwrap().0 < 1e-2);
        assert!(pc_loss(&labels, &phi).unwrap().0 < 1e-9);
        assert!(oc_loss(&labels, &phi).unwrap().0 < 1e-9);
        assert!(volume_loss(&labels, &phi).unwrap().0 < 1e-3);
    }

    #[test]
    fn exact_rigid_dice_is_near_zero() {
        let labels = cube_labels(16, 4, 12);
        let t = RigidTransform::about(centre(4, 12), [0.0, 0.0, 1.0], 5f64.to_radians(), [0.3, 0.0, 0.0]);
        let (loss, _) = rigid_dice_loss(&labels, 1, &rigid_phi(*labels.grid(), &t)).unwrap();
        assert!(loss < 1e-3, "{loss}");
    }

    #[test]
    fn scaled_body_has_large_rigid_dice() {
        let labels = cube_labels(20, 4, 16);
        let phi = grow(*labels.grid(), centre(4, 16), 1.3);
        let (loss, _) = rigid_dice_loss(&labels, 1, &phi).unwrap();
        assert!(loss > 0.1 && loss <= 1.0, "{loss}");
    }

    #[test]
    fn jacobian_penalties_on_linear_fields() {
        let labels = cube_labels(12, 3, 9);
        let grid = *labels.grid();
        let id = DisplacementField::identity(grid);
        assert_eq!(pc_loss(&labels, &id).unwrap().0, 0.0);
        assert_eq!(oc_loss(&labels, &id).unwrap().0, 0.0);

        let s = DisplacementField::from_map(grid, |p| mat3::scale(p, 1.1));
        let doms = vec![(0..grid.len()).collect::<Vec<_>>()];
        assert!((pc_with(&doms, &s).0 - 0.331f64.powi(2)).abs() < 1e-9);
        assert!((oc_with(&doms, &s).0 - 3.0 * 0.21f64.powi(2)).abs() < 1e-9);
    }

    #[test]
    fn unit_determinant_shear_separates_pc_from_oc() {
        let labels = cube_labels(12, 3, 9);
        let phi = DisplacementField::from_map(*labels.grid(), |p| [p[0] + 0.2 * p[1], p[1], p[2]]);
        let pc = pc_loss(&labels, &phi).unwrap().0;
        let oc = oc_loss(&labels, &phi).unwrap().0;
        assert!(pc < 1e-12);
        // |J^T J - I|^2 = 2 a^2 + a^4 for a shear of size a
        assert!((oc - (2.0 * 0.04 + 0.0016)).abs() < 1e-9, "{oc}");
    }

    #[test]
    fn volume_loss_tracks_soft_growth() {
        let labels = cube_labels(20, 4, 16);
        let grid = *labels.grid();
        let c = centre(4, 16);
        let phi = grow(grid, c, 1.1);
        let (loss, _) = volume_loss(&labels, &phi).unwrap();
        let ind = labels.indicator(1).unwrap();
        let soft: f64 = (0..grid.len())
            .map(|i| ind.sample_trilinear(phi.map_index(i)))
            .sum();
        let r = soft / 1728.0 - 1.0;
        assert!((loss - r * r).abs() < 1e-12);
        assert!((r - 0.331).abs() < 0.03, "{r}");

        let shift = DisplacementField::from_map(grid, |p| mat3::add(p, [0.4, -0.3, 0.2]));
        assert!(volume_loss(&labels, &shift).unwrap().0 < 1e-3);
        assert_eq!(volume_loss(&labels, &DisplacementField::identity(grid)).unwrap().0, 0.0);
    }

    #[test]
    fn unknown_body_and_degenerate_errors() {
        let labels = cube_labels(8, 2, 5);
        let id = DisplacementField::identity(*labels.grid());
        assert!(matches!(rigid_dice_loss(&labels, 9, &id), Err(Error::UnknownBody(9))));
        let away = DisplacementField::from_map(*labels.grid(), |p| mat3::add(p, [50.0, 0.0, 0.0]));
        assert!(matches!(
            closest_rigid_of_body(&labels, 1, &away),
            Err(Error::DegenerateGeometry { body: Some(1), .. })
        ));
    }

    #[test]
    fn stratified_cap_is_deterministic_and_spread() {
        let s = stratified((0..100).collect(), Some(10));
        assert_eq!(s, vec![5, 15, 25, 35, 45, 55, 65, 75, 85, 95]);
        assert_eq!(stratified((0..5).collect(), Some(10)).len(), 5);
        let labels = cube_labels(12, 2, 10);
        let f = body_frame(&labels, 1, &DisplacementField::identity(*labels.grid()), Some(50)).unwrap();
        assert_eq!(f.points.len(), 50);
    }

    fn wobbly(grid: Grid) -> DisplacementField {
        DisplacementField::from_map(grid, |p| {
            [
                p[0] + 0.3 * (p[1] * 0.7).sin() + 0.1 * p[2],
                p[1] + 0.25 * (p[2] * 0.5 + p[0] * 0.3).cos(),
                p[2] * 1.05 + 0.2 * (p[0] * 0.6).sin(),
            ]
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        let labels = cube_labels(8, 2, 6);
        let grid = *labels.grid();
        let phi = wobbly(grid);
        let frame = body_frame(&labels, 1, &phi, None).unwrap();
        let doms = body_domains(&labels, &phi).unwrap();

        let (_, g) = rigid_dice_with(&labels, &frame, &phi).unwrap();
        fd_check(|f| rigid_dice_with(&labels, &frame, f).unwrap().0, &phi, &g, 1e-2);
        let (_, g) = rigid_field_with(&frame, &phi).unwrap();
        fd_check(|f| rigid_field_with(&frame, f).unwrap().0, &phi, &g, 1e-6);
        let (_, g) = pc_with(&doms, &phi);
        fd_check(|f| pc_with(&doms, f).0, &phi, &g, 1e-6);
        let (_, g) = oc_with(&doms, &phi);
        fd_check(|f| oc_with(&doms, f).0, &phi, &g, 1e-6);
        let (_, g) = volume_loss(&labels, &phi).unwrap();
        fd_check(|f| volume_loss(&labels, f).unwrap().0, &phi, &g, 1e-2);
    }

    #[test]
    fn term_names_round_trip() {
        for t in RigidityTerm::ALL {
            assert_eq!(t.name().parse::<RigidityTerm>().unwrap(), t);
        }
        assert!("rigid".parse::<RigidityTerm>().is_err());
    }
}
