//! Stationary velocity fields, their exponential by scaling and squaring,
//! warping, and Jacobian analysis.
//!
//! All vectors are in voxel units of the fixed grid. A displacement field `u`
//! represents the map `phi(x) = x + u(x)` from fixed to moving coordinates.

use std::ops::{Deref, DerefMut};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat3::{self, Mat3};
use crate::stencil;
use crate::volume::{Cell, Grid, LabelVolume, Volume};
use crate::Vec3;

/// Default number of squaring steps.
pub const DEFAULT_STEPS: usize = 7;

/// Dense grid of 3-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    data: Vec<Vec3>,
}

impl VectorField {
    pub fn new(grid: Grid, data: Vec<Vec3>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "field length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(VectorField { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        VectorField {
            grid,
            data: vec![[0.0; 3]; grid.len()],
        }
    }

    /// Evaluates `f` at every voxel-center position.
    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> Vec3 + Sync) -> Self {
        let data = (0..grid.len()).into_par_iter().map(|i| f(grid.point(i))).collect();
        VectorField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[Vec3] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Vec3] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Vec3> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    /// Trilinear sample of the field at a continuous voxel position.
    pub fn sample(&self, p: Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for (i, w) in Cell::new(&self.grid.dims, p).corners() {
            let d = self.data[i];
            out[0] += w * d[0];
            out[1] += w * d[1];
            out[2] += w * d[2];
        }
        out
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        VectorField {
            grid: self.grid,
            data: self.data.iter().map(|&v| mat3::scale(v, s)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &VectorField, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            a[0] += s * b[0];
            a[1] += s * b[1];
            a[2] += s * b[2];
        }
    }

    /// Euclidean inner product over all voxels and components.
    pub fn dot(&self, other: &VectorField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| mat3::dot(*a, *b)).sum()
    }

    /// Largest vector length.
    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| mat3::norm2(*v).sqrt()).fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        self.data.iter().map(|v| mat3::norm2(*v).sqrt()).sum::<f64>() / self.data.len() as f64
    }

    /// Trilinear upsampling onto a finer grid of the same extent, rescaling
    /// the vectors into the finer grid's voxel units.
    pub fn upsample(&self, fine: &Grid) -> VectorField {
        let ratio: Vec3 = std::array::from_fn(|a| self.grid.spacing[a] / fine.spacing[a]);
        let coarse = self.grid;
        VectorField::from_fn(*fine, |p| {
            let q = coarse.world_to_voxel(fine.voxel_to_world(p));
            let v = self.sample(q);
            std::array::from_fn(|a| v[a] * ratio[a])
        })
    }

    /// Component `c` as a scalar image.
    pub fn component(&self, c: usize) -> Volume {
        Volume::new(self.grid, self.data.iter().map(|v| v[c]).collect())
            .expect("length matches grid by construction")
    }
}

/// Stationary velocity field `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField(pub VectorField);

/// Displacement `u` of the map `phi = id + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField(pub VectorField);

macro_rules! field_newtype {
    ($t:ty) => {
        impl Deref for $t {
            type Target = VectorField;
            fn deref(&self) -> &VectorField {
                &self.0
            }
        }
        impl DerefMut for $t {
            fn deref_mut(&mut self) -> &mut VectorField {
                &mut self.0
            }
        }
        impl From<VectorField> for $t {
            fn from(f: VectorField) -> Self {
                Self(f)
            }
        }
    };
}

field_newtype!(VelocityField);
field_newtype!(DisplacementField);

impl VelocityField {
    pub fn zeros(grid: Grid) -> Self {
        VelocityField(VectorField::zeros(grid))
    }
}

impl DisplacementField {
    pub fn identity(grid: Grid) -> Self {
        DisplacementField(VectorField::zeros(grid))
    }

    /// Builds `u = phi - id` from a point map.
    pub fn from_map(grid: Grid, phi: impl Fn(Vec3) -> Vec3 + Sync) -> Self {
        DisplacementField(VectorField::from_fn(grid, |p| mat3::sub(phi(p), p)))
    }

    /// `phi(x)` at a voxel index.
    #[inline]
    pub fn map_index(&self, i: usize) -> Vec3 {
        mat3::add(self.grid.point(i), self.data[i])
    }

    /// `phi(p)` at a continuous position.
    pub fn map_point(&self, p: Vec3) -> Vec3 {
        mat3::add(p, self.sample(p))
    }
}

/// `(a ∘ b)(x) = a(b(x))`, sampled with edge clamping.
pub fn compose(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    a.grid.ensure_matches(&b.grid, "compose")?;
    let data = (0..b.grid.len())
        .into_par_iter()
        .map(|i| {
            let ub = b.data[i];
            mat3::add(ub, a.sample(b.map_index(i)))
        })
        .collect();
    Ok(DisplacementField(VectorField { grid: b.grid, data }))
}

/// Forward trace of scaling and squaring, kept for the adjoint pass.
#[derive(Clone, Debug)]
pub struct Squaring {
    /// `u_0 .. u_T`.
    stages: Vec<VectorField>,
}

impl Squaring {
    pub fn run(v: &VelocityField, steps: usize) -> Squaring {
        let u0 = v.scaled(0.5f64.powi(steps as i32));
        let mut stages = Vec::with_capacity(steps + 1);
        stages.push(u0);
        for _ in 0..steps {
            let u = stages.last().expect("at least one stage");
            let next = square_step(u);
            stages.push(next);
        }
        Squaring { stages }
    }

    pub fn steps(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn displacement(&self) -> DisplacementField {
        DisplacementField(self.stages.last().expect("at least one stage").clone())
    }

    /// Pulls `dL/dphi` back to `dL/dv` through the recorded recursion.
    pub fn adjoint(&self, grad_phi: &VectorField) -> Result<VectorField> {
        let last = self.stages.last().expect("at least one stage");
        last.grid.ensure_matches(&grad_phi.grid, "squaring adjoint")?;
        let dims = last.grid.dims;
        let mut g = grad_phi.data.clone();
        for u in self.stages[..self.steps()].iter().rev() {
            let mut prev = g.clone();
            for (i, gi) in g.iter().enumerate() {
                if gi[0] == 0.0 && gi[1] == 0.0 && gi[2] == 0.0 {
                    continue;
                }
                let y = mat3::add(u.grid.point(i), u.data[i]);
                let mut inner = [0.0; 3];
                for (c, w, dw) in Cell::new(&dims, y).corners_with_grad() {
                    let s = mat3::dot(u.data[c], *gi);
                    inner[0] += dw[0] * s;
                    inner[1] += dw[1] * s;
                    inner[2] += dw[2] * s;
                    let t = &mut prev[c];
                    t[0] += w * gi[0];
                    t[1] += w * gi[1];
                    t[2] += w * gi[2];
                }
                let t = &mut prev[i];
                t[0] += inner[0];
                t[1] += inner[1];
                t[2] += inner[2];
            }
            g = prev;
        }
        let s = 0.5f64.powi(self.steps() as i32);
        let data = g.into_iter().map(|v| mat3::scale(v, s)).collect();
        Ok(VectorField { grid: last.grid, data })
    }
}

fn square_step(u: &VectorField) -> VectorField {
    let data = (0..u.grid.len())
        .into_par_iter()
        .map(|i| {
            let ui = u.data[i];
            let y = mat3::add(u.grid.point(i), ui);
            mat3::add(ui, u.sample(y))
        })
        .collect();
    VectorField { grid: u.grid, data }
}

/// Lie exponential of a stationary velocity field.
pub fn exp_svf(v: &VelocityField, steps: usize) -> DisplacementField {
    Squaring::run(v, steps).displacement()
}

/// Gradient with respect to `v` of a functional whose gradient with respect to `phi` is `grad_phi`.
pub fn exp_svf_adjoint(v: &VelocityField, grad_phi: &VectorField, steps: usize) -> Result<VectorField> {
    v.grid.ensure_matches(&grad_phi.grid, "velocity vs gradient")?;
    Squaring::run(v, steps).adjoint(grad_phi)
}

/// Position in `vol`'s voxel coordinates of `phi(x_i)`, converting through
/// world coordinates when the grids differ.
fn moving_position(phi: &DisplacementField, vol_grid: &Grid, same: bool, i: usize) -> Vec3 {
    let p = phi.map_index(i);
    if same {
        p
    } else {
        vol_grid.world_to_voxel(phi.grid.voxel_to_world(p))
    }
}

/// `(vol ∘ phi)(x) = vol(phi(x))`, trilinear with edge clamping.
pub fn warp_volume(vol: &Volume, phi: &DisplacementField) -> Volume {
    let same = vol.grid().matches(phi.grid());
    let data = (0..phi.grid.len())
        .into_par_iter()
        .map(|i| vol.sample_trilinear(moving_position(phi, vol.grid(), same, i)))
        .collect();
    Volume::new(phi.grid, data).expect("length matches grid by construction")
}

/// Warped image together with the image gradient at each warped position,
/// i.e. `d(vol ∘ phi)(x) / d phi(x)`.
pub fn warp_with_gradient(vol: &Volume, phi: &DisplacementField) -> Result<(Volume, Vec<Vec3>)> {
    vol.grid().ensure_matches(phi.grid(), "warp gradient")?;
    let dims = vol.dims();
    let (vals, grads): (Vec<f64>, Vec<Vec3>) = (0..phi.grid.len())
        .into_par_iter()
        .map(|i| Cell::new(&dims, phi.map_index(i)).value_and_gradient(vol.data()))
        .unzip();
    Ok((Volume::new(phi.grid, vals)?, grads))
}

/// Trilinear warp of the `{0, 1}` indicator of `body`.
pub fn warp_label_soft(labels: &LabelVolume, body: u16, phi: &DisplacementField) -> Result<Volume> {
    let ind = labels.indicator(body)?;
    Ok(warp_volume(&ind, phi))
}

/// Per-voxel Jacobian of `phi = id + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianField {
    grid: Grid,
    data: Vec<Mat3>,
}

impl JacobianField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[Mat3] {
        &self.data
    }

    pub fn determinant(&self) -> Volume {
        jacobian_det(self)
    }
}

/// Central differences inside, one-sided on faces, voxel units.
pub fn jacobian(phi: &DisplacementField) -> JacobianField {
    let mut data = stencil::vector_gradient(&phi.data, &phi.grid.dims);
    for j in &mut data {
        for (k, row) in j.iter_mut().enumerate() {
            row[k] += 1.0;
        }
    }
    JacobianField { grid: phi.grid, data }
}

pub fn jacobian_det(j: &JacobianField) -> Volume {
    Volume::new(j.grid, j.data.iter().map(mat3::det).collect()).expect("length matches grid")
}

/// Adjoint of [`jacobian`]: maps `dL/dJ` at every voxel to `dL/du`.
pub fn jacobian_adjoint(grid: &Grid, grad_j: &[Mat3]) -> VectorField {
    VectorField {
        grid: *grid,
        data: stencil::vector_gradient_adjoint(grad_j, &grid.dims),
    }
}

/// Approximate inverse of `phi` by fixed-point iteration `w(x) = -u(x + w(x))`.
/// Intended for checking invertibility in tests and diagnostics.
pub fn invert(phi: &DisplacementField, iterations: usize) -> DisplacementField {
    let mut w = phi.scaled(-1.0);
    for _ in 0..iterations {
        let data = (0..phi.grid.len())
            .into_par_iter()
            .map(|i| mat3::scale(phi.sample(mat3::add(phi.grid.point(i), w.data[i])), -1.0))
            .collect();
        w = VectorField { grid: phi.grid, data };
    }
    DisplacementField(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Grid {
        Grid::with_dims([n; 3]).unwrap()
    }

    /// Matrix exponential by Taylor series; independent of the squaring path.
    fn expm(a: &Mat3) -> Mat3 {
        let mut term = mat3::IDENTITY;
        let mut sum = mat3::IDENTITY;
        for k in 1..40 {
            term = mat3::mat_mul(&term, a);
            for row in term.iter_mut() {
                for v in row.iter_mut() {
                    *v /= k as f64;
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    sum[i][j] += term[i][j];
                }
            }
        }
        sum
    }

    fn smooth_random(g: Grid, amp: f64, seed: u64) -> VelocityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.dims[0] as f64;
        let k: Vec<(Vec3, f64, usize)> = (0..6)
            .map(|t| {
                (
                    std::array::from_fn(|_| rng.random_range(0.5..2.0) * std::f64::consts::PI / n),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    t % 3,
                )
            })
            .collect();
        let f = VectorField::from_fn(g, |p| {
            let mut v = [0.0; 3];
            for (w, ph, c) in &k {
                v[*c] += amp / 2.0 * (mat3::dot(*w, p) + ph).sin();
            }
            v
        });
        VelocityField(f)
    }

    #[test]
    fn zero_velocity_gives_identity() {
        let phi = exp_svf(&VelocityField::zeros(grid(6)), 7);
        assert!(phi.data().iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn constant_velocity_is_exact() {
        let g = grid(6);
        let c = [0.7, -1.3, 0.25];
        let v = VelocityField(VectorField::from_fn(g, |_| c));
        let phi = exp_svf(&v, 7);
        for u in phi.data() {
            for a in 0..3 {
                assert!((u[a] - c[a]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn linear_rotation_field_matches_matrix_exponential() {
        let g = grid(16);
        let xc = [7.5; 3];
        let a: Mat3 = [[0.0, -0.05, 0.0], [0.05, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let v = VelocityField(VectorField::from_fn(g, |p| mat3::mat_vec(&a, mat3::sub(p, xc))));
        let phi = exp_svf(&v, 7);
        let e = expm(&a);
        let mut worst: f64 = 0.0;
        for i in 0..g.len() {
            let c = g.coords(i);
            if c.iter().any(|&k| !(2..=13).contains(&k)) {
                continue;
            }
            let p = g.point(i);
            let expect = mat3::add(xc, mat3::mat_vec(&e, mat3::sub(p, xc)));
            let got = phi.map_index(i);
            for k in 0..3 {
                worst = worst.max((got[k] - expect[k]).abs());
            }
        }
        assert!(worst < 1e-3, "max error {worst}");
    }

    #[test]
    fn zero_steps_adjoint_is_identity() {
        let g = grid(5);
        let v = smooth_random(g, 0.5, 3);
        let gp = smooth_random(g, 1.0, 4);
        let adj = exp_svf_adjoint(&v, &gp, 0).unwrap();
        assert_eq!(&adj, &gp.0);
    }

    #[test]
    fn adjoint_at_zero_velocity_passes_gradient_through() {
        let g = grid(6);
        let gp = smooth_random(g, 1.0, 5);
        let adj = exp_svf_adjoint(&VelocityField::zeros(g), &gp, 7).unwrap();
        for (a, b) in adj.data().iter().zip(gp.data()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_passes_directional_derivative_test() {
        let g = grid(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = VelocityField(
            VectorField::new(
                g,
                (0..g.len())
                    .map(|_| std::array::from_fn(|_| rng.random_range(-0.4..0.4)))
                    .collect(),
            )
            .unwrap(),
        );
        let weights: Vec<Vec3> = (0..g.len())
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        // L(phi) = sum w . u + 0.5 |u|^2
        let functional = |u: &DisplacementField| -> f64 {
            u.data()
                .iter()
                .zip(&weights)
                .map(|(a, w)| mat3::dot(*a, *w) + 0.5 * mat3::norm2(*a))
                .sum()
        };
        let u = exp_svf(&v, 7);
        let grad_phi = VectorField::new(
            g,
            u.data().iter().zip(&weights).map(|(a, w)| mat3::add(*a, *w)).collect(),
        )
        .unwrap();
        let adj = exp_svf_adjoint(&v, &grad_phi, 7).unwrap();
        let dir = VectorField::from_fn(g, |p| {
            let interior = p.iter().all(|&c| (1.0..=6.0).contains(&c));
            if interior {
                [(p[0] * 0.7).sin(), (p[1] * 1.3).cos(), (p[2] * 0.4 + p[0]).sin()]
            } else {
                [0.0; 3]
            }
        });
        let h = 1e-5;
        let mut vp = v.clone();
        vp.add_scaled(&dir, h);
        let mut vm = v.clone();
        vm.add_scaled(&dir, -h);
        let fd = (functional(&exp_svf(&vp, 7)) - functional(&exp_svf(&vm, 7))) / (2.0 * h);
        let an = adj.dot(&dir);
        let rel = (fd - an).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-3, "fd {fd} analytic {an}");
    }

    #[test]
    fn exponential_is_invertible() {
        let g = grid(12);
        // |v| <= 0.5 voxels
        let v = smooth_random(g, 0.5 / 3f64.sqrt(), 21);
        assert!(v.max_norm() <= 0.5);
        let fwd = exp_svf(&v, 7);
        let back = exp_svf(&VelocityField(v.scaled(-1.0)), 7);
        let id = compose(&fwd, &back).unwrap();
        assert!(id.max_norm() < 0.05, "residual {}", id.max_norm());
        let inv = invert(&fwd, 20);
        let id2 = compose(&fwd, &inv).unwrap();
        assert!(id2.max_norm() < 0.05);
    }

    #[test]
    fn doubling_steps_converges() {
        let g = grid(12);
        let v = smooth_random(g, 0.5, 22);
        let a = exp_svf(&v, 7);
        let b = exp_svf(&v, 14);
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| mat3::norm2(mat3::sub(*x, *y)).sqrt()).fold(0.0, f64::max);
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn warp_identity_and_translation() {
        let g = grid(6);
        let ramp = Volume::from_fn(g, |x, _, _| x as f64);
        let id = DisplacementField::identity(g);
        assert_eq!(warp_volume(&ramp, &id), ramp);
        let t = DisplacementField(VectorField::from_fn(g, |_| [1.0, 0.0, 0.0]));
        let w = warp_volume(&ramp, &t);
        for z in 0..6 {
            for x in 0..5 {
                assert_eq!(w.get(x, 2, z), ramp.get(x, 2, z) + 1.0);
            }
        }
    }

    #[test]
    fn soft_label_warp_examples() {
        let g = grid(6);
        let labels = LabelVolume::from_fn(g, |x, _, _| if x == 3 { 1 } else { 0 });
        let id = DisplacementField::identity(g);
        let w = warp_label_soft(&labels, 1, &id).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let half = DisplacementField(VectorField::from_fn(g, |_| [0.5, 0.0, 0.0]));
        let w = warp_label_soft(&labels, 1, &half).unwrap();
        assert_eq!(w.get(2, 1, 1), 0.5);
        assert_eq!(w.get(3, 1, 1), 0.5);
        assert_eq!(w.get(1, 1, 1), 0.0);
        assert!(matches!(warp_label_soft(&labels, 4, &id), Err(Error::UnknownBody(4))));
    }

    #[test]
    fn jacobian_examples() {
        let g = grid(5);
        let j = jacobian(&DisplacementField::identity(g));
        assert!(j.data().iter().all(|m| *m == mat3::IDENTITY));
        assert!(jacobian_det(&j).data().iter().all(|&d| d == 1.0));

        let s = DisplacementField::from_map(g, |p| mat3::scale(p, 1.1));
        let j = jacobian(&s);
        let det = jacobian_det(&j);
        for i in 0..g.len() {
            for a in 0..3 {
                for b in 0..3 {
                    let e = if a == b { 1.1 } else { 0.0 };
                    assert!((j.data()[i][a][b] - e).abs() < 1e-12);
                }
            }
            assert!((det.data()[i] - 1.331).abs() < 1e-12);
        }

        let t = DisplacementField(VectorField::from_fn(g, |_| [0.3, -2.0, 1.0]));
        assert!(jacobian(&t).data().iter().all(|m| *m == mat3::IDENTITY));

        let r = mat3::rotation([1.0, 2.0, 0.5], 0.3);
        let rot = DisplacementField::from_map(g, |p| mat3::mat_vec(&r, p));
        for d in jacobian_det(&jacobian(&rot)).data() {
            assert!((d - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn affine_jacobian_is_the_matrix() {
        let g = grid(6);
        let a: Mat3 = [[1.1, 0.2, -0.1], [0.05, 0.9, 0.3], [0.0, -0.2, 1.2]];
        let phi = DisplacementField::from_map(g, |p| mat3::add(mat3::mat_vec(&a, p), [1.0, 2.0, 3.0]));
        for m in jacobian(&phi).data() {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m[i][j] - a[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_doubles_voxel_vectors() {
        let coarse = Grid::new([4; 3], [2.0; 3], [0.0; 3]).unwrap();
        let fine = Grid::new([7; 3], [1.0; 3], [0.0; 3]).unwrap();
        let v = VectorField::from_fn(coarse, |_| [0.5, 0.25, -1.0]);
        let up = v.upsample(&fine);
        assert!(up.data().iter().all(|d| *d == [1.0, 0.5, -2.0]));
    }
}
