//! Dense 3D scalar and label grids.
//!
//! Voxel data is stored row-major with x fastest. Continuous positions are
//! expressed in voxel coordinates; world coordinates follow
//! `world = origin + index * spacing` on axis-aligned grids.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::Vec3;

/// Shape and placement of a voxel grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGrid(format!(
                "every dimension needs at least 2 voxels, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite origin {origin:?}")));
        }
        dims[0]
            .checked_mul(dims[1])
            .and_then(|n| n.checked_mul(dims[2]))
            .ok_or_else(|| Error::InvalidGrid(format!("grid {dims:?} is too large")))?;
        Ok(Grid {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit-spacing grid at the origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Grid::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of voxels in one z-slice.
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Voxel-center position of a flat index, in voxel coordinates.
    #[inline]
    pub fn point(&self, i: usize) -> Vec3 {
        let c = self.coords(i);
        [c[0] as f64, c[1] as f64, c[2] as f64]
    }

    pub fn voxel_to_world(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|a| self.origin[a] + p[a] * self.spacing[a])
    }

    pub fn world_to_voxel(&self, w: Vec3) -> Vec3 {
        std::array::from_fn(|a| (w[a] - self.origin[a]) / self.spacing[a])
    }

    /// Physical extent (mm) between the first and last voxel centers.
    pub fn extent(&self) -> Vec3 {
        std::array::from_fn(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    /// Same voxel layout and placement, up to a relative tolerance on spacing and origin.
    pub fn matches(&self, other: &Grid) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        self.dims == other.dims
            && (0..3).all(|a| close(self.spacing[a], other.spacing[a]))
            && (0..3).all(|a| close(self.origin[a], other.origin[a]))
    }

    pub fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Grid covering the same physical extent at isotropic `target` spacing.
    pub fn isotropic(&self, target: f64) -> Result<Grid> {
        if !(target.is_finite() && target > 0.0) {
            return Err(Error::InvalidValue(format!("target spacing {target}")));
        }
        let dims = std::array::from_fn(|a| {
            let steps = (self.dims[a] - 1) as f64 * self.spacing[a] / target;
            // guard against 6.000000001 rounding up to 7
            (steps - 1e-9).ceil().max(1.0) as usize + 1
        });
        Grid::new(dims, [target; 3], self.origin)
    }

    /// Grid with half the resolution, covering the same extent.
    pub fn coarsened(&self) -> Result<Grid> {
        let dims = std::array::from_fn(|a| self.dims[a].div_ceil(2));
        let spacing = std::array::from_fn(|a| self.spacing[a] * 2.0);
        Grid::new(dims, spacing, self.origin)
    }
}

/// Trilinear interpolation cell for one continuous voxel position.
///
/// Positions outside the grid are clamped to the boundary face; the
/// derivative along a clamped axis is zero outside and one-sided on the face.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    base: usize,
    offsets: [usize; 3],
    frac: Vec3,
    live: Vec3,
}

impl Cell {
    #[inline]
    pub(crate) fn new(dims: &[usize; 3], p: Vec3) -> Cell {
        let mut base = 0;
        let mut frac = [0.0; 3];
        let mut live = [0.0; 3];
        let offsets = [1, dims[0], dims[0] * dims[1]];
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64;
            let q = p[a].clamp(0.0, hi);
            let i0 = (q.floor() as usize).min(dims[a] - 2);
            frac[a] = q - i0 as f64;
            live[a] = if p[a] >= 0.0 && p[a] <= hi { 1.0 } else { 0.0 };
            base += i0 * offsets[a];
        }
        Cell {
            base,
            offsets,
            frac,
            live,
        }
    }

    /// The eight corner indices with their interpolation weights.
    #[inline]
    pub(crate) fn corners(&self) -> [(usize, f64); 8] {
        let [fx, fy, fz] = self.frac;
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        std::array::from_fn(|k| {
            let (bx, by, bz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let idx = self.base + bx * self.offsets[0] + by * self.offsets[1] + bz * self.offsets[2];
            (idx, wx[bx] * wy[by] * wz[bz])
        })
    }

    /// Corner indices with weights and the weights' derivatives w.r.t. the position.
    #[inline]
    pub(crate) fn corners_with_grad(&self) -> [(usize, f64, Vec3); 8] {
        let [fx, fy, fz] = self.frac;
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        let sign = [-1.0, 1.0];
        std::array::from_fn(|k| {
            let (bx, by, bz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let idx = self.base + bx * self.offsets[0] + by * self.offsets[1] + bz * self.offsets[2];
            let w = wx[bx] * wy[by] * wz[bz];
            let dw = [
                self.live[0] * sign[bx] * wy[by] * wz[bz],
                self.live[1] * wx[bx] * sign[by] * wz[bz],
                self.live[2] * wx[bx] * wy[by] * sign[bz],
            ];
            (idx, w, dw)
        })
    }

    #[inline]
    pub(crate) fn value(&self, data: &[f64]) -> f64 {
        self.corners().iter().map(|&(i, w)| w * data[i]).sum()
    }

    #[inline]
    pub(crate) fn value_and_gradient(&self, data: &[f64]) -> (f64, Vec3) {
        let mut v = 0.0;
        let mut g = [0.0; 3];
        for (i, w, dw) in self.corners_with_grad() {
            let d = data[i];
            v += w * d;
            g[0] += dw[0] * d;
            g[1] += dw[1] * d;
            g[2] += dw[2] * d;
        }
        (v, g)
    }
}

/// Dense real-valued 3D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume {
            grid,
            data: vec![value; grid.len()],
        }
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..grid.dims[2] {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f64) {
        let i = self.grid.index(x, y, z);
        self.data[i] = value;
    }

    /// Trilinear interpolation at a continuous voxel position, clamped to the grid.
    pub fn sample_trilinear(&self, p: Vec3) -> f64 {
        Cell::new(&self.grid.dims, p).value(&self.data)
    }

    /// Gradient of the trilinear interpolant, in intensity per voxel.
    pub fn sample_gradient(&self, p: Vec3) -> Vec3 {
        Cell::new(&self.grid.dims, p).value_and_gradient(&self.data).1
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Affine rescale of the intensities onto `[0, 1]`.
    pub fn normalize_intensity(&self) -> Result<Volume> {
        let (lo, hi) = self.min_max();
        if !(hi > lo) {
            return Err(Error::ConstantVolume);
        }
        let scale = 1.0 / (hi - lo);
        let data = self
            .data
            .iter()
            .map(|&v| ((v - lo) * scale).clamp(0.0, 1.0))
            .collect();
        Ok(Volume {
            grid: self.grid,
            data,
        })
    }

    /// Trilinear resampling onto an isotropic grid covering the same extent.
    pub fn resample_isotropic(&self, target_spacing: f64) -> Result<Volume> {
        let target = self.grid.isotropic(target_spacing)?;
        Ok(self.resample_to(&target))
    }

    /// Trilinear resampling onto an arbitrary axis-aligned grid (world coordinates).
    pub fn resample_to(&self, target: &Grid) -> Volume {
        if target.matches(&self.grid) {
            return self.clone();
        }
        let src = self.grid;
        let mut out = Volume::filled(*target, 0.0);
        for (i, v) in out.data.iter_mut().enumerate() {
            let w = target.voxel_to_world(target.point(i));
            *v = self.sample_trilinear(src.world_to_voxel(w));
        }
        out
    }

    /// Separable Gaussian smoothing with edge clamping and a kernel of `radius` voxels.
    pub fn gaussian_smooth(&self, sigma: f64, radius: usize) -> Volume {
        if sigma <= 0.0 || radius == 0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma, radius);
        let mut data = self.data.clone();
        for axis in 0..3 {
            data = convolve_axis(&data, &self.grid.dims, axis, &kernel);
        }
        Volume {
            grid: self.grid,
            data,
        }
    }

    /// Samples the volume at `2x` for every voxel of the coarse grid.
    pub(crate) fn decimate(&self, coarse: &Grid) -> Volume {
        Volume::from_fn(*coarse, |x, y, z| {
            self.sample_trilinear([2.0 * x as f64, 2.0 * y as f64, 2.0 * z as f64])
        })
    }
}

/// Normalized, symmetric Gaussian taps `[-radius, radius]`.
pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// 1D convolution along `axis` with edge clamping.
pub(crate) fn convolve_axis(data: &[f64], dims: &[usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let n = dims[axis] as isize;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])][axis] as isize;
        let line_start = i - c as usize * stride;
        let mut acc = 0.0;
        for (t, &w) in kernel.iter().enumerate() {
            let j = (c + t as isize - r).clamp(0, n - 1) as usize;
            acc += w * data[line_start + j * stride];
        }
        *o = acc;
    }
    out
}

/// Dense grid of rigid-body labels; `0` is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    data: Vec<u16>,
    body_ids: Vec<u16>,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u16>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "label length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        let body_ids = data
            .iter()
            .copied()
            .filter(|&l| l != 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(LabelVolume {
            grid,
            data,
            body_ids,
        })
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> u16) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..grid.dims[2] {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        LabelVolume::new(grid, data).expect("length matches grid by construction")
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Sorted distinct nonzero labels.
    pub fn body_ids(&self) -> &[u16] {
        &self.body_ids
    }

    pub fn contains_body(&self, body: u16) -> bool {
        self.body_ids.binary_search(&body).is_ok()
    }

    fn check_body(&self, body: u16) -> Result<()> {
        if self.contains_body(body) {
            Ok(())
        } else {
            Err(Error::UnknownBody(body))
        }
    }

    pub fn mask(&self, body: u16) -> Result<Vec<bool>> {
        self.check_body(body)?;
        Ok(self.data.iter().map(|&l| l == body).collect())
    }

    /// `{0, 1}` indicator image of one body.
    pub fn indicator(&self, body: u16) -> Result<Volume> {
        self.check_body(body)?;
        let data = self
            .data
            .iter()
            .map(|&l| if l == body { 1.0 } else { 0.0 })
            .collect();
        Ok(Volume {
            grid: self.grid,
            data,
        })
    }

    pub fn count(&self, body: u16) -> usize {
        self.data.iter().filter(|&&l| l == body).count()
    }

    /// Nearest-neighbor resampling onto an isotropic grid.
    pub fn resample_isotropic(&self, target_spacing: f64) -> Result<LabelVolume> {
        let target = self.grid.isotropic(target_spacing)?;
        Ok(self.resample_to(&target))
    }

    /// Nearest-neighbor resampling onto another grid; never creates labels.
    pub fn resample_to(&self, target: &Grid) -> LabelVolume {
        if target.matches(&self.grid) {
            return self.clone();
        }
        let src = self.grid;
        let data = (0..target.len())
            .map(|i| {
                let p = src.world_to_voxel(target.voxel_to_world(target.point(i)));
                let c: [usize; 3] = std::array::from_fn(|a| {
                    p[a].round().clamp(0.0, (src.dims[a] - 1) as f64) as usize
                });
                self.data[src.index(c[0], c[1], c[2])]
            })
            .collect();
        LabelVolume::new(*target, data).expect("length matches grid by construction")
    }

    /// Nearest-neighbor decimation by two.
    pub(crate) fn decimate(&self, coarse: &Grid) -> LabelVolume {
        let d = self.grid.dims;
        LabelVolume::from_fn(*coarse, |x, y, z| {
            self.get((2 * x).min(d[0] - 1), (2 * y).min(d[1] - 1), (2 * z).min(d[2] - 1))
        })
    }
}
