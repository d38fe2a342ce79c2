//! Modality-independent neighbourhood descriptors on the 6-neighbourhood.

use rayon::prelude::*;

use crate::error::Result;
use crate::field::{DisplacementField, VectorField};
use crate::volume::{convolve_axis, gaussian_kernel, Cell, Grid, Volume};

/// Face-neighbour offsets, one descriptor channel each.
pub const OFFSETS: [[isize; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

/// Per-voxel 6-channel descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct MindDescriptor {
    grid: Grid,
    channels: Vec<[f64; 6]>,
    variance: Vec<f64>,
    patch_radius: usize,
}

/// Patch Gaussian width in voxels.
pub const PATCH_SIGMA: f64 = 0.5;
const VARIANCE_FLOOR: f64 = 1e-6;

impl MindDescriptor {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> &[[f64; 6]] {
        &self.channels
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn patch_radius(&self) -> usize {
        self.patch_radius
    }
}

/// Descriptor with the default patch radius of one voxel.
pub fn mind_descriptor(vol: &Volume) -> MindDescriptor {
    mind_descriptor_with_radius(vol, 1)
}

pub fn mind_descriptor_with_radius(vol: &Volume, patch_radius: usize) -> MindDescriptor {
    let grid = *vol.grid();
    let dims = grid.dims;
    let data = vol.data();
    let kernel = gaussian_kernel(PATCH_SIGMA, patch_radius);

    // Gaussian-weighted patch SSD to each face neighbour.
    let distances: Vec<Vec<f64>> = OFFSETS
        .par_iter()
        .map(|off| {
            let mut sq: Vec<f64> = (0..data.len())
                .map(|i| {
                    let c = grid.coords(i);
                    let n: [usize; 3] = std::array::from_fn(|a| {
                        (c[a] as isize + off[a]).clamp(0, dims[a] as isize - 1) as usize
                    });
                    let d = data[i] - data[grid.index(n[0], n[1], n[2])];
                    d * d
                })
                .collect();
            if patch_radius > 0 {
                for axis in 0..3 {
                    sq = convolve_axis(&sq, &dims, axis, &kernel);
                }
            }
            sq
        })
        .collect();

    let (channels, variance): (Vec<[f64; 6]>, Vec<f64>) = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let d: [f64; 6] = std::array::from_fn(|r| distances[r][i]);
            let v = (d.iter().sum::<f64>() / 6.0).max(VARIANCE_FLOOR);
            let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
            // exp(-d/v) / max_r exp(-d_r/v)
            let ch = std::array::from_fn(|r| (-(d[r] - dmin) / v).exp());
            (ch, v)
        })
        .unzip();

    MindDescriptor {
        grid,
        channels,
        variance,
        patch_radius,
    }
}

/// Mean squared channel difference between the fixed descriptor and the
/// moving descriptor warped by `phi`, with its gradient w.r.t. `phi`.
pub fn mind_loss(
    fixed: &MindDescriptor,
    moving: &MindDescriptor,
    phi: &DisplacementField,
) -> Result<(f64, VectorField)> {
    fixed.grid.ensure_matches(phi.grid(), "fixed descriptor vs field")?;
    moving.grid.ensure_matches(phi.grid(), "moving descriptor vs field")?;
    let dims = moving.grid.dims;
    let n = fixed.channels.len();
    let norm = 1.0 / (6.0 * n as f64);

    let per_voxel: Vec<(f64, [f64; 3])> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cell = Cell::new(&dims, phi.map_index(i));
            let mut val = [0.0; 6];
            let mut grad = [[0.0; 3]; 6];
            for (c, w, dw) in cell.corners_with_grad() {
                let m = &moving.channels[c];
                for r in 0..6 {
                    val[r] += w * m[r];
                    grad[r][0] += dw[0] * m[r];
                    grad[r][1] += dw[1] * m[r];
                    grad[r][2] += dw[2] * m[r];
                }
            }
            let f = &fixed.channels[i];
            let mut loss = 0.0;
            let mut g = [0.0; 3];
            for r in 0..6 {
                let diff = val[r] - f[r];
                loss += diff * diff;
                let s = 2.0 * diff * norm;
                g[0] += s * grad[r][0];
                g[1] += s * grad[r][1];
                g[2] += s * grad[r][2];
            }
            (loss, g)
        })
        .collect();

    let loss = crate::parallel::ordered_sum(per_voxel.iter().map(|p| p.0)) * norm;
    let grad = VectorField::new(*phi.grid(), per_voxel.into_iter().map(|p| p.1).collect())?;
    Ok((loss, grad))
}
