//! Normalized gradient fields.

use crate::error::{Error, Result};
use crate::mat3;
use crate::stencil;
use crate::volume::Volume;
use crate::Vec3;

pub const DEFAULT_EPS_REL: f64 = 1e-2;

/// Edge parameter as a fraction of the mean gradient magnitude of `fixed`.
pub fn ngf_eps(fixed: &Volume, eps_rel: f64) -> f64 {
    let g = stencil::gradient(fixed.data(), &fixed.dims());
    let mean = g.iter().map(|v| mat3::norm2(*v).sqrt()).sum::<f64>() / g.len() as f64;
    // a flat fixed image still needs a positive edge parameter
    (eps_rel * mean).max(1e-12)
}

/// `1 - mean <∇F, ∇W>^2 / ((|∇F|^2 + eps^2)(|∇W|^2 + eps^2))` and its
/// gradient w.r.t. the warped intensities.
pub fn ngf_loss(fixed: &Volume, warped: &Volume, eps: f64) -> Result<(f64, Volume)> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidValue(format!("ngf eps must be positive, got {eps}")));
    }
    fixed.grid().ensure_matches(warped.grid(), "ngf images")?;
    let dims = fixed.dims();
    let gf = stencil::gradient(fixed.data(), &dims);
    let gw = stencil::gradient(warped.data(), &dims);
    let n = gf.len() as f64;
    let e2 = eps * eps;

    let mut total = 0.0;
    let cot: Vec<Vec3> = gf
        .iter()
        .zip(&gw)
        .map(|(a, b)| {
            let ab = mat3::dot(*a, *b);
            let fa = mat3::norm2(*a) + e2;
            let fb = mat3::norm2(*b) + e2;
            total += ab * ab / (fa * fb);
            // d ratio / d b, scaled by -1/n
            let s1 = 2.0 * ab / (fa * fb);
            let s2 = 2.0 * ab * ab / (fa * fb * fb);
            std::array::from_fn(|k| -(s1 * a[k] - s2 * b[k]) / n)
        })
        .collect();
    let grad = stencil::gradient_adjoint(&cot, &dims);
    Ok((1.0 - total / n, Volume::new(*warped.grid(), grad)?))
}
