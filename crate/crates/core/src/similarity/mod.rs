//! Multi-modal similarity losses.
//!
//! Each metric yields a scalar loss and its gradient with respect to the
//! displacement field. MIND warps precomputed moving descriptors; NMI and NGF
//! produce a gradient on the warped intensities that is chained through the
//! moving image gradient at the warped positions.

pub mod mind;
pub mod ngf;
pub mod nmi;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::{warp_with_gradient, DisplacementField, VectorField};
use crate::volume::Volume;

pub use mind::{mind_descriptor, mind_loss, MindDescriptor};
pub use ngf::{ngf_eps, ngf_loss};
pub use nmi::{nmi_loss, nmi_loss_with_bins, JointHistogram};

/// Similarity metric and its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Similarity {
    Mind { patch_radius: usize },
    Nmi { bins: usize },
    Ngf { eps_rel: f64 },
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity::Mind { patch_radius: 1 }
    }
}

impl Similarity {
    pub fn name(&self) -> &'static str {
        match self {
            Similarity::Mind { .. } => "mind",
            Similarity::Nmi { .. } => "nmi",
            Similarity::Ngf { .. } => "ngf",
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mind" => Ok(Similarity::Mind { patch_radius: 1 }),
            "nmi" => Ok(Similarity::Nmi {
                bins: nmi::DEFAULT_BINS,
            }),
            "ngf" => Ok(Similarity::Ngf {
                eps_rel: ngf::DEFAULT_EPS_REL,
            }),
            other => Err(Error::InvalidValue(format!("unknown similarity '{other}'"))),
        }
    }
}

/// Per-image state computed once before optimization.
#[derive(Clone, Debug)]
pub enum PreparedSimilarity {
    Mind {
        fixed: MindDescriptor,
        moving: MindDescriptor,
    },
    Nmi {
        fixed: Volume,
        moving: Volume,
        bins: usize,
    },
    Ngf {
        fixed: Volume,
        moving: Volume,
        eps: f64,
    },
}

impl PreparedSimilarity {
    pub fn new(metric: Similarity, fixed: &Volume, moving: &Volume) -> Result<Self> {
        fixed.grid().ensure_matches(moving.grid(), "fixed vs moving")?;
        Ok(match metric {
            Similarity::Mind { patch_radius } => PreparedSimilarity::Mind {
                fixed: mind::mind_descriptor_with_radius(fixed, patch_radius),
                moving: mind::mind_descriptor_with_radius(moving, patch_radius),
            },
            Similarity::Nmi { bins } => PreparedSimilarity::Nmi {
                fixed: fixed.clone(),
                moving: moving.clone(),
                bins,
            },
            Similarity::Ngf { eps_rel } => PreparedSimilarity::Ngf {
                fixed: fixed.clone(),
                moving: moving.clone(),
                eps: ngf_eps(fixed, eps_rel),
            },
        })
    }

    /// Loss and gradient w.r.t. `phi`.
    pub fn evaluate(&self, phi: &DisplacementField) -> Result<(f64, VectorField)> {
        match self {
            PreparedSimilarity::Mind { fixed, moving } => mind_loss(fixed, moving, phi),
            PreparedSimilarity::Nmi { fixed, moving, bins } => {
                chain_intensity(moving, phi, |w| nmi_loss_with_bins(fixed, w, *bins))
            }
            PreparedSimilarity::Ngf { fixed, moving, eps } => {
                chain_intensity(moving, phi, |w| ngf_loss(fixed, w, *eps))
            }
        }
    }
}

/// Applies `d(M ∘ phi)(x) / d phi(x) = ∇M(phi(x))` to an intensity gradient.
fn chain_intensity(
    moving: &Volume,
    phi: &DisplacementField,
    loss: impl Fn(&Volume) -> Result<(f64, Volume)>,
) -> Result<(f64, VectorField)> {
    let (warped, img_grad) = warp_with_gradient(moving, phi)?;
    let (value, dw) = loss(&warped)?;
    let data = dw
        .data()
        .iter()
        .zip(img_grad)
        .map(|(&g, d)| [g * d[0], g * d[1], g * d[2]])
        .collect();
    Ok((value, VectorField::new(*phi.grid(), data)?))
}
