//! Registration config files.
//!
//! Plain `key = value` lines. Keys left out keep the values of the base
//! configuration, usually a preset.
//!
//! ```text
//! similarity = mind          # mind | nmi | ngf
//! mind.patch_radius = 1
//! lambda_smooth = 0.02
//! steps = 7
//! rigidity.terms = pc oc     # replaces the preset's terms
//! rigidity.weight = 0.01     # number or auto, for every listed term
//! rigidity.oc.weight = auto  # per-term override
//! rigidity.sample_cap = 2000
//! rigidity.activate_after = 0
//! optim.max_iters = 200
//! ```

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::objective::{default_weight, LossWeights, Preset, TermWeight};
use crate::optimizer::OptimSettings;
use crate::rigidity::RigidityTerm;
use crate::similarity::Similarity;

/// Loss weights plus optimizer settings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegistrationConfig {
    pub weights: LossWeights,
    pub settings: OptimSettings,
}

impl RegistrationConfig {
    pub fn from_preset(preset: Preset) -> Self {
        RegistrationConfig {
            weights: preset.weights(),
            settings: OptimSettings::default(),
        }
    }

    /// Parses `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::default().overlay(text)
    }

    /// Applies the keys in `text` to a copy of `self`.
    pub fn overlay(&self, text: &str) -> Result<Self> {
        let entries = kv::parse(text)?;
        let mut out = self.clone();
        let w = &mut out.weights;
        let s = &mut out.settings;

        // The metric comes first so its parameters can be applied in any order.
        if let Some(e) = entries.iter().find(|e| e.key == "similarity") {
            w.similarity = e.value.parse().map_err(|_| at(e, "similarity must be mind, nmi or ngf"))?;
        }
        let mut terms = None;
        let mut shared = None;
        let mut per_term = Vec::new();
        for e in &entries {
            match e.key.as_str() {
                "similarity" => {}
                "mind.patch_radius" => match &mut w.similarity {
                    Similarity::Mind { patch_radius } => *patch_radius = e.parse()?,
                    _ => return Err(at(e, "mind.patch_radius needs similarity = mind")),
                },
                "nmi.bins" => match &mut w.similarity {
                    Similarity::Nmi { bins } => *bins = e.parse()?,
                    _ => return Err(at(e, "nmi.bins needs similarity = nmi")),
                },
                "ngf.eps_rel" => match &mut w.similarity {
                    Similarity::Ngf { eps_rel } => *eps_rel = e.parse()?,
                    _ => return Err(at(e, "ngf.eps_rel needs similarity = ngf")),
                },
                "similarity_weight" => w.similarity_weight = e.parse()?,
                "lambda_smooth" => w.lambda_smooth = e.parse()?,
                "steps" => w.steps = e.parse()?,
                "rigidity.terms" => terms = Some(parse_terms(e)?),
                "rigidity.weight" => shared = Some(parse_weight(e)?),
                "rigidity.sample_cap" => w.sample_cap = Some(e.parse()?),
                "rigidity.activate_after" => s.activate_after = e.parse()?,
                "optim.max_iters" => s.max_iters = e.parse()?,
                "optim.step_size" => s.step_size = e.parse()?,
                "optim.beta1" => s.beta1 = e.parse()?,
                "optim.beta2" => s.beta2 = e.parse()?,
                "optim.tolerance" => s.tolerance = e.parse()?,
                "optim.levels" => s.levels = e.parse()?,
                "optim.seed" => s.seed = e.parse()?,
                key => {
                    let term = key
                        .strip_prefix("rigidity.")
                        .and_then(|k| k.strip_suffix(".weight"))
                        .and_then(|t| RigidityTerm::from_str(t).ok())
                        .ok_or_else(|| at(e, format!("unknown key {key}")))?;
                    per_term.push((term, parse_weight(e)?, e));
                }
            }
        }
        if let Some(terms) = terms {
            w.rigidity = terms
                .into_iter()
                .map(|t| (t, w.rigidity.get(&t).copied().unwrap_or(TermWeight::Fixed(default_weight(t)))))
                .collect();
        }
        if let Some(x) = shared {
            w.rigidity.values_mut().for_each(|v| *v = x);
        }
        for (term, x, e) in per_term {
            match w.rigidity.get_mut(&term) {
                Some(v) => *v = x,
                None => return Err(at(e, format!("{term} is not in rigidity.terms"))),
            }
        }
        w.validate()?;
        s.validate()?;
        Ok(out)
    }
}

fn at(e: &Entry, msg: impl Into<String>) -> Error {
    Error::parse(e.line, msg)
}

fn parse_terms(e: &Entry) -> Result<Vec<RigidityTerm>> {
    let mut out: Vec<RigidityTerm> = Vec::new();
    for t in e.value.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
        let term = t.parse().map_err(|_| at(e, format!("unknown rigidity term '{t}'")))?;
        if out.contains(&term) {
            return Err(at(e, format!("rigidity term {term} listed twice")));
        }
        out.push(term);
    }
    Ok(out)
}

fn parse_weight(e: &Entry) -> Result<TermWeight> {
    if e.value == "auto" {
        return Ok(TermWeight::Auto);
    }
    let x: f64 = e.parse()?;
    if !(x.is_finite() && x >= 0.0) {
        return Err(at(e, format!("weight must be finite and >= 0, got {x}")));
    }
    Ok(TermWeight::Fixed(x))
}
