//! Registration quality metrics and the JSON report.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::field::{jacobian, warp_label_soft, DisplacementField};
use crate::mat3;
use crate::objective::LossBreakdown;
use crate::parallel::ordered_sum;
use crate::rigidity::{self, BODY_THRESHOLD};
use crate::volume::LabelVolume;

/// `2|a ∩ b| / (|a| + |b|)`, or 1 when both masks are empty.
pub fn dsc(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!("masks of {} and {} voxels", a.len(), b.len())));
    }
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        both += usize::from(x && y);
        na += usize::from(x);
        nb += usize::from(y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

fn threshold(data: &[f64]) -> Vec<bool> {
    data.iter().map(|&v| v > BODY_THRESHOLD).collect()
}

/// Hard mask of `body` after warping by `phi`.
pub fn warped_mask(labels: &LabelVolume, body: u16, phi: &DisplacementField) -> Result<Vec<bool>> {
    Ok(threshold(warp_label_soft(labels, body, phi)?.data()))
}

/// Dice between the warped body and the body under its closest rigid transform.
pub fn rigid_dsc(labels: &LabelVolume, body: u16, phi: &DisplacementField) -> Result<f64> {
    let t = rigidity::closest_rigid_of_body(labels, body, phi)?;
    let rigid = rigidity::rigid_resample(labels, body, &t)?;
    dsc(&warped_mask(labels, body, phi)?, &threshold(rigid.data()))
}

/// `100 |count(warped) - count(source)| / count(source)` on hard labels.
pub fn pct_vol_change(labels: &LabelVolume, body: u16, phi: &DisplacementField) -> Result<f64> {
    let before = labels.count(body);
    let after = warped_mask(labels, body, phi)?.iter().filter(|&&m| m).count();
    if before == 0 {
        return Err(Error::UnknownBody(body));
    }
    Ok(100.0 * after.abs_diff(before) as f64 / before as f64)
}

/// Number of voxels with a non-positive Jacobian determinant.
pub fn folding_count(phi: &DisplacementField) -> usize {
    jacobian(phi).data().iter().filter(|j| mat3::det(j) <= 0.0).count()
}

/// Standard deviation of `log det J` over voxels with positive determinant.
pub fn sd_log_jac(phi: &DisplacementField) -> Result<f64> {
    let logs: Vec<f64> = jacobian(phi)
        .data()
        .iter()
        .map(mat3::det)
        .filter(|&d| d > 0.0)
        .map(f64::ln)
        .collect();
    if logs.is_empty() {
        return Err(Error::AllFolded);
    }
    Ok(mean_sd(&logs).1)
}

/// Properness condition as a metric; same value as the loss.
pub fn pc_metric(labels: &LabelVolume, phi: &DisplacementField) -> Result<f64> {
    Ok(rigidity::pc_loss(labels, phi)?.0)
}

/// Mean and population standard deviation.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = ordered_sum(values.iter().copied()) / n;
    let var = ordered_sum(values.iter().map(|v| (v - mean).powi(2))) / n;
    (mean, var.sqrt())
}

/// Rounds to 6 significant digits for serialization.
pub fn round_sig6(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.5e}").parse().expect("formatted float parses")
    } else {
        x
    }
}

fn sig6<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig6(*x))
}

fn sig6_opt<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => s.serialize_some(&round_sig6(*v)),
        None => s.serialize_none(),
    }
}

/// Metrics of one body.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BodyMetrics {
    pub body: u16,
    /// Dice against the fixed-image labels; absent without them.
    #[serde(serialize_with = "sig6_opt")]
    pub dsc: Option<f64>,
    #[serde(serialize_with = "sig6")]
    pub rigid_dsc: f64,
    #[serde(serialize_with = "sig6")]
    pub pct_vol_change: f64,
    #[serde(serialize_with = "sig6")]
    pub pc_metric: f64,
}

/// Mean and standard deviation over bodies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    #[serde(serialize_with = "sig6")]
    pub mean: f64,
    #[serde(serialize_with = "sig6")]
    pub sd: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let (mean, sd) = mean_sd(values);
        Summary { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregates {
    pub dsc: Option<Summary>,
    pub rigid_dsc: Summary,
    pub pct_vol_change: Summary,
    pub pc_metric: Summary,
}

/// Per-body and global quality of one displacement field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub bodies: Vec<BodyMetrics>,
    pub folding_voxels: usize,
    #[serde(serialize_with = "sig6")]
    pub sd_log_jac: f64,
    #[serde(serialize_with = "sig6")]
    pub wall_seconds: f64,
    pub aggregates: Aggregates,
}

impl MetricReport {
    /// Evaluates every metric of `phi` for the moving-image bodies.
    pub fn compute(
        labels_moving: &LabelVolume,
        labels_fixed: Option<&LabelVolume>,
        phi: &DisplacementField,
        wall_seconds: f64,
    ) -> Result<Self> {
        labels_moving.grid().ensure_matches(phi.grid(), "labels vs field")?;
        if let Some(f) = labels_fixed {
            f.grid().ensure_matches(phi.grid(), "fixed labels vs field")?;
        }
        let domains = rigidity::body_domains(labels_moving, phi)?;
        let (pcs, _) = rigidity::pc_per_body(&domains, phi);
        let mut bodies = Vec::new();
        for (&b, pc) in labels_moving.body_ids().iter().zip(pcs) {
            let warped = warped_mask(labels_moving, b, phi)?;
            let dsc_b = match labels_fixed {
                Some(f) => {
                    let target: Vec<bool> = f.data().iter().map(|&l| l == b).collect();
                    Some(dsc(&warped, &target)?)
                }
                None => None,
            };
            bodies.push(BodyMetrics {
                body: b,
                dsc: dsc_b,
                rigid_dsc: rigid_dsc(labels_moving, b, phi)?,
                pct_vol_change: pct_vol_change(labels_moving, b, phi)?,
                pc_metric: pc,
            });
        }
        let col = |f: fn(&BodyMetrics) -> f64| bodies.iter().map(f).collect::<Vec<_>>();
        let aggregates = Aggregates {
            dsc: labels_fixed.map(|_| Summary::of(&col(|b| b.dsc.unwrap_or(0.0)))),
            rigid_dsc: Summary::of(&col(|b| b.rigid_dsc)),
            pct_vol_change: Summary::of(&col(|b| b.pct_vol_change)),
            pc_metric: Summary::of(&col(|b| b.pc_metric)),
        };
        Ok(MetricReport {
            bodies,
            folding_voxels: folding_count(phi),
            sd_log_jac: sd_log_jac(phi)?,
            wall_seconds,
            aggregates,
        })
    }

    pub fn mean_dsc(&self) -> Option<f64> {
        self.aggregates.dsc.map(|s| s.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One optimizer iterate in a report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    #[serde(serialize_with = "sig6")]
    pub total: f64,
    #[serde(serialize_with = "sig6")]
    pub similarity: f64,
    #[serde(serialize_with = "sig6")]
    pub smoothness: f64,
    /// Unweighted value of each active rigidity term.
    #[serde(serialize_with = "sig6_map")]
    pub rigidity: BTreeMap<String, f64>,
}

impl From<&LossBreakdown> for LossRecord {
    fn from(b: &LossBreakdown) -> Self {
        LossRecord {
            total: b.total,
            similarity: b.similarity,
            smoothness: b.smoothness,
            rigidity: b.rigidity.iter().map(|(t, v)| (t.name().to_string(), v.value)).collect(),
        }
    }
}

fn sig6_map<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_map(m.iter().map(|(k, v)| (k, round_sig6(*v))))
}

/// Metrics of a registration plus its loss history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegistrationReport {
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub iterations: usize,
    pub loss_history: Vec<LossRecord>,
}

impl RegistrationReport {
    pub fn new(metrics: MetricReport, iterations: usize, history: &[LossBreakdown]) -> Self {
        RegistrationReport {
            metrics,
            iterations,
            loss_history: history.iter().map(LossRecord::from).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
