//! The composite registration loss and its gradient with respect to the
//! velocity field.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Squaring, VectorField, VelocityField, DEFAULT_STEPS};
use crate::parallel::ordered_sum;
use crate::rigidity::{self, RigidityTerm};
use crate::similarity::{PreparedSimilarity, Similarity};
use crate::stencil;
use crate::volume::{LabelVolume, Volume};

pub const DEFAULT_LAMBDA_SMOOTH: f64 = 0.02;

/// Share of the similarity magnitude an auto-scaled term may reach at calibration.
pub const AUTO_FRACTION: f64 = 0.1;

/// Weight of one rigidity term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TermWeight {
    /// Calibrated once against the similarity magnitude, capped at
    /// [`default_weight`].
    Auto,
    Fixed(f64),
}

/// Preset weight of each term, tuned for MIND on unit-spaced grids. Also the
/// cap of auto-scaled weights.
pub fn default_weight(term: RigidityTerm) -> f64 {
    match term {
        RigidityTerm::Pc => 0.003,
        RigidityTerm::Oc => 0.01,
        RigidityTerm::RigidDice => 0.005,
        RigidityTerm::RigidField => 0.0003,
        RigidityTerm::Volume => 0.1,
    }
}

/// Everything that defines the loss for one registration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub similarity: Similarity,
    pub similarity_weight: f64,
    pub lambda_smooth: f64,
    pub rigidity: BTreeMap<RigidityTerm, TermWeight>,
    /// Scaling-and-squaring steps.
    pub steps: usize,
    /// Optional cap on fit points per body.
    pub sample_cap: Option<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            similarity: Similarity::default(),
            similarity_weight: 1.0,
            lambda_smooth: DEFAULT_LAMBDA_SMOOTH,
            rigidity: BTreeMap::new(),
            steps: DEFAULT_STEPS,
            sample_cap: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidValue(what));
        if !(self.similarity_weight.is_finite() && self.similarity_weight >= 0.0) {
            return bad(format!("similarity weight must be finite and >= 0, got {}", self.similarity_weight));
        }
        if !(self.lambda_smooth.is_finite() && self.lambda_smooth >= 0.0) {
            return bad(format!("lambda_smooth must be finite and >= 0, got {}", self.lambda_smooth));
        }
        for (term, w) in &self.rigidity {
            if let TermWeight::Fixed(x) = w {
                if !(x.is_finite() && *x >= 0.0) {
                    return bad(format!("weight of {term} must be finite and >= 0, got {x}"));
                }
            }
        }
        if self.steps > 20 {
            return bad(format!("steps must be at most 20, got {}", self.steps));
        }
        Ok(())
    }

    /// Whether any rigidity term can contribute.
    pub fn has_rigidity(&self) -> bool {
        self.rigidity.values().any(|w| *w != TermWeight::Fixed(0.0))
    }

    pub fn with_term(mut self, term: RigidityTerm, weight: TermWeight) -> Self {
        self.rigidity.insert(term, weight);
        self
    }
}

/// Named loss configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Baseline,
    Staring,
    Pc,
    Oc,
    RigidDice,
    RigidField,
    PcOc,
    PcRigidDice,
    PcRigidField,
    Volume,
}

impl Preset {
    pub const ALL: [Preset; 10] = [
        Preset::Baseline,
        Preset::Staring,
        Preset::Pc,
        Preset::Oc,
        Preset::RigidDice,
        Preset::RigidField,
        Preset::PcOc,
        Preset::PcRigidDice,
        Preset::PcRigidField,
        Preset::Volume,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Staring => "staring",
            Preset::Pc => "pc",
            Preset::Oc => "oc",
            Preset::RigidDice => "rigid_dice",
            Preset::RigidField => "rigid_field",
            Preset::PcOc => "pc_oc",
            Preset::PcRigidDice => "pc_rigid_dice",
            Preset::PcRigidField => "pc_rigid_field",
            Preset::Volume => "volume",
        }
    }

    pub fn terms(&self) -> &'static [RigidityTerm] {
        use RigidityTerm::*;
        match self {
            Preset::Baseline => &[],
            Preset::Staring => &[Pc, Oc],
            Preset::Pc => &[Pc],
            Preset::Oc => &[Oc],
            Preset::RigidDice => &[RigidDice],
            Preset::RigidField => &[RigidField],
            Preset::PcOc => &[Pc, Oc],
            Preset::PcRigidDice => &[Pc, RigidDice],
            Preset::PcRigidField => &[Pc, RigidField],
            Preset::Volume => &[Volume],
        }
    }

    /// Replaces the rigidity terms of `base` with this preset's at their
    /// default weights. The staring preset instead pairs NMI with auto-scaled
    /// weights, since the defaults are tuned for MIND.
    pub fn apply(&self, base: LossWeights) -> LossWeights {
        let mut w = base;
        let weight = |t| match self {
            Preset::Staring => TermWeight::Auto,
            _ => TermWeight::Fixed(default_weight(t)),
        };
        w.rigidity = self.terms().iter().map(|&t| (t, weight(t))).collect();
        if *self == Preset::Staring {
            w.similarity = "nmi".parse().expect("known metric");
        }
        w
    }

    pub fn weights(&self) -> LossWeights {
        self.apply(LossWeights::default())
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown preset '{s}'")))
    }
}

/// Value of one rigidity term in a breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct TermValue {
    /// Weight applied in the total.
    pub weight: f64,
    /// Aggregate over bodies (sum for the fit-based terms, mean otherwise).
    pub value: f64,
    pub per_body: Vec<(u16, f64)>,
}

/// Itemized loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub similarity: f64,
    pub similarity_weight: f64,
    pub smoothness: f64,
    pub lambda_smooth: f64,
    pub rigidity: BTreeMap<RigidityTerm, TermValue>,
}

impl LossBreakdown {
    /// `w_sim * similarity + lambda_smooth * smoothness + sum weight * value`.
    pub fn reconstruct(&self) -> f64 {
        self.similarity_weight * self.similarity
            + self.lambda_smooth * self.smoothness
            + ordered_sum(self.rigidity.values().map(|t| t.weight * t.value))
    }
}

/// `(1/N) sum_x sum_c |grad v_c(x)|^2` and its gradient.
pub fn smoothness_loss(v: &VectorField) -> (f64, VectorField) {
    let dims = v.grid().dims;
    let d = stencil::vector_gradient(v.data(), &dims);
    let n = d.len() as f64;
    let value = ordered_sum(d.iter().map(|j| j.iter().flatten().map(|x| x * x).sum::<f64>())) / n;
    let scaled: Vec<_> = d.iter().map(|j| j.map(|row| row.map(|x| 2.0 * x / n))).collect();
    let grad = stencil::vector_gradient_adjoint(&scaled, &dims);
    (value, VectorField::new(*v.grid(), grad).expect("same grid"))
}

/// Aggregate value, per-body values and gradient with respect to phi.
type TermOutput = (f64, Vec<(u16, f64)>, VectorField);

/// Stop-gradient state of the rigidity terms: the body domains of pc and oc
/// and the per-body fit frames of rigid_dice and rigid_field.
#[derive(Clone, Debug)]
pub struct RigidState {
    domains: Vec<Vec<usize>>,
    frames: Vec<rigidity::BodyFrame>,
}

/// Loss of one image pair with prepared similarity state.
#[derive(Clone, Debug)]
pub struct Objective {
    similarity: PreparedSimilarity,
    labels: LabelVolume,
    weights: LossWeights,
    resolved: BTreeMap<RigidityTerm, f64>,
}

impl Objective {
    pub fn new(fixed: &Volume, moving: &Volume, labels: &LabelVolume, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        fixed.grid().ensure_matches(labels.grid(), "fixed vs labels")?;
        if weights.has_rigidity() && labels.body_ids().is_empty() {
            return Err(Error::InvalidValue("rigidity terms need at least one labeled body".into()));
        }
        let resolved = weights
            .rigidity
            .iter()
            .filter_map(|(&t, w)| match w {
                TermWeight::Fixed(x) => Some((t, *x)),
                TermWeight::Auto => None,
            })
            .collect();
        Ok(Objective {
            similarity: PreparedSimilarity::new(weights.similarity, fixed, moving)?,
            labels: labels.clone(),
            weights,
            resolved,
        })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    /// Weight currently applied to `term`.
    pub fn weight(&self, term: RigidityTerm) -> f64 {
        match self.weights.rigidity.get(&term) {
            None => 0.0,
            Some(_) => self.resolved.get(&term).copied().unwrap_or_else(|| default_weight(term)),
        }
    }

    /// Whether every auto-scaled term has been calibrated.
    pub fn is_calibrated(&self) -> bool {
        self.weights.rigidity.keys().all(|t| self.resolved.contains_key(t))
    }

    /// Freezes the weight of every uncalibrated auto term whose value in
    /// `b` is positive, so that it contributes at most [`AUTO_FRACTION`] of
    /// the similarity magnitude.
    pub fn calibrate(&mut self, b: &LossBreakdown) {
        for (&term, w) in &self.weights.rigidity {
            if *w != TermWeight::Auto || self.resolved.contains_key(&term) {
                continue;
            }
            if let Some(tv) = b.rigidity.get(&term) {
                if tv.value > 1e-12 {
                    let scaled = AUTO_FRACTION * (b.similarity_weight * b.similarity).abs() / tv.value;
                    self.resolved.insert(term, scaled.min(default_weight(term)));
                }
            }
        }
    }

    /// Loss and gradient with respect to `v`. Rigidity terms are skipped
    /// when `rigidity_active` is false.
    pub fn evaluate(&self, v: &VelocityField, rigidity_active: bool) -> Result<(LossBreakdown, VectorField)> {
        self.evaluate_inner(v, rigidity_active, None)
    }

    /// Body domains and fit frames of the rigidity terms at `v`. They are
    /// constants of the gradient, so [`Objective::evaluate_frozen`] with a
    /// fixed state is the function whose derivative `evaluate` returns.
    pub fn rigid_state(&self, v: &VelocityField) -> Result<RigidState> {
        self.labels.grid().ensure_matches(v.grid(), "labels vs velocity")?;
        self.state_at(&Squaring::run(v, self.weights.steps).displacement())
    }

    /// Like [`Objective::evaluate`] with rigidity active, but with domains
    /// and frames taken from `state`.
    pub fn evaluate_frozen(&self, v: &VelocityField, state: &RigidState) -> Result<(LossBreakdown, VectorField)> {
        self.evaluate_inner(v, true, Some(state))
    }

    fn state_at(&self, phi: &DisplacementField) -> Result<RigidState> {
        let terms = &self.weights.rigidity;
        let has = |a, b| terms.contains_key(&a) || terms.contains_key(&b);
        let domains = if has(RigidityTerm::Pc, RigidityTerm::Oc) {
            rigidity::body_domains(&self.labels, phi)?
        } else {
            Vec::new()
        };
        let frames = if has(RigidityTerm::RigidDice, RigidityTerm::RigidField) {
            let ids = self.labels.body_ids().iter();
            ids.map(|&b| rigidity::body_frame(&self.labels, b, phi, self.weights.sample_cap))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(RigidState { domains, frames })
    }

    fn evaluate_inner(
        &self,
        v: &VelocityField,
        rigidity_active: bool,
        frozen: Option<&RigidState>,
    ) -> Result<(LossBreakdown, VectorField)> {
        self.labels.grid().ensure_matches(v.grid(), "labels vs velocity")?;
        let sq = Squaring::run(v, self.weights.steps);
        let phi = sq.displacement();
        let similarity_weight = self.weights.similarity_weight;
        let (similarity, grad_sim) = self.similarity.evaluate(&phi)?;
        let mut grad_phi = grad_sim.scaled(similarity_weight);

        let mut rigidity = BTreeMap::new();
        if rigidity_active && self.weights.has_rigidity() {
            let fresh;
            let state = match frozen {
                Some(s) => s,
                None => {
                    fresh = self.state_at(&phi)?;
                    &fresh
                }
            };
            for &term in self.weights.rigidity.keys() {
                let weight = self.weight(term);
                if weight == 0.0 {
                    continue;
                }
                let (value, per_body, g) = self.rigidity_term(term, state, &phi)?;
                grad_phi.add_scaled(&g, weight);
                rigidity.insert(term, TermValue { weight, value, per_body });
            }
        }

        let mut grad_v = sq.adjoint(&grad_phi)?;
        let (smoothness, gs) = smoothness_loss(v);
        let lambda_smooth = self.weights.lambda_smooth;
        if lambda_smooth != 0.0 {
            grad_v.add_scaled(&gs, lambda_smooth);
        }

        let mut b = LossBreakdown {
            total: 0.0,
            similarity,
            similarity_weight,
            smoothness,
            lambda_smooth,
            rigidity,
        };
        b.total = b.reconstruct();
        debug_assert!((b.total - b.reconstruct()).abs() <= 1e-9 * b.total.abs().max(1.0));
        Ok((b, grad_v))
    }

    fn rigidity_term(
        &self,
        term: RigidityTerm,
        state: &RigidState,
        phi: &DisplacementField,
    ) -> Result<TermOutput> {
        let labels = &self.labels;
        let ids = labels.body_ids();
        let tag = |vals: Vec<f64>| ids.iter().copied().zip(vals).collect::<Vec<_>>();
        let mean = |vals: &[f64]| ordered_sum(vals.iter().copied()) / vals.len().max(1) as f64;
        Ok(match term {
            RigidityTerm::Pc => {
                let (vals, g) = rigidity::pc_per_body(&state.domains, phi);
                (mean(&vals), tag(vals), g)
            }
            RigidityTerm::Oc => {
                let (vals, g) = rigidity::oc_per_body(&state.domains, phi);
                (mean(&vals), tag(vals), g)
            }
            RigidityTerm::Volume => {
                let (vals, g) = rigidity::volume_per_body(labels, phi)?;
                (mean(&vals), tag(vals), g)
            }
            RigidityTerm::RigidDice | RigidityTerm::RigidField => {
                let mut grad = VectorField::zeros(*phi.grid());
                let mut vals = Vec::with_capacity(ids.len());
                for frame in &state.frames {
                    let (v, g) = if term == RigidityTerm::RigidDice {
                        rigidity::rigid_dice_with(labels, frame, phi)?
                    } else {
                        rigidity::rigid_field_with(frame, phi)?
                    };
                    grad.add_scaled(&g, 1.0);
                    vals.push(v);
                }
                (ordered_sum(vals.iter().copied()), tag(vals), grad)
            }
        })
    }
}

/// One-shot evaluation of the loss at `v`, rigidity terms active.
pub fn evaluate(
    fixed: &Volume,
    moving: &Volume,
    labels: &LabelVolume,
    v: &VelocityField,
    w: &LossWeights,
) -> Result<(LossBreakdown, VectorField)> {
    Objective::new(fixed, moving, labels, w.clone())?.evaluate(v, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn pair(n: usize) -> (Volume, Volume, LabelVolume) {
        let g = Grid::with_dims([n; 3]).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        let blob = |x: usize, y: usize, z: usize, s: f64| {
            let r2 = (x as f64 - c - s).powi(2) + (y as f64 - c).powi(2) * 0.7 + (z as f64 - c + 0.5).powi(2) * 1.3;
            (-r2 / 5.0).exp()
        };
        let fixed = Volume::from_fn(g, |x, y, z| 0.8 - 0.6 * blob(x, y, z, 0.0));
        let moving = Volume::from_fn(g, |x, y, z| 0.1 + 0.8 * blob(x, y, z, 0.6));
        let labels = LabelVolume::from_fn(g, |x, y, z| {
            if (2..5).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z) {
                1
            } else if (5..7).contains(&x) && (2..6).contains(&y) && (3..6).contains(&z) {
                2
            } else {
                0
            }
        });
        (fixed, moving, labels)
    }

    fn smooth_velocity(g: Grid, amp: f64) -> VelocityField {
        VelocityField(VectorField::from_fn(g, |p| {
            [
                amp * (p[1] * 0.6 + p[2] * 0.2).sin(),
                amp * (p[0] * 0.5).cos(),
                amp * (p[0] * 0.3 - p[1] * 0.4).sin(),
            ]
        }))
    }

    fn fd_dot(obj: &Objective, v: &VelocityField, h: f64) -> (f64, f64) {
        let state = obj.rigid_state(v).unwrap();
        let (_, grad) = obj.evaluate(v, true).unwrap();
        let dir = VectorField::from_fn(*v.grid(), |p| [(p[0] + 2.0 * p[2]).cos(), (p[1] * 1.7).sin(), (p[2] - p[0]).cos()]);
        let at = |s: f64| {
            let mut w = v.clone();
            w.add_scaled(&dir, s);
            obj.evaluate_frozen(&w, &state).unwrap().0.total
        };
        ((at(h) - at(-h)) / (2.0 * h), grad.dot(&dir))
    }

    #[test]
    fn smoothness_of_constant_and_ramp() {
        let g = Grid::with_dims([6; 3]).unwrap();
        let c = VectorField::from_fn(g, |_| [0.3, -0.2, 1.0]);
        assert_eq!(smoothness_loss(&c).0, 0.0);
        let a = 0.7;
        let ramp = VectorField::from_fn(g, |p| [a * p[1], 0.0, 0.0]);
        assert!((smoothness_loss(&ramp).0 - a * a).abs() < 1e-12);
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let g = Grid::with_dims([8; 3]).unwrap();
        let v = smooth_velocity(g, 0.4);
        let (_, grad) = smoothness_loss(&v);
        let dir = smooth_velocity(g, 1.0).scaled(-0.5);
        let h = 1e-5;
        let at = |s: f64| {
            let mut w = v.0.clone();
            w.add_scaled(&dir, s);
            smoothness_loss(&w).0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let an = grad.dot(&dir);
        assert!((fd - an).abs() / an.abs() < 1e-6, "{fd} vs {an}");
    }

    #[test]
    fn identical_images_at_zero_velocity() {
        let (fixed, _, labels) = pair(8);
        let w = Preset::PcRigidDice.weights().with_term(RigidityTerm::Volume, TermWeight::Auto);
        let v = VelocityField::zeros(*fixed.grid());
        let (b, _) = evaluate(&fixed, &fixed, &labels, &v, &w).unwrap();
        assert!(b.similarity.abs() < 1e-12);
        assert_eq!(b.smoothness, 0.0);
        assert!(b.rigidity.values().all(|t| t.value < 1e-3));
        assert!(b.total.abs() < 1e-3);
    }

    #[test]
    fn breakdown_reconstructs_total() {
        let (fixed, moving, labels) = pair(8);
        let w = Preset::PcRigidField.weights().with_term(RigidityTerm::Oc, TermWeight::Fixed(0.3));
        let obj = Objective::new(&fixed, &moving, &labels, w).unwrap();
        let (b, _) = obj.evaluate(&smooth_velocity(*fixed.grid(), 0.5), true).unwrap();
        assert_eq!(b.rigidity.len(), 3);
        assert!((b.total - b.reconstruct()).abs() < 1e-12);
        assert_eq!(b.rigidity[&RigidityTerm::Oc].weight, 0.3);
        assert_eq!(b.rigidity[&RigidityTerm::RigidField].per_body.len(), 2);
    }

    #[test]
    fn zero_weight_contributes_nothing() {
        let (fixed, moving, labels) = pair(8);
        let v = smooth_velocity(*fixed.grid(), 0.5);
        let base = LossWeights::default();
        let zero = base.clone().with_term(RigidityTerm::Pc, TermWeight::Fixed(0.0));
        let a = Objective::new(&fixed, &moving, &labels, base).unwrap().evaluate(&v, true).unwrap();
        let b = Objective::new(&fixed, &moving, &labels, zero).unwrap().evaluate(&v, true).unwrap();
        assert_eq!(a.0.total, b.0.total);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn inactive_rigidity_is_baseline() {
        let (fixed, moving, labels) = pair(8);
        let v = smooth_velocity(*fixed.grid(), 0.5);
        let obj = Objective::new(&fixed, &moving, &labels, Preset::Pc.weights()).unwrap();
        let base = Objective::new(&fixed, &moving, &labels, Preset::Baseline.weights()).unwrap();
        let (a, ga) = obj.evaluate(&v, false).unwrap();
        let (b, gb) = base.evaluate(&v, true).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(ga, gb);
    }

    #[test]
    fn calibration_caps_at_fraction_of_similarity() {
        let (fixed, moving, labels) = pair(8);
        let v = smooth_velocity(*fixed.grid(), 0.6);
        let mut obj = Objective::new(&fixed, &moving, &labels, Preset::Staring.weights()).unwrap();
        assert!(!obj.is_calibrated());
        let (b, _) = obj.evaluate(&v, true).unwrap();
        obj.calibrate(&b);
        assert!(obj.is_calibrated());
        let (b2, _) = obj.evaluate(&v, true).unwrap();
        for (t, tv) in &b2.rigidity {
            assert!(tv.weight <= default_weight(*t));
            assert!(tv.weight * tv.value <= AUTO_FRACTION * b2.similarity.abs() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let (fixed, moving, labels) = pair(8);
        let w = LossWeights {
            similarity_weight: 0.0,
            lambda_smooth: 0.0,
            ..LossWeights::default()
        };
        let obj = Objective::new(&fixed, &moving, &labels, w).unwrap();
        let (b, g) = obj.evaluate(&smooth_velocity(*fixed.grid(), 0.5), true).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(g.data().iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let (fixed, moving, labels) = pair(8);
        let v = smooth_velocity(*fixed.grid(), 0.3);
        for metric in ["mind", "nmi", "ngf"] {
            let w = RigidityTerm::ALL.iter().fold(
                LossWeights {
                    similarity: metric.parse().unwrap(),
                    ..LossWeights::default()
                },
                |w, &t| w.with_term(t, TermWeight::Fixed(0.5)),
            );
            let obj = Objective::new(&fixed, &moving, &labels, w).unwrap();
            let (fd, an) = fd_dot(&obj, &v, 1e-5);
            assert!((fd - an).abs() / an.abs().max(1e-10) < 1e-4, "{metric}: {fd} vs {an}");
        }
    }

    #[test]
    fn presets_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert_eq!(Preset::Staring.weights().similarity.name(), "nmi");
        assert!(!Preset::Baseline.weights().has_rigidity());
        assert!("fancy".parse::<Preset>().is_err());
    }

    #[test]
    fn rejects_bad_weights() {
        let (fixed, moving, labels) = pair(6);
        let w = LossWeights {
            lambda_smooth: -1.0,
            ..LossWeights::default()
        };
        assert!(Objective::new(&fixed, &moving, &labels, w).is_err());
        let w = LossWeights::default().with_term(RigidityTerm::Pc, TermWeight::Fixed(f64::NAN));
        assert!(Objective::new(&fixed, &moving, &labels, w).is_err());
        let empty = LabelVolume::new(*fixed.grid(), vec![0; fixed.grid().len()]).unwrap();
        assert!(Objective::new(&fixed, &moving, &empty, Preset::Pc.weights()).is_err());
    }
}
