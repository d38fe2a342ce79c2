//! Per-pair optimization of the velocity field.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::field::{exp_svf, DisplacementField, VectorField, VelocityField};
use crate::parallel::ordered_sum;
use crate::objective::{LossBreakdown, LossWeights, Objective, TermWeight};
use crate::volume::{Grid, LabelVolume, Volume};

/// Iterations over which the relative loss change is measured.
pub const CONVERGENCE_WINDOW: usize = 10;
const ADAM_EPS: f64 = 1e-8;
const PYRAMID_SIGMA: f64 = 1.0;

/// Optimizer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimSettings {
    /// Iteration cap per pyramid level.
    pub max_iters: usize,
    /// Adam step in voxels.
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Relative total-loss change over the window that counts as converged.
    pub tolerance: f64,
    pub levels: usize,
    /// Global iteration at which rigidity terms switch on.
    pub activate_after: usize,
    /// Recorded for provenance; the optimizer itself draws no random numbers.
    pub seed: u64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            max_iters: 200,
            step_size: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            tolerance: 1e-4,
            levels: 2,
            activate_after: 0,
            seed: 0,
        }
    }
}

impl OptimSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return bad(format!("tolerance must be finite and >= 0, got {}", self.tolerance));
        }
        if self.levels == 0 || self.levels > 6 {
            return bad(format!("levels must lie in 1..=6, got {}", self.levels));
        }
        Ok(())
    }
}

/// Images and labels on a common grid.
#[derive(Clone, Debug)]
pub struct Problem {
    pub fixed: Volume,
    pub moving: Volume,
    pub labels: LabelVolume,
}

impl Problem {
    /// Normalizes intensities and resamples moving data onto the fixed grid,
    /// first making the fixed grid isotropic at its finest spacing.
    pub fn prepare(fixed: &Volume, moving: &Volume, labels: &LabelVolume) -> Result<Problem> {
        moving.grid().ensure_matches(labels.grid(), "moving vs labels")?;
        let mut fixed = fixed.normalize_intensity()?;
        let s = fixed.grid().spacing;
        if s.iter().any(|&x| (x - s[0]).abs() > 1e-9 * s[0]) {
            let target = s.iter().copied().fold(f64::INFINITY, f64::min);
            fixed = fixed.resample_isotropic(target)?;
        }
        let grid = *fixed.grid();
        let (moving, labels) = if moving.grid().matches(&grid) {
            (moving.clone(), labels.clone())
        } else {
            (moving.resample_to(&grid), labels.resample_to(&grid))
        };
        Ok(Problem {
            fixed,
            moving: moving.normalize_intensity()?,
            labels,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.fixed.grid()
    }

    /// Half-resolution copy: images are smoothed before decimation, labels
    /// are subsampled.
    fn coarsened(&self) -> Result<Problem> {
        let coarse = self.grid().coarsened()?;
        let shrink = |v: &Volume| v.gaussian_smooth(PYRAMID_SIGMA, 2).decimate(&coarse);
        Ok(Problem {
            fixed: shrink(&self.fixed),
            moving: shrink(&self.moving),
            labels: self.labels.decimate(&coarse),
        })
    }
}

/// Outcome of one optimization run.
#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub velocity: VelocityField,
    pub displacement: DisplacementField,
    /// Loss at every iterate that produced an update, coarse levels first.
    pub history: Vec<LossBreakdown>,
    /// Loss at the returned velocity.
    pub final_loss: LossBreakdown,
    pub iterations: usize,
    pub wall_seconds: f64,
    /// Weights with auto-scaled terms replaced by their calibrated values.
    pub weights: LossWeights,
    pub problem: Problem,
}

/// Adam with a second moment shared by the whole field, so steps keep the
/// relative magnitudes of the gradient across voxels.
struct Adam {
    m: Vec<[f64; 3]>,
    s: f64,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![[0.0; 3]; n],
            s: 0.0,
            t: 0,
        }
    }

    fn step(&mut self, v: &mut VectorField, g: &VectorField, st: &OptimSettings) {
        self.t += 1;
        let c1 = 1.0 - st.beta1.powi(self.t);
        let c2 = 1.0 - st.beta2.powi(self.t);
        let n = g.data().len() as f64;
        let mean_sq = ordered_sum(g.data().iter().map(|x| x[0] * x[0] + x[1] * x[1] + x[2] * x[2])) / (3.0 * n);
        self.s = st.beta2 * self.s + (1.0 - st.beta2) * mean_sq;
        let denom = (self.s / c2).sqrt() + ADAM_EPS;
        for ((x, gi), m) in v.data_mut().iter_mut().zip(g.data()).zip(self.m.iter_mut()) {
            for c in 0..3 {
                m[c] = st.beta1 * m[c] + (1.0 - st.beta1) * gi[c];
                x[c] -= st.step_size * (m[c] / c1) / denom;
            }
        }
    }
}

/// Replaces auto-scaled weights that `obj` has calibrated with their values.
fn freeze_calibrated(weights: &mut LossWeights, obj: &Objective) {
    let terms: Vec<_> = weights.rigidity.keys().copied().collect();
    for t in terms {
        if weights.rigidity[&t] == TermWeight::Auto && obj.is_calibrated() {
            weights.rigidity.insert(t, TermWeight::Fixed(obj.weight(t)));
        }
    }
}

struct LevelOutcome {
    velocity: VelocityField,
    objective: Objective,
}

/// Runs Adam on one level. `global` counts iterations across levels.
fn optimize_level(
    problem: &Problem,
    weights: &LossWeights,
    mut v: VelocityField,
    settings: &OptimSettings,
    global: &mut usize,
    history: &mut Vec<LossBreakdown>,
) -> Result<LevelOutcome> {
    let mut obj = Objective::new(&problem.fixed, &problem.moving, &problem.labels, weights.clone())?;
    let mut adam = Adam::new(v.grid().len());
    let mut window: Vec<f64> = Vec::new();
    for _ in 0..settings.max_iters {
        let active = *global >= settings.activate_after;
        let (mut b, mut g) = obj.evaluate(&v, active)?;
        if active && !obj.is_calibrated() {
            obj.calibrate(&b);
            (b, g) = obj.evaluate(&v, active)?;
        }
        if !b.total.is_finite() || !g.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: *global });
        }
        // the loss jumps when rigidity switches on, so the window restarts there
        if *global == settings.activate_after {
            window.clear();
        }
        window.push(b.total);
        history.push(b);
        *global += 1;
        if window.len() > CONVERGENCE_WINDOW {
            let old = window[window.len() - 1 - CONVERGENCE_WINDOW];
            let new = *window.last().expect("nonempty");
            if (old - new).abs() <= settings.tolerance * old.abs().max(1e-12) {
                break;
            }
        }
        adam.step(&mut v, &g, settings);
    }
    Ok(LevelOutcome { velocity: v, objective: obj })
}

fn finish(
    problem: Problem,
    outcome: LevelOutcome,
    mut weights: LossWeights,
    history: Vec<LossBreakdown>,
    started: Instant,
    settings: &OptimSettings,
    global: usize,
) -> Result<RegistrationResult> {
    let active = global >= settings.activate_after;
    let (final_loss, _) = outcome.objective.evaluate(&outcome.velocity, active)?;
    if !final_loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: global });
    }
    freeze_calibrated(&mut weights, &outcome.objective);
    let displacement = exp_svf(&outcome.velocity, weights.steps);
    Ok(RegistrationResult {
        velocity: outcome.velocity,
        displacement,
        iterations: history.len(),
        history,
        final_loss,
        wall_seconds: started.elapsed().as_secs_f64(),
        weights,
        problem,
    })
}

/// Registers `moving` to `fixed` starting from the zero velocity field.
pub fn register(
    fixed: &Volume,
    moving: &Volume,
    labels: &LabelVolume,
    weights: &LossWeights,
    settings: &OptimSettings,
) -> Result<RegistrationResult> {
    let started = Instant::now();
    settings.validate()?;
    weights.validate()?;
    let problem = Problem::prepare(fixed, moving, labels)?;

    let mut pyramid = vec![problem];
    while pyramid.len() < settings.levels {
        let last = pyramid.last().expect("nonempty");
        if last.grid().dims.iter().any(|&d| d < 8) {
            break;
        }
        let next = last.coarsened()?;
        pyramid.push(next);
    }

    let mut weights = weights.clone();
    let mut history = Vec::new();
    let mut global = 0;
    let mut v = VelocityField::zeros(*pyramid.last().expect("nonempty").grid());
    loop {
        let level = pyramid.pop().expect("nonempty");
        if !v.grid().matches(level.grid()) {
            v = VelocityField(v.upsample(level.grid()));
        }
        let out = optimize_level(&level, &weights, v, settings, &mut global, &mut history)?;
        freeze_calibrated(&mut weights, &out.objective);
        if pyramid.is_empty() {
            return finish(level, out, weights, history, started, settings, global);
        }
        v = out.velocity;
    }
}

/// Continues from a previous result under new weights on the finest level.
pub fn warm_start(
    result: &RegistrationResult,
    new_weights: &LossWeights,
    settings: &OptimSettings,
) -> Result<RegistrationResult> {
    let started = Instant::now();
    settings.validate()?;
    new_weights.validate()?;
    let problem = result.problem.clone();
    problem.grid().ensure_matches(result.velocity.grid(), "stored problem vs velocity")?;
    let mut history = Vec::new();
    let mut global = 0;
    let out = optimize_level(&problem, new_weights, result.velocity.clone(), settings, &mut global, &mut history)?;
    finish(problem, out, new_weights.clone(), history, started, settings, global)
}
