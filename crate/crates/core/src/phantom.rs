//! Synthetic spine phantoms with known piecewise-rigid deformations.
//!
//! Bodies are stacked along z in the moving image with discs between them.
//! Each body gets a rigid motion; the ground-truth field equals that motion
//! on and around the body and blends the motions elsewhere with inverse
//! distance weights, plus a smooth background field that fades in away from
//! the bodies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{warp_volume, DisplacementField, VectorField};
use crate::kv;
use crate::mat3;
use crate::metrics::folding_count;
use crate::rigidity::RigidTransform;
use crate::volume::{Grid, LabelVolume, Volume};
use crate::Vec3;

const MAX_ATTEMPTS: usize = 20;
const SHRINK_PER_ATTEMPT: f64 = 0.8;
/// Distance over which the background field fades in, in voxels.
const BACKGROUND_FADE: f64 = 4.0;
const MAX_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BodyShape {
    Box,
    Ellipsoid,
}

impl FromStr for BodyShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(BodyShape::Box),
            "ellipsoid" => Ok(BodyShape::Ellipsoid),
            other => Err(Error::InvalidValue(format!("unknown body shape '{other}'"))),
        }
    }
}

impl fmt::Display for BodyShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BodyShape::Box => "box",
            BodyShape::Ellipsoid => "ellipsoid",
        })
    }
}

/// Tissue classes of the phantom.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tissue {
    Background,
    Disc,
    Body,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    /// Bright bodies, dark discs.
    Ct,
    /// Dark bodies, bright discs.
    Mri,
}

impl Modality {
    pub fn intensity(&self, t: Tissue) -> f64 {
        match (self, t) {
            (Modality::Ct, Tissue::Body) => 1.0,
            (Modality::Ct, Tissue::Disc) => 0.3,
            (Modality::Ct, Tissue::Background) => 0.1,
            (Modality::Mri, Tissue::Body) => 0.2,
            (Modality::Mri, Tissue::Disc) => 0.9,
            (Modality::Mri, Tissue::Background) => 0.5,
        }
    }
}

/// Phantom parameters. Lengths are in voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub bodies: usize,
    pub shape: BodyShape,
    pub half_extent: Vec3,
    /// Disc thickness between consecutive bodies.
    pub gap: f64,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub background_amplitude: f64,
    pub blend_exponent: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    /// Explicit fixed-to-moving motions by body id; these replace random draws.
    pub motions: BTreeMap<u16, RigidTransform>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64; 3],
            bodies: 4,
            shape: BodyShape::Box,
            half_extent: [11.0, 9.0, 4.0],
            gap: 6.0,
            max_rotation_deg: 5.0,
            max_translation: 3.0,
            background_amplitude: 1.5,
            blend_exponent: 4.0,
            noise: 0.02,
            seed: 7,
            motions: BTreeMap::new(),
        }
    }
}

impl PhantomSpec {
    /// Parses `key = value` lines over the defaults.
    ///
    /// `motion.<id> = tx ty tz [ax ay az degrees]` sets an explicit motion,
    /// rotating about the body centre.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = PhantomSpec::default();
        let mut raw_motions = Vec::new();
        for e in kv::parse(text)? {
            match e.key.as_str() {
                "dims" => spec.dims = e.parse_array()?,
                "bodies" => spec.bodies = e.parse()?,
                "shape" => spec.shape = e.parse().map_err(|_| Error::parse(e.line, "shape must be box or ellipsoid"))?,
                "half_extent" => spec.half_extent = e.parse_array()?,
                "gap" => spec.gap = e.parse()?,
                "max_rotation_deg" => spec.max_rotation_deg = e.parse()?,
                "max_translation" => spec.max_translation = e.parse()?,
                "background_amplitude" => spec.background_amplitude = e.parse()?,
                "blend_exponent" => spec.blend_exponent = e.parse()?,
                "noise" => spec.noise = e.parse()?,
                "seed" => spec.seed = e.parse()?,
                k if k.starts_with("motion.") => {
                    let id: u16 = k["motion.".len()..]
                        .parse()
                        .map_err(|_| Error::parse(e.line, format!("bad body id in {k}")))?;
                    let v: Vec<f64> = e.parse_list()?;
                    if v.len() != 3 && v.len() != 7 {
                        return Err(Error::parse(e.line, format!("{k} expects 3 or 7 values")));
                    }
                    raw_motions.push((e.line, id, v));
                }
                other => return Err(Error::parse(e.line, format!("unknown key {other}"))),
            }
        }
        spec.validate()?;
        for (line, id, v) in raw_motions {
            if id == 0 || id as usize > spec.bodies {
                return Err(Error::parse(line, format!("motion for body {id} outside 1..={}", spec.bodies)));
            }
            let c = spec.body_center(id as usize - 1);
            let t = [v[0], v[1], v[2]];
            let motion = if v.len() == 7 {
                let axis = [v[3], v[4], v[5]];
                if !(mat3::norm2(axis) > 0.0) || !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::parse(line, "rotation axis must be finite and nonzero"));
                }
                RigidTransform::about(c, axis, v[6].to_radians(), t)
            } else {
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::parse(line, "motion must be finite"));
                }
                RigidTransform::about(c, [0.0, 0.0, 1.0], 0.0, t)
            };
            spec.motions.insert(id, motion);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if self.dims.iter().any(|&d| !(2..=MAX_DIM).contains(&d)) {
            return bad(format!("dims {:?} outside 2..={MAX_DIM}", self.dims));
        }
        if self.bodies == 0 || self.bodies > 64 {
            return bad(format!("body count {} outside 1..=64", self.bodies));
        }
        if !self.half_extent.iter().all(|h| h.is_finite() && *h >= 1.0) {
            return bad("half extents must be at least 1".into());
        }
        if !(self.gap.is_finite() && self.gap >= 1.0) {
            return bad("gap must be at least 1 so bodies stay disjoint".into());
        }
        let nonneg = [
            ("max_rotation_deg", self.max_rotation_deg),
            ("max_translation", self.max_translation),
            ("background_amplitude", self.background_amplitude),
            ("noise", self.noise),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if self.max_rotation_deg > 45.0 {
            return bad("max_rotation_deg must be at most 45".into());
        }
        if !(self.blend_exponent.is_finite() && self.blend_exponent > 0.0) {
            return bad("blend_exponent must be positive".into());
        }
        // 2-voxel margin on every side
        for a in 0..2 {
            if 2.0 * self.half_extent[a] + 1.0 + 4.0 > self.dims[a] as f64 {
                return bad(format!("bodies do not fit along axis {a} with a 2-voxel margin"));
            }
        }
        if self.stack_height() + 4.0 > self.dims[2] as f64 {
            return bad("body stack does not fit along z with a 2-voxel margin".into());
        }
        Ok(())
    }

    fn body_length(&self) -> f64 {
        2.0 * self.half_extent[2] + 1.0
    }

    fn stack_height(&self) -> f64 {
        let n = self.bodies as f64;
        n * self.body_length() + (n - 1.0) * self.gap
    }

    /// Centre of body `i` (0-based) in the moving image.
    pub fn body_center(&self, i: usize) -> Vec3 {
        let start = ((self.dims[2] as f64 - self.stack_height()) / 2.0).floor();
        let z = start + i as f64 * (self.body_length() + self.gap) + self.half_extent[2];
        [
            ((self.dims[0] - 1) / 2) as f64,
            ((self.dims[1] - 1) / 2) as f64,
            z,
        ]
    }

    fn in_body(&self, i: usize, p: Vec3) -> bool {
        let c = self.body_center(i);
        let h = self.half_extent;
        let d = mat3::sub(p, c);
        match self.shape {
            BodyShape::Box => (0..3).all(|a| d[a].abs() <= h[a] + 1e-9),
            BodyShape::Ellipsoid => (0..3).map(|a| (d[a] / h[a]).powi(2)).sum::<f64>() <= 1.0 + 1e-9,
        }
    }

    /// Tissue class and body id of a moving-image voxel.
    fn classify(&self, p: Vec3) -> (Tissue, u16) {
        for i in 0..self.bodies {
            if self.in_body(i, p) {
                return (Tissue::Body, i as u16 + 1);
            }
        }
        let h = self.half_extent;
        for i in 0..self.bodies.saturating_sub(1) {
            let lo = self.body_center(i)[2] + h[2];
            let hi = self.body_center(i + 1)[2] - h[2];
            let c = self.body_center(i);
            let r = ((p[0] - c[0]) / h[0]).powi(2) + ((p[1] - c[1]) / h[1]).powi(2);
            if p[2] > lo && p[2] < hi && r <= 1.0 {
                return (Tissue::Disc, 0);
            }
        }
        (Tissue::Background, 0)
    }
}

/// A generated image pair with ground truth.
#[derive(Clone, Debug)]
pub struct PhantomPair {
    /// Pseudo-MRI in the fixed space.
    pub fixed: Volume,
    /// Pseudo-CT in the moving space.
    pub moving: Volume,
    pub labels_moving: LabelVolume,
    /// Ground-truth fixed labels, for evaluation only.
    pub labels_fixed: LabelVolume,
    /// Fixed-to-moving ground-truth displacement.
    pub gt: DisplacementField,
    /// Fixed-to-moving rigid motion of each body, by body id order.
    pub motions: Vec<RigidTransform>,
}

/// Exact Euclidean distance (voxel units) to the nearest voxel of each body,
/// in `body_ids` order.
pub fn distance_transform(labels: &LabelVolume) -> Result<Vec<Volume>> {
    labels
        .body_ids()
        .iter()
        .map(|&b| {
            let mask = labels.mask(b)?;
            distance_to_mask(&mask, labels.grid()).map_err(|_| Error::EmptyBody(b))
        })
        .collect()
}

/// Exact Euclidean distance (voxel units) to the nearest `true` voxel.
pub fn distance_to_mask(mask: &[bool], grid: &Grid) -> Result<Volume> {
    if mask.len() != grid.len() {
        return Err(Error::GridMismatch(format!("mask of {} voxels on grid {:?}", mask.len(), grid.dims)));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyBody(0));
    }
    let mut sq: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let dims = grid.dims;
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut env = Envelope::default();
        for start in line_starts(&dims, axis) {
            for (k, v) in line.iter_mut().enumerate() {
                *v = sq[start + k * strides[axis]];
            }
            env.transform(&line, &mut out);
            for (k, v) in out.iter().enumerate() {
                sq[start + k * strides[axis]] = *v;
            }
        }
    }
    Volume::new(*grid, sq.into_iter().map(f64::sqrt).collect())
}

fn line_starts(dims: &[usize; 3], axis: usize) -> Vec<usize> {
    let strides = [1, dims[0], dims[0] * dims[1]];
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut starts = Vec::with_capacity(dims[a] * dims[b]);
    for j in 0..dims[b] {
        for i in 0..dims[a] {
            starts.push(i * strides[a] + j * strides[b]);
        }
    }
    starts
}

/// Lower envelope of parabolas for the 1D squared distance transform.
#[derive(Default)]
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        for (q, &fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            loop {
                let Some(&p) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let (qf, pf) = (q as f64, p as f64);
                let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                if s <= *self.bounds.last().expect("parallel to sites") {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(s);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - self.sites[k] as f64;
            *o = d * d + f[self.sites[k]];
        }
    }
}

/// Random unit vector.
fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: Vec3 = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = mat3::norm2(v).sqrt();
        if n > 1e-6 {
            return mat3::scale(v, 1.0 / n);
        }
    }
}

/// Low-frequency background displacement: a few random plane waves per component.
struct Background {
    waves: Vec<[(Vec3, f64); 3]>,
    amplitude: f64,
}

impl Background {
    fn draw(rng: &mut ChaCha8Rng, amplitude: f64, dims: &[usize; 3]) -> Self {
        let size = *dims.iter().max().expect("three dims") as f64;
        let waves = (0..3)
            .map(|_| {
                std::array::from_fn(|_| {
                    let wavelength = size * rng.random_range(0.6..1.2);
                    let k = mat3::scale(unit_vector(rng), 2.0 * std::f64::consts::PI / wavelength);
                    (k, rng.random_range(0.0..std::f64::consts::TAU))
                })
            })
            .collect();
        Background { waves, amplitude }
    }

    fn at(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|c| {
            let s: f64 = self.waves[c].iter().map(|(k, ph)| (mat3::dot(*k, p) + ph).sin()).sum();
            self.amplitude * s / 3f64.sqrt()
        })
    }
}

/// Voxels a body can influence under trilinear warping by `t`, grown by one
/// voxel so Jacobian stencils on the body stay inside.
fn rigid_region(indicator: &Volume, t: &RigidTransform) -> Vec<bool> {
    let grid = *indicator.grid();
    let support: Vec<bool> = (0..grid.len())
        .into_par_iter()
        .map(|i| indicator.sample_trilinear(t.apply(grid.point(i))) > 0.0)
        .collect();
    let d = grid.dims;
    let mut grown = support.clone();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if !support[grid.index(x, y, z)] {
                    continue;
                }
                for nz in z.saturating_sub(1)..=(z + 1).min(d[2] - 1) {
                    for ny in y.saturating_sub(1)..=(y + 1).min(d[1] - 1) {
                        for nx in x.saturating_sub(1)..=(x + 1).min(d[0] - 1) {
                            grown[grid.index(nx, ny, nz)] = true;
                        }
                    }
                }
            }
        }
    }
    grown
}

/// Builds the blended field, or `None` when regions overlap or the field folds.
fn blend_field(
    spec: &PhantomSpec,
    grid: &Grid,
    indicators: &[Volume],
    motions: &[RigidTransform],
    background: &Background,
) -> Result<Option<DisplacementField>> {
    let regions: Vec<Vec<bool>> = indicators.iter().zip(motions).map(|(ind, t)| rigid_region(ind, t)).collect();
    let mut owner: Vec<Option<usize>> = vec![None; grid.len()];
    for (b, r) in regions.iter().enumerate() {
        for (i, &inside) in r.iter().enumerate() {
            if inside {
                if owner[i].is_some() {
                    return Ok(None);
                }
                owner[i] = Some(b);
            }
        }
    }
    let mut dist = Vec::with_capacity(regions.len());
    for (b, r) in regions.iter().enumerate() {
        dist.push(distance_to_mask(r, grid).map_err(|_| Error::EmptyBody(b as u16 + 1))?);
    }
    let p = spec.blend_exponent;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.point(i);
            if let Some(b) = owner[i] {
                return mat3::sub(motions[b].apply(x), x);
            }
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            let mut dmin = f64::INFINITY;
            for (t, d) in motions.iter().zip(&dist) {
                let di = d.data()[i];
                dmin = dmin.min(di);
                let w = (1.0 + di).powf(-p);
                acc = mat3::add(acc, mat3::scale(mat3::sub(t.apply(x), x), w));
                wsum += w;
            }
            let fade = 1.0 - (-(dmin / BACKGROUND_FADE).powi(2)).exp();
            mat3::add(mat3::scale(acc, 1.0 / wsum), mat3::scale(background.at(x), fade))
        })
        .collect();
    let gt = DisplacementField(VectorField::new(*grid, data)?);
    if folding_count(&gt) > 0 {
        return Ok(None);
    }
    Ok(Some(gt))
}

/// Generates a phantom pair deterministically from `spec`.
pub fn generate_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let grid = Grid::with_dims(spec.dims)?;
    let classes: Vec<(Tissue, u16)> = (0..grid.len()).map(|i| spec.classify(grid.point(i))).collect();
    let labels_moving = LabelVolume::new(grid, classes.iter().map(|c| c.1).collect())?;
    if labels_moving.body_ids().len() != spec.bodies {
        return Err(Error::InvalidValue("a body has no voxel centres; enlarge half_extent".into()));
    }
    let indicators: Vec<Volume> = labels_moving
        .body_ids()
        .iter()
        .map(|&b| labels_moving.indicator(b))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = Background::draw(&mut rng, spec.background_amplitude, &spec.dims);
    let mut found = None;
    for attempt in 0..MAX_ATTEMPTS {
        let shrink = SHRINK_PER_ATTEMPT.powi(attempt as i32);
        let motions: Vec<RigidTransform> = (0..spec.bodies)
            .map(|i| {
                let axis = unit_vector(&mut rng);
                let angle = rng.random::<f64>() * spec.max_rotation_deg.to_radians() * shrink;
                let dir = unit_vector(&mut rng);
                let r = spec.max_translation * rng.random::<f64>().cbrt() * shrink;
                let drawn = RigidTransform::about(spec.body_center(i), axis, angle, mat3::scale(dir, r));
                spec.motions.get(&(i as u16 + 1)).copied().unwrap_or(drawn)
            })
            .collect();
        if let Some(gt) = blend_field(spec, &grid, &indicators, &motions, &background)? {
            found = Some((gt, motions));
            break;
        }
    }
    let Some((gt, motions)) = found else {
        return Err(Error::BodiesOverlapAfterMotion { attempts: MAX_ATTEMPTS });
    };

    let soft: Vec<Volume> = indicators.iter().map(|ind| warp_volume(ind, &gt)).collect();
    let fixed_ids: Vec<u16> = (0..grid.len())
        .map(|i| {
            labels_moving
                .body_ids()
                .iter()
                .zip(&soft)
                .find(|(_, s)| s.data()[i] > 0.5)
                .map_or(0, |(&b, _)| b)
        })
        .collect();
    let labels_fixed = LabelVolume::new(grid, fixed_ids)?;

    let image = |m: Modality| Volume::new(grid, classes.iter().map(|c| m.intensity(c.0)).collect());
    let moving = image(Modality::Ct)?;
    let fixed = warp_volume(&image(Modality::Mri)?, &gt);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidValue(e.to_string()))?;
    let mut finish = |v: Volume| {
        let smooth = v.gaussian_smooth(0.6, 2);
        let data = smooth
            .data()
            .iter()
            .map(|&x| {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (x + n).clamp(0.0, 1.0)
            })
            .collect();
        Volume::new(grid, data)
    };
    let moving = finish(moving)?;
    let fixed = finish(fixed)?;

    Ok(PhantomPair {
        fixed,
        moving,
        labels_moving,
        labels_fixed,
        gt,
        motions,
    })
}
