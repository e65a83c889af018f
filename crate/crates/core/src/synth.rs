//! Synthetic labeled vessel-tree masks.
//!
//! A subject is a cup-shaped retinal surface (a paraboloid depression around
//! the disc centre), a trunk tube rising from deep tissue to the cup floor at
//! a nasally shifted point, and a binary tree of tapering tubes that follow
//! the surface outward. Independent voxel flips are added last.
//!
//! Coordinates are `(depth, height, width)` voxels; nasal is `+width`.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::seed::derive_seed;
use crate::volume::{orthographic_project, MaskVolume};
use crate::{Error, Result};

pub const DEFAULT_CANVAS: [usize; 3] = [256, 128, 256];

/// Thinnest rasterized radius; keeps one-voxel vessels connected.
const MIN_RADIUS: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhenotypeParams {
    pub cup_depth: f64,
    pub cup_radius: f64,
    /// Signed; positive is nasal.
    pub trunk_nasal_offset: f64,
    pub root_diameter: f64,
    /// Diameter ratio child / parent.
    pub taper_ratio: f64,
    pub branch_depth: u32,
    /// Degrees between sibling branches.
    pub branch_angle_spread: f64,
    /// Independent voxel flip probability.
    pub noise: f64,
}

impl PhenotypeParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cup_depth", self.cup_depth),
            ("cup_radius", self.cup_radius),
            ("root_diameter", self.root_diameter),
            ("taper_ratio", self.taper_ratio),
            ("branch_angle_spread", self.branch_angle_spread),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, alloc::format!("{v} must be positive")));
            }
        }
        if !self.trunk_nasal_offset.is_finite() {
            return Err(Error::invalid("trunk_nasal_offset", "must be finite"));
        }
        if self.taper_ratio > 1.0 {
            return Err(Error::invalid("taper_ratio", "must not exceed 1"));
        }
        if !(0.0..=0.05).contains(&self.noise) {
            return Err(Error::invalid("noise", "flip rate must be in [0, 0.05]"));
        }
        Ok(())
    }

    fn scaled(mut self, s: f64) -> Self {
        self.cup_depth *= s;
        self.cup_radius *= s;
        self.trunk_nasal_offset *= s;
        self.root_diameter *= s;
        self
    }

    fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let mix = |x: f64, y: f64| x + t * (y - x);
        PhenotypeParams {
            cup_depth: mix(a.cup_depth, b.cup_depth),
            cup_radius: mix(a.cup_radius, b.cup_radius),
            trunk_nasal_offset: mix(a.trunk_nasal_offset, b.trunk_nasal_offset),
            root_diameter: mix(a.root_diameter, b.root_diameter),
            taper_ratio: mix(a.taper_ratio, b.taper_ratio),
            branch_depth: a.branch_depth,
            branch_angle_spread: mix(a.branch_angle_spread, b.branch_angle_spread),
            noise: mix(a.noise, b.noise),
        }
    }
}

/// Half-widths of the uniform per-subject variation around a class mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub cup_depth: f64,
    pub cup_radius: f64,
    pub trunk_nasal_offset: f64,
    pub root_diameter: f64,
    pub taper_ratio: f64,
    pub branch_angle_spread: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassDistribution {
    pub mean: PhenotypeParams,
    pub jitter: Jitter,
}

impl ClassDistribution {
    /// Draws one subject's parameters. Exactly six uniforms are consumed in a
    /// fixed order, so two distributions sampled from equal RNG states give
    /// subjects at the same relative position (common random numbers).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PhenotypeParams {
        let mut u = || rng.gen_range(-1.0..=1.0);
        let m = &self.mean;
        let j = &self.jitter;
        PhenotypeParams {
            cup_depth: m.cup_depth + j.cup_depth * u(),
            cup_radius: m.cup_radius + j.cup_radius * u(),
            trunk_nasal_offset: m.trunk_nasal_offset + j.trunk_nasal_offset * u(),
            root_diameter: m.root_diameter + j.root_diameter * u(),
            taper_ratio: m.taper_ratio + j.taper_ratio * u(),
            branch_depth: m.branch_depth,
            branch_angle_spread: m.branch_angle_spread + j.branch_angle_spread * u(),
            noise: m.noise,
        }
    }
}

/// Control and glaucoma parameter regimes for one canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regimes {
    pub control: PhenotypeParams,
    pub glaucoma: PhenotypeParams,
    pub jitter: Jitter,
}

impl Regimes {
    /// Defaults sized for [`DEFAULT_CANVAS`], lengths scaled to `canvas`.
    pub fn for_canvas(canvas: [usize; 3]) -> Self {
        let s = (canvas[0] as f64 / 256.0)
            .min(canvas[1] as f64 / 128.0)
            .min(canvas[2] as f64 / 256.0);
        let control = PhenotypeParams {
            cup_depth: 8.0,
            cup_radius: 28.0,
            trunk_nasal_offset: 0.0,
            root_diameter: 7.0,
            taper_ratio: 0.8,
            branch_depth: 4,
            branch_angle_spread: 60.0,
            noise: 1e-5,
        };
        let glaucoma = PhenotypeParams {
            cup_depth: 20.0,
            cup_radius: 34.0,
            trunk_nasal_offset: 8.0,
            root_diameter: 4.0,
            taper_ratio: 0.7,
            ..control
        };
        Regimes {
            control: control.scaled(s),
            glaucoma: glaucoma.scaled(s),
            jitter: Jitter {
                cup_depth: 3.0 * s,
                cup_radius: 3.0 * s,
                trunk_nasal_offset: 3.0 * s,
                root_diameter: 0.8 * s,
                taper_ratio: 0.04,
                branch_angle_spread: 10.0,
            },
        }
    }

    /// Class 0 is always the control regime; class 1 moves from control
    /// (separation 0) to the full glaucoma regime (separation 1).
    pub fn class(&self, label: u8, separation: f64) -> ClassDistribution {
        let mean = if label == 0 {
            self.control
        } else {
            PhenotypeParams::lerp(&self.control, &self.glaucoma, separation.clamp(0.0, 1.0))
        };
        ClassDistribution {
            mean,
            jitter: self.jitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSubject {
    pub volume: MaskVolume,
    /// 1 = glaucoma.
    pub label: u8,
    pub params: PhenotypeParams,
    pub seed: u64,
}

type Point = [f64; 3];

struct Canvas {
    volume: MaskVolume,
    surface0: f64,
    centre: (f64, f64),
}

impl Canvas {
    fn surface(&self, p: &PhenotypeParams, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.centre.0, x - self.centre.1);
        let r2 = (dy * dy + dx * dx) / (p.cup_radius * p.cup_radius);
        if r2 < 1.0 {
            self.surface0 + p.cup_depth * (1.0 - r2)
        } else {
            self.surface0
        }
    }

    fn inside_plane(&self, y: f64, x: f64) -> bool {
        let [_, h, w] = self.volume.dims();
        y >= 0.0 && x >= 0.0 && y <= (h - 1) as f64 && x <= (w - 1) as f64
    }

    /// Sets every voxel whose centre lies within `radius` of segment `a-b`.
    fn capsule(&mut self, a: Point, b: Point, radius: f64) {
        let r = radius.max(MIN_RADIUS);
        let dims = self.volume.dims();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for k in 0..3 {
            let min = a[k].min(b[k]) - r;
            let max = a[k].max(b[k]) + r;
            if max < 0.0 || min > (dims[k] - 1) as f64 {
                return;
            }
            lo[k] = min.max(0.0).ceil() as usize;
            hi[k] = (max.floor() as usize).min(dims[k] - 1);
        }
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
        for d in lo[0]..=hi[0] {
            for h in lo[1]..=hi[1] {
                for w in lo[2]..=hi[2] {
                    let ap = [d as f64 - a[0], h as f64 - a[1], w as f64 - a[2]];
                    let t = if len2 > 0.0 {
                        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let q = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
                    if q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= r * r {
                        self.volume.set(d, h, w, true);
                    }
                }
            }
        }
    }
}

/// Axial geometry of the trunk for a given canvas: `(top, bottom)` of the
/// centreline in depth.
fn trunk_span(c: &Canvas, p: &PhenotypeParams, depth: usize) -> (f64, f64) {
    let radius = p.root_diameter / 2.0;
    let (yc, xc) = c.centre;
    let top = c.surface(p, yc, xc + p.trunk_nasal_offset) + radius;
    let bottom = c.surface0 + p.cup_depth + 0.25 * depth as f64;
    (top, bottom)
}

fn check_bounds(c: &Canvas, p: &PhenotypeParams) -> Result<()> {
    let [d, _, _] = c.volume.dims();
    let (yc, xc) = c.centre;
    let radius = p.root_diameter / 2.0;
    let oob = |parameter, detail: &str| {
        Err(Error::OutOfBounds {
            parameter,
            detail: detail.into(),
        })
    };
    if p.cup_radius >= yc.min(xc) {
        return oob("cup_radius", "cup does not fit inside the canvas");
    }
    if 2.0 * radius >= p.cup_radius {
        return oob("root_diameter", "trunk is wider than the cup");
    }
    if p.trunk_nasal_offset.abs() + radius > p.cup_radius {
        return oob("trunk_nasal_offset", "trunk emerges outside the cup");
    }
    let (_, bottom) = trunk_span(c, p, d);
    if bottom + radius > (d - 1) as f64 {
        return oob("cup_depth", "trunk reaches below the canvas");
    }
    Ok(())
}

struct Branch {
    y: f64,
    x: f64,
    angle: f64,
    length: f64,
    diameter: f64,
    generation: u32,
}

fn grow(c: &mut Canvas, p: &PhenotypeParams, rng: &mut ChaCha8Rng, root: Branch) {
    let mut stack = alloc::vec![root];
    let half_spread = p.branch_angle_spread.to_radians() / 2.0;
    while let Some(b) = stack.pop() {
        let radius = b.diameter / 2.0;
        let (dy, dx) = (b.angle.sin(), b.angle.cos());
        let steps = b.length.ceil().max(1.0) as usize;
        let step = b.length / steps as f64;
        let mut prev = [c.surface(p, b.y, b.x) + radius, b.y, b.x];
        let mut inside = true;
        for s in 1..=steps {
            let y = b.y + dy * step * s as f64;
            let x = b.x + dx * step * s as f64;
            let next = [c.surface(p, y, x) + radius, y, x];
            c.capsule(prev, next, radius);
            prev = next;
            if !c.inside_plane(y, x) {
                inside = false;
                break;
            }
        }
        if inside && b.generation < p.branch_depth {
            for sign in [-1.0, 1.0] {
                let turn = half_spread * rng.gen_range(0.7..1.3);
                stack.push(Branch {
                    y: prev[1],
                    x: prev[2],
                    angle: b.angle + sign * turn,
                    length: b.length * 0.75,
                    diameter: b.diameter * p.taper_ratio,
                    generation: b.generation + 1,
                });
            }
        }
    }
}

fn flip_noise(v: &mut MaskVolume, rate: f64, rng: &mut ChaCha8Rng) {
    if rate <= 0.0 {
        return;
    }
    let n = v.voxels().len();
    let log_keep = (1.0 - rate).ln();
    // geometric gaps between flipped voxels
    let mut i = 0usize;
    loop {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let gap = (u.ln() / log_keep).floor();
        if gap >= (n - i) as f64 {
            break;
        }
        i += gap as usize;
        let voxels = v.voxels_mut();
        voxels[i] ^= 1;
        i += 1;
        if i >= n {
            break;
        }
    }
}

/// Rasterizes one subject with fixed parameters.
pub fn render(p: &PhenotypeParams, canvas: [usize; 3], rng: &mut ChaCha8Rng) -> Result<MaskVolume> {
    p.validate()?;
    let [d, h, w] = canvas;
    let mut c = Canvas {
        volume: MaskVolume::empty(canvas)?,
        surface0: 0.2 * d as f64,
        centre: ((h / 2) as f64, (w / 2) as f64),
    };
    check_bounds(&c, p)?;
    let (yc, xc) = c.centre;
    let xt = xc + p.trunk_nasal_offset;
    let (top, bottom) = trunk_span(&c, p, d);
    c.capsule([bottom, yc, xt], [top, yc, xt], p.root_diameter / 2.0);
    if p.branch_depth > 0 {
        let length = 0.22 * w as f64;
        let half_spread = p.branch_angle_spread.to_radians() / 2.0;
        for base in [PI / 2.0, -PI / 2.0] {
            let angle = base + half_spread * rng.gen_range(-0.5..0.5);
            grow(
                &mut c,
                p,
                rng,
                Branch {
                    y: yc,
                    x: xt,
                    angle,
                    length,
                    diameter: p.root_diameter * p.taper_ratio,
                    generation: 1,
                },
            );
        }
    }
    flip_noise(&mut c.volume, p.noise, rng);
    Ok(c.volume)
}

pub fn generate_subject(label: u8, dist: &ClassDistribution, canvas: [usize; 3], seed: u64) -> Result<SyntheticSubject> {
    if label > 1 {
        return Err(Error::invalid("label", "labels must be 0 or 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = dist.sample(&mut rng);
    let volume = render(&params, canvas, &mut rng)?;
    Ok(SyntheticSubject {
        volume,
        label,
        params,
        seed,
    })
}

/// Subjects alternate control, glaucoma; subject `i` uses stream `i` of the
/// master seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetPlan {
    pub n_per_class: usize,
    pub separation: f64,
    pub seed: u64,
    pub canvas: [usize; 3],
    pub regimes: Regimes,
}

impl DatasetPlan {
    pub fn new(n_per_class: usize, separation: f64, seed: u64, canvas: [usize; 3]) -> Result<Self> {
        if n_per_class == 0 {
            return Err(Error::invalid("n_per_class", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&separation) {
            return Err(Error::invalid("separation", "must be in [0, 1]"));
        }
        Ok(DatasetPlan {
            n_per_class,
            separation,
            seed,
            canvas,
            regimes: Regimes::for_canvas(canvas),
        })
    }

    pub fn len(&self) -> usize {
        2 * self.n_per_class
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn label(&self, i: usize) -> u8 {
        (i % 2) as u8
    }

    pub fn subject_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, i as u64)
    }

    pub fn subject(&self, i: usize) -> Result<SyntheticSubject> {
        let label = self.label(i);
        let dist = self.regimes.class(label, self.separation);
        generate_subject(label, &dist, self.canvas, self.subject_seed(i))
    }
}

pub fn generate_dataset(n_per_class: usize, separation: f64, seed: u64, canvas: [usize; 3]) -> Result<Vec<SyntheticSubject>> {
    let plan = DatasetPlan::new(n_per_class, separation, seed, canvas)?;
    (0..plan.len()).map(|i| plan.subject(i)).collect()
}

/// Frontal projection pixel count, the single-feature baseline score.
pub fn frontal_pixel_count(v: &MaskVolume) -> usize {
    orthographic_project(v).frontal.count()
}
