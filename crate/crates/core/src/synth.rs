//! Synthetic abdominal-like volumes: soft tissue (optionally a body cylinder
//! in air), a few dark distractor blobs, and one connected structure per class.
//!
//! Class levels follow [`Polarity`]; distractors sit at
//! `background - contrast / 2`, air at 0. Gaussian noise is added everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::volume::{Dims, LabelVolume, Spacing, Volume};

/// Center and per-axis half extents (z, y, x), in voxel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Placement {
    /// Inclusive integer bounding box, clamped to `dims`.
    pub fn bbox(&self, dims: Dims) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        for a in 0..3 {
            let lo = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a]).ceil() as usize).min(dims[a] - 1);
            out[a] = (lo, hi);
        }
        out
    }

    fn overlaps(&self, other: &Placement, margin: f64) -> bool {
        (0..3).all(|a| (self.center[a] - other.center[a]).abs() <= self.radii[a] + other.radii[a] + margin)
    }
}

/// A family of convex foreground shapes.
pub trait ShapeFamily: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether voxel center `(z, y, x)` lies inside the placed shape.
    fn contains(&self, placement: &Placement, z: f64, y: f64, x: f64) -> bool;

    /// Voxel-center rasterization restricted to the bounding box.
    fn rasterize(&self, placement: &Placement, dims: Dims) -> Vec<[usize; 3]> {
        let [(z0, z1), (y0, y1), (x0, x1)] = placement.bbox(dims);
        let mut out = Vec::new();
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if self.contains(placement, z as f64, y as f64, x as f64) {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

fn norm2(p: &Placement, z: f64, y: f64, x: f64) -> [f64; 3] {
    [
        ((z - p.center[0]) / p.radii[0]).powi(2),
        ((y - p.center[1]) / p.radii[1]).powi(2),
        ((x - p.center[2]) / p.radii[2]).powi(2),
    ]
}

pub struct Ellipsoid;

impl ShapeFamily for Ellipsoid {
    fn name(&self) -> &'static str {
        "ellipsoid"
    }

    fn contains(&self, p: &Placement, z: f64, y: f64, x: f64) -> bool {
        norm2(p, z, y, x).iter().sum::<f64>() <= 1.0
    }
}

pub struct Cuboid;

impl ShapeFamily for Cuboid {
    fn name(&self) -> &'static str {
        "box"
    }

    fn contains(&self, p: &Placement, z: f64, y: f64, x: f64) -> bool {
        (z - p.center[0]).abs() <= p.radii[0]
            && (y - p.center[1]).abs() <= p.radii[1]
            && (x - p.center[2]).abs() <= p.radii[2]
    }
}

/// Elliptic cylinder running along z.
pub struct Tube;

impl ShapeFamily for Tube {
    fn name(&self) -> &'static str {
        "tube"
    }

    fn contains(&self, p: &Placement, z: f64, y: f64, x: f64) -> bool {
        let n = norm2(p, z, y, x);
        (z - p.center[0]).abs() <= p.radii[0] && n[1] + n[2] <= 1.0
    }
}

pub fn shape_registry() -> Registry<dyn ShapeFamily> {
    let mut reg: Registry<dyn ShapeFamily> = Registry::new("shape family");
    reg.register("ellipsoid", || Box::new(Ellipsoid))
        .register("box", || Box::new(Cuboid))
        .register("tube", || Box::new(Tube));
    reg
}

fn default_background() -> f32 {
    1.0
}

fn default_distractors() -> usize {
    2
}

fn default_body() -> bool {
    false
}

/// How class intensities are placed relative to the background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Class `k` at `background + k * contrast`.
    Bright,
    /// Odd classes above, even classes below the background, stepping by
    /// `contrast` every two classes.
    #[default]
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub volumes: usize,
    pub dims: Dims,
    pub spacing: Spacing,
    /// Shape family name per class; class ids are 1..=classes.len().
    pub classes: Vec<String>,
    pub contrast: f32,
    pub noise_sigma: f32,
    pub seed: u64,
    #[serde(default = "default_background")]
    pub background: f32,
    #[serde(default = "default_distractors")]
    pub distractors: usize,
    /// Surround the anatomy with zero-valued air outside an elliptic body.
    #[serde(default = "default_body")]
    pub body: bool,
    #[serde(default)]
    pub polarity: Polarity,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            volumes: 20,
            dims: [16, 64, 64],
            spacing: [3.0, 1.5, 1.5],
            classes: vec!["ellipsoid".into(), "box".into()],
            contrast: 1.0,
            noise_sigma: 0.05,
            seed: 0,
            background: default_background(),
            distractors: default_distractors(),
            body: default_body(),
            polarity: Polarity::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return Err(Error::Invalid(format!("contrast must be > 0, got {}", self.contrast)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Invalid(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::Invalid("at least one class is required".into()));
        }
        let reg = shape_registry();
        for name in &self.classes {
            reg.create(name)?;
        }
        if self.dims.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("dims and spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn class_level(&self, class: u32) -> f32 {
        match self.polarity {
            Polarity::Bright => self.background + class as f32 * self.contrast,
            Polarity::Alternating => {
                let step = class.div_ceil(2) as f32 * self.contrast;
                if class % 2 == 1 {
                    self.background + step
                } else {
                    self.background - step
                }
            }
        }
    }
}

fn sample_placement(
    dims: Dims,
    rng: &mut ChaCha8Rng,
    radius_frac: [(f64, f64); 3],
    bounds: &dyn Fn(&Placement) -> bool,
    taken: &[Placement],
) -> Option<Placement> {
    for _ in 0..1000 {
        let mut radii = [0.0; 3];
        let mut center = [0.0; 3];
        for a in 0..3 {
            let (lo, hi) = radius_frac[a];
            radii[a] = rng.random_range(lo..=hi) * dims[a] as f64;
            // keep one voxel of clearance to the border
            let cmin = radii[a] + 1.0;
            let cmax = dims[a] as f64 - 2.0 - radii[a];
            if cmin > cmax || radii[a] < 1.0 {
                return None;
            }
            center[a] = rng.random_range(cmin..=cmax);
        }
        let p = Placement { center, radii };
        if bounds(&p) && taken.iter().all(|t| !p.overlaps(t, 2.0)) {
            return Some(p);
        }
    }
    None
}

/// Generates one volume and its class labels; the `index` selects an
/// independent random stream so volumes can be built in any order.
pub fn generate_synthetic_volume(spec: &SyntheticSpec, index: usize) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let dims = spec.dims;
    let [d, h, w] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let body_radii = [0.46 * h as f64, 0.46 * w as f64];
    let body_center = [(h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let in_body = |y: f64, x: f64| {
        !spec.body
            || ((y - body_center[0]) / body_radii[0]).powi(2) + ((x - body_center[1]) / body_radii[1]).powi(2) <= 1.0
    };
    // a placement fits when its in-plane bounding corners stay inside the body
    let fits = |p: &Placement| {
        [-1.0, 1.0].iter().all(|&sy| {
            [-1.0, 1.0].iter().all(|&sx| {
                in_body(
                    p.center[1] + sy * (p.radii[1] + 1.0),
                    p.center[2] + sx * (p.radii[2] + 1.0),
                )
            })
        })
    };

    let mut data = vec![0.0f32; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if in_body(y as f64, x as f64) {
                    data[(z * h + y) * w + x] = spec.background;
                }
            }
        }
    }
    let mut labels = vec![0u32; d * h * w];
    let reg = shape_registry();
    let mut taken: Vec<Placement> = Vec::new();

    let organ_frac = [(0.25, 0.34), (0.11, 0.16), (0.11, 0.16)];
    for (ci, name) in spec.classes.iter().enumerate() {
        let family = reg.create(name)?;
        let placement = sample_placement(dims, &mut rng, organ_frac, &fits, &taken)
            .ok_or_else(|| Error::Invalid(format!("class {} ({name}) does not fit in dims {dims:?}", ci + 1)))?;
        taken.push(placement);
        let level = spec.class_level(ci as u32 + 1);
        for [z, y, x] in family.rasterize(&placement, dims) {
            let i = (z * h + y) * w + x;
            data[i] = level;
            labels[i] = ci as u32 + 1;
        }
    }

    let distractor_frac = [(0.15, 0.3), (0.06, 0.1), (0.06, 0.1)];
    let dark = spec.background - 0.5 * spec.contrast;
    for _ in 0..spec.distractors {
        // distractors are optional texture; skip any that cannot be placed
        if let Some(p) = sample_placement(dims, &mut rng, distractor_frac, &fits, &taken) {
            taken.push(p);
            for [z, y, x] in Ellipsoid.rasterize(&p, dims) {
                data[(z * h + y) * w + x] = dark;
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    Ok((
        Volume::new(dims, spec.spacing, data)?,
        LabelVolume::new(dims, spec.spacing, labels)?,
    ))
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<(Volume, LabelVolume)>> {
    (0..spec.volumes).map(|i| generate_synthetic_volume(spec, i)).collect()
}
