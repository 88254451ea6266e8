//! Self-supervised episodes: a random supervoxel becomes the foreground
//! class, two of its slices become support and query, and one side gets a
//! random affine + gamma transform.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformTarget {
    Support,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Foreground pixels a slice needs to serve as support or query.
    pub min_pixels: usize,
    pub max_attempts: usize,
    pub transform_target: TransformTarget,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            min_pixels: 200,
            max_attempts: 50,
            transform_target: TransformTarget::Query,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_pixels == 0 || self.max_attempts == 0 {
            return Err(Error::Invalid("min_pixels and max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sampling ranges. Angles in degrees, translation as a fraction of H/W.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSpec {
    pub rotation_deg: f64,
    pub scale: [f64; 2],
    pub translation: f64,
    pub shear_deg: f64,
    pub gamma: [f64; 2],
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec {
            rotation_deg: 25.0,
            scale: [0.8, 1.2],
            translation: 0.1,
            shear_deg: 5.0,
            gamma: [0.7, 1.5],
        }
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec {
            rotation_deg: 0.0,
            scale: [1.0, 1.0],
            translation: 0.0,
            shear_deg: 0.0,
            gamma: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.translation >= 0.0
            && self.shear_deg >= 0.0
            && self.scale[0] > 0.0
            && self.scale[0] <= self.scale[1]
            && self.gamma[0] > 0.0
            && self.gamma[0] <= self.gamma[1]
            && [
                self.rotation_deg,
                self.translation,
                self.shear_deg,
                self.scale[1],
                self.gamma[1],
            ]
            .iter()
            .all(|v| v.is_finite());
        if !ok {
            return Err(Error::Invalid(format!("bad transform ranges {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng, height: usize, width: usize) -> TransformParams {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let span =
            |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        TransformParams {
            rotation: sym(rng, self.rotation_deg).to_radians(),
            scale: span(rng, self.scale),
            shift: [
                sym(rng, self.translation) * height as f64,
                sym(rng, self.translation) * width as f64,
            ],
            shear: sym(rng, self.shear_deg).to_radians(),
            gamma: span(rng, self.gamma),
        }
    }
}

/// One concrete transform: rotation and shear in radians, shift in pixels (dy, dx).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub rotation: f64,
    pub scale: f64,
    pub shift: [f64; 2],
    pub shear: f64,
    pub gamma: f64,
}

impl TransformParams {
    pub fn translation(dy: f64, dx: f64) -> Self {
        TransformParams {
            rotation: 0.0,
            scale: 1.0,
            shift: [dy, dx],
            shear: 0.0,
            gamma: 1.0,
        }
    }

    fn is_identity_geometry(&self) -> bool {
        self.rotation == 0.0 && self.scale == 1.0 && self.shift == [0.0, 0.0] && self.shear == 0.0
    }

    /// Forward matrix on (y, x): rotation · shear · isotropic scale.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let k = self.shear.tan();
        // rotation [[c, -s], [s, c]] times shear-in-x [[1, 0], [k, 1]]
        let m = [[c - s * k, -s], [s + c * k, c]];
        m.map(|row| row.map(|v| v * self.scale))
    }
}

/// Warps `image` (bilinear) and `mask` (nearest) about the slice centre,
/// zero outside, then applies gamma to the image.
pub fn apply_transform(
    image: &[f32],
    mask: &[u8],
    height: usize,
    width: usize,
    params: &TransformParams,
) -> Result<(Vec<f32>, Vec<u8>)> {
    if image.len() != height * width || mask.len() != height * width {
        return Err(Error::Shape("transform image/mask size".into()));
    }
    let (mut img, msk) = if params.is_identity_geometry() {
        (image.to_vec(), mask.to_vec())
    } else {
        warp(image, mask, height, width, params)?
    };
    if params.gamma != 1.0 {
        apply_gamma(&mut img, params.gamma);
    }
    Ok((img, msk))
}

fn warp(image: &[f32], mask: &[u8], h: usize, w: usize, p: &TransformParams) -> Result<(Vec<f32>, Vec<u8>)> {
    let m = p.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 {
        return Err(Error::Invalid("degenerate transform".into()));
    }
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ymax, xmax) = (h as f64 - 1.0, w as f64 - 1.0);
    let mut out_img = vec![0.0f32; h * w];
    let mut out_mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy - p.shift[0];
            let dx = x as f64 - cx - p.shift[1];
            let sy = inv[0][0] * dy + inv[0][1] * dx + cy;
            let sx = inv[1][0] * dy + inv[1][1] * dx + cx;
            let o = y * w + x;
            let (ny, nx) = ((sy + 0.5).floor(), (sx + 0.5).floor());
            if ny >= 0.0 && nx >= 0.0 && ny <= ymax && nx <= xmax {
                out_mask[o] = mask[ny as usize * w + nx as usize];
            }
            if sy < 0.0 || sx < 0.0 || sy > ymax || sx > xmax {
                continue;
            }
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ly, lx) = (sy - y0 as f64, sx - x0 as f64);
            let at = |yy: usize, xx: usize| image[yy * w + xx] as f64;
            let top = at(y0, x0) * (1.0 - lx) + at(y0, x1) * lx;
            let bot = at(y1, x0) * (1.0 - lx) + at(y1, x1) * lx;
            out_img[o] = (top * (1.0 - ly) + bot * ly) as f32;
        }
    }
    Ok((out_img, out_mask))
}

/// Normalizes to [0, 1] over the slice, raises to `gamma`, restores the range.
/// Constant slices are returned unchanged.
pub fn apply_gamma(image: &mut [f32], gamma: f64) {
    let lo = image.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = image.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if !(hi > lo) {
        return;
    }
    for v in image.iter_mut() {
        let t = ((*v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
        *v = (lo + (hi - lo) * t.powf(gamma)) as f32;
    }
}

/// Where an episode came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub volume: usize,
    pub supervoxel: u32,
    pub support_z: usize,
    pub query_z: usize,
}

/// One support image/mask pair and one query image/mask pair of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub height: usize,
    pub width: usize,
    pub support_image: Vec<f32>,
    pub support_mask: Vec<u8>,
    pub query_image: Vec<f32>,
    pub query_mask: Vec<u8>,
    pub provenance: Provenance,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if [
            self.support_image.len(),
            self.query_image.len(),
            self.support_mask.len(),
            self.query_mask.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::Shape("episode images and masks must share (H, W)".into()));
        }
        if self.support_mask.iter().chain(&self.query_mask).any(|&m| m > 1) {
            return Err(Error::Invalid("episode masks must be binary".into()));
        }
        if !self.support_mask.contains(&1) {
            return Err(Error::EmptyMask("support"));
        }
        Ok(())
    }
}

/// Supervoxels of one volume that have at least two slices with enough pixels.
#[derive(Debug, Clone)]
pub struct SupervoxelIndex {
    /// (label, qualifying z-indices), ascending by label.
    pub eligible: Vec<(u32, Vec<usize>)>,
}

impl SupervoxelIndex {
    pub fn new(supervoxels: &LabelVolume, min_pixels: usize) -> Self {
        let [d, _, _] = supervoxels.dims();
        let nlab = supervoxels.max_label() as usize;
        let mut counts = vec![0usize; (nlab + 1) * d];
        for z in 0..d {
            for &l in supervoxels.slice(z) {
                counts[l as usize * d + z] += 1;
            }
        }
        let eligible = (1..=nlab)
            .filter_map(|l| {
                let zs: Vec<usize> = (0..d).filter(|&z| counts[l * d + z] >= min_pixels).collect();
                (zs.len() >= 2).then_some((l as u32, zs))
            })
            .collect();
        SupervoxelIndex { eligible }
    }

    pub fn is_empty(&self) -> bool {
        self.eligible.is_empty()
    }
}

/// Draws one episode. The supervoxel is uniform over those with two
/// qualifying slices (the same law as rejection sampling over all ids);
/// transforms leaving too little foreground are redrawn, each draw counting
/// as an attempt.
#[allow(clippy::too_many_arguments)]
pub fn sample_episode(
    volume_id: usize,
    volume: &Volume,
    supervoxels: &LabelVolume,
    index: &SupervoxelIndex,
    config: &SamplerConfig,
    transform: &TransformSpec,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if volume.dims() != supervoxels.dims() {
        return Err(Error::Shape("supervoxels do not match volume".into()));
    }
    if index.is_empty() {
        return Err(Error::Sampling(format!(
            "volume {volume_id}: no supervoxel has two slices with >= {} pixels",
            config.min_pixels
        )));
    }
    let [_, h, w] = volume.dims();
    for _ in 0..config.max_attempts {
        let (label, zs) = &index.eligible[rng.random_range(0..index.eligible.len())];
        let a = rng.random_range(0..zs.len());
        let mut b = rng.random_range(0..zs.len() - 1);
        if b >= a {
            b += 1;
        }
        let (sz, qz) = (zs[a], zs[b]);
        let mut support = (volume.slice(sz).to_vec(), supervoxels.slice_mask(sz, *label));
        let mut query = (volume.slice(qz).to_vec(), supervoxels.slice_mask(qz, *label));
        let params = transform.sample(rng, h, w);
        let side = match config.transform_target {
            TransformTarget::Support => &mut support,
            TransformTarget::Query => &mut query,
        };
        let (img, msk) = apply_transform(&side.0, &side.1, h, w, &params)?;
        if msk.iter().filter(|&&m| m == 1).count() < config.min_pixels {
            continue;
        }
        *side = (img, msk);
        return Ok(Episode {
            height: h,
            width: w,
            support_image: support.0,
            support_mask: support.1,
            query_image: query.0,
            query_mask: query.1,
            provenance: Provenance {
                volume: volume_id,
                supervoxel: *label,
                support_z: sz,
                query_z: qz,
            },
        });
    }
    Err(Error::Sampling(format!(
        "volume {volume_id}: no valid episode after {} attempts",
        config.max_attempts
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Vec<u8> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                u8::from((y - cy).powi(2) + (x - cx).powi(2) <= r * r)
            })
            .collect()
    }

    fn centroid(m: &[u8], w: usize) -> (f64, f64) {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for (i, &v) in m.iter().enumerate() {
            if v == 1 {
                sy += (i / w) as f64;
                sx += (i % w) as f64;
                n += 1.0;
            }
        }
        (sy / n, sx / n)
    }

    #[test]
    fn identity_transform_is_exact() {
        let img: Vec<f32> = (0..48).map(|v| v as f32 * 0.3).collect();
        let mask = blob(6, 8, 3.0, 4.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = TransformSpec::identity().sample(&mut rng, 6, 8);
        let (i2, m2) = apply_transform(&img, &mask, 6, 8, &p).unwrap();
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
        // the general warp path agrees too
        let (i3, m3) = warp(&img, &mask, 6, 8, &p).unwrap();
        assert_eq!(i3, img);
        assert_eq!(m3, mask);
    }

    #[test]
    fn gamma_keeps_constant_slices() {
        let mut img = vec![4.0f32; 9];
        apply_gamma(&mut img, 0.7);
        assert_eq!(img, vec![4.0; 9]);
        let mut ramp = vec![0.0f32, 0.5, 1.0];
        apply_gamma(&mut ramp, 2.0);
        assert_eq!(ramp, vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn translation_moves_centroid() {
        let (h, w) = (32, 32);
        let mask = blob(h, w, 14.0, 13.0, 5.0);
        let img: Vec<f32> = mask.iter().map(|&m| m as f32).collect();
        let (c0y, c0x) = centroid(&mask, w);
        let (_, m2) = apply_transform(&img, &mask, h, w, &TransformParams::translation(2.0, 3.0)).unwrap();
        let (c1y, c1x) = centroid(&m2, w);
        assert!((c1y - c0y - 2.0).abs() <= 0.5);
        assert!((c1x - c0x - 3.0).abs() <= 0.5);
    }

    #[test]
    fn random_transforms_keep_masks_binary() {
        let (h, w) = (24, 24);
        let mask = blob(h, w, 12.0, 12.0, 6.0);
        let img: Vec<f32> = (0..h * w).map(|i| (i % 13) as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = TransformSpec::default().sample(&mut rng, h, w);
            let (i2, m2) = apply_transform(&img, &mask, h, w, &p).unwrap();
            assert!(m2.iter().all(|&m| m <= 1));
            assert!(i2.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn validation() {
        assert!(TransformSpec::default().validate().is_ok());
        let bad = TransformSpec {
            gamma: [0.0, 1.0],
            ..TransformSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig {
            min_pixels: 0,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
