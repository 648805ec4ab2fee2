//! Seeded synthetic volumes: an elliptical gland that grows towards the
//! middle of the stack, sitting off the frame centre and drifting from
//! slice to slice, over a smooth body background with additive noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, write_json, Dataset, DatasetManifest, PatientVolume};
use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::preprocess::SlicePair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub patients: usize,
    /// Inclusive range of slices per patient.
    pub slices: [usize; 2],
    pub frame: usize,
    /// Semi-major axis of the largest gland cross-section, pixels.
    pub gland_radius: [f64; 2],
    /// Minor to major axis ratio.
    pub eccentricity: [f64; 2],
    /// Per-axis offset of the gland centre from the frame centre, pixels.
    pub offset: [f64; 2],
    /// Per-axis centre travel from the first to the last slice, pixels.
    pub drift: [f64; 2],
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    /// Left-to-right background ramp amplitude.
    pub gradient: f64,
    pub body_intensity: f64,
    pub gland_contrast: f64,
    pub slice_thickness: String,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patients: 20,
            slices: [15, 22],
            frame: 128,
            gland_radius: [10.0, 16.0],
            eccentricity: [0.7, 1.0],
            offset: [-16.0, 16.0],
            drift: [-14.0, 14.0],
            noise: 350.0,
            gradient: 300.0,
            body_intensity: 900.0,
            gland_contrast: 300.0,
            slice_thickness: "3mm".into(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("phantom.{m}")));
        if self.patients == 0 {
            return fail("patients must be ≥ 1".into());
        }
        if self.slices[0] < 1 || self.slices[0] > self.slices[1] {
            return fail(format!("slices range {:?} is empty", self.slices));
        }
        if self.frame < 16 {
            return fail(format!("frame {} is too small", self.frame));
        }
        let ranges = [
            ("gland_radius", self.gland_radius),
            ("eccentricity", self.eccentricity),
            ("offset", self.offset),
            ("drift", self.drift),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return fail(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.gland_radius[0] <= 1.0 || 2.0 * self.gland_radius[1] >= self.frame as f64 {
            return fail(format!("gland_radius {:?} does not fit frame {}", self.gland_radius, self.frame));
        }
        if self.eccentricity[0] <= 0.0 || self.eccentricity[1] > 1.0 {
            return fail(format!("eccentricity {:?} outside (0, 1]", self.eccentricity));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("gradient", self.gradient),
            ("body_intensity", self.body_intensity),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and ≥ 0"));
            }
        }
        if !self.gland_contrast.is_finite() {
            return fail("gland_contrast must be finite".into());
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Relative gland area at slice `z` of `n`: small at both ends, largest
/// mid-stack.
pub fn area_profile(z: usize, n: usize) -> f64 {
    0.35 + 0.65 * (std::f64::consts::PI * (z as f64 + 0.5) / n as f64).sin()
}

fn patient(cfg: &PhantomConfig, index: usize) -> Result<PatientVolume> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n = rng.gen_range(cfg.slices[0]..=cfg.slices[1]);
    let radius = draw(&mut rng, cfg.gland_radius);
    let ecc = draw(&mut rng, cfg.eccentricity);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let off = (draw(&mut rng, cfg.offset), draw(&mut rng, cfg.offset));
    let drift = (draw(&mut rng, cfg.drift), draw(&mut rng, cfg.drift));

    let f = cfg.frame;
    let mid = (f as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let id = format!("P{index:03}");
    let mut pairs = Vec::with_capacity(n);
    for z in 0..n {
        let a = radius * area_profile(z, n).sqrt();
        let b = a * ecc;
        let t = if n > 1 { z as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
        // Keep the whole ellipse inside the frame with a 1-pixel border.
        let limit = mid - a - 1.0;
        let cr = mid + (off.0 + drift.0 * t).clamp(-limit, limit);
        let cc = mid + (off.1 + drift.1 * t).clamp(-limit, limit);
        let mask = Plane::from_fn(f, f, |r, c| {
            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
            let u = (dr * cos + dc * sin) / a;
            let v = (-dr * sin + dc * cos) / b;
            u8::from(u * u + v * v <= 1.0)
        });
        let image = Plane::from_fn(f, f, |r, c| {
            let (dr, dc) = ((r as f64 - mid) / (0.46 * f as f64), (c as f64 - mid) / (0.40 * f as f64));
            let body = if dr * dr + dc * dc <= 1.0 { cfg.body_intensity } else { 0.0 };
            let ramp = cfg.gradient * c as f64 / (f - 1) as f64;
            let gland = cfg.gland_contrast * f64::from(mask.get(r, c));
            let noise = if cfg.noise > 0.0 {
                rng.gen_range(-cfg.noise..cfg.noise)
            } else {
                0.0
            };
            (100.0 + body + ramp + gland + noise).round().clamp(0.0, 65535.0) as f32
        });
        pairs.push(SlicePair::new(image, mask, id.clone(), z)?);
    }
    Ok(PatientVolume {
        id,
        slice_thickness: cfg.slice_thickness.clone(),
        pairs,
    })
}

/// Builds the phantom volumes in memory.
pub fn phantom_dataset(cfg: &PhantomConfig) -> Result<Dataset> {
    cfg.validate()?;
    let patients = (0..cfg.patients).map(|i| patient(cfg, i)).collect::<Result<_>>()?;
    Ok(Dataset { patients })
}

/// Writes the phantom dataset, its manifest and the resolved config to
/// `dir`.
pub fn gen_phantom(cfg: &PhantomConfig, dir: &Path) -> Result<DatasetManifest> {
    let dataset = phantom_dataset(cfg)?;
    let manifest = write_dataset(dir, &dataset)?;
    write_json(&dir.join("phantom.json"), cfg)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_peaks_mid_stack() {
        let n = 17;
        let v: Vec<f64> = (0..n).map(|z| area_profile(z, n)).collect();
        assert!(v[n / 2] > v[0] && v[n / 2] > v[n - 1]);
        assert!(v.iter().all(|&x| x > 0.35 && x <= 1.0));
    }

    #[test]
    fn empty_ranges_are_rejected() {
        let cfg = PhantomConfig {
            slices: [10, 9],
            ..PhantomConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PhantomConfig {
            drift: [3.0, -3.0],
            ..PhantomConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("drift"));
    }
}
