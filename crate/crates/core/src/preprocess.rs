//! Slice normalization, geometric augmentation and resampling.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::plane::{Image, Mask, Plane};

/// Rotation angles available to augmentation, in degrees.
pub const ROTATION_DEGREES: [i32; 6] = [-20, -10, -5, 5, 10, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn opposite(self) -> Self {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transform {
    Rotate { degrees: i32 },
    Shift { direction: Direction, fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Original,
    Augmented(Transform),
}

/// One image slice with its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicePair {
    pub image: Image,
    pub mask: Mask,
    pub patient: String,
    pub slice: usize,
    #[serde(default)]
    pub provenance: Provenance,
}

impl SlicePair {
    pub fn new(image: Image, mask: Mask, patient: impl Into<String>, slice: usize) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::InvalidArgument(format!(
                "image {:?} and mask {:?} differ in shape",
                image.dims(),
                mask.dims()
            )));
        }
        if !mask.is_binary() {
            return Err(Error::InvalidArgument("mask is not binary".into()));
        }
        Ok(Self {
            image,
            mask,
            patient: patient.into(),
            slice,
            provenance: Provenance::Original,
        })
    }
}

/// Maps the slice linearly onto [0, 1]. A constant slice maps to zeros.
pub fn minmax_normalize(image: &Image) -> Image {
    let (lo, hi) = image
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return image.map(|_| 0.0);
    }
    let range = hi - lo;
    image.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Where the point at offset `(dr, dc)` from the center lands after a
/// rotation by `degrees`.
pub fn rotate_offset(dr: f64, dc: f64, degrees: f64) -> (f64, f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    (c * dr - s * dc, s * dr + c * dc)
}

/// Rotates about the image center by one of [`ROTATION_DEGREES`]: bilinear
/// for the image, nearest neighbour for the mask, zero outside the frame.
pub fn rotate_fixed(pair: &SlicePair, degrees: i32) -> Result<SlicePair> {
    if !ROTATION_DEGREES.contains(&degrees) {
        return Err(Error::InvalidArgument(format!(
            "rotation by {degrees}° is not one of {ROTATION_DEGREES:?}"
        )));
    }
    let (h, w) = pair.image.dims();
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = degrees as f64;
    // Inverse map: where each output pixel comes from.
    let source = |r: usize, c: usize| {
        let (sr, sc) = rotate_offset(r as f64 - cr, c as f64 - cc, -theta);
        (sr + cr, sc + cc)
    };
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w;
    let image = Plane::from_fn(h, w, |r, c| {
        let (sr, sc) = source(r, c);
        let (r0, c0) = (sr.floor(), sc.floor());
        let (fr, fc) = (sr - r0, sc - c0);
        let (r0, c0) = (r0 as isize, c0 as isize);
        let px = |r: isize, c: isize| {
            if inside(r, c) {
                pair.image.get(r as usize, c as usize) as f64
            } else {
                0.0
            }
        };
        let v = (1.0 - fr) * ((1.0 - fc) * px(r0, c0) + fc * px(r0, c0 + 1))
            + fr * ((1.0 - fc) * px(r0 + 1, c0) + fc * px(r0 + 1, c0 + 1));
        v as f32
    });
    let mask = Plane::from_fn(h, w, |r, c| {
        let (sr, sc) = source(r, c);
        let (r, c) = (sr.round() as isize, sc.round() as isize);
        if inside(r, c) {
            pair.mask.get(r as usize, c as usize)
        } else {
            0
        }
    });
    Ok(SlicePair {
        image,
        mask,
        provenance: Provenance::Augmented(Transform::Rotate { degrees }),
        ..pair.clone()
    })
}

/// Translates a plane by `pixels` in `direction`, filling vacated pixels
/// with the default value.
pub fn shift_plane<T: Copy + Default>(p: &Plane<T>, direction: Direction, pixels: usize) -> Plane<T> {
    let (dr, dc): (isize, isize) = match direction {
        Direction::Up => (-(pixels as isize), 0),
        Direction::Down => (pixels as isize, 0),
        Direction::Left => (0, -(pixels as isize)),
        Direction::Right => (0, pixels as isize),
    };
    Plane::from_fn(p.height, p.width, |r, c| {
        let (sr, sc) = (r as isize - dr, c as isize - dc);
        if sr >= 0 && sc >= 0 && (sr as usize) < p.height && (sc as usize) < p.width {
            p.get(sr as usize, sc as usize)
        } else {
            T::default()
        }
    })
}

/// Shifts image and mask by `round(fraction · dimension)` pixels, where the
/// dimension is the height for vertical and the width for horizontal moves.
pub fn shift(pair: &SlicePair, direction: Direction, fraction: f64) -> Result<SlicePair> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("shift fraction {fraction} outside (0, 1)")));
    }
    let dim = match direction {
        Direction::Up | Direction::Down => pair.image.height,
        Direction::Left | Direction::Right => pair.image.width,
    };
    let pixels = (fraction * dim as f64).round() as usize;
    Ok(SlicePair {
        image: shift_plane(&pair.image, direction, pixels),
        mask: shift_plane(&pair.mask, direction, pixels),
        provenance: Provenance::Augmented(Transform::Shift { direction, fraction }),
        ..pair.clone()
    })
}

pub fn apply_transform(pair: &SlicePair, t: Transform) -> Result<SlicePair> {
    match t {
        Transform::Rotate { degrees } => rotate_fixed(pair, degrees),
        Transform::Shift { direction, fraction } => shift(pair, direction, fraction),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Fraction of originals that receive one augmented copy.
    pub copy_fraction: f64,
    pub shift_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            // 330 originals grow to 630 pairs.
            copy_fraction: 10.0 / 11.0,
            shift_fraction: 0.1,
        }
    }
}

/// Per-item 256-bit digest of `(seed, patient, slice)`.
fn item_digest(seed: u64, patient: &str, slice: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((patient.len() as u64).to_le_bytes());
    h.update(patient.as_bytes());
    h.update((slice as u64).to_le_bytes());
    h.finalize().into()
}

/// Keeps every original and appends one randomly transformed copy for
/// `round(copy_fraction · n)` of them.
///
/// Which items are copied, and with which transform, depends only on the
/// seed and each item's `(patient, slice)`, so the resulting set does not
/// depend on input order. Each original is followed by its copy, if any.
pub fn augment_dataset(pairs: &[SlicePair], seed: u64, cfg: &AugmentConfig) -> Result<Vec<SlicePair>> {
    if !(0.0..=1.0).contains(&cfg.copy_fraction) {
        return Err(Error::Config(format!("copy_fraction {} outside [0, 1]", cfg.copy_fraction)));
    }
    let digests: Vec<[u8; 32]> = pairs.iter().map(|p| item_digest(seed, &p.patient, p.slice)).collect();
    let quota = (cfg.copy_fraction * pairs.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        digests[a]
            .cmp(&digests[b])
            .then_with(|| (&pairs[a].patient, pairs[a].slice).cmp(&(&pairs[b].patient, pairs[b].slice)))
    });
    let mut chosen = vec![false; pairs.len()];
    for &i in order.iter().take(quota) {
        chosen[i] = true;
    }

    let mut out = Vec::with_capacity(pairs.len() + quota);
    for (i, pair) in pairs.iter().enumerate() {
        out.push(pair.clone());
        if chosen[i] {
            let pick = u64::from_le_bytes(digests[i][8..16].try_into().expect("8 bytes")) % 10;
            let t = match pick as usize {
                k @ 0..=5 => Transform::Rotate {
                    degrees: ROTATION_DEGREES[k],
                },
                k => Transform::Shift {
                    direction: Direction::ALL[k - 6],
                    fraction: cfg.shift_fraction,
                },
            };
            out.push(apply_transform(pair, t)?);
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize with `src = floor(dst · src_size / dst_size)`.
pub fn resample_nn<T: Copy + Default>(p: &Plane<T>, target_h: usize, target_w: usize) -> Result<Plane<T>> {
    if target_h == 0 || target_w == 0 || p.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cannot resample {}×{} to {target_h}×{target_w}",
            p.height, p.width
        )));
    }
    let rows: Vec<usize> = (0..target_h).map(|r| r * p.height / target_h).collect();
    let cols: Vec<usize> = (0..target_w).map(|c| c * p.width / target_w).collect();
    Ok(Plane::from_fn(target_h, target_w, |r, c| p.get(rows[r], cols[c])))
}

/// Offset of a centered `size` window along an axis of length `dim`.
pub fn center_offset(dim: usize, size: usize) -> usize {
    (dim - size) / 2
}

pub fn center_crop<T: Copy + Default>(p: &Plane<T>, size: usize) -> Result<Plane<T>> {
    if size == 0 || size > p.height || size > p.width {
        return Err(Error::InvalidArgument(format!(
            "center crop {size} does not fit {}×{}",
            p.height, p.width
        )));
    }
    p.crop(center_offset(p.height, size), center_offset(p.width, size), size, size)
}
