//! Bounding-box cropping guided by a coarse region prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::{Image, Mask, Plane};
use crate::preprocess::{resample_nn, SlicePair};

/// Default probability threshold for predicted regions.
pub const REGION_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Original,
    #[default]
    CenterCropped,
}

/// Axis-aligned rectangle with inclusive bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
    #[serde(default)]
    pub frame: Frame,
}

impl BBox {
    pub fn new(row_min: usize, row_max: usize, col_min: usize, col_max: usize) -> Result<Self> {
        if row_min > row_max || col_min > col_max {
            return Err(Error::InvalidBBox(format!(
                "({row_min},{row_max},{col_min},{col_max}) has min > max"
            )));
        }
        Ok(Self {
            row_min,
            row_max,
            col_min,
            col_max,
            frame: Frame::default(),
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row_min: 0,
            row_max: height - 1,
            col_min: 0,
            col_max: width - 1,
            frame: Frame::default(),
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..=self.row_max).contains(&r) && (self.col_min..=self.col_max).contains(&c)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row_min <= self.row_max && self.col_min <= self.col_max && self.row_max < height && self.col_max < width
    }

    /// Grows every side by `margin`, clamped to a `height`×`width` frame.
    pub fn expand(&self, margin: usize, height: usize, width: usize) -> Self {
        Self {
            row_min: self.row_min.saturating_sub(margin),
            row_max: (self.row_max + margin).min(height - 1),
            col_min: self.col_min.saturating_sub(margin),
            col_max: (self.col_max + margin).min(width - 1),
            frame: self.frame,
        }
    }

    /// The filled rectangle as a mask.
    pub fn to_mask(&self, height: usize, width: usize) -> Mask {
        Plane::from_fn(height, width, |r, c| u8::from(self.contains(r, c)))
    }

    fn of_points(mut points: impl Iterator<Item = (usize, usize)>) -> Option<Self> {
        let (r, c) = points.next()?;
        let mut b = Self {
            row_min: r,
            row_max: r,
            col_min: c,
            col_max: c,
            frame: Frame::default(),
        };
        for (r, c) in points {
            b.row_min = b.row_min.min(r);
            b.row_max = b.row_max.max(r);
            b.col_min = b.col_min.min(c);
            b.col_max = b.col_max.max(c);
        }
        Some(b)
    }
}

fn points_where<'a, T: Copy + Default>(
    p: &'a Plane<T>,
    keep: impl Fn(T) -> bool + 'a,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    let w = p.width;
    p.data
        .iter()
        .enumerate()
        .filter(move |(_, &v)| keep(v))
        .map(move |(i, _)| (i / w, i % w))
}

/// Tight box around the foreground of `mask`.
pub fn tight_bbox(mask: &Mask) -> Result<BBox> {
    BBox::of_points(points_where(mask, |v| v != 0)).ok_or(Error::EmptyMask)
}

/// Tight box of `mask` grown by `margin` per side and clamped to the frame,
/// together with the filled box as a mask.
pub fn expand_mask_to_box(mask: &Mask, margin: usize) -> Result<(BBox, Mask)> {
    let b = tight_bbox(mask)?.expand(margin, mask.height, mask.width);
    Ok((b, b.to_mask(mask.height, mask.width)))
}

/// Box spanning every pixel with probability ≥ `threshold`.
pub fn amorphous_to_bbox(prob: &Image, threshold: f32) -> Result<BBox> {
    BBox::of_points(points_where(prob, |v| v >= threshold)).ok_or(Error::EmptyPrediction)
}

pub struct BoxTargets {
    pub pairs: Vec<SlicePair>,
    /// Slices without foreground, which cannot define a box.
    pub skipped: usize,
}

/// Replaces each label with its expanded box, the training target of the
/// coarse region network. Images pass through unchanged.
pub fn make_boxmask_targets(pairs: &[SlicePair], margin: usize) -> BoxTargets {
    let mut out = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for p in pairs {
        match expand_mask_to_box(&p.mask, margin) {
            Ok((_, mask)) => out.push(SlicePair { mask, ..p.clone() }),
            Err(_) => skipped += 1,
        }
    }
    BoxTargets { pairs: out, skipped }
}

/// How a cropped slice relates to the frame it was cut from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub bbox: BBox,
    pub source_height: usize,
    pub source_width: usize,
    pub target: usize,
    /// Source pixels per target pixel, rows then columns.
    pub scale: (f64, f64),
    pub patient: String,
    pub slice: usize,
    /// The box came from the full-frame fallback.
    #[serde(default)]
    pub fallback: bool,
}

impl CropRecord {
    /// Continuous source coordinate of target pixel `(r, c)`.
    pub fn inverse_point(&self, r: usize, c: usize) -> (f64, f64) {
        (
            self.bbox.row_min as f64 + r as f64 * self.scale.0,
            self.bbox.col_min as f64 + c as f64 * self.scale.1,
        )
    }

    /// Source pixel sampled for target pixel `(r, c)`.
    pub fn inverse_pixel(&self, r: usize, c: usize) -> (usize, usize) {
        (
            self.bbox.row_min + r * self.bbox.height() / self.target,
            self.bbox.col_min + c * self.bbox.width() / self.target,
        )
    }
}

/// Crops the box (inclusive) and resizes it to `target`×`target` by nearest
/// neighbour.
pub fn crop_and_upsample<T: Copy + Default>(p: &Plane<T>, bbox: &BBox, target: usize) -> Result<Plane<T>> {
    if !bbox.fits(p.height, p.width) {
        return Err(Error::InvalidBBox(format!("{bbox:?} outside {}×{} frame", p.height, p.width)));
    }
    let cropped = p.crop(bbox.row_min, bbox.col_min, bbox.height(), bbox.width())?;
    resample_nn(&cropped, target, target)
}

/// Applies the same crop to image and mask and records the mapping.
pub fn crop_pair(pair: &SlicePair, bbox: &BBox, target: usize) -> Result<(SlicePair, CropRecord)> {
    let image = crop_and_upsample(&pair.image, bbox, target)?;
    let mask = crop_and_upsample(&pair.mask, bbox, target)?;
    let record = CropRecord {
        bbox: *bbox,
        source_height: pair.image.height,
        source_width: pair.image.width,
        target,
        scale: (
            bbox.height() as f64 / target as f64,
            bbox.width() as f64 / target as f64,
        ),
        patient: pair.patient.clone(),
        slice: pair.slice,
        fallback: false,
    };
    Ok((SlicePair { image, mask, ..pair.clone() }, record))
}

/// Maps a mask predicted in the cropped frame back to the source frame.
/// Each source pixel takes the first target pixel that sampled it, which
/// inverts the crop exactly when the box was upsampled. Pixels outside the
/// box are background.
pub fn paste_back(pred: &Mask, record: &CropRecord) -> Result<Mask> {
    let (b, t) = (record.bbox, record.target);
    if pred.dims() != (t, t) {
        return Err(Error::InvalidArgument(format!(
            "prediction {:?} does not match crop target {t}",
            pred.dims()
        )));
    }
    let first = |i: usize, n: usize| ((i * t).div_ceil(n)).min(t - 1);
    let mut out = Plane::filled(record.source_height, record.source_width, 0u8);
    for r in 0..b.height() {
        let tr = first(r, b.height());
        for c in 0..b.width() {
            out.set(b.row_min + r, b.col_min + c, pred.get(tr, first(c, b.width())));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub slices: usize,
    /// Slices whose full label lies inside the box (empty labels included).
    pub contained: usize,
    pub fallbacks: usize,
    pub containment_rate: f64,
}

pub struct SmartCropOutput {
    pub pairs: Vec<SlicePair>,
    pub records: Vec<CropRecord>,
    pub report: ContainmentReport,
}

/// Where crop boxes come from.
pub enum BoxSource<'a> {
    /// The whole frame, as in plain center cropping.
    Full,
    /// Label-derived boxes grown by a margin.
    Oracle { margin: usize },
    /// One probability map per slice, in the slice frame.
    Predicted { maps: &'a [Image], threshold: f32 },
}

/// Crops every slice to its box and upsamples to `target`. A slice without
/// a usable box falls back to the full frame.
pub fn run_smartcrop(slices: &[SlicePair], source: BoxSource<'_>, target: usize) -> Result<SmartCropOutput> {
    if let BoxSource::Predicted { maps, .. } = &source {
        if maps.len() != slices.len() {
            return Err(Error::InvalidArgument(format!(
                "{} probability maps for {} slices",
                maps.len(),
                slices.len()
            )));
        }
    }
    let mut out = SmartCropOutput {
        pairs: Vec::with_capacity(slices.len()),
        records: Vec::with_capacity(slices.len()),
        report: ContainmentReport::default(),
    };
    for (i, s) in slices.iter().enumerate() {
        let found = match &source {
            BoxSource::Full => Ok(BBox::full(s.image.height, s.image.width)),
            BoxSource::Oracle { margin } => expand_mask_to_box(&s.mask, *margin).map(|(b, _)| b),
            BoxSource::Predicted { maps, threshold } => {
                if maps[i].dims() != s.image.dims() {
                    return Err(Error::InvalidArgument(format!(
                        "probability map {:?} does not match slice {:?}",
                        maps[i].dims(),
                        s.image.dims()
                    )));
                }
                amorphous_to_bbox(&maps[i], *threshold)
            }
        };
        let (bbox, fallback) = match found {
            Ok(b) => (b, false),
            Err(Error::EmptyMask | Error::EmptyPrediction) => (BBox::full(s.image.height, s.image.width), true),
            Err(e) => return Err(e),
        };
        let (pair, mut record) = crop_pair(s, &bbox, target)?;
        record.fallback = fallback;
        out.report.slices += 1;
        out.report.fallbacks += usize::from(fallback);
        if points_where(&s.mask, |v| v != 0).all(|(r, c)| bbox.contains(r, c)) {
            out.report.contained += 1;
        }
        out.pairs.push(pair);
        out.records.push(record);
    }
    out.report.containment_rate = if out.report.slices == 0 {
        1.0
    } else {
        out.report.contained as f64 / out.report.slices as f64
    };
    Ok(out)
}
