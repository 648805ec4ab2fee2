//! On-disk slice datasets: binary PGM files plus a JSON manifest.
//!
//! Images are `P5` with maxval 65535, two bytes per pixel, most significant
//! byte first. Masks are `P5` with maxval 255 and pixel values exactly 0 or
//! 255; they load as {0, 1}.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::{Image, Mask, Plane};
use crate::preprocess::SlicePair;

pub const IMAGE_MAXVAL: u32 = 65535;
pub const MASK_MAXVAL: u32 = 255;
pub const MANIFEST_VERSION: u32 = 1;

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("missing P5 magic".into());
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        // Whitespace and comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| format!("header value {text} out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("maxval must be followed by one whitespace byte".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format!("zero dimension {width}×{height}"));
    }
    let maxval = u32::try_from(maxval).map_err(|_| format!("maxval {maxval} out of range"))?;
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        data_start: pos + 1,
    })
}

fn header_bytes(width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

fn raster<'a>(bytes: &'a [u8], h: &Header, bytes_per_pixel: usize) -> std::result::Result<&'a [u8], String> {
    let need = h.width * h.height * bytes_per_pixel;
    let body = &bytes[h.data_start..];
    match body.len().cmp(&need) {
        std::cmp::Ordering::Less => Err(format!("raster has {} bytes, expected {need}", body.len())),
        std::cmp::Ordering::Greater => Err(format!("{} trailing bytes after raster", body.len() - need)),
        std::cmp::Ordering::Equal => Ok(body),
    }
}

pub fn encode_image(image: &Image) -> Result<Vec<u8>> {
    let mut out = header_bytes(image.width, image.height, IMAGE_MAXVAL);
    out.reserve(2 * image.len());
    for &v in &image.data {
        if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!("pixel {v} is not a 16-bit integer")));
        }
        out.extend_from_slice(&(v as u16).to_be_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let fail = |d: String| Error::format(path, d);
    let h = parse_header(bytes).map_err(fail)?;
    if h.maxval != IMAGE_MAXVAL {
        return Err(fail(format!("image maxval {} (expected {IMAGE_MAXVAL})", h.maxval)));
    }
    let body = raster(bytes, &h, 2).map_err(fail)?;
    let data = body
        .chunks_exact(2)
        .map(|b| f32::from(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    Plane::new(h.height, h.width, data)
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    if !mask.is_binary() {
        return Err(Error::InvalidArgument("mask is not binary".into()));
    }
    let mut out = header_bytes(mask.width, mask.height, MASK_MAXVAL);
    out.extend(mask.data.iter().map(|&v| v * 255));
    Ok(out)
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<Mask> {
    let fail = |d: String| Error::format(path, d);
    let h = parse_header(bytes).map_err(fail)?;
    if h.maxval != MASK_MAXVAL {
        return Err(fail(format!("mask maxval {} (expected {MASK_MAXVAL})", h.maxval)));
    }
    let body = raster(bytes, &h, 1).map_err(fail)?;
    let mut data = Vec::with_capacity(body.len());
    for (i, &v) in body.iter().enumerate() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(fail(format!(
                    "mask pixel ({}, {}) has value {other}",
                    i / h.width,
                    i % h.width
                )))
            }
        }
    }
    Plane::new(h.height, h.width, data)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_bytes(path, &encode_image(image)?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&read_input(path)?, path)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_bytes(path, &encode_mask(mask)?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read_input(path)?, path)
}

/// Serializes to pretty JSON with a trailing newline and writes it.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_input(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEntry {
    pub id: String,
    pub slice_thickness: String,
    /// Axial position of each slice, strictly increasing.
    pub slice_indices: Vec<usize>,
    /// Image files relative to the dataset root, in slice order.
    pub slices: Vec<String>,
    pub masks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Dataset root relative to the manifest's directory.
    pub root: String,
    pub patients: Vec<PatientEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.format_version != MANIFEST_VERSION {
            return Err(format!("unsupported format_version {}", self.format_version));
        }
        let mut seen = BTreeMap::new();
        for p in &self.patients {
            if seen.insert(p.id.as_str(), ()).is_some() {
                return Err(format!("duplicate patient id {:?}", p.id));
            }
            let n = p.slice_indices.len();
            if p.slices.len() != n || p.masks.len() != n {
                return Err(format!(
                    "patient {}: {n} indices, {} slices, {} masks",
                    p.id,
                    p.slices.len(),
                    p.masks.len()
                ));
            }
            if p.slice_indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("patient {}: slice order is not strictly increasing", p.id));
            }
        }
        Ok(())
    }
}

/// One patient's slices in axial order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientVolume {
    pub id: String,
    pub slice_thickness: String,
    pub pairs: Vec<SlicePair>,
}

impl PatientVolume {
    pub fn masks(&self) -> Vec<Mask> {
        self.pairs.iter().map(|p| p.mask.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub patients: Vec<PatientVolume>,
}

impl Dataset {
    pub fn patient_ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.id.clone()).collect()
    }

    pub fn patient(&self, id: &str) -> Option<&PatientVolume> {
        self.patients.iter().find(|p| p.id == id)
    }

    /// All slices of the named patients, in the given patient order.
    pub fn slices_of(&self, ids: &[String]) -> Result<Vec<SlicePair>> {
        let mut out = Vec::new();
        for id in ids {
            let p = self
                .patient(id)
                .ok_or_else(|| Error::InvalidArgument(format!("dataset has no patient {id:?}")))?;
            out.extend(p.pairs.iter().cloned());
        }
        Ok(out)
    }

    pub fn all_slices(&self) -> Vec<SlicePair> {
        self.patients.iter().flat_map(|p| p.pairs.iter().cloned()).collect()
    }

    /// Regroups slices by patient, keeping first-seen patient order.
    pub fn from_slices(slices: Vec<SlicePair>, slice_thickness: &str) -> Self {
        let mut patients: Vec<PatientVolume> = Vec::new();
        for s in slices {
            match patients.iter_mut().find(|p| p.id == s.patient) {
                Some(p) => p.pairs.push(s),
                None => patients.push(PatientVolume {
                    id: s.patient.clone(),
                    slice_thickness: slice_thickness.to_string(),
                    pairs: vec![s],
                }),
            }
        }
        Self { patients }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every slice under `dir/<patient>/` and the manifest at
/// `dir/manifest.json`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        root: ".".into(),
        patients: Vec::with_capacity(dataset.patients.len()),
    };
    for p in &dataset.patients {
        let mut entry = PatientEntry {
            id: p.id.clone(),
            slice_thickness: p.slice_thickness.clone(),
            slice_indices: Vec::new(),
            slices: Vec::new(),
            masks: Vec::new(),
        };
        for s in &p.pairs {
            let image = format!("{}/image_{:03}.pgm", p.id, s.slice);
            let mask = format!("{}/mask_{:03}.pgm", p.id, s.slice);
            write_image(&dir.join(&image), &s.image)?;
            write_mask(&dir.join(&mask), &s.mask)?;
            entry.slice_indices.push(s.slice);
            entry.slices.push(image);
            entry.masks.push(mask);
        }
        manifest.patients.push(entry);
    }
    manifest
        .validate()
        .map_err(|d| Error::InvalidArgument(format!("dataset cannot be written: {d}")))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a manifest and every slice it lists.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    manifest.validate().map_err(|d| Error::format(manifest_path, d))?;
    let root: PathBuf = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.root);
    let mut patients = Vec::with_capacity(manifest.patients.len());
    for entry in &manifest.patients {
        let mut pairs = Vec::with_capacity(entry.slices.len());
        for ((&slice, image), mask) in entry.slice_indices.iter().zip(&entry.slices).zip(&entry.masks) {
            let (ip, mp) = (root.join(image), root.join(mask));
            let image = read_image(&ip)?;
            let mask = read_mask(&mp)?;
            if image.dims() != mask.dims() {
                return Err(Error::format(
                    &mp,
                    format!("mask {:?} does not match image {:?}", mask.dims(), image.dims()),
                ));
            }
            pairs.push(SlicePair::new(image, mask, entry.id.clone(), slice)?);
        }
        patients.push(PatientVolume {
            id: entry.id.clone(),
            slice_thickness: entry.slice_thickness.clone(),
            pairs,
        });
    }
    Ok(Dataset { patients })
}
