//! In-memory samples and the on-disk dataset layout:
//! `<root>/manifest.json`, `<root>/images/<id>.png`, `<root>/labels/<id>.png`.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{decode_mask, encode_mask, is_valid_label, DomainTag, SchemaError, TimeOfDay, WeatherCondition};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no manifest.json under {0}")]
    MissingManifest(PathBuf),
    #[error("missing file for sample {0:?}")]
    MissingFile(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("sample {id:?}: {source}")]
    Label {
        id: String,
        #[source]
        source: SchemaError,
    },
    #[error("sample {id:?}: image is {image:?} but mask is {mask:?}")]
    ShapeMismatch { id: String, image: (usize, usize), mask: (usize, usize) },
    #[error("unsupported manifest schema_version {0}")]
    SchemaVersion(u32),
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Png {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl DatasetError {
    fn io(path: &Path, source: io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }
}

/// Row-major `H×W×3` image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image { height, width, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Alpha-blends `rgb` over the pixel: `(1 - alpha) * old + alpha * rgb`.
    pub fn blend_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3], alpha: f32) {
        let i = (row * self.width + col) * 3;
        for (c, v) in rgb.iter().enumerate() {
            self.data[i + c] = (1.0 - alpha) * self.data[i + c] + alpha * v;
        }
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Snaps every value onto the 8-bit grid so that a PNG round trip is exact.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize_channel(*v) as f32 / 255.0;
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_channel(v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Image { height, width, data: bytes.iter().map(|&b| b as f32 / 255.0).collect() }
    }

    /// Per-pixel Rec. 601 luma.
    pub fn luma(&self) -> Vec<f32> {
        self.data.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    pub fn mean_luma(&self) -> f64 {
        let l = self.luma();
        l.iter().map(|&v| v as f64).sum::<f64>() / l.len().max(1) as f64
    }
}

fn quantize_channel(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major `H×W` class-index mask (values `0..=9` or 255).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Mask { height, width, data: vec![value; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub weather: WeatherCondition,
    pub time: TimeOfDay,
    pub domain: DomainTag,
}

impl LabeledSample {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let image = (self.image.height, self.image.width);
        let mask = (self.mask.height, self.mask.width);
        if image != mask || self.mask.data.len() != mask.0 * mask.1 {
            return Err(DatasetError::ShapeMismatch { id: self.id.clone(), image, mask });
        }
        if let Some((pixel, &value)) = self.mask.data.iter().enumerate().find(|(_, v)| !is_valid_label(**v)) {
            return Err(DatasetError::Label {
                id: self.id.clone(),
                source: SchemaError::InvalidIndex { pixel, value },
            });
        }
        Ok(())
    }

    pub fn is_standard(&self) -> bool {
        self.weather == WeatherCondition::Normal && self.time == TimeOfDay::Day
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub weather: WeatherCondition,
    pub time: TimeOfDay,
    pub domain: DomainTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub samples: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(DatasetError::MissingManifest(root.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|source| DatasetError::Manifest { path: path.clone(), source })?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersion(manifest.schema_version));
        }
        let mut seen = HashSet::new();
        for record in &manifest.samples {
            if !seen.insert(record.id.as_str()) {
                return Err(DatasetError::DuplicateId(record.id.clone()));
            }
        }
        Ok(manifest)
    }
}

fn read_png(path: &Path, id: &str) -> Result<(usize, usize, Vec<u8>), DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(id.to_string()));
    }
    let img = image::open(path).map_err(|source| DatasetError::Png { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

pub fn write_png(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<(), DatasetError> {
    image::save_buffer(path, rgb, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|source| DatasetError::Png { path: path.to_path_buf(), source })
}

pub fn load_record(root: &Path, record: &ManifestRecord) -> Result<LabeledSample, DatasetError> {
    let (h, w, pixels) = read_png(&root.join(&record.image), &record.id)?;
    let (mh, mw, colors) = read_png(&root.join(&record.mask), &record.id)?;
    if (h, w) != (mh, mw) {
        return Err(DatasetError::ShapeMismatch { id: record.id.clone(), image: (h, w), mask: (mh, mw) });
    }
    let mask = decode_mask(&colors, mh, mw).map_err(|source| DatasetError::Label { id: record.id.clone(), source })?;
    Ok(LabeledSample {
        id: record.id.clone(),
        image: Image::from_rgb8(h, w, &pixels),
        mask: Mask { height: mh, width: mw, data: mask },
        weather: record.weather,
        time: record.time,
        domain: record.domain,
    })
}

/// Loads every sample listed in `<root>/manifest.json`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<LabeledSample>, DatasetError> {
    let manifest = DatasetManifest::read(root)?;
    let mut samples = manifest.samples.iter().map(|record| load_record(root, record)).collect::<Result<Vec<_>, _>>()?;
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

pub fn record_for(sample: &LabeledSample) -> ManifestRecord {
    ManifestRecord {
        id: sample.id.clone(),
        image: format!("images/{}.png", sample.id),
        mask: format!("labels/{}.png", sample.id),
        weather: sample.weather,
        time: sample.time,
        domain: sample.domain,
    }
}

/// Writes the image and color-encoded mask of one sample under `root`.
pub fn write_sample_files(root: &Path, sample: &LabeledSample) -> Result<ManifestRecord, DatasetError> {
    sample.validate()?;
    let record = record_for(sample);
    let colors =
        encode_mask(&sample.mask.data).map_err(|source| DatasetError::Label { id: sample.id.clone(), source })?;
    let (h, w) = (sample.image.height, sample.image.width);
    write_png(&root.join(&record.image), h, w, &sample.image.to_rgb8())?;
    write_png(&root.join(&record.mask), h, w, &colors)?;
    Ok(record)
}

pub fn create_layout(root: &Path) -> Result<(), DatasetError> {
    for dir in [root.to_path_buf(), root.join("images"), root.join("labels")] {
        fs::create_dir_all(&dir).map_err(|e| DatasetError::io(&dir, e))?;
    }
    Ok(())
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| DatasetError::io(&path, e))
}

/// Writes PNG images, color-encoded PNG masks and `manifest.json`.
pub fn save_dataset(samples: &[LabeledSample], root: &Path) -> Result<DatasetManifest, DatasetError> {
    create_layout(root)?;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(samples.len());
    for sample in samples {
        if !seen.insert(sample.id.as_str()) {
            return Err(DatasetError::DuplicateId(sample.id.clone()));
        }
        records.push(write_sample_files(root, sample)?);
    }
    let manifest = DatasetManifest { schema_version: SCHEMA_VERSION, samples: records };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}
