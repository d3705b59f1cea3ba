//! B-scan records, the on-disk corpus format (8-bit PNG images and masks plus
//! `manifest.json`), Duke ingestion and the synthetic layered-speckle generator.

mod duke;
mod preprocess;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::GrayImage;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::tensor::FeatureMap;
use crate::{Error, Result, CLASS_NAMES, NUM_CLASSES};

pub use duke::{boundary_to_mask, ingest_duke, read_subject, DUKE_PATIENTS};
pub use preprocess::{preprocess, resize_mask_nearest, DEFAULT_SIZE};
pub use synthetic::{generate_synthetic, synthesize_record, SyntheticParams};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One annotated B-scan at native resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct BScanRecord {
    pub patient_id: u32,
    pub scan_index: usize,
    pub image: Array2<u8>,
    /// Class indices 0..=8.
    pub mask: Array2<u8>,
    pub expert_id: u8,
}

impl BScanRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != self.mask.dim() {
            return Err(Error::Dimension(format!(
                "image {:?} and mask {:?} differ in shape",
                self.image.dim(),
                self.mask.dim()
            )));
        }
        if let Some(&bad) = self.mask.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidInput(format!(
                "mask of patient {} scan {} contains label {bad}",
                self.patient_id, self.scan_index
            )));
        }
        Ok(())
    }

    fn stem(&self) -> String {
        format!("p{:02}_s{:03}", self.patient_id, self.scan_index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Duke,
    Synthetic,
}

/// The fixed 6/2/2 patient split: 1–6 train, 7–8 val, 9–10 test.
pub fn split_for_patient(patient_id: u32) -> Result<Split> {
    match patient_id {
        1..=6 => Ok(Split::Train),
        7 | 8 => Ok(Split::Val),
        9 | 10 => Ok(Split::Test),
        other => Err(Error::InvalidInput(format!("patient id {other} outside 1..=10"))),
    }
}

pub fn standard_split() -> BTreeMap<u32, Split> {
    (1..=10)
        .map(|p| (p, split_for_patient(p).expect("1..=10 is in range")))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub patient_id: u32,
    pub scan_index: usize,
    pub expert_id: u8,
    pub height: usize,
    pub width: usize,
    /// Paths relative to the corpus directory.
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub provenance: Provenance,
    pub seed: Option<u64>,
    pub class_names: Vec<String>,
    pub split: BTreeMap<u32, Split>,
    pub records: Vec<RecordEntry>,
}

impl DatasetManifest {
    pub fn new(provenance: Provenance, seed: Option<u64>) -> Self {
        let mut class_names = vec!["background".to_string()];
        class_names.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
        Self {
            provenance,
            seed,
            class_names,
            split: standard_split(),
            records: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn split_of(&self, patient_id: u32) -> Option<Split> {
        self.split.get(&patient_id).copied()
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &RecordEntry> {
        self.records
            .iter()
            .filter(move |r| self.split_of(r.patient_id) == Some(split))
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries(split).count()
    }

    pub fn patients(&self) -> Vec<u32> {
        let mut p: Vec<u32> = self.records.iter().map(|r| r.patient_id).collect();
        p.sort_unstable();
        p.dedup();
        p
    }
}

/// Writes a record's image and mask PNGs under `dir` and returns its entry.
pub fn write_record(dir: &Path, record: &BScanRecord) -> Result<RecordEntry> {
    record.validate()?;
    let stem = record.stem();
    let image = format!("images/{stem}.png");
    let mask = format!("masks/{stem}.png");
    save_gray(&dir.join(&image), &record.image)?;
    save_gray(&dir.join(&mask), &record.mask)?;
    let (height, width) = record.image.dim();
    Ok(RecordEntry {
        patient_id: record.patient_id,
        scan_index: record.scan_index,
        expert_id: record.expert_id,
        height,
        width,
        image,
        mask,
    })
}

pub fn load_record(dir: &Path, entry: &RecordEntry) -> Result<BScanRecord> {
    let record = BScanRecord {
        patient_id: entry.patient_id,
        scan_index: entry.scan_index,
        image: load_gray(&dir.join(&entry.image))?,
        mask: load_gray(&dir.join(&entry.mask))?,
        expert_id: entry.expert_id,
    };
    if record.image.dim() != (entry.height, entry.width) {
        return Err(Error::Format {
            path: dir.join(&entry.image),
            reason: format!(
                "expected {}x{}, found {:?}",
                entry.height,
                entry.width,
                record.image.dim()
            ),
        });
    }
    record.validate()?;
    Ok(record)
}

pub fn save_gray(path: &Path, data: &Array2<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h, w) = data.dim();
    let img = GrayImage::from_raw(w as u32, h as u32, data.iter().copied().collect())
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    if !matches!(img.color(), image::ColorType::L8) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit grayscale, found {:?}", img.color()),
        });
    }
    let img = img.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .expect("buffer length matches dimensions"))
}

/// Preprocessed images `[N, 1, S, S]` and masks `[N, S, S]`.
#[derive(Clone, Debug)]
pub struct TensorSet {
    pub images: FeatureMap,
    pub masks: Array3<u8>,
}

impl TensorSet {
    pub fn len(&self) -> usize {
        self.masks.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_records(records: &[BScanRecord], size: usize) -> Result<Self> {
        let mut images = FeatureMap::zeros((records.len(), 1, size, size));
        let mut masks = Array3::zeros((records.len(), size, size));
        for (i, r) in records.iter().enumerate() {
            let (img, mask) = preprocess(r, size)?;
            images.slice_mut(s![i, 0, .., ..]).assign(&img);
            masks.slice_mut(s![i, .., ..]).assign(&mask);
        }
        Ok(Self { images, masks })
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(ndarray::Axis(0), indices),
            masks: self.masks.select(ndarray::Axis(0), indices),
        }
    }
}

/// A corpus directory together with its manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Corpus {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let manifest = DatasetManifest::load(&dir)?;
        Ok(Self { dir, manifest })
    }

    pub fn records(&self, split: Split) -> Result<Vec<BScanRecord>> {
        self.manifest
            .entries(split)
            .map(|e| load_record(&self.dir, e))
            .collect()
    }

    pub fn tensors(&self, split: Split, size: usize) -> Result<TensorSet> {
        TensorSet::from_records(&self.records(split)?, size)
    }
}
