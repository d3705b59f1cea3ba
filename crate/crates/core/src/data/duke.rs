//! Conversion of the Duke DME per-subject MATLAB containers.
//!
//! Each `Subject_NN.mat` holds `images` (H×W×N), `manualLayers1` (8×W×N
//! boundary rows, 1-based, NaN where unannotated) and `manualFluid1` (H×W×N,
//! nonzero inside fluid). Arrays are column-major.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use matfile::{MatFile, NumericData};
use ndarray::{Array2, ArrayView2};

use super::{write_record, BScanRecord, DatasetManifest, Provenance};
use crate::{Error, Result, FLUID_CLASS};

pub const DUKE_PATIENTS: u32 = 10;

const BOUNDARIES: usize = 8;

fn subject_path(dir: &Path, patient: u32) -> std::path::PathBuf {
    dir.join(format!("Subject_{patient:02}.mat"))
}

/// Rasterizes 8 boundary curves (0-based rows, NaN = undefined) into layer
/// labels: rows in `[b_k, b_{k+1})` get label `k` for k = 1..=7, rows outside
/// the outer boundaries are background, and any column with an undefined
/// boundary is background. Nonzero `fluid` pixels are then labeled fluid.
pub fn boundary_to_mask(
    boundaries: ArrayView2<'_, f64>,
    fluid: ArrayView2<'_, u8>,
    height: usize,
) -> Result<Array2<u8>> {
    let (nb, width) = boundaries.dim();
    if nb != BOUNDARIES {
        return Err(Error::Dimension(format!(
            "expected {BOUNDARIES} boundary curves, got {nb}"
        )));
    }
    if fluid.dim() != (height, width) {
        return Err(Error::Dimension(format!(
            "fluid mask {:?} does not match {height}x{width}",
            fluid.dim()
        )));
    }
    let mut mask = Array2::<u8>::zeros((height, width));
    let mut col = [0.0f64; BOUNDARIES];
    for j in 0..width {
        for (k, slot) in col.iter_mut().enumerate() {
            *slot = boundaries[[k, j]];
        }
        if col.iter().any(|v| !v.is_finite()) {
            continue;
        }
        if col.windows(2).any(|p| p[0] > p[1]) {
            log::warn!("column {j}: crossing boundaries {col:?} repaired by sorting");
            col.sort_by(f64::total_cmp);
        }
        for i in 0..height {
            let r = i as f64;
            if let Some(k) = (0..BOUNDARIES - 1).find(|&k| col[k] <= r && r < col[k + 1]) {
                mask[[i, j]] = (k + 1) as u8;
            }
        }
    }
    ndarray::Zip::from(&mut mask).and(fluid).for_each(|m, &f| {
        if f != 0 {
            *m = FLUID_CLASS;
        }
    });
    Ok(mask)
}

fn as_f64(data: &NumericData) -> Vec<f64> {
    match data {
        NumericData::Int8 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        NumericData::UInt8 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        NumericData::Int16 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        NumericData::UInt16 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        NumericData::Int32 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        NumericData::UInt32 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        NumericData::Int64 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        NumericData::UInt64 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        NumericData::Single { real, .. } => real.iter().map(|&v| v as f64).collect(),
        NumericData::Double { real, .. } => real.clone(),
    }
}

/// A column-major 3-D array as read from the container.
struct Volume {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Volume {
    fn read(mat: &MatFile, name: &str, path: &Path) -> Result<Self> {
        let array = mat.find_by_name(name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing array `{name}`"),
        })?;
        let size = array.size();
        let dims = match size.as_slice() {
            [a, b] => [*a, *b, 1],
            [a, b, c] => [*a, *b, *c],
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("array `{name}` has unsupported shape {other:?}"),
                })
            }
        };
        Ok(Self {
            dims,
            data: as_f64(array.data()),
        })
    }

    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    fn slice(&self, k: usize) -> Array2<f64> {
        Array2::from_shape_fn((self.dims[0], self.dims[1]), |(i, j)| self.at(i, j, k))
    }
}

/// Reads every B-scan of one subject that carries expert-1 layer annotations.
pub fn read_subject(path: &Path, patient_id: u32) -> Result<Vec<BScanRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mat = MatFile::parse(BufReader::new(file)).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("{e:?}"),
    })?;
    let images = Volume::read(&mat, "images", path)?;
    let layers = Volume::read(&mat, "manualLayers1", path)?;
    let fluid = Volume::read(&mat, "manualFluid1", path)?;

    let [h, w, n] = images.dims;
    let malformed = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if layers.dims != [BOUNDARIES, w, n] {
        return Err(malformed(format!(
            "manualLayers1 has shape {:?}, expected [{BOUNDARIES}, {w}, {n}]",
            layers.dims
        )));
    }
    if fluid.dims != [h, w, n] {
        return Err(malformed(format!(
            "manualFluid1 has shape {:?}, expected [{h}, {w}, {n}]",
            fluid.dims
        )));
    }

    let mut records = Vec::new();
    for k in 0..n {
        // MATLAB rows are 1-based.
        let bounds = layers.slice(k).mapv(|v| v - 1.0);
        let annotated = (0..w).any(|j| (0..BOUNDARIES).all(|b| bounds[[b, j]].is_finite()));
        if !annotated {
            continue;
        }
        let fluid_mask = fluid
            .slice(k)
            .mapv(|v| u8::from(v.is_finite() && v != 0.0));
        let mask = boundary_to_mask(bounds.view(), fluid_mask.view(), h)?;
        let image = images
            .slice(k)
            .mapv(|v| if v.is_finite() { v.round().clamp(0.0, 255.0) as u8 } else { 0 });
        records.push(BScanRecord {
            patient_id,
            scan_index: k,
            image,
            mask,
            expert_id: 1,
        });
    }
    if records.is_empty() {
        return Err(malformed("no B-scan carries expert-1 annotations".into()));
    }
    Ok(records)
}

/// Converts `Subject_01.mat` … `Subject_10.mat` in `raw_dir` into a PNG corpus.
pub fn ingest_duke(raw_dir: &Path, out_dir: &Path) -> Result<DatasetManifest> {
    let missing: Vec<u32> = (1..=DUKE_PATIENTS)
        .filter(|&p| !subject_path(raw_dir, p).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingSubjects {
            dir: raw_dir.to_path_buf(),
            patients: missing,
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::new(Provenance::Duke, None);
    for p in 1..=DUKE_PATIENTS {
        let records = read_subject(&subject_path(raw_dir, p), p)?;
        log::info!("subject {p:02}: {} annotated B-scans", records.len());
        for r in &records {
            manifest.records.push(write_record(out_dir, r)?);
        }
    }
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn evenly_spaced_boundaries_give_ten_row_bands() {
        let b = Array2::from_shape_fn((8, 1), |(k, _)| 10.0 * (k + 1) as f64);
        let mask = boundary_to_mask(b.view(), Array2::zeros((100, 1)).view(), 100).unwrap();
        for i in 0..100 {
            let expected = if (10..80).contains(&i) { (i / 10) as u8 } else { 0 };
            assert_eq!(mask[[i, 0]], expected, "row {i}");
        }
    }

    #[test]
    fn undefined_column_is_background_but_fluid_still_overlays() {
        let mut b = Array2::from_shape_fn((8, 2), |(k, _)| 2.0 * k as f64);
        b[[3, 1]] = f64::NAN;
        let mut fluid = Array2::zeros((20, 2));
        fluid[[5, 1]] = 1;
        let mask = boundary_to_mask(b.view(), fluid.view(), 20).unwrap();
        assert_eq!(mask[[1, 0]], 1);
        assert!(mask.column(1).iter().enumerate().all(|(i, &v)| v == if i == 5 { 8 } else { 0 }));
    }

    #[test]
    fn crossing_boundaries_are_sorted() {
        let mut b = Array2::from_shape_fn((8, 1), |(k, _)| 10.0 * (k + 1) as f64);
        b.swap([2, 0], [3, 0]);
        let mask = boundary_to_mask(b.view(), Array2::zeros((100, 1)).view(), 100).unwrap();
        assert_eq!(mask[[35, 0]], 3);
    }

    #[test]
    fn shape_errors() {
        let b = Array2::zeros((7, 3));
        assert!(boundary_to_mask(b.view(), Array2::zeros((4, 3)).view(), 4).is_err());
        let b = Array2::zeros((8, 3));
        assert!(boundary_to_mask(b.view(), Array2::zeros((4, 2)).view(), 4).is_err());
    }

    #[test]
    fn missing_subjects_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(subject_path(dir.path(), 3), b"").unwrap();
        let out = dir.path().join("out");
        match ingest_duke(dir.path(), &out) {
            Err(Error::MissingSubjects { patients, .. }) => {
                assert_eq!(patients, vec![1, 2, 4, 5, 6, 7, 8, 9, 10]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
