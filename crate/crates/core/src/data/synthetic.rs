//! Layered-speckle phantom B-scans.
//!
//! Each scan stacks seven smooth horizontal bands between a dark vitreous and
//! a mid-grey choroid. Every region carries multiplicative log-normal speckle
//! with its own grain size, and up to three dark elliptical fluid pockets sit
//! inside the retina.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{write_record, BScanRecord, DatasetManifest, Provenance};
use crate::{Error, Result, FLUID_CLASS};

const LAYERS: usize = 7;
/// Nominal band thickness in rows at a height of 256.
const THICKNESS: [f64; LAYERS] = [14.0, 26.0, 18.0, 14.0, 30.0, 12.0, 20.0];
/// Mean reflectivity of each band.
const LEVEL: [f64; LAYERS] = [0.85, 0.62, 0.34, 0.58, 0.24, 0.95, 0.72];
/// Speckle grain of each band, in pixels.
const GRAIN: [usize; LAYERS] = [1, 2, 3, 2, 4, 1, 2];
const VITREOUS: (f64, usize) = (0.06, 1);
const CHOROID: (f64, usize) = (0.40, 3);
const FLUID_LEVEL: f64 = 0.08;
const SPECKLE_SIGMA: f64 = 0.35;
const FLUID_FRACTION: (f64, f64) = (0.01, 0.10);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticParams {
    pub height: usize,
    pub width: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            height: 256,
            width: 320,
        }
    }
}

fn scan_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Coarse Gaussian field with `grain`-pixel cells, nearest-upsampled.
fn speckle_field(rng: &mut ChaCha8Rng, h: usize, w: usize, grain: usize) -> Array2<f64> {
    let (gh, gw) = (h.div_ceil(grain), w.div_ceil(grain));
    let coarse = Array2::from_shape_simple_fn((gh, gw), || {
        let n: f64 = rng.sample(StandardNormal);
        (SPECKLE_SIGMA * n - 0.5 * SPECKLE_SIGMA * SPECKLE_SIGMA).exp()
    });
    Array2::from_shape_fn((h, w), |(i, j)| coarse[[i / grain, j / grain]])
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Blob {
    fn contains(&self, i: usize, j: usize) -> bool {
        let dy = (i as f64 - self.cy) / self.ry;
        let dx = (j as f64 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// One phantom scan; deterministic in `(seed, index)`.
pub fn synthesize_record(
    seed: u64,
    index: usize,
    patient_id: u32,
    scan_index: usize,
    params: SyntheticParams,
) -> BScanRecord {
    let (h, w) = (params.height, params.width);
    let scale = h as f64 / 256.0;
    let mut rng = scan_rng(seed, index);

    let y0 = rng.random_range(0.16..0.26) * h as f64;
    let amp = rng.random_range(2.0..8.0) * scale;
    let freq = rng.random_range(0.4..1.4);
    let phase = rng.random_range(0.0..2.0 * PI);
    let tilt = rng.random_range(-0.04..0.04) * h as f64;
    let thick_scale = rng.random_range(0.9..1.1) * scale;
    let wobble: Vec<(f64, f64)> = (0..LAYERS)
        .map(|_| (rng.random_range(0.5..2.5), rng.random_range(0.0..2.0 * PI)))
        .collect();

    // bounds[k][j]: row of boundary k (0..=7) in column j.
    let mut bounds = vec![vec![0.0; w]; LAYERS + 1];
    for j in 0..w {
        let x = j as f64 / w as f64;
        let mut b = y0 + amp * (2.0 * PI * freq * x + phase).sin() + tilt * (x - 0.5);
        bounds[0][j] = b;
        for k in 0..LAYERS {
            let (f, p) = wobble[k];
            b += THICKNESS[k] * thick_scale * (1.0 + 0.15 * (2.0 * PI * f * x + p).sin());
            bounds[k + 1][j] = b;
        }
    }

    let mut mask = Array2::<u8>::zeros((h, w));
    for j in 0..w {
        for i in 0..h {
            let r = i as f64;
            if let Some(k) = (0..LAYERS).find(|&k| bounds[k][j] <= r && r < bounds[k + 1][j]) {
                mask[[i, j]] = (k + 1) as u8;
            }
        }
    }

    let n_blobs = rng.random_range(0..=3usize);
    let retina = |i: usize, j: usize| (1..=LAYERS as u8).contains(&mask[[i, j]]);
    let mut fluid = Array2::<bool>::from_elem((h, w), false);
    if n_blobs > 0 {
        for _attempt in 0..100 {
            let blobs: Vec<Blob> = (0..n_blobs)
                .map(|_| {
                    let cx = rng.random_range(0.15..0.85) * w as f64;
                    let col = (cx as usize).min(w - 1);
                    let cy = rng.random_range(bounds[1][col]..bounds[5][col]);
                    Blob {
                        cy,
                        cx,
                        ry: rng.random_range(8.0..16.0) * scale,
                        rx: rng.random_range(18.0..45.0) * scale,
                    }
                })
                .collect();
            fluid = Array2::from_shape_fn((h, w), |(i, j)| {
                retina(i, j) && blobs.iter().any(|b| b.contains(i, j))
            });
            let frac = fluid.iter().filter(|&&f| f).count() as f64 / (h * w) as f64;
            if (FLUID_FRACTION.0..=FLUID_FRACTION.1).contains(&frac) {
                break;
            }
        }
    }

    let mut region_fields: Vec<Array2<f64>> = GRAIN
        .iter()
        .chain([&VITREOUS.1, &CHOROID.1])
        .map(|&g| speckle_field(&mut rng, h, w, g))
        .collect();
    let fluid_noise = speckle_field(&mut rng, h, w, 1);
    let gain = rng.random_range(0.85..1.15);

    let mut image = Array2::<u8>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let label = mask[[i, j]];
            let v = if fluid[[i, j]] {
                mask[[i, j]] = FLUID_CLASS;
                FLUID_LEVEL * (0.8 + 0.2 * fluid_noise[[i, j]])
            } else if label > 0 {
                let k = label as usize - 1;
                LEVEL[k] * region_fields[k][[i, j]]
            } else if (i as f64) < bounds[0][j] {
                VITREOUS.0 * region_fields[LAYERS][[i, j]]
            } else {
                CHOROID.0 * region_fields[LAYERS + 1][[i, j]]
            };
            let noise: f64 = rng.sample(StandardNormal);
            image[[i, j]] = ((gain * v + 0.02 * noise) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    region_fields.clear();

    BScanRecord {
        patient_id,
        scan_index,
        image,
        mask,
        expert_id: 1,
    }
}

/// Writes `n` phantom scans spread over ten synthetic patients (6/2/2 split).
pub fn generate_synthetic(
    seed: u64,
    n: usize,
    out_dir: &Path,
    params: SyntheticParams,
) -> Result<DatasetManifest> {
    if n < 10 {
        return Err(Error::Config(format!("synthetic corpus needs n >= 10, got {n}")));
    }
    if params.height < 64 || params.width < 64 {
        return Err(Error::Config(format!(
            "synthetic scans must be at least 64x64, got {}x{}",
            params.height, params.width
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::new(Provenance::Synthetic, Some(seed));
    let mut first_of_patient = 0;
    let mut current = 0;
    for i in 0..n {
        let patient = (i * 10 / n) as u32 + 1;
        if patient != current {
            current = patient;
            first_of_patient = i;
        }
        let record = synthesize_record(seed, i, patient, i - first_of_patient, params);
        manifest.records.push(write_record(out_dir, &record)?);
    }
    manifest.save(out_dir)?;
    Ok(manifest)
}
