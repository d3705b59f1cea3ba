use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::Array2;

use super::BScanRecord;
use crate::Result;

pub const DEFAULT_SIZE: usize = 224;

/// Bilinear resize plus per-scan z-score for the image; nearest-neighbour
/// resize for the mask so no new labels appear.
pub fn preprocess(record: &BScanRecord, size: usize) -> Result<(Array2<f64>, Array2<u8>)> {
    record.validate()?;
    let (h, w) = record.image.dim();
    let src: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
        w as u32,
        h as u32,
        // The resampler clamps float pixels to [0, 1].
        record.image.iter().map(|&v| v as f32 / 255.0).collect(),
    )
    .expect("buffer length matches dimensions");
    let resized = imageops::resize(&src, size as u32, size as u32, FilterType::Triangle);
    let mut img = Array2::from_shape_vec(
        (size, size),
        resized.into_raw().into_iter().map(f64::from).collect(),
    )
    .expect("buffer length matches dimensions");

    let n = img.len() as f64;
    let mean = img.sum() / n;
    let var = img.fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / n;
    // Below a thousandth of a grey level the spread is resampling round-off.
    if var.sqrt() < 1e-3 / 255.0 {
        log::warn!(
            "patient {} scan {}: constant image normalized to zeros",
            record.patient_id,
            record.scan_index
        );
        img.fill(0.0);
    } else {
        let inv = 1.0 / var.sqrt();
        img.mapv_inplace(|v| (v - mean) * inv);
    }

    Ok((img, resize_mask_nearest(&record.mask, size, size)))
}

/// Nearest-neighbour resampling using pixel-centre alignment.
pub fn resize_mask_nearest(mask: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let src = |o: usize, n_out: usize, n_in: usize| {
        (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| mask[[src(i, out_h, h), src(j, out_w, w)]])
}
