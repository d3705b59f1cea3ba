//! Independent reference implementations shared by the integration tests and
//! the acceptance suite. Everything here is written with plain loops so it
//! shares no code path with the library under test.
#![allow(dead_code)]

pub mod matv5;

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectralseg::nn::{BatchNorm2d, Conv2d};
use spectralseg::spectral::{FourierUnit, FrequencyFilter, SpectralNorm};

pub fn random_map(seed: u64, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
}

pub fn random_labels(seed: u64, dim: (usize, usize, usize), classes: u8) -> Array3<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(dim, || rng.random_range(0..classes))
}

pub fn max_abs(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn inner(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Full `H×W` DFT of one real plane by direct summation: `(re, im)`.
pub fn brute_dft(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = x.dim();
    let mut re = Array2::zeros((h, w));
    let mut im = Array2::zeros((h, w));
    for kh in 0..h {
        for kw in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for m in 0..h {
                for n in 0..w {
                    let phase = -2.0 * PI * ((kh * m) as f64 / h as f64 + (kw * n) as f64 / w as f64);
                    sr += x[[m, n]] * phase.cos();
                    si += x[[m, n]] * phase.sin();
                }
            }
            re[[kh, kw]] = sr;
            im[[kh, kw]] = si;
        }
    }
    (re, im)
}

/// Real inverse of a half-width spectrum by direct summation. Columns other
/// than DC and Nyquist stand for themselves and their mirror image, and only
/// the real part of the reconstruction is kept.
pub fn brute_half_inverse(re: &Array2<f64>, im: &Array2<f64>, w: usize) -> Array2<f64> {
    let (h, wf) = re.dim();
    assert_eq!(wf, w / 2 + 1);
    let mut out = Array2::zeros((h, w));
    for m in 0..h {
        for n in 0..w {
            let mut acc = 0.0;
            for kh in 0..h {
                for kw in 0..wf {
                    let weight = if kw == 0 || (w.is_multiple_of(2) && kw == w / 2) { 1.0 } else { 2.0 };
                    let phase = 2.0 * PI * ((kh * m) as f64 / h as f64 + (kw * n) as f64 / w as f64);
                    acc += weight * (re[[kh, kw]] * phase.cos() - im[[kh, kw]] * phase.sin());
                }
            }
            out[[m, n]] = acc / (h * w) as f64;
        }
    }
    out
}

fn weight4(p: &ArrayD<f64>) -> Vec<usize> {
    p.shape().to_vec()
}

/// Same-padded stride-1 convolution by direct summation.
pub fn naive_conv(x: &Array4<f64>, conv: &Conv2d) -> Array4<f64> {
    let shape = weight4(&conv.weight.value);
    let (co, ci, k) = (shape[0], shape[1], shape[2]);
    let (b, c, h, w) = x.dim();
    assert_eq!(c, ci);
    let pad = (k / 2) as isize;
    let wv = &conv.weight.value;
    let mut out = Array4::zeros((b, co, h, w));
    for bi in 0..b {
        for o in 0..co {
            let bias = conv.bias.as_ref().map_or(0.0, |p| p.value[[o]]);
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias;
                    for cc in 0..ci {
                        for di in 0..k {
                            for dj in 0..k {
                                let (si, sj) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                acc += wv[[o, cc, di, dj]] * x[[bi, cc, si as usize, sj as usize]];
                            }
                        }
                    }
                    out[[bi, o, i, j]] = acc;
                }
            }
        }
    }
    out
}

/// Training-mode batch normalization with biased batch statistics.
pub fn naive_batch_norm(x: &Array4<f64>, bn: &BatchNorm2d) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f64;
    let mut out = x.clone();
    for ch in 0..c {
        let mut mean = 0.0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    mean += x[[bi, ch, i, j]];
                }
            }
        }
        mean /= n;
        let mut var = 0.0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    var += (x[[bi, ch, i, j]] - mean).powi(2);
                }
            }
        }
        var /= n;
        let inv = 1.0 / (var + bn.eps).sqrt();
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    out[[bi, ch, i, j]] =
                        bn.gamma.value[[ch]] * (x[[bi, ch, i, j]] - mean) * inv + bn.beta.value[[ch]];
                }
            }
        }
    }
    out
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

fn filter_value(f: &FrequencyFilter, v: f64) -> f64 {
    use spectralseg::spectral::FilterMode;
    // Bins that are exactly zero by symmetry come out of direct summation as
    // round-off noise of either sign; remove() is discontinuous at zero.
    let v = if v.abs() < 1e-9 { 0.0 } else { v };
    let a = f.bound;
    match f.mode {
        FilterMode::None => v,
        FilterMode::Keep => {
            if v > a {
                a
            } else if v < -a {
                -a
            } else {
                v
            }
        }
        FilterMode::Remove => {
            if v <= 0.0 && v > -a {
                -a
            } else if v > 0.0 && v < a {
                a
            } else {
                v
            }
        }
    }
}

/// Fourier unit composed from the brute-force DFT, direct 1×1 convolution,
/// batch normalization and ReLU, using the unit's own weights.
pub fn fourier_unit_oracle(x: &Array4<f64>, fu: &FourierUnit) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let wf = w / 2 + 1;
    let mut stacked = Array4::zeros((b, 2 * c, h, wf));
    for bi in 0..b {
        for ch in 0..c {
            let plane = Array2::from_shape_fn((h, w), |(i, j)| x[[bi, ch, i, j]]);
            let (re, im) = brute_dft(&plane);
            for i in 0..h {
                for j in 0..wf {
                    stacked[[bi, ch, i, j]] = filter_value(&fu.filter, re[[i, j]]);
                    stacked[[bi, c + ch, i, j]] = filter_value(&fu.filter, im[[i, j]]);
                }
            }
        }
    }
    let mut y = naive_conv(&stacked, &fu.conv);
    if let Some(bn) = &fu.norm {
        y = naive_batch_norm(&y, bn);
    }
    if fu.activation.is_some() {
        y = relu(&y);
    }
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ch in 0..c {
            let re = Array2::from_shape_fn((h, wf), |(i, j)| y[[bi, ch, i, j]]);
            let im = Array2::from_shape_fn((h, wf), |(i, j)| y[[bi, c + ch, i, j]]);
            let plane = brute_half_inverse(&re, &im, w);
            for i in 0..h {
                for j in 0..w {
                    out[[bi, ch, i, j]] = plane[[i, j]];
                }
            }
        }
    }
    out
}

/// Spectral norm sub-block composed from the oracles above.
pub fn spectral_norm_oracle(x: &Array4<f64>, sn: &SpectralNorm) -> Array4<f64> {
    let mixed = relu(&naive_batch_norm(&naive_conv(x, &sn.conv_in), &sn.norm_in));
    let (b, c, h, w) = mixed.dim();
    let split = (sn.alpha * c as f64 + 0.5).floor() as usize;
    let g = mixed.slice(ndarray::s![.., ..split, .., ..]).to_owned();
    let l = mixed.slice(ndarray::s![.., split.., .., ..]).to_owned();
    let fg = match &sn.fu_global {
        Some(fu) => fourier_unit_oracle(&g, fu),
        None => g,
    };
    let fl = match &sn.fu_local {
        Some(fu) => fourier_unit_oracle(&l, fu),
        None => l,
    };
    let mut sum = mixed.clone();
    for bi in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    sum[[bi, ch, i, j]] += if ch < split {
                        fg[[bi, ch, i, j]]
                    } else {
                        fl[[bi, ch - split, i, j]]
                    };
                }
            }
        }
    }
    naive_conv(&sum, &sn.conv_out)
}
