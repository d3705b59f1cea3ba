mod common;

use common::{brute_dft, fourier_unit_oracle, inner, max_abs, random_map, spectral_norm_oracle};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spectralseg::nn::Mode;
use spectralseg::spectral::{
    apply_frequency_filter, channel_split, fft2_real, fft2_real_adjoint, inverse_fft2_real,
    inverse_fft2_real_adjoint, FourierUnit, FrequencyFilter, SpectralNorm, Spectrum,
};
use spectralseg::tensor::concat_channels;

fn relative_round_trip(size: usize, seed: u64) -> f64 {
    let x = random_map(seed, (2, 3, size, size));
    let back = inverse_fft2_real(&fft2_real(&x).unwrap(), size, size).unwrap();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err = x.iter().zip(back.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    err / norm
}

#[test]
fn round_trip_on_network_sizes() {
    for size in [8, 16, 32, 224] {
        let rel = relative_round_trip(size, size as u64);
        assert!(rel <= 1e-5, "size {size}: relative error {rel:e}");
    }
}

#[test]
fn stored_half_spectrum_matches_direct_dft() {
    for (h, w) in [(8, 8), (6, 7), (5, 4)] {
        let x = random_map(3, (1, 1, h, w));
        let s = fft2_real(&x).unwrap();
        let plane = Array2::from_shape_fn((h, w), |(i, j)| x[[0, 0, i, j]]);
        let (re, im) = brute_dft(&plane);
        assert_eq!(s.dim(), (1, 1, h, w / 2 + 1));
        for kh in 0..h {
            for kw in 0..w / 2 + 1 {
                assert!((s.real[[0, 0, kh, kw]] - re[[kh, kw]]).abs() < 1e-10);
                assert!((s.imag[[0, 0, kh, kw]] - im[[kh, kw]]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn parseval_on_eight_by_eight() {
    let x = random_map(11, (1, 1, 8, 8));
    let plane = Array2::from_shape_fn((8, 8), |(i, j)| x[[0, 0, i, j]]);
    let (re, im) = brute_dft(&plane);
    let full: f64 = re.iter().zip(im.iter()).map(|(a, b)| a * a + b * b).sum();
    let spatial: f64 = x.iter().map(|v| v * v).sum();
    assert!((full / 64.0 - spatial).abs() < 1e-10 * spatial);

    let s = fft2_real(&x).unwrap();
    let mut half = 0.0;
    for kh in 0..8 {
        for kw in 0..5 {
            let m = if kw == 0 || kw == 4 { 1.0 } else { 2.0 };
            half += m * (s.real[[0, 0, kh, kw]].powi(2) + s.imag[[0, 0, kh, kw]].powi(2));
        }
    }
    assert!((half / 64.0 - spatial).abs() < 1e-10 * spatial);
}

#[test]
fn forward_transform_adjoint_satisfies_inner_product_identity() {
    for (h, w) in [(8, 8), (6, 5)] {
        let x = random_map(1, (2, 2, h, w));
        let g = Spectrum {
            real: random_map(2, (2, 2, h, w / 2 + 1)),
            imag: random_map(3, (2, 2, h, w / 2 + 1)),
        };
        let s = fft2_real(&x).unwrap();
        let lhs = inner(&s.real, &g.real) + inner(&s.imag, &g.imag);
        let rhs = inner(&x, &fft2_real_adjoint(&g, h, w).unwrap());
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn inverse_transform_adjoint_satisfies_inner_product_identity() {
    for (h, w) in [(8, 8), (6, 5)] {
        let s = Spectrum {
            real: random_map(4, (1, 3, h, w / 2 + 1)),
            imag: random_map(5, (1, 3, h, w / 2 + 1)),
        };
        let g = random_map(6, (1, 3, h, w));
        let lhs = inner(&inverse_fft2_real(&s, h, w).unwrap(), &g);
        let adj = inverse_fft2_real_adjoint(&g);
        let rhs = inner(&s.real, &adj.real) + inner(&s.imag, &adj.imag);
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn remove_and_keep_map_values_as_specified() {
    let keep = FrequencyFilter::keep(10.0);
    let remove = FrequencyFilter::remove(10.0);
    let cases = [
        (-25.0, -10.0, -25.0),
        (-10.0, -10.0, -10.0),
        (-3.0, -3.0, -10.0),
        (0.0, 0.0, -10.0),
        (0.5, 0.5, 10.0),
        (9.99, 9.99, 10.0),
        (10.0, 10.0, 10.0),
        (42.0, 10.0, 42.0),
    ];
    for (v, k, r) in cases {
        assert_eq!(keep.apply_value(v), k, "keep({v})");
        assert_eq!(remove.apply_value(v), r, "remove({v})");
    }
    assert_eq!(FrequencyFilter::none().apply_value(3.25), 3.25);
}

#[test]
fn fourier_unit_matches_composed_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for filter in [FrequencyFilter::none(), FrequencyFilter::keep(2.0), FrequencyFilter::remove(2.0)] {
        let mut fu = FourierUnit::new(3, filter, &mut rng);
        let x = random_map(8, (2, 3, 8, 6));
        let got = fu.forward(&x, Mode::Train).unwrap();
        let want = fourier_unit_oracle(&x, &fu);
        let err = max_abs(&got, &want);
        assert!(err <= 1e-6, "{filter}: {err:e}");
    }
}

#[test]
fn spectral_norm_matches_composed_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for alpha in [0.0, 0.25, 0.5, 1.0] {
        let mut sn = SpectralNorm::new(3, 4, alpha, FrequencyFilter::none(), &mut rng).unwrap();
        let x = random_map(10, (2, 3, 8, 8));
        let got = sn.forward(&x, Mode::Train).unwrap();
        let want = spectral_norm_oracle(&x, &sn);
        let err = max_abs(&got, &want);
        assert!(err <= 1e-6, "alpha {alpha}: {err:e}");
    }
}

fn arb_map(c: usize, h: usize, w: usize) -> impl Strategy<Value = ndarray::Array4<f64>> {
    proptest::collection::vec(-100.0f64..100.0, c * h * w)
        .prop_map(move |v| ndarray::Array4::from_shape_vec((1, c, h, w), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_holds_for_arbitrary_shapes((h, w, x) in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| (Just(h), Just(w), arb_map(2, h, w)))) {
        let back = inverse_fft2_real(&fft2_real(&x).unwrap(), h, w).unwrap();
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(max_abs(&x, &back) <= 1e-10 * scale);
    }

    #[test]
    fn transform_is_linear(x in arb_map(1, 6, 8), y in arb_map(1, 6, 8), a in -3.0f64..3.0) {
        let combo = &x * a + &y;
        let s = fft2_real(&combo).unwrap();
        let sx = fft2_real(&x).unwrap();
        let sy = fft2_real(&y).unwrap();
        let expect_re = &sx.real * a + &sy.real;
        let expect_im = &sx.imag * a + &sy.imag;
        prop_assert!(max_abs(&s.real, &expect_re) < 1e-8);
        prop_assert!(max_abs(&s.imag, &expect_im) < 1e-8);
    }

    #[test]
    fn filters_are_idempotent(x in arb_map(2, 4, 3), bound in 0.1f64..50.0) {
        let s = Spectrum { real: x.clone(), imag: -x };
        for f in [FrequencyFilter::none(), FrequencyFilter::keep(bound), FrequencyFilter::remove(bound)] {
            let once = apply_frequency_filter(&s, &f);
            let twice = apply_frequency_filter(&once, &f);
            prop_assert_eq!(&once, &twice);
        }
    }

    #[test]
    fn filter_ranges_hold(v in -100.0f64..100.0, bound in 0.1f64..50.0) {
        let k = FrequencyFilter::keep(bound).apply_value(v);
        prop_assert!(k.abs() <= bound);
        let r = FrequencyFilter::remove(bound).apply_value(v);
        prop_assert!(r.abs() >= bound);
        if v.abs() >= bound && v != -bound {
            prop_assert_eq!(r, v);
        }
        if v.abs() <= bound {
            prop_assert_eq!(k, v);
        }
    }

    #[test]
    fn split_then_concat_is_identity(c in 1usize..9, alpha in 0.0f64..=1.0) {
        let x = random_map(c as u64, (2, c, 3, 4));
        let (g, l) = channel_split(&x, alpha).unwrap();
        prop_assert_eq!(g.dim().1 + l.dim().1, c);
        prop_assert_eq!(concat_channels(&g, &l).unwrap(), x);
    }
}
