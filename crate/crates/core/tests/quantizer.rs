use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tqmz_core::quantizer::{dequantize_into, quantize_codes, Levels};
use tqmz_core::tensor::TensorRecord;
use tqmz_core::{
    dequantize, find_params, quantize, quantize_model, quantize_ternary, ternarize_model, Error, ModelManifest,
    QuantConfig, QuantParams, Role, Scalar, TensorF32, TensorF64,
};

fn cfg(bits: f32) -> QuantConfig {
    QuantConfig::new(bits).unwrap()
}

#[test]
fn symmetric_range_in_exact_arithmetic() {
    let x = [-1.0f64, 0.0, 1.0];
    let p = find_params(&x, cfg(8.0)).unwrap();
    assert_eq!(p.scale, 2.0 / 255.0);
    assert_eq!(p.zero, 128.0);
    assert_eq!(quantize_codes(&x, &p).unwrap(), vec![0, 128, 255]);

    let q = TensorF64::new("w", vec![1], vec![0.0]).unwrap();
    assert_eq!(quantize(&q, &p).unwrap().codes, vec![128]);

    let mut out = Vec::new();
    dequantize_into(&[128, 255], &p, &mut out);
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 254.0 / 255.0).abs() < 1e-15);
}

#[test]
fn symmetric_range_in_single_precision() {
    // 1 / (2/255) is 127.49999 in f32, so the zero point rounds down.
    let x = [-1.0f32, 0.0, 1.0];
    let p = find_params(&x, cfg(8.0)).unwrap();
    assert_eq!(p.scale, 2.0f32 / 255.0);
    assert_eq!(p.zero, 127.0);
    assert_eq!(quantize_codes(&x, &p).unwrap(), vec![0, 127, 254]);
}

#[test]
fn constant_tensor_is_widened() {
    let p = find_params(&[0.0f64; 3], cfg(8.0)).unwrap();
    assert_eq!(p.scale, 1.0 / 255.0);
    assert_eq!(p.zero, 128.0);
    let codes = quantize_codes(&[0.0f64; 3], &p).unwrap();
    assert_eq!(codes, vec![128; 3]);

    for bits in [2.0, 4.0, 6.0, 8.0] {
        for c in [-3.75f32, 0.0, 0.1, 1e6] {
            let p = find_params(&[c; 5], cfg(bits)).unwrap();
            let codes = quantize_codes(&[c; 5], &p).unwrap();
            assert!(codes.iter().all(|&q| q == codes[0]));
            assert!(exact_error(c, codes[0], &p) <= f64::from(p.scale) / 2.0, "bits {bits} c {c}");
        }
    }
}

#[test]
fn all_max_values_share_one_code() {
    let x = [0.25f32, 3.0, 3.0, 3.0];
    let p = find_params(&x, cfg(4.0)).unwrap();
    let codes = quantize_codes(&[3.0f32; 4], &p).unwrap();
    let expect = ((3.0f32 / p.scale).round_ties_even() + p.zero).clamp(0.0, 15.0) as u8;
    assert_eq!(codes, vec![expect; 4]);
}

#[test]
fn ternary_thresholds() {
    let p = find_params(&[-1.0f32, 1.0], cfg(1.5)).unwrap();
    assert_eq!((p.scale, p.zero, p.levels), (1.0, -1.0, Levels::Ternary));
    let x = TensorF32::new("w", vec![5], vec![0.6, 0.0, -0.6, 0.5, -0.5]).unwrap();
    assert_eq!(quantize_ternary(&x, &p).unwrap().data(), &[1.0, 0.0, -1.0, 0.0, 0.0]);

    assert!(matches!(quantize_codes(&[0.0f32], &p), Err(Error::Argument(_))));
    let affine = QuantParams::affine(0.1f32, 3.0, 15).unwrap();
    assert!(matches!(quantize_ternary(&x, &affine), Err(Error::Argument(_))));
}

#[test]
fn invalid_inputs() {
    assert!(matches!(find_params::<f32>(&[], cfg(8.0)), Err(Error::Argument(_))));
    assert!(find_params(&[1.0f32, f32::NAN], cfg(8.0)).is_err());
    assert!(QuantConfig::new(3.0).is_err());
    assert!(QuantParams::affine(0.0f32, 0.0, 255).is_err());
    assert!(QuantParams::affine(1.0f32, 0.5, 255).is_err());
    assert!(QuantParams::affine(1.0f32, 0.0, 100).is_err());
}

#[test]
fn role_set_decides_what_is_quantized() {
    let w = TensorF32::new("w", vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
    let n = TensorF32::new("n", vec![2], vec![1.0, 0.9]).unwrap();
    let b = TensorF32::new("b", vec![2], vec![0.5, 0.25]).unwrap();
    let manifest = ModelManifest::loose(vec![
        TensorRecord::new("w", vec![2, 2], Role::Weight, None),
        TensorRecord::new("n", vec![2], Role::FinalNorm, None),
        TensorRecord::new("b", vec![2], Role::Bias, None),
    ]);
    let m = quantize_model(&[w.clone(), n.clone(), b.clone()], &manifest, cfg(8.0)).unwrap();
    assert_eq!(m.quantized.len(), 1);
    assert_eq!(m.quantized[0].name, "w");
    assert_eq!(m.passthrough, vec![n.clone(), b.clone()]);

    let empty = quantize_model(&[], &ModelManifest::loose(vec![]), cfg(8.0)).unwrap();
    assert!(empty.quantized.is_empty() && empty.passthrough.is_empty());

    assert!(quantize_model(&[w.clone(), n.clone(), b.clone()], &manifest, cfg(1.5)).is_err());
    let t = ternarize_model(&[w, n.clone(), b.clone()], &manifest).unwrap();
    assert_eq!(t[1], n);
    assert_eq!(t[2], b);
    assert!(t[0].data().iter().all(|&v| v == 0.0 || v == 0.4 || v == -0.2));
}

/// `|scale * (code - zero) - x|` without rounding: for single-precision
/// operands the product has at most 33 significant bits, so it and the
/// difference are exact in `f64`.
fn exact_error(x: f32, code: u8, p: &QuantParams<f32>) -> f64 {
    (f64::from(p.scale) * (f64::from(code) - f64::from(p.zero)) - f64::from(x)).abs()
}

/// Every value within the reconstructible range must land within half a
/// step of its reconstruction. The dequantized value itself is one
/// rounding away from the exact reconstruction, so it is allowed that
/// rounding on top of the half step. Returns the number of values checked.
fn check_bound<T: Scalar>(x: &[T], bits: f32) -> usize {
    let p = find_params(x, cfg(bits)).unwrap();
    let maxq = p.maxq().unwrap();
    let codes = quantize_codes(x, &p).unwrap();
    assert!(codes.iter().all(|&c| u32::from(c) <= maxq));
    let mut out = Vec::new();
    dequantize_into(&codes, &p, &mut out);
    let (lo, hi) = (p.reconstruct(0), p.reconstruct(maxq as u8));
    let half = p.scale.to_f64_lossless() / 2.0;
    let eps = T::epsilon().to_f64_lossless();
    let mut checked = 0;
    for (&v, &r) in x.iter().zip(&out) {
        if v < lo || v > hi {
            continue;
        }
        let (v, r) = (v.to_f64_lossless(), r.to_f64_lossless());
        let err = (r - v).abs();
        let rounding = eps * r.abs().max(v.abs());
        assert!(err <= half + rounding, "bits {bits}: x {v} -> {r}, err {err} > {half}");
        checked += 1;
    }
    checked
}

/// In exact arithmetic the chosen single-precision codes meet the half-step
/// bound with no slack at all.
fn check_exact_bound(x: &[f32], bits: f32) {
    let p = find_params(x, cfg(bits)).unwrap();
    let (lo, hi) = (p.reconstruct(0), p.reconstruct(p.maxq().unwrap() as u8));
    let codes = quantize_codes(x, &p).unwrap();
    let half = f64::from(p.scale) / 2.0;
    for (&v, &c) in x.iter().zip(&codes) {
        if v >= lo && v <= hi {
            assert!(exact_error(v, c, &p) <= half, "bits {bits}: x {v} code {c}");
        }
    }
}

#[test]
fn error_bound_on_random_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for bits in [2.0, 4.0, 6.0, 8.0] {
        for trial in 0..8 {
            let centre: f32 = rng.random_range(-10.0..10.0);
            let width: f32 = 10f32.powf(rng.random_range(-4.0..2.0));
            let x32: Vec<f32> = (0..12_500).map(|_| centre + width * rng.random_range(-1.0f32..1.0)).collect();
            let x64: Vec<f64> = x32.iter().map(|&v| f64::from(v)).collect();
            check_exact_bound(&x32, bits);
            let n32 = check_bound(&x32, bits);
            let n64 = check_bound(&x64, bits);
            // zero-point rounding can shift the level grid by half a step
            assert!(n32 > 10_000 && n64 > 10_000, "bits {bits} trial {trial}: {n32}/{n64} in range");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn codes_in_range_and_idempotent(
        x in proptest::collection::vec(-1e4f32..1e4, 1..300),
        bits in prop::sample::select(vec![2.0f32, 4.0, 6.0, 8.0]),
    ) {
        let t = TensorF32::new("w", vec![x.len()], x.clone()).unwrap();
        let p = find_params(&x, cfg(bits)).unwrap();
        let q = quantize(&t, &p).unwrap();
        let maxq = p.maxq().unwrap();
        prop_assert!(q.codes.iter().all(|&c| u32::from(c) <= maxq));
        let again = quantize(&dequantize(&q), &p).unwrap();
        prop_assert_eq!(again.codes, q.codes);
    }

    #[test]
    fn single_and_double_agree_on_bound(
        x in proptest::collection::vec(-1.0f32..1.0, 1..200),
        bits in prop::sample::select(vec![2.0f32, 4.0, 6.0, 8.0]),
    ) {
        check_exact_bound(&x, bits);
        check_bound(&x, bits);
        let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        check_bound(&x64, bits);
    }
}
