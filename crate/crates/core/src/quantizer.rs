//! Per-tensor uniform affine quantization and the ternary threshold
//! quantizer.
//!
//! Affine path: `scale = (xmax - xmin) / maxq`, `zero = round(-xmin / scale)`,
//! `q = clamp(round(x / scale) + zero, 0, maxq)`, reconstructed as
//! `scale * (q - zero)`. Codes always occupy one byte each, whatever the
//! bit width, so the codec sees a plain byte stream.
//!
//! Ternary path: `scale = xmax`, `zero = xmin`, and each value becomes
//! `scale` if `x > scale / 2`, `zero` if `x < zero / 2`, otherwise 0. Its
//! output is floats, not codes, and never reaches the codec.
//!
//! All rounding is half-to-even.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};
use crate::tensor::{check_dims, numel, ModelManifest, StoredParams, Tensor};

/// Supported bit widths. `Ternary` is the 1.5-bit threshold scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitWidth {
    Ternary,
    Two,
    Four,
    Six,
    Eight,
}

impl BitWidth {
    pub fn from_bits(bits: f32) -> Result<Self> {
        Ok(match bits {
            1.5 => BitWidth::Ternary,
            2.0 => BitWidth::Two,
            4.0 => BitWidth::Four,
            6.0 => BitWidth::Six,
            8.0 => BitWidth::Eight,
            other => return Err(Error::arg(format!("unsupported bit width {other}; expected one of 1.5, 2, 4, 6, 8"))),
        })
    }

    pub fn bits(self) -> f32 {
        match self {
            BitWidth::Ternary => 1.5,
            BitWidth::Two => 2.0,
            BitWidth::Four => 4.0,
            BitWidth::Six => 6.0,
            BitWidth::Eight => 8.0,
        }
    }

    /// `2^bits - 1`, or `None` for ternary.
    pub fn maxq(self) -> Option<u32> {
        match self {
            BitWidth::Ternary => None,
            BitWidth::Two => Some(3),
            BitWidth::Four => Some(15),
            BitWidth::Six => Some(63),
            BitWidth::Eight => Some(255),
        }
    }

    pub fn levels(self) -> Levels {
        match self.maxq() {
            Some(maxq) => Levels::Affine { maxq },
            None => Levels::Ternary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub bits: BitWidth,
}

impl QuantConfig {
    pub fn new(bits: f32) -> Result<Self> {
        Ok(Self { bits: BitWidth::from_bits(bits)? })
    }

    pub fn is_ternary(&self) -> bool {
        self.bits == BitWidth::Ternary
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Levels {
    Affine { maxq: u32 },
    Ternary,
}

impl Levels {
    fn from_maxq(maxq: u32) -> Result<Self> {
        match maxq {
            3 | 15 | 63 | 255 => Ok(Levels::Affine { maxq }),
            other => Err(Error::arg(format!("unsupported maxq {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams<T: Scalar = f32> {
    pub scale: T,
    pub zero: T,
    pub levels: Levels,
}

impl<T: Scalar> QuantParams<T> {
    pub fn affine(scale: T, zero: T, maxq: u32) -> Result<Self> {
        let levels = Levels::from_maxq(maxq)?;
        if !(scale.is_finite() && scale > T::zero()) {
            return Err(Error::arg(format!("affine scale must be positive and finite, got {scale}")));
        }
        if !zero.is_finite() || zero.round_half_even() != zero {
            return Err(Error::arg(format!("affine zero point must be an integer, got {zero}")));
        }
        Ok(Self { scale, zero, levels })
    }

    pub fn maxq(&self) -> Option<u32> {
        match self.levels {
            Levels::Affine { maxq } => Some(maxq),
            Levels::Ternary => None,
        }
    }

    fn affine_maxq(&self, op: &str) -> Result<u32> {
        self.maxq().ok_or_else(|| Error::arg(format!("{op} requires affine parameters, got ternary")))
    }

    /// Whether the zero point is itself a representable code. The
    /// quantizer never clamps it, so all-positive or all-negative tensors
    /// can land outside `[0, maxq]`.
    pub fn zero_in_code_range(&self) -> bool {
        match self.levels {
            Levels::Affine { maxq } => self.zero >= T::zero() && self.zero <= cst(f64::from(maxq)),
            Levels::Ternary => true,
        }
    }

    /// Reconstruction of a single code.
    #[inline]
    pub fn reconstruct(&self, code: u8) -> T {
        self.scale * (cst::<T>(f64::from(code)) - self.zero)
    }

    pub fn cast<U: Scalar>(&self) -> QuantParams<U> {
        QuantParams {
            scale: cst(self.scale.to_f64_lossless()),
            zero: cst(self.zero.to_f64_lossless()),
            levels: self.levels,
        }
    }
}

impl QuantParams<f32> {
    pub fn to_stored(&self) -> Result<StoredParams> {
        let maxq = self.affine_maxq("storage")?;
        Ok(StoredParams { scale: self.scale, zero: self.zero, maxq })
    }

    pub fn from_stored(p: StoredParams) -> Result<Self> {
        Self::affine(p.scale, p.zero, p.maxq)
    }
}

/// Integer codes for one tensor plus the parameters to reconstruct it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T: Scalar = f32> {
    pub name: String,
    pub dims: Vec<usize>,
    pub codes: Vec<u8>,
    pub params: QuantParams<T>,
}

impl<T: Scalar> QuantizedTensor<T> {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, codes: Vec<u8>, params: QuantParams<T>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::arg("tensor name must not be empty"));
        }
        check_dims(&name, &dims)?;
        if codes.len() != numel(&dims) {
            return Err(Error::arg(format!("tensor {name:?}: {} codes for dims {dims:?}", codes.len())));
        }
        let maxq = params.affine_maxq("a quantized tensor")?;
        if let Some(i) = codes.iter().position(|&c| u32::from(c) > maxq) {
            return Err(Error::data(format!("tensor {name:?}: code {} at {i} exceeds maxq {maxq}", codes[i])));
        }
        Ok(Self { name, dims, codes, params })
    }

    pub fn numel(&self) -> usize {
        self.codes.len()
    }
}

/// Computes per-tensor parameters from the value range of `x`.
///
/// A constant tensor has its range widened to `[c - 0.5, c + 0.5]` so the
/// scale stays positive.
pub fn find_params<T: Scalar>(x: &[T], cfg: QuantConfig) -> Result<QuantParams<T>> {
    if x.is_empty() {
        return Err(Error::arg("cannot find quantization parameters of an empty tensor"));
    }
    let mut xmin = T::infinity();
    let mut xmax = T::neg_infinity();
    for &v in x {
        if !v.is_finite() {
            return Err(Error::data("non-finite value in quantizer input"));
        }
        xmin = xmin.min(v);
        xmax = xmax.max(v);
    }
    let maxq = match cfg.bits.levels() {
        Levels::Ternary => return Ok(QuantParams { scale: xmax, zero: xmin, levels: Levels::Ternary }),
        Levels::Affine { maxq } => maxq,
    };
    if xmax == xmin {
        let half = cst::<T>(0.5);
        xmin = xmin - half;
        xmax = xmax + half;
    }
    let scale = (xmax - xmin) / cst(f64::from(maxq));
    if !(scale.is_finite() && scale > T::zero()) {
        return Err(Error::data(format!("value range [{xmin}, {xmax}] yields no usable scale")));
    }
    let zero = cst::<T>((-xmin.to_f64_lossless() / scale.to_f64_lossless()).round_ties_even());
    Ok(QuantParams { scale, zero, levels: Levels::Affine { maxq } })
}

/// Affine codes for `x`: `clamp(round(x / scale) + zero, 0, maxq)`.
///
/// The quotient is evaluated in `f64`. For `f32` inputs that makes the
/// rounding decision exact, so every code is the true nearest level; a
/// single-precision quotient can land on the wrong side of a half step
/// once `|x| / scale` grows.
pub fn quantize_codes<T: Scalar>(x: &[T], p: &QuantParams<T>) -> Result<Vec<u8>> {
    let maxq = p.affine_maxq("quantize")?;
    let hi = f64::from(maxq);
    let (scale, zero) = (p.scale.to_f64_lossless(), p.zero.to_f64_lossless());
    Ok(x.iter()
        .map(|&v| {
            let q = ((v.to_f64_lossless() / scale).round_ties_even() + zero).clamp(0.0, hi);
            q as u8
        })
        .collect())
}

pub fn quantize<T: Scalar>(x: &Tensor<T>, p: &QuantParams<T>) -> Result<QuantizedTensor<T>> {
    let codes = quantize_codes(x.data(), p)?;
    Ok(QuantizedTensor { name: x.name().to_owned(), dims: x.dims().to_vec(), codes, params: *p })
}

/// Reconstructs `scale * (q - zero)` into `out`, reusing its allocation.
pub fn dequantize_into<T: Scalar>(codes: &[u8], p: &QuantParams<T>, out: &mut Vec<T>) {
    // One multiply per distinct code value; the result is identical to the
    // per-element formula.
    let mut table = [T::zero(); 256];
    for (c, slot) in table.iter_mut().enumerate() {
        *slot = p.reconstruct(c as u8);
    }
    out.clear();
    out.extend(codes.iter().map(|&c| table[c as usize]));
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor<T>) -> Tensor<T> {
    let mut data = Vec::with_capacity(q.codes.len());
    dequantize_into(&q.codes, &q.params, &mut data);
    Tensor::new(q.name.clone(), q.dims.clone(), data).expect("reconstruction of a valid quantized tensor")
}

/// Ternary threshold quantization. Returns reconstructed floats.
pub fn quantize_ternary<T: Scalar>(x: &Tensor<T>, p: &QuantParams<T>) -> Result<Tensor<T>> {
    if p.levels != Levels::Ternary {
        return Err(Error::arg("quantize_ternary requires ternary parameters"));
    }
    let two = cst::<T>(2.0);
    let (hi, lo) = (p.scale / two, p.zero / two);
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let up = if v > hi { p.scale } else { T::zero() };
            let down = if v < lo { p.zero } else { T::zero() };
            up + down
        })
        .collect();
    Tensor::new(x.name(), x.dims().to_vec(), data)
}

/// Result of quantizing a whole model: quantized tensors and the tensors
/// kept in full precision, each in manifest order.
#[derive(Debug, Clone, Default)]
pub struct QuantizedModel {
    pub quantized: Vec<QuantizedTensor>,
    pub passthrough: Vec<Tensor>,
}

fn check_model(tensors: &[Tensor], manifest: &ModelManifest) -> Result<()> {
    manifest.validate()?;
    if tensors.len() != manifest.tensors.len() {
        return Err(Error::arg(format!(
            "{} tensors supplied for a manifest of {}",
            tensors.len(),
            manifest.tensors.len()
        )));
    }
    for t in tensors {
        let rec = manifest
            .find(t.name())
            .ok_or_else(|| Error::arg(format!("tensor {:?} missing from manifest", t.name())))?;
        if rec.dims != t.dims() {
            return Err(Error::arg(format!("tensor {:?}: dims disagree with manifest", t.name())));
        }
    }
    Ok(())
}

/// Quantizes every tensor whose role is in the quantized set with its own
/// per-tensor parameters; norms and biases pass through untouched.
pub fn quantize_model(tensors: &[Tensor], manifest: &ModelManifest, cfg: QuantConfig) -> Result<QuantizedModel> {
    if cfg.is_ternary() {
        return Err(Error::arg("ternary quantization produces floats, not codes; use ternarize_model"));
    }
    check_model(tensors, manifest)?;
    let by_name = |name: &str| tensors.iter().find(|t| t.name() == name).expect("checked above");
    let quantized = manifest
        .tensors
        .par_iter()
        .filter(|r| r.role.is_quantized())
        .map(|r| {
            let t = by_name(&r.name);
            let p = find_params(t.data(), cfg)?;
            quantize(t, &p)
        })
        .collect::<Result<Vec<_>>>()?;
    let passthrough =
        manifest.tensors.iter().filter(|r| !r.role.is_quantized()).map(|r| by_name(&r.name).clone()).collect();
    Ok(QuantizedModel { quantized, passthrough })
}

/// Applies the ternary threshold quantizer to the quantized-role tensors,
/// returning a full float model in manifest order.
pub fn ternarize_model(tensors: &[Tensor], manifest: &ModelManifest) -> Result<Vec<Tensor>> {
    check_model(tensors, manifest)?;
    let cfg = QuantConfig { bits: BitWidth::Ternary };
    manifest
        .tensors
        .par_iter()
        .map(|r| {
            let t = tensors.iter().find(|t| t.name() == r.name).expect("checked above");
            if r.role.is_quantized() {
                let p = find_params(t.data(), cfg)?;
                quantize_ternary(t, &p)
            } else {
                Ok(t.clone())
            }
        })
        .collect()
}
