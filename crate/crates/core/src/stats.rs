//! Size, dictionary and distribution statistics of a compressed model.

use std::fmt::Write as _;

use serde::Serialize;

use crate::codec::{count_words, decompress_stream, Dictionary};
use crate::container::{compute_layout, read_raw_tensor, ContainerIndex, ContainerTensor, Layout};
use crate::error::{Error, Result};
use crate::tensor::{ModelManifest, Role};

#[derive(Debug, Clone, Serialize)]
pub struct TensorStats {
    pub name: String,
    pub role: Role,
    pub quantized: bool,
    pub elements: u64,
    /// Size as 32-bit floats.
    pub float_bytes: u64,
    /// Size after quantization: one byte per code, or the floats for pass-through.
    pub quantized_bytes: u64,
    /// Payload size in the container.
    pub stored_bytes: u64,
    pub maxq: Option<u32>,
    pub hit_rate: Option<f64>,
    /// Shannon entropy of the code histogram, bits per code.
    pub entropy_bits: Option<f64>,
    /// Fraction of codes equal to 0.
    pub zero_code_fraction: Option<f64>,
    /// Fraction of codes equal to the zero point (reconstructing to 0.0).
    pub sparsity: Option<f64>,
    /// False when the zero point lies outside `[0, maxq]`.
    pub zero_point_in_range: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Totals {
    pub tensors: usize,
    pub original_bytes: u64,
    /// Codes plus pass-through floats.
    pub quantized_bytes: u64,
    pub code_bytes: u64,
    pub passthrough_bytes: u64,
    pub word_bytes: u64,
    pub dictionary_entries: usize,
    pub layout: Layout,
    /// Whole container: header, dictionary and payloads.
    pub compressed_bytes: u64,
    /// Payloads only, leaving out dictionary and headers.
    pub compressed_payload_bytes: u64,
    pub quantization_ratio: f64,
    pub compression_ratio: f64,
    pub payload_compression_ratio: f64,
    pub hit_rate: f64,
    pub entropy_bits: f64,
    pub zero_code_fraction: f64,
    pub sparsity: f64,
    pub zero_points_out_of_range: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub tensors: Vec<TensorStats>,
    pub totals: Totals,
}

fn entropy(hist: &[u64; 256]) -> f64 {
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compression_stats(
    manifest: &ModelManifest,
    dict: &Dictionary,
    tensors: &[ContainerTensor],
) -> Result<StatsReport> {
    let layout = compute_layout(manifest, dict, tensors)?;
    let mut out = Vec::with_capacity(tensors.len());
    let mut all_hist = [0u64; 256];
    let mut words_total = crate::codec::WordCounts::default();
    let mut zero_points = 0u64;
    let mut out_of_range = 0;

    for rec in &manifest.tensors {
        let t = tensors
            .iter()
            .find(|t| t.name() == rec.name)
            .ok_or_else(|| Error::arg(format!("no tensor for manifest entry {:?}", rec.name)))?;
        let elements = rec.numel() as u64;
        let stats = match t {
            ContainerTensor::Compressed(c) => {
                let codes = decompress_stream(&c.words, dict, c.original_len)?;
                let mut hist = [0u64; 256];
                for &b in &codes {
                    hist[usize::from(b)] += 1;
                }
                for (a, h) in all_hist.iter_mut().zip(hist.iter()) {
                    *a += h;
                }
                let wc = count_words(&c.words, dict.seq_len(), c.original_len);
                words_total.hits += wc.hits;
                words_total.escapes += wc.escapes;
                words_total.raw += wc.raw;
                let zp = c.params.zero;
                let at_zero = if (0.0..=255.0).contains(&zp) { hist[zp as usize] } else { 0 };
                zero_points += at_zero;
                if !c.params.zero_in_code_range() {
                    out_of_range += 1;
                }
                TensorStats {
                    name: rec.name.clone(),
                    role: rec.role,
                    quantized: true,
                    elements,
                    float_bytes: elements * 4,
                    quantized_bytes: elements,
                    stored_bytes: c.word_bytes(),
                    maxq: c.params.maxq(),
                    hit_rate: Some(wc.hit_rate()),
                    entropy_bits: Some(entropy(&hist)),
                    zero_code_fraction: Some(ratio(hist[0], elements)),
                    sparsity: Some(ratio(at_zero, elements)),
                    zero_point_in_range: Some(c.params.zero_in_code_range()),
                }
            }
            ContainerTensor::PassThrough(_) => TensorStats {
                name: rec.name.clone(),
                role: rec.role,
                quantized: false,
                elements,
                float_bytes: elements * 4,
                quantized_bytes: elements * 4,
                stored_bytes: elements * 4,
                maxq: None,
                hit_rate: None,
                entropy_bits: None,
                zero_code_fraction: None,
                sparsity: None,
                zero_point_in_range: None,
            },
        };
        out.push(stats);
    }

    let sum = |f: fn(&TensorStats) -> u64| out.iter().map(f).sum::<u64>();
    let original_bytes = sum(|t| t.float_bytes);
    let quantized_bytes = sum(|t| t.quantized_bytes);
    let code_bytes = sum(|t| if t.quantized { t.quantized_bytes } else { 0 });
    let codes_total: u64 = all_hist.iter().sum();
    let totals = Totals {
        tensors: out.len(),
        original_bytes,
        quantized_bytes,
        code_bytes,
        passthrough_bytes: quantized_bytes - code_bytes,
        word_bytes: layout.word_payload_bytes,
        dictionary_entries: dict.len(),
        layout,
        compressed_bytes: layout.total_bytes(),
        compressed_payload_bytes: layout.payload_bytes(),
        quantization_ratio: ratio(original_bytes, quantized_bytes),
        compression_ratio: ratio(original_bytes, layout.total_bytes()),
        payload_compression_ratio: ratio(original_bytes, layout.payload_bytes()),
        hit_rate: words_total.hit_rate(),
        entropy_bits: entropy(&all_hist),
        zero_code_fraction: ratio(all_hist[0], codes_total),
        sparsity: ratio(zero_points, codes_total),
        zero_points_out_of_range: out_of_range,
    };
    Ok(StatsReport { tensors: out, totals })
}

/// Statistics of an opened container; reads every payload.
pub fn container_stats(index: &ContainerIndex, dict: &Dictionary) -> Result<StatsReport> {
    let tensors = index.entries().iter().map(|e| read_raw_tensor(index, &e.name)).collect::<Result<Vec<_>>>()?;
    compression_stats(index.manifest(), dict, &tensors)
}

fn megabytes(bytes: u64) -> String {
    format!("{:.2} MB", bytes as f64 / 1e6)
}

impl StatsReport {
    /// Model / Size table with original, quantized and compressed rows.
    pub fn size_table(&self, label: &str) -> String {
        let t = &self.totals;
        let rows = [
            (label.to_owned(), megabytes(t.original_bytes)),
            (format!("{label} Quantized"), megabytes(t.quantized_bytes)),
            (format!("{label} Quantized+Compressed"), megabytes(t.compressed_bytes)),
        ];
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}", "Model", "Size");
        for (name, size) in rows {
            let _ = writeln!(s, "{name:<width$}  {size:>12}");
        }
        let _ = writeln!(
            s,
            "compression ratio {:.2}x (quantization alone {:.2}x; payload only {:.2}x)",
            t.compression_ratio, t.quantization_ratio, t.payload_compression_ratio
        );
        s
    }

    /// Size table followed by container accounting and code statistics.
    pub fn render(&self, label: &str) -> String {
        let t = &self.totals;
        let mut s = self.size_table(label);
        let _ = writeln!(
            s,
            "container bytes: header {} + dictionary {} + payload {} = {}",
            t.layout.header_bytes,
            t.layout.dictionary_bytes,
            t.layout.payload_bytes(),
            t.compressed_bytes
        );
        let _ = writeln!(
            s,
            "dictionary entries {}  hit rate {:.4}  code entropy {:.4} bits  zero codes {:.4}  sparsity {:.4}",
            t.dictionary_entries, t.hit_rate, t.entropy_bits, t.zero_code_fraction, t.sparsity
        );
        if t.zero_points_out_of_range > 0 {
            let _ = writeln!(s, "warning: {} tensors have a zero point outside [0, maxq]", t.zero_points_out_of_range);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::compress_tensor;
    use crate::quantizer::{QuantParams, QuantizedTensor};
    use crate::tensor::TensorRecord;

    fn single(codes: Vec<u8>, dict: &Dictionary) -> (ModelManifest, Vec<ContainerTensor>) {
        let n = codes.len();
        let p = QuantParams::affine(1.0f32, 0.0, 255).unwrap();
        let q = QuantizedTensor::new("w", vec![n], codes, p).unwrap();
        let m = ModelManifest::loose(vec![TensorRecord::new("w", vec![n], Role::Weight, None)]);
        (m, vec![ContainerTensor::Compressed(compress_tensor(&q, dict))])
    }

    #[test]
    fn all_hits_halve_the_stream() {
        let dict = Dictionary::from_sequences(4, &[[0u8, 0, 0, 0], [1, 2, 3, 4]]).unwrap();
        let codes: Vec<u8> = [[0u8, 0, 0, 0], [1, 2, 3, 4]].iter().cycle().take(50).flatten().copied().collect();
        let (m, t) = single(codes, &dict);
        let r = compression_stats(&m, &dict, &t).unwrap();
        assert_eq!(r.totals.word_bytes, 200 / 2);
        assert_eq!(r.tensors[0].hit_rate, Some(1.0));
        // half zeros, half spread over four symbols
        assert!((r.totals.entropy_bits - 2.0).abs() < 1e-12);
        assert_eq!(r.totals.zero_code_fraction, 0.5);
        assert_eq!(r.totals.sparsity, 0.5);
    }

    #[test]
    fn no_hits_expand_by_two_and_a_half() {
        let dict = Dictionary::from_sequences(4, &[[9u8, 9, 9, 9]]).unwrap();
        let (m, t) = single(vec![1; 400], &dict);
        let r = compression_stats(&m, &dict, &t).unwrap();
        assert_eq!(r.totals.word_bytes * 2, 400 * 5);
        assert_eq!(r.totals.hit_rate, 0.0);
        assert_eq!(r.totals.entropy_bits, 0.0);
        assert!(r.render("tiny").contains("tiny Quantized+Compressed"));
    }
}
