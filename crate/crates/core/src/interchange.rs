//! RTEN raw tensor interchange format.
//!
//! ```text
//! "RTEN"  u8 version=1  u32 manifest_len  manifest JSON (UTF-8)
//! payload of every tensor in manifest order, no padding
//! ```
//!
//! A payload is little-endian `f32` values. A record carrying `codes`
//! parameters instead holds one `u8` code per element; this is how
//! quantized models are stored between `quantize` and `compress`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Seek, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantizer::{QuantParams, QuantizedTensor};
use crate::tensor::{ModelManifest, ModelTensor, Tensor};
use crate::wire::{expect_magic, f32s_from_le, write_f32s, WireReader};

pub const RTEN_MAGIC: [u8; 4] = *b"RTEN";
pub const RTEN_VERSION: u8 = 1;

/// Reads a float-only interchange file.
pub fn read_interchange(path: impl AsRef<Path>) -> Result<(Vec<Tensor>, ModelManifest)> {
    let (tensors, manifest) = read_interchange_any(path)?;
    let floats = tensors
        .into_iter()
        .map(|t| match t {
            ModelTensor::Float(t) => Ok(t),
            ModelTensor::Quantized(q) => {
                Err(Error::format(format!("tensor {:?} holds quantized codes, expected floats", q.name)))
            }
        })
        .collect::<Result<_>>()?;
    Ok((floats, manifest))
}

/// Reads an interchange file whose tensors may be floats or codes.
pub fn read_interchange_any(path: impl AsRef<Path>) -> Result<(Vec<ModelTensor>, ModelManifest)> {
    decode(BufReader::new(File::open(path)?))
}

pub fn decode_interchange(bytes: &[u8]) -> Result<(Vec<ModelTensor>, ModelManifest)> {
    decode(Cursor::new(bytes))
}

fn decode<R: Read + Seek>(src: R) -> Result<(Vec<ModelTensor>, ModelManifest)> {
    let mut r = WireReader::new(src)?;
    expect_magic(&mut r, &RTEN_MAGIC, "RTEN")?;
    let version = r.u8().map_err(|_| Error::format("missing RTEN version"))?;
    if version != RTEN_VERSION {
        return Err(Error::format(format!("unsupported RTEN version {version}")));
    }
    let manifest_len = r.u32()?;
    let text = r.bytes(u64::from(manifest_len))?;
    let manifest: ModelManifest = serde_json::from_slice(&text)?;
    manifest.validate().map_err(|e| Error::format(format!("invalid manifest: {e}")))?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        let raw = r.bytes(rec.payload_bytes() as u64)?;
        let t = match rec.codes {
            Some(stored) => {
                let params = QuantParams::from_stored(stored)?;
                ModelTensor::Quantized(QuantizedTensor::new(rec.name.clone(), rec.dims.clone(), raw, params)?)
            }
            None => ModelTensor::Float(Tensor::new(rec.name.clone(), rec.dims.clone(), f32s_from_le(&raw))?),
        };
        tensors.push(t);
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes after last payload", r.remaining())));
    }
    Ok((tensors, manifest))
}

/// Writes float tensors. `manifest` fixes the payload order.
pub fn write_interchange(tensors: &[Tensor], manifest: &ModelManifest, path: impl AsRef<Path>) -> Result<()> {
    let entries: Vec<ModelTensor> = tensors.iter().cloned().map(ModelTensor::Float).collect();
    write_interchange_any(&entries, manifest, path)
}

/// Writes a mix of float and coded tensors. Code parameters in the written
/// manifest are taken from the tensors themselves.
pub fn write_interchange_any(tensors: &[ModelTensor], manifest: &ModelManifest, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_interchange(tensors, manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn encode_interchange(tensors: &[ModelTensor], manifest: &ModelManifest) -> Result<Vec<u8>> {
    let (manifest, ordered) = bind(tensors, manifest)?;
    let text = serde_json::to_vec(&manifest)?;
    let manifest_len = u32::try_from(text.len()).map_err(|_| Error::arg("manifest exceeds 4 GiB"))?;

    let payload: usize = manifest.tensors.iter().map(|r| r.payload_bytes()).sum();
    let mut out = Vec::with_capacity(9 + text.len() + payload);
    out.extend_from_slice(&RTEN_MAGIC);
    out.push(RTEN_VERSION);
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&text);
    for t in ordered {
        match t {
            ModelTensor::Float(t) => write_f32s(&mut out, t.data())?,
            ModelTensor::Quantized(q) => out.extend_from_slice(&q.codes),
        }
    }
    Ok(out)
}

/// Matches tensors to manifest records, returning the manifest with code
/// parameters filled in and the tensors in manifest order.
fn bind<'a>(tensors: &'a [ModelTensor], manifest: &ModelManifest) -> Result<(ModelManifest, Vec<&'a ModelTensor>)> {
    let mut manifest = manifest.clone();
    for rec in &mut manifest.tensors {
        rec.codes = None;
    }
    manifest.validate()?;
    let mut seen = std::collections::HashSet::new();
    for t in tensors {
        if !seen.insert(t.name()) {
            return Err(Error::arg(format!("duplicate tensor name {:?}", t.name())));
        }
    }
    if tensors.len() != manifest.tensors.len() {
        return Err(Error::arg(format!(
            "{} tensors supplied for a manifest of {}",
            tensors.len(),
            manifest.tensors.len()
        )));
    }
    let mut ordered = Vec::with_capacity(tensors.len());
    for rec in &mut manifest.tensors {
        let t = tensors
            .iter()
            .find(|t| t.name() == rec.name)
            .ok_or_else(|| Error::arg(format!("no tensor supplied for manifest entry {:?}", rec.name)))?;
        if t.dims() != rec.dims.as_slice() {
            return Err(Error::arg(format!(
                "tensor {:?}: dims {:?} disagree with manifest {:?}",
                rec.name,
                t.dims(),
                rec.dims
            )));
        }
        if let ModelTensor::Quantized(q) = t {
            rec.codes = Some(q.params.to_stored()?);
        }
        ordered.push(t);
    }
    Ok((manifest, ordered))
}
