//! TQMZ single-file container.
//!
//! Version 1 layout, all integers and floats little-endian:
//!
//! ```text
//! "TQMZ"  u8 version=1  u16 L  u32 N (<= 65534)
//! N * L bytes            dictionary sequences, codeword = 1-based position
//! u32 manifest_len       manifest JSON (UTF-8)
//! u32 T                  tensor count, then T times:
//!   u16 name_len, name   u8 ndim, ndim * u64 dims
//!   u8 quantized         f32 scale  f32 zero  u32 maxq (0 if pass-through)
//!   u64 original_len     bytes of the code stream, or of the raw f32 payload
//!   u64 word_count       0 if pass-through
//!   payload              word_count * u16, or original_len raw bytes
//! ```
//!
//! Records follow manifest order. Opening a container reads only the
//! header, dictionary and record table; payloads are read on demand.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::Serialize;

use crate::codec::{
    build_dictionary, compress_tensor, count_sequences, decompress_stream, CompressedTensor, Dictionary, MAX_CODEWORDS,
};
use crate::error::{Error, Result};
use crate::quantizer::{QuantParams, QuantizedModel, QuantizedTensor};
use crate::tensor::{ModelManifest, ModelTensor, Role, Tensor};
use crate::wire::{expect_magic, f32s_from_le, write_f32s, WireReader};

pub const TQMZ_MAGIC: [u8; 4] = *b"TQMZ";
pub const TQMZ_VERSION: u8 = 1;

/// Magic, version, sequence length and dictionary count.
const PREAMBLE_BYTES: u64 = 4 + 1 + 2 + 4;

/// A tensor as written into a container.
#[derive(Debug, Clone, PartialEq)]
pub enum ContainerTensor {
    Compressed(CompressedTensor),
    PassThrough(Tensor),
}

impl ContainerTensor {
    pub fn name(&self) -> &str {
        match self {
            ContainerTensor::Compressed(c) => &c.name,
            ContainerTensor::PassThrough(t) => t.name(),
        }
    }

    fn dims(&self) -> &[usize] {
        match self {
            ContainerTensor::Compressed(c) => &c.dims,
            ContainerTensor::PassThrough(t) => t.dims(),
        }
    }
}

/// Byte accounting of a container file. The four parts sum to the file size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Layout {
    /// Preamble, manifest, tensor count and every record header.
    pub header_bytes: u64,
    pub dictionary_bytes: u64,
    /// Compressed word streams of quantized tensors.
    pub word_payload_bytes: u64,
    /// Raw floats of pass-through tensors.
    pub float_payload_bytes: u64,
}

impl Layout {
    pub fn payload_bytes(&self) -> u64 {
        self.word_payload_bytes + self.float_payload_bytes
    }

    pub fn total_bytes(&self) -> u64 {
        self.header_bytes + self.dictionary_bytes + self.payload_bytes()
    }
}

fn record_header_bytes(name: &str, ndim: usize) -> u64 {
    (2 + name.len() + 1 + 8 * ndim + 1 + 4 + 4 + 4 + 8 + 8) as u64
}

/// Index entry for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: Role,
    pub layer: Option<usize>,
    /// Affine parameters when the payload is a compressed code stream.
    pub params: Option<QuantParams>,
    pub original_len: u64,
    pub word_count: u64,
    pub payload_offset: u64,
}

impl TensorEntry {
    pub fn is_quantized(&self) -> bool {
        self.params.is_some()
    }

    pub fn payload_len(&self) -> u64 {
        if self.is_quantized() {
            self.word_count * 2
        } else {
            self.original_len
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Everything in a container except tensor payloads.
#[derive(Debug)]
pub struct ContainerIndex {
    path: PathBuf,
    manifest: ModelManifest,
    entries: Vec<TensorEntry>,
    layout: Layout,
    bytes_read: AtomicU64,
}

impl ContainerIndex {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Payload bytes fetched from disk since open (or the last reset).
    pub fn payload_bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    pub fn reset_payload_bytes_read(&self) {
        self.bytes_read.store(0, Ordering::Relaxed);
    }
}

/// Byte layout the container for these inputs would have.
pub fn compute_layout(manifest: &ModelManifest, dict: &Dictionary, tensors: &[ContainerTensor]) -> Result<Layout> {
    let mut manifest = manifest.clone();
    for r in &mut manifest.tensors {
        r.codes = None;
    }
    let text = serde_json::to_vec(&manifest)?;
    let mut layout = Layout {
        header_bytes: PREAMBLE_BYTES + 4 + text.len() as u64 + 4,
        dictionary_bytes: dict.byte_len() as u64,
        ..Layout::default()
    };
    for t in bind(tensors, &manifest)? {
        layout.header_bytes += record_header_bytes(t.name(), t.dims().len());
        match t {
            ContainerTensor::Compressed(c) => layout.word_payload_bytes += c.word_bytes(),
            ContainerTensor::PassThrough(f) => layout.float_payload_bytes += f.numel() as u64 * 4,
        }
    }
    Ok(layout)
}

/// Writes a container and returns its byte layout.
pub fn write_container(
    path: impl AsRef<Path>,
    manifest: &ModelManifest,
    dict: &Dictionary,
    tensors: &[ContainerTensor],
) -> Result<Layout> {
    if dict.is_empty() {
        return Err(Error::arg("container requires a non-empty dictionary"));
    }
    let seq_len = u16::try_from(dict.seq_len()).map_err(|_| Error::arg("sequence length exceeds u16"))?;
    let mut manifest = manifest.clone();
    for r in &mut manifest.tensors {
        r.codes = None;
    }
    manifest.validate()?;
    let ordered = bind(tensors, &manifest)?;
    let text = serde_json::to_vec(&manifest)?;
    let manifest_len = u32::try_from(text.len()).map_err(|_| Error::arg("manifest exceeds 4 GiB"))?;
    let tensor_count = u32::try_from(ordered.len()).map_err(|_| Error::arg("too many tensors"))?;

    let mut layout = Layout {
        header_bytes: PREAMBLE_BYTES + 4 + text.len() as u64 + 4,
        dictionary_bytes: dict.byte_len() as u64,
        ..Layout::default()
    };

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TQMZ_MAGIC)?;
    w.write_all(&[TQMZ_VERSION])?;
    w.write_all(&seq_len.to_le_bytes())?;
    w.write_all(&(dict.len() as u32).to_le_bytes())?;
    w.write_all(dict.as_bytes())?;
    w.write_all(&manifest_len.to_le_bytes())?;
    w.write_all(&text)?;
    w.write_all(&tensor_count.to_le_bytes())?;

    for t in ordered {
        let name = t.name();
        let dims = t.dims();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dims.len() as u8])?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        layout.header_bytes += record_header_bytes(name, dims.len());
        match t {
            ContainerTensor::Compressed(c) => {
                let p = c.params.to_stored()?;
                w.write_all(&[1])?;
                w.write_all(&p.scale.to_le_bytes())?;
                w.write_all(&p.zero.to_le_bytes())?;
                w.write_all(&p.maxq.to_le_bytes())?;
                w.write_all(&c.original_len.to_le_bytes())?;
                w.write_all(&(c.words.len() as u64).to_le_bytes())?;
                let mut buf = Vec::with_capacity(c.words.len() * 2);
                for word in &c.words {
                    buf.extend_from_slice(&word.to_le_bytes());
                }
                w.write_all(&buf)?;
                layout.word_payload_bytes += buf.len() as u64;
            }
            ContainerTensor::PassThrough(f) => {
                let bytes = f.numel() as u64 * 4;
                w.write_all(&[0])?;
                w.write_all(&0f32.to_le_bytes())?;
                w.write_all(&0f32.to_le_bytes())?;
                w.write_all(&0u32.to_le_bytes())?;
                w.write_all(&bytes.to_le_bytes())?;
                w.write_all(&0u64.to_le_bytes())?;
                write_f32s(&mut w, f.data())?;
                layout.float_payload_bytes += bytes;
            }
        }
    }
    w.flush()?;
    debug_assert_eq!(Some(layout), compute_layout(&manifest, dict, tensors).ok());
    Ok(layout)
}

fn bind<'a>(tensors: &'a [ContainerTensor], manifest: &ModelManifest) -> Result<Vec<&'a ContainerTensor>> {
    if tensors.len() != manifest.tensors.len() {
        return Err(Error::arg(format!(
            "{} tensors supplied for a manifest of {}",
            tensors.len(),
            manifest.tensors.len()
        )));
    }
    let mut ordered = Vec::with_capacity(tensors.len());
    for rec in &manifest.tensors {
        let mut matching = tensors.iter().filter(|t| t.name() == rec.name);
        let t = matching
            .next()
            .ok_or_else(|| Error::arg(format!("no tensor supplied for manifest entry {:?}", rec.name)))?;
        if matching.next().is_some() {
            return Err(Error::arg(format!("tensor {:?} supplied twice", rec.name)));
        }
        if t.dims() != rec.dims.as_slice() {
            return Err(Error::arg(format!("tensor {:?}: dims disagree with manifest", rec.name)));
        }
        if rec.name.len() > usize::from(u16::MAX) || rec.dims.len() > usize::from(u8::MAX) {
            return Err(Error::arg(format!("tensor {:?}: name or rank too large for the format", rec.name)));
        }
        if let ContainerTensor::Compressed(c) = t {
            if c.original_len != rec.numel() as u64 {
                return Err(Error::arg(format!(
                    "tensor {:?}: code stream of {} bytes for {} elements",
                    rec.name,
                    c.original_len,
                    rec.numel()
                )));
            }
        }
        ordered.push(t);
    }
    Ok(ordered)
}

/// Reads the header, dictionary and record table of a container.
pub fn open_container(path: impl AsRef<Path>) -> Result<(ContainerIndex, Dictionary)> {
    let path = path.as_ref();
    let mut r = WireReader::new(BufReader::new(File::open(path)?))?;
    let (index, dict) = read_index(&mut r, path).map_err(|e| match e {
        Error::Truncated { offset, needed, available } => Error::format(format!(
            "container truncated at offset {offset}: needed {needed} bytes, {available} available"
        )),
        Error::Json(e) => Error::format(format!("manifest JSON: {e}")),
        other => other,
    })?;
    Ok((index, dict))
}

fn read_index<R: Read + Seek>(r: &mut WireReader<R>, path: &Path) -> Result<(ContainerIndex, Dictionary)> {
    expect_magic(r, &TQMZ_MAGIC, "TQMZ")?;
    let version = r.u8()?;
    if version != TQMZ_VERSION {
        return Err(Error::format(format!("unsupported TQMZ version {version} (expected {TQMZ_VERSION})")));
    }
    let seq_len = usize::from(r.u16()?);
    let dict_count = r.u32()? as usize;
    if seq_len == 0 {
        return Err(Error::format("sequence length 0"));
    }
    if dict_count > MAX_CODEWORDS {
        return Err(Error::format(format!("dictionary count {dict_count} exceeds {MAX_CODEWORDS}")));
    }
    let dict_bytes = r.bytes((dict_count * seq_len) as u64)?;
    let dict = Dictionary::from_bytes(seq_len, &dict_bytes).map_err(|e| Error::format(format!("dictionary: {e}")))?;

    let manifest_len = r.u32()?;
    let text = r.bytes(u64::from(manifest_len))?;
    let manifest: ModelManifest = serde_json::from_slice(&text)?;
    manifest.validate().map_err(|e| Error::format(format!("invalid manifest: {e}")))?;

    let tensor_count = r.u32()? as usize;
    if tensor_count != manifest.tensors.len() {
        return Err(Error::format(format!(
            "{tensor_count} tensor records for a manifest of {}",
            manifest.tensors.len()
        )));
    }
    let mut layout = Layout {
        header_bytes: PREAMBLE_BYTES + 4 + u64::from(manifest_len) + 4,
        dictionary_bytes: dict_bytes.len() as u64,
        ..Layout::default()
    };
    let mut entries = Vec::with_capacity(tensor_count);
    for rec in &manifest.tensors {
        let name_len = r.u16()?;
        let name =
            String::from_utf8(r.bytes(u64::from(name_len))?).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        if name != rec.name {
            return Err(Error::format(format!("record {name:?} out of manifest order (expected {:?})", rec.name)));
        }
        let ndim = usize::from(r.u8()?);
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(usize::try_from(r.u64()?).map_err(|_| Error::format("dimension overflows usize"))?);
        }
        if dims != rec.dims {
            return Err(Error::format(format!("record {name:?}: dims {dims:?} differ from manifest {:?}", rec.dims)));
        }
        let flag = r.u8()?;
        let scale = r.f32()?;
        let zero = r.f32()?;
        let maxq = r.u32()?;
        let original_len = r.u64()?;
        let word_count = r.u64()?;
        let numel = rec.numel() as u64;
        let params = match flag {
            1 => {
                let p = QuantParams::affine(scale, zero, maxq)
                    .map_err(|e| Error::format(format!("record {name:?}: {e}")))?;
                if original_len != numel {
                    return Err(Error::format(format!(
                        "record {name:?}: code length {original_len} for {numel} elements"
                    )));
                }
                Some(p)
            }
            0 => {
                if maxq != 0 || word_count != 0 || original_len != numel * 4 {
                    return Err(Error::format(format!("record {name:?}: inconsistent pass-through header")));
                }
                None
            }
            other => return Err(Error::format(format!("record {name:?}: quantized flag {other}"))),
        };
        layout.header_bytes += record_header_bytes(&name, ndim);
        let entry = TensorEntry {
            name,
            dims,
            role: rec.role,
            layer: rec.layer,
            params,
            original_len,
            word_count,
            payload_offset: r.pos(),
        };
        let payload = entry.payload_len();
        r.skip(payload)?;
        if entry.is_quantized() {
            layout.word_payload_bytes += payload;
        } else {
            layout.float_payload_bytes += payload;
        }
        entries.push(entry);
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes after last record", r.remaining())));
    }
    debug_assert_eq!(layout.total_bytes(), r.len());
    let index = ContainerIndex { path: path.to_owned(), manifest, entries, layout, bytes_read: AtomicU64::new(0) };
    Ok((index, dict))
}

fn read_payload(index: &ContainerIndex, entry: &TensorEntry) -> Result<Vec<u8>> {
    let mut f = File::open(&index.path)?;
    f.seek(SeekFrom::Start(entry.payload_offset))?;
    let mut buf = vec![0u8; entry.payload_len() as usize];
    f.read_exact(&mut buf).map_err(|e| Error::format(format!("payload of {:?} unreadable: {e}", entry.name)))?;
    index.bytes_read.fetch_add(buf.len() as u64, Ordering::Relaxed);
    Ok(buf)
}

/// Reads one tensor's payload without expanding the word stream.
pub fn read_raw_tensor(index: &ContainerIndex, name: &str) -> Result<ContainerTensor> {
    let entry = index.entry(name).ok_or_else(|| Error::UnknownTensor(name.to_owned()))?;
    let bytes = read_payload(index, entry)?;
    Ok(match entry.params {
        Some(params) => ContainerTensor::Compressed(CompressedTensor {
            name: entry.name.clone(),
            dims: entry.dims.clone(),
            original_len: entry.original_len,
            words: bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
            params,
        }),
        None => {
            ContainerTensor::PassThrough(Tensor::new(entry.name.clone(), entry.dims.clone(), f32s_from_le(&bytes))?)
        }
    })
}

/// Reads and, for quantized tensors, decompresses one tensor.
pub fn read_tensor(index: &ContainerIndex, dict: &Dictionary, name: &str) -> Result<ModelTensor> {
    Ok(match read_raw_tensor(index, name)? {
        ContainerTensor::Compressed(c) => {
            let codes = decompress_stream(&c.words, dict, c.original_len)
                .map_err(|e| Error::corrupt(format!("tensor {name:?}: {e}")))?;
            ModelTensor::Quantized(
                QuantizedTensor::new(c.name, c.dims, codes, c.params)
                    .map_err(|e| Error::corrupt(format!("tensor {name:?}: {e}")))?,
            )
        }
        ContainerTensor::PassThrough(t) => ModelTensor::Float(t),
    })
}

/// Reads every tensor in manifest order.
pub fn read_all(index: &ContainerIndex, dict: &Dictionary) -> Result<Vec<ModelTensor>> {
    index.entries.par_iter().map(|e| read_tensor(index, dict, &e.name)).collect()
}

/// Builds the model-wide dictionary over every quantized code stream and
/// compresses each tensor with it. Output follows `manifest` order.
pub fn compress_model(
    model: &QuantizedModel,
    manifest: &ModelManifest,
    seq_len: usize,
    top_k: usize,
) -> Result<(Dictionary, Vec<ContainerTensor>)> {
    let streams: Vec<&[u8]> = model.quantized.iter().map(|q| q.codes.as_slice()).collect();
    let counts = count_sequences(&streams, seq_len)?;
    let dict = build_dictionary(&counts, top_k)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let compressed: Vec<CompressedTensor> = model.quantized.par_iter().map(|q| compress_tensor(q, &dict)).collect();
    for rec in &manifest.tensors {
        if let Some(c) = compressed.iter().find(|c| c.name == rec.name) {
            out.push(ContainerTensor::Compressed(c.clone()));
        } else if let Some(t) = model.passthrough.iter().find(|t| t.name() == rec.name) {
            out.push(ContainerTensor::PassThrough(t.clone()));
        } else {
            return Err(Error::arg(format!("manifest entry {:?} missing from the quantized model", rec.name)));
        }
    }
    Ok((dict, out))
}
