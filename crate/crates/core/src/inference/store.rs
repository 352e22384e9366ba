//! Weight backends for the forward pass.
//!
//! A resident store holds every dequantized weight for its whole lifetime.
//! A streaming store holds only the container index and dictionary; each
//! forward pass reads, decompresses and dequantizes the embedding, then one
//! transformer layer at a time, then the output head, releasing each before
//! the next is materialized.

use std::fs::File;
use std::io::Read;
use std::ops::Deref;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::Dictionary;
use crate::container::{open_container, read_all, read_tensor, ContainerIndex, TQMZ_MAGIC};
use crate::error::{Error, Result};
use crate::interchange::{read_interchange_any, RTEN_MAGIC};
use crate::quantizer::dequantize_into;
use crate::scalar::Scalar;
use crate::tensor::{ModelConfig, ModelManifest, ModelTensor, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Resident,
    Streaming,
    /// Streaming with the next layer decompressed while the current one computes.
    Pipelined,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resident" => Ok(Mode::Resident),
            "streaming" => Ok(Mode::Streaming),
            "pipelined" => Ok(Mode::Pipelined),
            other => Err(Error::arg(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Resident => "resident",
            Mode::Streaming => "streaming",
            Mode::Pipelined => "pipelined",
        })
    }
}

/// Dequantized weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub ffn_norm: Vec<T>,
    pub w_gate: Vec<T>,
    pub w_up: Vec<T>,
    pub w_down: Vec<T>,
}

impl<T> LayerWeights<T> {
    fn from_parts(mut parts: Vec<Vec<T>>) -> Self {
        debug_assert_eq!(parts.len(), Role::PER_LAYER.len());
        let w_down = parts.pop().unwrap();
        let w_up = parts.pop().unwrap();
        let w_gate = parts.pop().unwrap();
        let ffn_norm = parts.pop().unwrap();
        let wo = parts.pop().unwrap();
        let wv = parts.pop().unwrap();
        let wk = parts.pop().unwrap();
        let wq = parts.pop().unwrap();
        let attn_norm = parts.pop().unwrap();
        Self { attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down }
    }

    fn elements(&self) -> usize {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
        .iter()
        .map(|v| v.len())
        .sum()
    }
}

/// Final norm and output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub final_norm: Vec<T>,
    pub output: Vec<T>,
}

/// Live decompressed-weight bytes and their high-water mark.
#[derive(Debug, Default)]
pub struct Residency {
    current: AtomicU64,
    peak: AtomicU64,
}

impl Residency {
    pub fn new() -> Self {
        Self::default()
    }

    fn acquire(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn release(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn current(&self) -> u64 {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }
}

/// Streamed weights, accounted as live until dropped.
pub struct Held<'a, W> {
    value: W,
    bytes: u64,
    acct: &'a Residency,
}

impl<W> Drop for Held<'_, W> {
    fn drop(&mut self) {
        self.acct.release(self.bytes);
    }
}

/// Weights borrowed from a resident store or held from a streamed read.
pub enum WeightRef<'a, W> {
    Resident(&'a W),
    Streamed(Held<'a, W>),
}

impl<W> Deref for WeightRef<'_, W> {
    type Target = W;

    fn deref(&self) -> &W {
        match self {
            WeightRef::Resident(w) => w,
            WeightRef::Streamed(h) => &h.value,
        }
    }
}

/// Tensor names for every architecture slot, resolved from the manifest.
#[derive(Debug, Clone)]
struct Slots {
    embedding: String,
    layers: Vec<[String; 9]>,
    final_norm: String,
    output: String,
}

impl Slots {
    fn resolve(manifest: &ModelManifest) -> Result<(ModelConfig, Self)> {
        manifest.validate()?;
        let cfg = manifest
            .arch
            .ok_or_else(|| Error::arg("inference requires a manifest with architecture hyperparameters"))?;
        let name = |role, layer| {
            manifest
                .name_for(role, layer)
                .map(str::to_owned)
                .ok_or_else(|| Error::arg(format!("manifest lacks {role:?} for layer {layer:?}")))
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let names: Vec<String> = Role::PER_LAYER.iter().map(|&r| name(r, Some(l))).collect::<Result<_>>()?;
            layers.push(names.try_into().expect("nine per-layer roles"));
        }
        let slots = Self {
            embedding: name(Role::TokenEmbedding, None)?,
            layers,
            final_norm: name(Role::FinalNorm, None)?,
            output: name(Role::Output, None)?,
        };
        Ok((cfg, slots))
    }
}

enum Backing<T> {
    Resident { embedding: Vec<T>, layers: Vec<LayerWeights<T>>, head: HeadWeights<T> },
    Streaming { index: Arc<ContainerIndex>, dict: Arc<Dictionary>, pipelined: bool },
}

pub struct WeightStore<T: Scalar> {
    cfg: ModelConfig,
    slots: Slots,
    backing: Backing<T>,
}

/// Converts a stored tensor into scalars, dequantizing codes.
pub fn materialize<T: Scalar>(t: &ModelTensor) -> Vec<T> {
    match t {
        ModelTensor::Quantized(q) => {
            let mut out = Vec::with_capacity(q.codes.len());
            dequantize_into(&q.codes, &q.params.cast::<T>(), &mut out);
            out
        }
        ModelTensor::Float(f) => f.data().iter().map(|&v| T::from_storage(v)).collect(),
    }
}

impl<T: Scalar> WeightStore<T> {
    /// Resident store over in-memory tensors (floats or codes).
    pub fn from_tensors(manifest: &ModelManifest, tensors: &[ModelTensor]) -> Result<Self> {
        let (cfg, slots) = Slots::resolve(manifest)?;
        let get = |name: &str| -> Result<Vec<T>> {
            let t = tensors
                .iter()
                .find(|t| t.name() == name)
                .ok_or_else(|| Error::arg(format!("tensor {name:?} not supplied")))?;
            let want = manifest.find(name).map(|r| r.dims.as_slice());
            if want != Some(t.dims()) {
                return Err(Error::arg(format!("tensor {name:?}: dims disagree with manifest")));
            }
            Ok(materialize(t))
        };
        let layers = slots
            .layers
            .iter()
            .map(|names| Ok(LayerWeights::from_parts(names.iter().map(|n| get(n)).collect::<Result<_>>()?)))
            .collect::<Result<_>>()?;
        let backing = Backing::Resident {
            embedding: get(&slots.embedding)?,
            layers,
            head: HeadWeights { final_norm: get(&slots.final_norm)?, output: get(&slots.output)? },
        };
        Ok(Self { cfg, slots, backing })
    }

    /// Resident store with every container tensor decompressed up front.
    pub fn resident_from_container(index: &ContainerIndex, dict: &Dictionary) -> Result<Self> {
        let tensors = read_all(index, dict)?;
        Self::from_tensors(index.manifest(), &tensors)
    }

    pub fn streaming(index: Arc<ContainerIndex>, dict: Arc<Dictionary>, pipelined: bool) -> Result<Self> {
        let (cfg, slots) = Slots::resolve(index.manifest())?;
        Ok(Self { cfg, slots, backing: Backing::Streaming { index, dict, pipelined } })
    }

    /// Opens a TQMZ container in any mode, or an RTEN file in resident mode.
    pub fn open(path: impl AsRef<Path>, mode: Mode) -> Result<Self> {
        let path = path.as_ref();
        let mut magic = [0u8; 4];
        File::open(path)?
            .read_exact(&mut magic)
            .map_err(|_| Error::format(format!("{} is too short to be a model file", path.display())))?;
        if magic == TQMZ_MAGIC {
            let (index, dict) = open_container(path)?;
            match mode {
                Mode::Resident => Self::resident_from_container(&index, &dict),
                Mode::Streaming | Mode::Pipelined => {
                    Self::streaming(Arc::new(index), Arc::new(dict), mode == Mode::Pipelined)
                }
            }
        } else if magic == RTEN_MAGIC {
            if mode != Mode::Resident {
                return Err(Error::arg(format!("{mode} mode needs a TQMZ container; RTEN files load resident")));
            }
            let (tensors, manifest) = read_interchange_any(path)?;
            Self::from_tensors(&manifest, &tensors)
        } else {
            Err(Error::format(format!("{} is neither a TQMZ container nor an RTEN file", path.display())))
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        match self.backing {
            Backing::Resident { .. } => Mode::Resident,
            Backing::Streaming { pipelined: false, .. } => Mode::Streaming,
            Backing::Streaming { pipelined: true, .. } => Mode::Pipelined,
        }
    }

    fn bytes(elements: usize) -> u64 {
        (elements * std::mem::size_of::<T>()) as u64
    }

    pub fn embedding_bytes(&self) -> u64 {
        Self::bytes(self.cfg.vocab * self.cfg.d_model)
    }

    pub fn head_bytes(&self) -> u64 {
        Self::bytes(self.cfg.vocab * self.cfg.d_model + self.cfg.d_model)
    }

    pub fn layer_bytes(&self) -> u64 {
        let c = &self.cfg;
        let per_layer: usize =
            Role::PER_LAYER.iter().map(|&r| c.shape_of(r).expect("architecture role").iter().product::<usize>()).sum();
        Self::bytes(per_layer)
    }

    /// Bytes of every dequantized weight, i.e. what a resident store holds.
    pub fn total_weight_bytes(&self) -> u64 {
        self.embedding_bytes() + self.layer_bytes() * self.cfg.n_layers as u64 + self.head_bytes()
    }

    fn fetch(&self, name: &str) -> Result<Vec<T>> {
        let Backing::Streaming { index, dict, .. } = &self.backing else { unreachable!("fetch on a resident store") };
        Ok(materialize(&read_tensor(index, dict, name)?))
    }

    fn hold<'a, W>(value: W, elements: usize, acct: &'a Residency) -> WeightRef<'a, W> {
        let bytes = Self::bytes(elements);
        acct.acquire(bytes);
        WeightRef::Streamed(Held { value, bytes, acct })
    }

    pub(crate) fn embedding<'a>(&'a self, acct: &'a Residency) -> Result<WeightRef<'a, Vec<T>>> {
        match &self.backing {
            Backing::Resident { embedding, .. } => Ok(WeightRef::Resident(embedding)),
            Backing::Streaming { .. } => {
                let w = self.fetch(&self.slots.embedding)?;
                let n = w.len();
                Ok(Self::hold(w, n, acct))
            }
        }
    }

    pub(crate) fn layer<'a>(&'a self, l: usize, acct: &'a Residency) -> Result<WeightRef<'a, LayerWeights<T>>> {
        match &self.backing {
            Backing::Resident { layers, .. } => Ok(WeightRef::Resident(&layers[l])),
            Backing::Streaming { .. } => {
                let parts = self.slots.layers[l].iter().map(|n| self.fetch(n)).collect::<Result<Vec<_>>>()?;
                let w = LayerWeights::from_parts(parts);
                let n = w.elements();
                Ok(Self::hold(w, n, acct))
            }
        }
    }

    pub(crate) fn head<'a>(&'a self, acct: &'a Residency) -> Result<WeightRef<'a, HeadWeights<T>>> {
        match &self.backing {
            Backing::Resident { head, .. } => Ok(WeightRef::Resident(head)),
            Backing::Streaming { .. } => {
                let w = HeadWeights {
                    final_norm: self.fetch(&self.slots.final_norm)?,
                    output: self.fetch(&self.slots.output)?,
                };
                let n = w.final_norm.len() + w.output.len();
                Ok(Self::hold(w, n, acct))
            }
        }
    }
}
