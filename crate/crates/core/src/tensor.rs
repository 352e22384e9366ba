//! Tensors, architecture hyperparameters and the model manifest.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::QuantizedTensor;
use crate::scalar::Scalar;

/// A named, row-major, dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    name: String,
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking the shape, name and finiteness invariants.
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::arg("tensor name must not be empty"));
        }
        check_dims(&name, &dims)?;
        let numel = numel(&dims);
        if data.len() != numel {
            return Err(Error::arg(format!(
                "tensor {name:?}: {} values for dims {dims:?} ({numel} expected)",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("tensor {name:?}: non-finite value at index {i}")));
        }
        Ok(Self { name, dims, data })
    }

    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Result<Self> {
        let n = numel(&dims);
        Self::new(name, dims, vec![T::zero(); n])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}

/// A model tensor as stored on disk: either raw floats or quantized codes.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelTensor {
    Float(Tensor),
    Quantized(QuantizedTensor),
}

impl ModelTensor {
    pub fn name(&self) -> &str {
        match self {
            ModelTensor::Float(t) => t.name(),
            ModelTensor::Quantized(q) => &q.name,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            ModelTensor::Float(t) => t.dims(),
            ModelTensor::Quantized(q) => &q.dims,
        }
    }
}

pub(crate) fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

pub(crate) fn check_dims(name: &str, dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::arg(format!(
            "tensor {name:?}: dims must be a non-empty list of positive integers, got {dims:?}"
        )));
    }
    Ok(())
}

/// What a tensor is used for inside the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TokenEmbedding,
    AttnNorm,
    AttnQ,
    AttnK,
    AttnV,
    AttnOut,
    FfnNorm,
    FfnGate,
    FfnUp,
    FfnDown,
    FinalNorm,
    Output,
    /// A weight matrix outside the known architecture roles.
    Weight,
    /// A bias or other vector outside the known architecture roles.
    Bias,
}

impl Role {
    pub const PER_LAYER: [Role; 9] = [
        Role::AttnNorm,
        Role::AttnQ,
        Role::AttnK,
        Role::AttnV,
        Role::AttnOut,
        Role::FfnNorm,
        Role::FfnGate,
        Role::FfnUp,
        Role::FfnDown,
    ];

    pub fn is_per_layer(self) -> bool {
        Self::PER_LAYER.contains(&self)
    }

    /// Projection and embedding matrices are quantized; norms and biases
    /// stay in 32-bit float.
    pub fn is_quantized(self) -> bool {
        !matches!(self, Role::AttnNorm | Role::FfnNorm | Role::FinalNorm | Role::Bias)
    }
}

/// Architecture hyperparameters of a LLaMA-style decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
}

fn default_norm_eps() -> f32 {
    1e-5
}

impl Default for ModelConfig {
    /// The desk-scale reference configuration.
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 4,
            d_ff: 128,
            max_seq: 512,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::arg(format!("{field} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::arg(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::arg(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::arg(format!("head dim {} must be even for rotary embeddings", self.head_dim())));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::arg("rope_base must be a positive finite number"));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::arg("norm_eps must be a positive finite number"));
        }
        Ok(())
    }

    /// Canonical shape of the tensor serving `role`.
    pub fn shape_of(&self, role: Role) -> Option<Vec<usize>> {
        let d = self.d_model;
        let q = self.n_heads * self.head_dim();
        let kv = self.kv_dim();
        Some(match role {
            Role::TokenEmbedding | Role::Output => vec![self.vocab, d],
            Role::AttnNorm | Role::FfnNorm | Role::FinalNorm => vec![d],
            Role::AttnQ => vec![q, d],
            Role::AttnK | Role::AttnV => vec![kv, d],
            Role::AttnOut => vec![d, q],
            Role::FfnGate | Role::FfnUp => vec![self.d_ff, d],
            Role::FfnDown => vec![d, self.d_ff],
            Role::Weight | Role::Bias => return None,
        })
    }

    /// Number of tensors in the canonical manifest.
    pub fn tensor_count(&self) -> usize {
        3 + Role::PER_LAYER.len() * self.n_layers
    }
}

/// Quantization parameters as persisted next to a code payload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoredParams {
    pub scale: f32,
    pub zero: f32,
    pub maxq: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Present when the payload holds one 8-bit code per element instead of
    /// 32-bit floats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes: Option<StoredParams>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, role: Role, layer: Option<usize>) -> Self {
        Self { name: name.into(), dims, role, layer, codes: None }
    }

    pub fn numel(&self) -> usize {
        numel(&self.dims)
    }

    /// Bytes occupied by this tensor's payload in an interchange file.
    pub fn payload_bytes(&self) -> usize {
        if self.codes.is_some() {
            self.numel()
        } else {
            self.numel() * 4
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ModelConfig>,
    pub tensors: Vec<TensorRecord>,
}

impl ModelManifest {
    /// A manifest with no architecture: any set of uniquely named tensors.
    pub fn loose(tensors: Vec<TensorRecord>) -> Self {
        Self { arch: None, tensors }
    }

    /// The canonical tensor list for a LLaMA-style decoder.
    ///
    /// Order: token embedding, then per layer (attention norm, q, k, v, o,
    /// ffn norm, gate, up, down), then final norm and output projection.
    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = Vec::with_capacity(cfg.tensor_count());
        let rec = |name: String, role: Role, layer: Option<usize>| {
            TensorRecord::new(name, cfg.shape_of(role).expect("architecture role"), role, layer)
        };
        tensors.push(rec("tok_embeddings.weight".into(), Role::TokenEmbedding, None));
        for l in 0..cfg.n_layers {
            for role in Role::PER_LAYER {
                tensors.push(rec(layer_tensor_name(l, role), role, Some(l)));
            }
        }
        tensors.push(rec("norm.weight".into(), Role::FinalNorm, None));
        tensors.push(rec("output.weight".into(), Role::Output, None));
        Ok(Self { arch: Some(*cfg), tensors })
    }

    pub fn find(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|r| r.name == name)
    }

    /// Name of the tensor filling `role` (at `layer` for per-layer roles).
    pub fn name_for(&self, role: Role, layer: Option<usize>) -> Option<&str> {
        self.tensors.iter().find(|r| r.role == role && r.layer == layer).map(|r| r.name.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.tensors {
            if r.name.is_empty() {
                return Err(Error::arg("tensor name must not be empty"));
            }
            if !seen.insert(r.name.as_str()) {
                return Err(Error::arg(format!("duplicate tensor name {:?}", r.name)));
            }
            check_dims(&r.name, &r.dims)?;
            if r.role.is_per_layer() != r.layer.is_some() {
                return Err(Error::arg(format!(
                    "tensor {:?}: layer index must be present exactly for per-layer roles (role {:?}, layer {:?})",
                    r.name, r.role, r.layer
                )));
            }
            if let Some(p) = r.codes {
                if !matches!(p.maxq, 3 | 15 | 63 | 255) {
                    return Err(Error::arg(format!("tensor {:?}: unsupported maxq {}", r.name, p.maxq)));
                }
                if !(p.scale.is_finite() && p.scale > 0.0 && p.zero.is_finite()) {
                    return Err(Error::arg(format!("tensor {:?}: invalid scale/zero", r.name)));
                }
            }
        }
        let Some(cfg) = &self.arch else { return Ok(()) };
        cfg.validate()?;

        let mut slots: HashMap<(Role, Option<usize>), usize> = HashMap::new();
        for r in &self.tensors {
            if let Some(l) = r.layer {
                if l >= cfg.n_layers {
                    return Err(Error::arg(format!(
                        "tensor {:?}: layer {l} out of range for {} layers",
                        r.name, cfg.n_layers
                    )));
                }
            }
            if let Some(shape) = cfg.shape_of(r.role) {
                if shape != r.dims {
                    return Err(Error::arg(format!(
                        "tensor {:?}: dims {:?} do not match {:?} expected for {:?}",
                        r.name, r.dims, shape, r.role
                    )));
                }
                *slots.entry((r.role, r.layer)).or_default() += 1;
            }
        }
        let mut required = vec![(Role::TokenEmbedding, None), (Role::FinalNorm, None), (Role::Output, None)];
        for l in 0..cfg.n_layers {
            required.extend(Role::PER_LAYER.iter().map(|&role| (role, Some(l))));
        }
        for key in required {
            match slots.get(&key).copied().unwrap_or(0) {
                1 => {}
                n => {
                    return Err(Error::arg(format!(
                        "role {:?} (layer {:?}) filled {n} times, expected exactly once",
                        key.0, key.1
                    )))
                }
            }
        }
        Ok(())
    }
}

pub fn layer_tensor_name(layer: usize, role: Role) -> String {
    let suffix = match role {
        Role::AttnNorm => "attention_norm",
        Role::AttnQ => "attention.wq",
        Role::AttnK => "attention.wk",
        Role::AttnV => "attention.wv",
        Role::AttnOut => "attention.wo",
        Role::FfnNorm => "ffn_norm",
        Role::FfnGate => "feed_forward.w1",
        Role::FfnUp => "feed_forward.w3",
        Role::FfnDown => "feed_forward.w2",
        other => panic!("{other:?} is not a per-layer role"),
    };
    format!("layers.{layer}.{suffix}.weight")
}
