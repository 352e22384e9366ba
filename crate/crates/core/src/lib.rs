//! Low-bit weight quantization, static dictionary compression, a
//! single-file container, and a CPU transformer that decompresses its
//! weights one layer at a time.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); file
//! formats always store `f32`. Concrete aliases for both precisions are
//! exported at the crate root.

pub mod codec;
pub mod container;
pub mod error;
pub mod eval;
pub mod inference;
pub mod interchange;
pub mod quantizer;
pub mod scalar;
pub mod stats;
pub mod tensor;
mod wire;

pub use codec::{
    build_dictionary, compress_stream, compress_tensor, count_sequences, decompress_stream, decompress_tensor,
    CompressedTensor, CompressedWords, Dictionary, SequenceCounts, DEFAULT_SEQUENCE_LENGTH, ESCAPE, MAX_CODEWORDS,
};
pub use container::{
    compress_model, open_container, read_all, read_raw_tensor, read_tensor, write_container, ContainerIndex,
    ContainerTensor, Layout,
};
pub use error::{Error, Result};
pub use eval::{
    bench_latency, build_prompt, evaluate, evaluate_parallel, load_dataset, ByteTokenizer, EvalReport, MCQItem,
    PromptTemplate, Tokenizer,
};
pub use inference::{
    build_reference_model, score_continuation, ForwardReport, LanguageModel, Logits, Mode, Transformer, WeightStore,
};
pub use interchange::{read_interchange, read_interchange_any, write_interchange, write_interchange_any};
pub use quantizer::{
    dequantize, find_params, quantize, quantize_model, quantize_ternary, ternarize_model, BitWidth, QuantConfig,
    QuantParams, QuantizedModel, QuantizedTensor,
};
pub use scalar::Scalar;
pub use stats::{compression_stats, container_stats, StatsReport};
pub use tensor::{ModelConfig, ModelManifest, ModelTensor, Role, Tensor, TensorRecord};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type QuantParamsF32 = QuantParams<f32>;
pub type QuantParamsF64 = QuantParams<f64>;
pub type QuantizedTensorF32 = QuantizedTensor<f32>;
pub type QuantizedTensorF64 = QuantizedTensor<f64>;
pub type WeightStoreF32 = WeightStore<f32>;
pub type WeightStoreF64 = WeightStore<f64>;
pub type TransformerF32 = Transformer<f32>;
pub type TransformerF64 = Transformer<f64>;
