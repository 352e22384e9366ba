//! LLaMA-style decoder forward pass.
//!
//! Per block: RMS norm, grouped-query self-attention with rotary position
//! embeddings and a causal mask, residual add, RMS norm, SwiGLU feed
//! forward, residual add. Then a final RMS norm and the output projection.
//! There is no KV cache: every call runs the full sequence.

use std::sync::mpsc;
use std::time::Instant;

use serde::Serialize;

use super::kernels::{dot, log_softmax_at, matmul_t, rms_norm, silu, softmax, Rope};
use super::store::{LayerWeights, Mode, Residency, WeightStore};
use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};
use crate::tensor::ModelConfig;

/// Row-major `rows x vocab` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T> Logits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    /// Dequantized weight bytes materialized for this layer.
    pub weight_bytes: u64,
    pub load_seconds: f64,
    pub compute_seconds: f64,
}

/// Residency accounting of one forward pass.
#[derive(Debug, Clone, Serialize)]
pub struct ForwardReport {
    pub mode: Mode,
    pub tokens: usize,
    pub layers: Vec<LayerReport>,
    /// High-water mark of live decompressed-weight bytes. In resident mode
    /// this is the whole model.
    pub peak_weight_bytes: u64,
    pub total_weight_bytes: u64,
    pub embedding_bytes: u64,
    pub head_bytes: u64,
    pub total_seconds: f64,
}

/// Anything that produces next-token logits for a token sequence.
pub trait LanguageModel: Sync {
    type Scalar: Scalar;

    fn vocab(&self) -> usize;
    fn max_seq(&self) -> usize;
    fn logits(&self, tokens: &[u32]) -> Result<Logits<Self::Scalar>>;
}

pub struct Transformer<T: Scalar> {
    store: WeightStore<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(store: WeightStore<T>) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &WeightStore<T> {
        &self.store
    }

    pub fn config(&self) -> &ModelConfig {
        self.store.config()
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Logits<T>> {
        self.forward_with_report(tokens).map(|(l, _)| l)
    }

    pub fn forward_with_report(&self, tokens: &[u32]) -> Result<(Logits<T>, ForwardReport)> {
        let cfg = *self.config();
        if tokens.is_empty() {
            return Err(Error::arg("empty token sequence"));
        }
        if tokens.len() > cfg.max_seq {
            return Err(Error::arg(format!("sequence of {} tokens exceeds max_seq {}", tokens.len(), cfg.max_seq)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::arg(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
        }
        let start = Instant::now();
        let acct = Residency::new();
        let n = tokens.len();
        let d = cfg.d_model;
        let rope = Rope::new(n, cfg.head_dim(), T::from_storage(cfg.rope_base));

        let mut x = Vec::with_capacity(n * d);
        {
            let emb = self.store.embedding(&acct)?;
            for &t in tokens {
                let t = t as usize;
                x.extend_from_slice(&emb[t * d..(t + 1) * d]);
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        let layer_bytes = self.store.layer_bytes();
        let mut run_block = |l: usize, w: &LayerWeights<T>, load_seconds: f64, x: &mut Vec<T>| {
            let t0 = Instant::now();
            block(&cfg, &rope, x, w, n);
            layers.push(LayerReport {
                layer: l,
                weight_bytes: layer_bytes,
                load_seconds,
                compute_seconds: t0.elapsed().as_secs_f64(),
            });
        };

        if self.store.mode() == Mode::Pipelined {
            std::thread::scope(|s| -> Result<()> {
                // Rendezvous channel: the loader holds at most one layer
                // beyond the one being computed.
                let (tx, rx) = mpsc::sync_channel(0);
                let store = &self.store;
                let acct = &acct;
                s.spawn(move || {
                    for l in 0..cfg.n_layers {
                        let t0 = Instant::now();
                        let w = store.layer(l, acct).map(|w| (w, t0.elapsed().as_secs_f64()));
                        let failed = w.is_err();
                        if tx.send(w).is_err() || failed {
                            break;
                        }
                    }
                });
                for l in 0..cfg.n_layers {
                    let (w, load) = rx.recv().map_err(|_| Error::arg("layer loader stopped early"))??;
                    run_block(l, &w, load, &mut x);
                }
                Ok(())
            })?;
        } else {
            for l in 0..cfg.n_layers {
                let t0 = Instant::now();
                let w = self.store.layer(l, &acct)?;
                run_block(l, &w, t0.elapsed().as_secs_f64(), &mut x);
            }
        }

        let logits = {
            let head = self.store.head(&acct)?;
            let h = rms_norm(&x, &head.final_norm, T::from_storage(cfg.norm_eps));
            matmul_t(&h, &head.output, n, d, cfg.vocab)
        };

        let peak = match self.store.mode() {
            Mode::Resident => self.store.total_weight_bytes(),
            _ => acct.peak(),
        };
        let report = ForwardReport {
            mode: self.store.mode(),
            tokens: n,
            layers,
            peak_weight_bytes: peak,
            total_weight_bytes: self.store.total_weight_bytes(),
            embedding_bytes: self.store.embedding_bytes(),
            head_bytes: self.store.head_bytes(),
            total_seconds: start.elapsed().as_secs_f64(),
        };
        Ok((Logits { rows: n, vocab: cfg.vocab, data: logits }, report))
    }
}

impl<T: Scalar> LanguageModel for Transformer<T> {
    type Scalar = T;

    fn vocab(&self) -> usize {
        self.config().vocab
    }

    fn max_seq(&self) -> usize {
        self.config().max_seq
    }

    fn logits(&self, tokens: &[u32]) -> Result<Logits<T>> {
        self.forward(tokens)
    }
}

fn add_into<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

fn block<T: Scalar>(cfg: &ModelConfig, rope: &Rope<T>, x: &mut [T], w: &LayerWeights<T>, n: usize) {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let q_dim = cfg.n_heads * hd;
    let kv_dim = cfg.kv_dim();
    let eps = T::from_storage(cfg.norm_eps);

    let h = rms_norm(x, &w.attn_norm, eps);
    let mut q = matmul_t(&h, &w.wq, n, d, q_dim);
    let mut k = matmul_t(&h, &w.wk, n, d, kv_dim);
    let v = matmul_t(&h, &w.wv, n, d, kv_dim);
    for t in 0..n {
        for head in q[t * q_dim..(t + 1) * q_dim].chunks_exact_mut(hd) {
            rope.apply(head, t);
        }
        for head in k[t * kv_dim..(t + 1) * kv_dim].chunks_exact_mut(hd) {
            rope.apply(head, t);
        }
    }

    let scale = T::one() / cst::<T>(hd as f64).sqrt();
    let group = cfg.n_heads / cfg.n_kv_heads;
    let mut attn = vec![T::zero(); n * q_dim];
    let mut scores = vec![T::zero(); n];
    for head in 0..cfg.n_heads {
        let kv_off = (head / group) * hd;
        for t in 0..n {
            let qv = &q[t * q_dim + head * hd..][..hd];
            for (s, score) in scores[..=t].iter_mut().enumerate() {
                *score = dot(qv, &k[s * kv_dim + kv_off..][..hd]) * scale;
            }
            softmax(&mut scores[..=t]);
            let out = &mut attn[t * q_dim + head * hd..][..hd];
            for (s, &p) in scores[..=t].iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(&v[s * kv_dim + kv_off..][..hd]) {
                    *o = *o + p * vv;
                }
            }
        }
    }
    add_into(x, &matmul_t(&attn, &w.wo, n, q_dim, d));

    let h = rms_norm(x, &w.ffn_norm, eps);
    let gate = matmul_t(&h, &w.w_gate, n, d, cfg.d_ff);
    let up = matmul_t(&h, &w.w_up, n, d, cfg.d_ff);
    let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    add_into(x, &matmul_t(&act, &w.w_down, n, cfg.d_ff, d));
}

/// Sum of log-probabilities of `continuation` given `prompt`, from a single
/// forward pass over their concatenation.
pub fn score_continuation<M: LanguageModel + ?Sized>(model: &M, prompt: &[u32], continuation: &[u32]) -> Result<f64> {
    if prompt.is_empty() {
        return Err(Error::arg("prompt must contain at least one token"));
    }
    if continuation.is_empty() {
        return Err(Error::arg("continuation must not be empty"));
    }
    let tokens: Vec<u32> = prompt.iter().chain(continuation).copied().collect();
    if tokens.len() > model.max_seq() {
        return Err(Error::arg(format!("{} tokens exceed max_seq {}", tokens.len(), model.max_seq())));
    }
    let logits = model.logits(&tokens)?;
    let mut total = 0.0f64;
    for (j, &tok) in continuation.iter().enumerate() {
        let row = logits.row(prompt.len() + j - 1);
        total += log_softmax_at(row, tok as usize).to_f64_lossless();
    }
    Ok(total)
}
