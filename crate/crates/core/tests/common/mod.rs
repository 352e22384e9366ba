#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use tqmz_core::{
    build_reference_model, compress_model, quantize_model, write_container, Dictionary, MCQItem, ModelConfig,
    ModelManifest, ModelTensor, QuantConfig, Role, TensorF32, ESCAPE,
};

/// Byte stream of length `len` drawn from one of several entropy profiles.
pub fn varied_stream(rng: &mut impl Rng, len: usize, profile: usize) -> Vec<u8> {
    match profile % 6 {
        // uniform bytes
        0 => {
            let mut v = vec![0u8; len];
            rng.fill_bytes(&mut v);
            v
        }
        // small alphabet
        1 => {
            let k = rng.random_range(1..=4u8);
            (0..len).map(|_| rng.random_range(0..k)).collect()
        }
        // long runs
        2 => {
            let mut v = Vec::with_capacity(len);
            while v.len() < len {
                let b: u8 = rng.random();
                let run = rng.random_range(1..64).min(len - v.len());
                v.extend(std::iter::repeat_n(b, run));
            }
            v
        }
        // constant
        3 => vec![rng.random(); len],
        // short period
        4 => {
            let period: Vec<u8> = (0..rng.random_range(1..=9)).map(|_| rng.random()).collect();
            period.iter().copied().cycle().take(len).collect()
        }
        // peaked around a centre, like quantized weights
        _ => (0..len)
            .map(|_| {
                let a: i32 = rng.random_range(-12..=12);
                let b: i32 = rng.random_range(-12..=12);
                (128 + a + b) as u8
            })
            .collect(),
    }
}

/// Distinct random sequences, optionally biased towards windows of `seed`.
pub fn random_dictionary(rng: &mut impl Rng, seq_len: usize, size: usize, seed: &[u8]) -> Dictionary {
    let mut seen = std::collections::HashSet::new();
    let mut seqs = Vec::new();
    let windows: Vec<&[u8]> = if seed.len() >= seq_len { seed.windows(seq_len).collect() } else { Vec::new() };
    let mut attempts = 0;
    while seqs.len() < size && attempts < size * 20 {
        attempts += 1;
        let s: Vec<u8> = if !windows.is_empty() && rng.random_bool(0.5) {
            windows[rng.random_range(0..windows.len())].to_vec()
        } else {
            (0..seq_len).map(|_| rng.random()).collect()
        };
        if seen.insert(s.clone()) {
            seqs.push(s);
        }
    }
    seqs.shuffle(rng);
    Dictionary::from_sequences(seq_len, &seqs).unwrap()
}

/// Plain-loop encoder: aligned blocks, escapes for misses and the tail.
pub fn oracle_compress(stream: &[u8], dict: &Dictionary) -> Vec<u16> {
    let l = dict.seq_len();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < stream.len() {
        let end = (pos + l).min(stream.len());
        let block = &stream[pos..end];
        let hit =
            if block.len() == l { (1..=dict.len() as u16).find(|&c| dict.sequence(c) == Some(block)) } else { None };
        match hit {
            Some(c) => out.push(c),
            None => {
                out.push(ESCAPE);
                out.extend(block.iter().map(|&b| b as u16));
            }
        }
        pos = end;
    }
    out
}

/// Overlapping window counts by explicit enumeration.
pub fn oracle_counts(streams: &[&[u8]], l: usize) -> BTreeMap<Vec<u8>, u64> {
    let mut m = BTreeMap::new();
    for s in streams {
        if s.len() < l {
            continue;
        }
        for i in 0..=s.len() - l {
            *m.entry(s[i..i + l].to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Writes a seeded reference model as a TQMZ container and returns its path.
pub fn desk_container(dir: &Path, cfg: &ModelConfig, seed: u64, bits: f32) -> PathBuf {
    let (tensors, manifest) = build_reference_model(cfg, seed).unwrap();
    let q = quantize_model(&tensors, &manifest, QuantConfig::new(bits).unwrap()).unwrap();
    let (dict, out) = compress_model(&q, &manifest, 4, 65534).unwrap();
    let path = dir.join(format!("desk-{seed}-{}l.tqmz", cfg.n_layers));
    write_container(&path, &manifest, &dict, &out).unwrap();
    path
}

pub fn desk_config(n_layers: usize) -> ModelConfig {
    ModelConfig { n_layers, ..ModelConfig::default() }
}

pub fn random_prompt(rng: &mut impl Rng, vocab: usize, max_len: usize) -> Vec<u32> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Weights by name as `f64`, dequantized as `scale * (code - zero)`.
pub fn weights_f64(tensors: &[ModelTensor]) -> HashMap<String, Vec<f64>> {
    tensors
        .iter()
        .map(|t| {
            let v = match t {
                ModelTensor::Float(f) => f.data().iter().map(|&x| x as f64).collect(),
                ModelTensor::Quantized(q) => {
                    let (s, z) = (q.params.scale as f64, q.params.zero as f64);
                    q.codes.iter().map(|&c| s * (c as f64 - z)).collect()
                }
            };
            (t.name().to_string(), v)
        })
        .collect()
}

/// Straightforward double-precision decoder forward pass written directly
/// from the architecture description. Returns one logit row per position.
pub fn oracle_forward(manifest: &ModelManifest, w: &HashMap<String, Vec<f64>>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = manifest.arch.expect("manifest carries the architecture");
    let get = |role: Role, layer: Option<usize>| -> &Vec<f64> { &w[manifest.name_for(role, layer).unwrap()] };
    let d = cfg.d_model;
    let hd = d / cfg.n_heads;
    let kv = cfg.n_kv_heads * hd;
    let eps = cfg.norm_eps as f64;
    let base = cfg.rope_base as f64;

    // y = W x for a row-major (out, in) matrix
    let mv = |m: &[f64], x: &[f64]| -> Vec<f64> {
        m.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    let norm = |x: &[f64], g: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + eps).sqrt();
        x.iter().zip(g).map(|(v, g)| v * r * g).collect()
    };
    let rotate = |v: &mut [f64], pos: usize| {
        for head in v.chunks_mut(hd) {
            for i in 0..hd / 2 {
                let theta = pos as f64 / base.powf(2.0 * i as f64 / hd as f64);
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * theta.cos() - b * theta.sin();
                head[2 * i + 1] = a * theta.sin() + b * theta.cos();
            }
        }
    };

    let emb = get(Role::TokenEmbedding, None);
    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| emb[t as usize * d..][..d].to_vec()).collect();
    for l in 0..cfg.n_layers {
        let l = Some(l);
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| norm(x, get(Role::AttnNorm, l))).collect();
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (pos, h) in hs.iter().enumerate() {
            let mut q = mv(get(Role::AttnQ, l), h);
            let mut k = mv(get(Role::AttnK, l), h);
            rotate(&mut q, pos);
            rotate(&mut k, pos);
            qs.push(q);
            ks.push(k);
            vs.push(mv(get(Role::AttnV, l), h));
        }
        for t in 0..xs.len() {
            let mut concat = vec![0.0; cfg.n_heads * hd];
            for head in 0..cfg.n_heads {
                let kvh = head * cfg.n_kv_heads / cfg.n_heads;
                let q = &qs[t][head * hd..][..hd];
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        q.iter().zip(&ks[s][kvh * hd..][..hd]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    let p = (sc - m).exp() / z;
                    for i in 0..hd {
                        concat[head * hd + i] += p * vs[s][kvh * hd + i];
                    }
                }
            }
            let o = mv(get(Role::AttnOut, l), &concat);
            assert_eq!(kv, ks[t].len());
            for (x, o) in xs[t].iter_mut().zip(o) {
                *x += o;
            }
        }
        for x in xs.iter_mut() {
            let h = norm(x, get(Role::FfnNorm, l));
            let g = mv(get(Role::FfnGate, l), &h);
            let u = mv(get(Role::FfnUp, l), &h);
            let a: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            for (x, y) in x.iter_mut().zip(mv(get(Role::FfnDown, l), &a)) {
                *x += y;
            }
        }
    }
    xs.iter().map(|x| mv(get(Role::Output, None), &norm(x, get(Role::FinalNorm, None)))).collect()
}

/// `ln softmax(row)[i]` computed in double precision.
pub fn oracle_log_prob(row: &[f64], i: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    row[i] - m - row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// A decoder whose blocks are all zero, so every position predicts the byte
/// `favourite` with overwhelming probability and every other byte equally.
pub fn rigged_model(favourite: u8) -> (Vec<TensorF32>, ModelManifest) {
    let cfg = ModelConfig { n_layers: 2, ..ModelConfig::default() };
    let manifest = ModelManifest::for_config(&cfg).unwrap();
    let tensors = manifest
        .tensors
        .iter()
        .map(|r| {
            let n = r.numel();
            let data = match r.role {
                Role::TokenEmbedding | Role::AttnNorm | Role::FfnNorm | Role::FinalNorm => vec![1.0; n],
                Role::Output => {
                    let mut v = vec![0.0; n];
                    let d = r.dims[1];
                    v[favourite as usize * d..][..d].fill(1.0);
                    v
                }
                _ => vec![0.0; n],
            };
            TensorF32::new(r.name.clone(), r.dims.clone(), data).unwrap()
        })
        .collect();
    (tensors, manifest)
}

/// Items whose correct choice is a run of `favourite` and whose distractors
/// each contain at least one other letter.
pub fn rigged_items(rng: &mut impl Rng, n: usize, favourite: u8) -> Vec<MCQItem> {
    let fav = favourite as char;
    (0..n)
        .map(|i| {
            let k = rng.random_range(2..=5);
            let answer = rng.random_range(0..k);
            let choices = (0..k)
                .map(|c| {
                    let len = rng.random_range(1..=6);
                    if c == answer {
                        std::iter::repeat_n(fav, len).collect()
                    } else {
                        let mut s: Vec<char> = (0..len).map(|_| if rng.random_bool(0.5) { fav } else { 'a' }).collect();
                        let at = rng.random_range(0..len);
                        s[at] = (b'a' + rng.random_range(0..20u8)) as char;
                        s.into_iter().collect()
                    }
                })
                .collect();
            MCQItem { question: format!("item {i}: which?"), choices, answer, subject: Some("synthetic".into()) }
        })
        .collect()
}

pub fn to_jsonl(items: &[MCQItem]) -> String {
    items.iter().map(|it| serde_json::to_string(it).unwrap() + "\n").collect()
}
