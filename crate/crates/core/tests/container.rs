mod common;

use std::fs;

use tqmz_core::container::TQMZ_VERSION;
use tqmz_core::tensor::TensorRecord;
use tqmz_core::{
    build_reference_model, compress_model, compression_stats, container_stats, open_container, quantize_model,
    read_raw_tensor, read_tensor, write_container, ContainerTensor, Dictionary, Error, ModelManifest, ModelTensor,
    QuantConfig, QuantParams, QuantizedTensor, Role, TensorF32,
};

use common::desk_config;

/// Minimal independent reader of the container byte layout.
struct Parsed {
    seq_len: u16,
    dictionary: Vec<u8>,
    manifest: serde_json::Value,
    records: Vec<ParsedRecord>,
}

struct ParsedRecord {
    name: String,
    dims: Vec<u64>,
    quantized: bool,
    scale: f32,
    zero: f32,
    maxq: u32,
    original_len: u64,
    payload: Vec<u8>,
}

fn parse(bytes: &[u8]) -> Parsed {
    let mut at = 0usize;
    let mut take = |n: usize| {
        let s = &bytes[at..at + n];
        at += n;
        s
    };
    assert_eq!(take(4), b"TQMZ");
    assert_eq!(take(1)[0], 1);
    let seq_len = u16::from_le_bytes(take(2).try_into().unwrap());
    let n = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
    let dictionary = take(n * seq_len as usize).to_vec();
    let mlen = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
    let manifest = serde_json::from_slice(take(mlen)).unwrap();
    let count = u32::from_le_bytes(take(4).try_into().unwrap());
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2).try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len).to_vec()).unwrap();
        let ndim = take(1)[0] as usize;
        let dims = (0..ndim).map(|_| u64::from_le_bytes(take(8).try_into().unwrap())).collect();
        let quantized = take(1)[0] == 1;
        let scale = f32::from_le_bytes(take(4).try_into().unwrap());
        let zero = f32::from_le_bytes(take(4).try_into().unwrap());
        let maxq = u32::from_le_bytes(take(4).try_into().unwrap());
        let original_len = u64::from_le_bytes(take(8).try_into().unwrap());
        let word_count = u64::from_le_bytes(take(8).try_into().unwrap());
        let len = if quantized { word_count as usize * 2 } else { original_len as usize };
        let payload = take(len).to_vec();
        records.push(ParsedRecord { name, dims, quantized, scale, zero, maxq, original_len, payload });
    }
    assert_eq!(at, bytes.len(), "trailing bytes");
    Parsed { seq_len, dictionary, manifest, records }
}

#[test]
fn desk_model_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(2);
    let (tensors, manifest) = build_reference_model(&cfg, 3).unwrap();
    let q = quantize_model(&tensors, &manifest, QuantConfig::new(8.0).unwrap()).unwrap();
    let (dict, out) = compress_model(&q, &manifest, 4, 65534).unwrap();
    let path = dir.path().join("m.tqmz");
    let layout = write_container(&path, &manifest, &dict, &out).unwrap();
    let file_len = fs::metadata(&path).unwrap().len();
    assert_eq!(layout.total_bytes(), file_len);

    let (index, dict2) = open_container(&path).unwrap();
    assert_eq!(dict2, dict);
    assert_eq!(index.layout(), layout);
    assert_eq!(index.payload_bytes_read(), 0, "opening reads no payloads");
    assert_eq!(index.manifest(), &manifest);
    assert_eq!(index.entries().len(), cfg.tensor_count());

    for rec in &manifest.tensors {
        match read_tensor(&index, &dict2, &rec.name).unwrap() {
            ModelTensor::Quantized(t) => {
                let want = q.quantized.iter().find(|x| x.name == rec.name).unwrap();
                assert_eq!(&t, want);
                assert_eq!(t.params.scale.to_bits(), want.params.scale.to_bits());
            }
            ModelTensor::Float(t) => {
                let want = q.passthrough.iter().find(|x| x.name() == rec.name).unwrap();
                let bits = |t: &TensorF32| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&t), bits(want));
            }
        }
    }

    let stats = container_stats(&index, &dict2).unwrap();
    assert_eq!(stats.totals.compressed_bytes, file_len);
    let l = stats.totals.layout;
    assert_eq!(l.header_bytes + l.dictionary_bytes + l.payload_bytes(), file_len);
    let in_memory = compression_stats(&manifest, &dict, &out).unwrap();
    assert_eq!(in_memory.totals.compressed_bytes, file_len);
}

#[test]
fn bytes_follow_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = QuantParams::affine(0.25f32, 8.0, 15).unwrap();
    let codes: Vec<u8> = (0..18).map(|i| (i % 3) as u8).collect();
    let w = QuantizedTensor::new("w", vec![3, 6], codes.clone(), p).unwrap();
    let b = TensorF32::new("b", vec![2], vec![1.5, -0.0]).unwrap();
    let manifest = ModelManifest::loose(vec![
        TensorRecord::new("w", vec![3, 6], Role::Weight, None),
        TensorRecord::new("b", vec![2], Role::Bias, None),
    ]);
    let dict = Dictionary::from_sequences(4, &[[0u8, 1, 2, 0], [1, 2, 0, 1]]).unwrap();
    let c = tqmz_core::compress_tensor(&w, &dict);
    let tensors = vec![ContainerTensor::Compressed(c.clone()), ContainerTensor::PassThrough(b.clone())];
    let path = dir.path().join("t.tqmz");
    write_container(&path, &manifest, &dict, &tensors).unwrap();

    let parsed = parse(&fs::read(&path).unwrap());
    assert_eq!(parsed.seq_len, 4);
    assert_eq!(parsed.dictionary, vec![0, 1, 2, 0, 1, 2, 0, 1]);
    assert_eq!(parsed.manifest["tensors"][0]["name"], "w");
    assert_eq!(parsed.records.len(), 2);

    let r = &parsed.records[0];
    assert_eq!((r.name.as_str(), r.dims.as_slice(), r.quantized), ("w", &[3u64, 6][..], true));
    assert_eq!((r.scale, r.zero, r.maxq, r.original_len), (0.25, 8.0, 15, 18));
    let words: Vec<u16> = r.payload.chunks(2).map(|w| u16::from_le_bytes([w[0], w[1]])).collect();
    assert_eq!(words, c.words);

    let r = &parsed.records[1];
    assert_eq!((r.name.as_str(), r.quantized, r.maxq, r.original_len), ("b", false, 0, 8));
    assert_eq!(r.payload, [1.5f32.to_le_bytes(), (-0.0f32).to_le_bytes()].concat());
}

#[test]
fn reads_touch_only_the_requested_payload() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::desk_container(dir.path(), &desk_config(2), 1, 8.0);
    let (index, _) = open_container(&path).unwrap();
    for e in index.entries() {
        index.reset_payload_bytes_read();
        read_raw_tensor(&index, &e.name).unwrap();
        assert_eq!(index.payload_bytes_read(), e.payload_len(), "{}", e.name);
    }
    assert!(matches!(read_raw_tensor(&index, "nope"), Err(Error::UnknownTensor(n)) if n == "nope"));
}

#[test]
fn concurrent_reads_agree_with_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::desk_container(dir.path(), &desk_config(2), 2, 4.0);
    let (index, dict) = open_container(&path).unwrap();
    let names: Vec<String> = index.entries().iter().map(|e| e.name.clone()).collect();
    let sequential: Vec<_> = names.iter().map(|n| read_tensor(&index, &dict, n).unwrap()).collect();
    let parallel: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = names.iter().map(|n| s.spawn(|| read_tensor(&index, &dict, n).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(sequential, parallel);
}

#[test]
fn damaged_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::desk_container(dir.path(), &desk_config(1), 4, 8.0);
    let bytes = fs::read(&path).unwrap();
    let bad = dir.path().join("bad.tqmz");

    // every truncation point in the header region, then a sample beyond it
    let header_end = 11 + 4 * 65534usize.min(bytes.len());
    let cuts = (0..bytes.len().min(header_end)).step_by(7).chain((0..bytes.len()).step_by(997));
    for cut in cuts {
        fs::write(&bad, &bytes[..cut]).unwrap();
        let outcome = open_container(&bad).and_then(|(index, dict)| {
            index.entries().iter().try_for_each(|e| read_tensor(&index, &dict, &e.name).map(|_| ()))
        });
        assert!(outcome.is_err(), "truncated at {cut} of {}", bytes.len());
    }

    let mut v2 = bytes.clone();
    v2[4] = TQMZ_VERSION + 1;
    fs::write(&bad, &v2).unwrap();
    match open_container(&bad) {
        Err(Error::Format(msg)) => assert!(msg.contains('2'), "{msg}"),
        other => panic!("{other:?}"),
    }

    let mut magic = bytes.clone();
    magic[0] = b'X';
    fs::write(&bad, &magic).unwrap();
    assert!(matches!(open_container(&bad), Err(Error::Format(_))));

    let mut extra = bytes;
    extra.push(0);
    fs::write(&bad, &extra).unwrap();
    assert!(matches!(open_container(&bad), Err(Error::Format(_))));
}

#[test]
fn inconsistent_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.tqmz");
    let p = QuantParams::affine(1.0f32, 0.0, 255).unwrap();
    let w = QuantizedTensor::new("w", vec![4], vec![1, 2, 3, 4], p).unwrap();
    let manifest = ModelManifest::loose(vec![TensorRecord::new("w", vec![4], Role::Weight, None)]);
    let dict = Dictionary::from_sequences(4, &[[1u8, 2, 3, 4]]).unwrap();
    let c = ContainerTensor::Compressed(tqmz_core::compress_tensor(&w, &dict));

    let empty = Dictionary::from_sequences::<[u8; 4]>(4, &[]).unwrap();
    assert!(matches!(write_container(&path, &manifest, &empty, std::slice::from_ref(&c)), Err(Error::Argument(_))));
    assert!(write_container(&path, &manifest, &dict, &[]).is_err());
    assert!(write_container(&path, &manifest, &dict, &[c.clone(), c.clone()]).is_err());
    let other = ModelManifest::loose(vec![TensorRecord::new("w", vec![2, 2], Role::Weight, None)]);
    assert!(write_container(&path, &other, &dict, &[c]).is_err());
}
