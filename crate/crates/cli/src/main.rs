use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tqmz_core::eval::accuracy_table;
use tqmz_core::{
    bench_latency, build_reference_model, compress_model, container_stats, evaluate, evaluate_parallel, load_dataset,
    open_container, quantize_model, read_all, read_interchange, read_interchange_any, ternarize_model, write_container,
    write_interchange, write_interchange_any, ByteTokenizer, MCQItem, Mode, ModelConfig, ModelTensor, PromptTemplate,
    QuantConfig, QuantizedModel, TransformerF32, WeightStoreF32, DEFAULT_SEQUENCE_LENGTH, MAX_CODEWORDS,
};

/// Quantize, compress and run transformer weights on the CPU.
#[derive(Parser)]
#[command(name = "tqmz", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize every projection/embedding tensor of a float RTEN file.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        /// 2, 4, 6, 8, or 1.5 for the ternary threshold scheme.
        #[arg(long)]
        bits: f32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a dictionary over a quantized RTEN file and write a TQMZ container.
    Compress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEQUENCE_LENGTH)]
        sequence_length: usize,
        #[arg(long, default_value_t = MAX_CODEWORDS)]
        top_k: usize,
        /// Also write the statistics report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Expand a TQMZ container back into a quantized RTEN file.
    Decompress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print size, dictionary and code statistics of a TQMZ container.
    Stats {
        #[arg(long)]
        input: PathBuf,
        /// Model name for the size table; defaults to the file stem.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Multiple-choice accuracy and per-item latency.
    Eval {
        /// TQMZ container, or an RTEN file in resident mode.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// The first N dataset items become demonstrations; the rest are scored.
        #[arg(long, default_value_t = 0)]
        shots: usize,
        #[arg(long, default_value = "resident")]
        mode: String,
        #[arg(long)]
        label: Option<String>,
        /// Score items concurrently (latencies then include contention).
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare per-item latency of two models (or two modes of one model).
    Bench {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, default_value = "resident")]
        baseline_mode: String,
        /// Defaults to the baseline file.
        #[arg(long)]
        candidate: Option<PathBuf>,
        #[arg(long, default_value = "streaming")]
        candidate_mode: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        shots: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a seeded synthetic model as a float RTEN file.
    GenReference {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        arch: ArchArgs,
    },
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    /// Defaults to the number of attention heads.
    #[arg(long)]
    n_kv_heads: Option<usize>,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 512)]
    max_seq: usize,
    #[arg(long, default_value_t = 10_000.0)]
    rope_base: f32,
    #[arg(long, default_value_t = 1e-5)]
    norm_eps: f32,
}

impl ArchArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads.unwrap_or(self.n_heads),
            d_ff: self.d_ff,
            max_seq: self.max_seq,
            rope_base: self.rope_base,
            norm_eps: self.norm_eps,
        }
    }
}

enum Failure {
    /// Bad flags or arguments; nothing was written.
    Usage(String),
    Runtime(tqmz_core::Error),
}

impl From<tqmz_core::Error> for Failure {
    fn from(e: tqmz_core::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Quantize { input, bits, output } => quantize(&input, bits, &output),
        Command::Compress { input, output, sequence_length, top_k, report } => {
            compress(&input, &output, sequence_length, top_k, report.as_deref())
        }
        Command::Decompress { input, output } => decompress(&input, &output),
        Command::Stats { input, label, report } => stats(&input, label, report.as_deref()),
        Command::Eval { model, dataset, shots, mode, label, parallel, report } => {
            let mode = parse_mode(&mode)?;
            let label = label.unwrap_or_else(|| format!("{} ({mode})", stem(&model)));
            eval(&model, &dataset, shots, mode, &label, parallel, report.as_deref())
        }
        Command::Bench { baseline, baseline_mode, candidate, candidate_mode, dataset, shots, report } => {
            let modes = (parse_mode(&baseline_mode)?, parse_mode(&candidate_mode)?);
            let candidate = candidate.unwrap_or_else(|| baseline.clone());
            bench(&baseline, &candidate, modes, &dataset, shots, report.as_deref())
        }
        Command::GenReference { output, seed, arch } => gen_reference(&output, seed, &arch.config()),
    }
}

fn parse_mode(s: &str) -> Result<Mode, Failure> {
    s.parse().map_err(|_| Failure::Usage(format!("unknown mode {s:?}; expected resident, streaming or pipelined")))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn quantize(input: &Path, bits: f32, output: &Path) -> Outcome {
    let cfg = QuantConfig::new(bits).map_err(|e| Failure::Usage(e.to_string()))?;
    let (tensors, manifest) = read_interchange(input)?;
    if cfg.is_ternary() {
        eprintln!("warning: ternary quantization yields floats, not codes; {} cannot be compressed", output.display());
        let out = ternarize_model(&tensors, &manifest)?;
        write_interchange(&out, &manifest, output)?;
        println!("ternarized {} tensors -> {}", out.len(), output.display());
        return Ok(());
    }
    let model = quantize_model(&tensors, &manifest, cfg)?;
    let mut all: Vec<ModelTensor> = model.quantized.iter().cloned().map(ModelTensor::Quantized).collect();
    all.extend(model.passthrough.iter().cloned().map(ModelTensor::Float));
    write_interchange_any(&all, &manifest, output)?;
    println!(
        "quantized {} tensors to {bits} bits, {} kept as float -> {}",
        model.quantized.len(),
        model.passthrough.len(),
        output.display()
    );
    Ok(())
}

fn compress(input: &Path, output: &Path, seq_len: usize, top_k: usize, report: Option<&Path>) -> Outcome {
    if !(1..=MAX_CODEWORDS).contains(&top_k) {
        return Err(Failure::Usage(format!("--top-k must be in 1..={MAX_CODEWORDS}, got {top_k}")));
    }
    if !(1..=usize::from(u16::MAX)).contains(&seq_len) {
        return Err(Failure::Usage(format!("--sequence-length must be in 1..=65535, got {seq_len}")));
    }
    let (tensors, manifest) = read_interchange_any(input)?;
    let mut model = QuantizedModel::default();
    for t in tensors {
        match t {
            ModelTensor::Quantized(q) => model.quantized.push(q),
            ModelTensor::Float(f) => model.passthrough.push(f),
        }
    }
    if model.quantized.is_empty() {
        return Err(Failure::Runtime(tqmz_core::Error::Argument(format!(
            "{} holds no quantized tensors; run quantize first",
            input.display()
        ))));
    }
    let (dict, out) = compress_model(&model, &manifest, seq_len, top_k)?;
    write_container(output, &manifest, &dict, &out)?;
    let stats = tqmz_core::compression_stats(&manifest, &dict, &out)?;
    print!("{}", stats.size_table(&stem(input)));
    if let Some(path) = report {
        write_json(path, &stats)?;
    }
    Ok(())
}

fn decompress(input: &Path, output: &Path) -> Outcome {
    if fs::metadata(input)?.len() == 0 {
        return Err(Failure::Usage(format!("{} is empty", input.display())));
    }
    let (index, dict) = open_container(input)?;
    if index.entries().is_empty() {
        return Err(Failure::Usage(format!("{} contains no tensors", input.display())));
    }
    let tensors = read_all(&index, &dict)?;
    write_interchange_any(&tensors, index.manifest(), output)?;
    println!("decompressed {} tensors -> {}", tensors.len(), output.display());
    Ok(())
}

fn stats(input: &Path, label: Option<String>, report: Option<&Path>) -> Outcome {
    let (index, dict) = open_container(input)?;
    let stats = container_stats(&index, &dict)?;
    print!("{}", stats.render(&label.unwrap_or_else(|| stem(input))));
    if let Some(path) = report {
        write_json(path, &stats)?;
    }
    Ok(())
}

fn split_shots(dataset: &Path, shots: usize) -> Result<(Vec<MCQItem>, Vec<MCQItem>), Failure> {
    let mut items = load_dataset(dataset)?;
    if shots > items.len() {
        return Err(Failure::Runtime(tqmz_core::Error::Argument(format!(
            "{shots} shots requested but the dataset has {} items",
            items.len()
        ))));
    }
    let rest = items.split_off(shots);
    Ok((items, rest))
}

fn eval(
    model: &Path,
    dataset: &Path,
    shots: usize,
    mode: Mode,
    label: &str,
    parallel: bool,
    report: Option<&Path>,
) -> Outcome {
    let (shots, items) = split_shots(dataset, shots)?;
    let net = TransformerF32::new(WeightStoreF32::open(model, mode)?);
    let template = PromptTemplate::default();
    let result = if parallel {
        evaluate_parallel(&net, label, &items, &shots, &template, &ByteTokenizer)?
    } else {
        evaluate(&net, label, &items, &shots, &template, &ByteTokenizer)?
    };
    print!("{}", accuracy_table(&[&result]));
    if let Some(path) = report {
        write_json(path, &result)?;
    }
    Ok(())
}

fn bench(
    baseline: &Path,
    candidate: &Path,
    modes: (Mode, Mode),
    dataset: &Path,
    shots: usize,
    report: Option<&Path>,
) -> Outcome {
    let (shots, items) = split_shots(dataset, shots)?;
    let a = TransformerF32::new(WeightStoreF32::open(baseline, modes.0)?);
    let b = TransformerF32::new(WeightStoreF32::open(candidate, modes.1)?);
    if a.config() != b.config() {
        return Err(Failure::Runtime(tqmz_core::Error::Argument(
            "baseline and candidate have different architectures".into(),
        )));
    }
    let label_a = format!("{} ({})", stem(baseline), modes.0);
    let label_b = format!("{} ({})", stem(candidate), modes.1);
    let cmp = bench_latency(&a, &label_a, &b, &label_b, &items, &shots, &PromptTemplate::default(), &ByteTokenizer)?;
    print!("{}", cmp.render());
    if let Some(path) = report {
        write_json(path, &cmp)?;
    }
    Ok(())
}

fn gen_reference(output: &Path, seed: u64, cfg: &ModelConfig) -> Outcome {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let (tensors, manifest) = build_reference_model(cfg, seed)?;
    write_interchange(&tensors, &manifest, output)?;
    println!("wrote {} tensors (seed {seed}) -> {}", tensors.len(), output.display());
    Ok(())
}
