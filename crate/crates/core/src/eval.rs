//! Multiple-choice evaluation: each choice is scored by the summed
//! log-likelihood of its tokens after the prompt, and the best-scoring
//! choice is the prediction.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{score_continuation, LanguageModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCQItem {
    pub question: String,
    pub choices: Vec<String>,
    pub answer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl MCQItem {
    pub fn validate(&self) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(Error::data(format!("{} choices; at least 2 required", self.choices.len())));
        }
        if self.answer >= self.choices.len() {
            return Err(Error::data(format!("answer {} out of range for {} choices", self.answer, self.choices.len())));
        }
        Ok(())
    }
}

/// Reads a JSONL dataset: one item object per line. Blank lines are ignored;
/// errors carry the 1-based line number.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<MCQItem>> {
    parse_dataset(&fs::read_to_string(path)?)
}

pub fn parse_dataset(text: &str) -> Result<Vec<MCQItem>> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Dataset { line: i + 1, message };
        let item: MCQItem = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        item.validate().map_err(|e| fail(e.to_string()))?;
        items.push(item);
    }
    Ok(items)
}

/// Text layout of a prompt.
///
/// Each demonstration renders as
/// `{question_prefix}{question}\n{answer_prefix} {correct choice}{separator}`
/// and the target as `{question_prefix}{question}\n{answer_prefix}`. A
/// choice is scored as the continuation `" {choice}"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub question_prefix: String,
    pub answer_prefix: String,
    pub separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self { question_prefix: "Question: ".into(), answer_prefix: "Answer:".into(), separator: "\n\n".into() }
    }
}

impl PromptTemplate {
    pub fn continuation(&self, choice: &str) -> String {
        format!(" {choice}")
    }

    fn block(&self, item: &MCQItem) -> String {
        format!("{}{}\n{}", self.question_prefix, item.question, self.answer_prefix)
    }
}

pub fn build_prompt(item: &MCQItem, shots: &[MCQItem], template: &PromptTemplate) -> String {
    let mut out = String::new();
    for shot in shots {
        out.push_str(&template.block(shot));
        out.push_str(&template.continuation(&shot.choices[shot.answer]));
        out.push_str(&template.separator);
    }
    out.push_str(&template.block(item));
    out
}

pub trait Tokenizer: Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
}

/// Maps each UTF-8 byte to the token id of the same value (vocabulary 256).
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub chosen: usize,
    pub answer: usize,
    pub correct: bool,
    pub scores: Vec<f64>,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub mean_latency_s: f64,
    pub items: Vec<ItemRecord>,
}

impl EvalReport {
    fn from_records(label: &str, items: Vec<ItemRecord>) -> Self {
        let n_items = items.len();
        let n_correct = items.iter().filter(|r| r.correct).count();
        let mean_latency_s = items.iter().map(|r| r.latency_s).sum::<f64>() / n_items as f64;
        Self {
            label: label.to_owned(),
            n_items,
            n_correct,
            accuracy: n_correct as f64 / n_items as f64,
            mean_latency_s,
            items,
        }
    }

    /// A copy with every latency field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.mean_latency_s = 0.0;
        for it in &mut r.items {
            it.latency_s = 0.0;
        }
        r
    }
}

/// Aligned `Model | Accuracy (%) | Latency (s)` table.
pub fn accuracy_table(reports: &[&EvalReport]) -> String {
    let rows: Vec<[String; 3]> = reports
        .iter()
        .map(|r| [r.label.clone(), format!("{:.2}", r.accuracy * 100.0), format!("{:.4}", r.mean_latency_s)])
        .collect();
    table(["Model", "Accuracy (%)", "Latency (s)"], &rows)
}

fn table(header: [&str; 3], rows: &[[String; 3]]) -> String {
    let mut width = header.map(str::len);
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: [&str; 3]| {
        format!(
            "{:<w0$}  {:>w1$}  {:>w2$}\n",
            cells[0],
            cells[1],
            cells[2],
            w0 = width[0],
            w1 = width[1],
            w2 = width[2]
        )
    };
    let mut out = line(header);
    out.push_str(&format!("{}\n", "-".repeat(width.iter().sum::<usize>() + 4)));
    for row in rows {
        out.push_str(&line([&row[0], &row[1], &row[2]]));
    }
    out
}

/// Index of the highest score; the lowest index wins ties.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Prompt and continuation ids fitted to `max_seq` by dropping the oldest
/// prompt tokens. At least one prompt token is always kept.
fn fit(mut prompt: Vec<u32>, continuation: &[u32], max_seq: usize) -> Result<Vec<u32>> {
    if continuation.len() + 1 > max_seq {
        return Err(Error::arg(format!(
            "continuation of {} tokens leaves no room for a prompt within max_seq {max_seq}",
            continuation.len()
        )));
    }
    if prompt.len() + continuation.len() > max_seq {
        prompt.drain(..prompt.len() + continuation.len() - max_seq);
    }
    Ok(prompt)
}

fn score_item<M: LanguageModel + ?Sized>(
    model: &M,
    index: usize,
    item: &MCQItem,
    shots: &[MCQItem],
    template: &PromptTemplate,
    tokenizer: &dyn Tokenizer,
) -> Result<ItemRecord> {
    item.validate()?;
    let shots: Vec<MCQItem> = shots.iter().filter(|s| *s != item).cloned().collect();
    let prompt = tokenizer.encode(&build_prompt(item, &shots, template));
    let continuations: Vec<Vec<u32>> =
        item.choices.iter().map(|c| tokenizer.encode(&template.continuation(c))).collect();
    let start = Instant::now();
    let scores = continuations
        .iter()
        .map(|c| score_continuation(model, &fit(prompt.clone(), c, model.max_seq())?, c))
        .collect::<Result<Vec<_>>>()?;
    let latency_s = start.elapsed().as_secs_f64();
    let chosen = argmax_lowest(&scores);
    Ok(ItemRecord { index, chosen, answer: item.answer, correct: chosen == item.answer, scores, latency_s })
}

/// Scores every item sequentially, timing each item's scoring.
pub fn evaluate<M: LanguageModel + ?Sized>(
    model: &M,
    label: &str,
    items: &[MCQItem],
    shots: &[MCQItem],
    template: &PromptTemplate,
    tokenizer: &dyn Tokenizer,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::arg("no items to evaluate"));
    }
    let records = items
        .iter()
        .enumerate()
        .map(|(i, it)| score_item(model, i, it, shots, template, tokenizer))
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_records(label, records))
}

/// Like [`evaluate`] but scores items concurrently. Accuracy and scores are
/// identical to the sequential run; latencies include contention.
pub fn evaluate_parallel<M: LanguageModel + ?Sized>(
    model: &M,
    label: &str,
    items: &[MCQItem],
    shots: &[MCQItem],
    template: &PromptTemplate,
    tokenizer: &dyn Tokenizer,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::arg("no items to evaluate"));
    }
    let records = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| score_item(model, i, it, shots, template, tokenizer))
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_records(label, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub label: String,
    pub accuracy: f64,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
    pub per_item_s: Vec<f64>,
}

impl LatencySummary {
    fn from_report(r: &EvalReport) -> Self {
        let per_item_s: Vec<f64> = r.items.iter().map(|i| i.latency_s).collect();
        let mut sorted = per_item_s.clone();
        sorted.sort_by(f64::total_cmp);
        Self {
            label: r.label.clone(),
            accuracy: r.accuracy,
            mean_s: r.mean_latency_s,
            p50_s: percentile(&sorted, 50.0),
            p95_s: percentile(&sorted, 95.0),
            per_item_s,
        }
    }
}

/// Nearest-rank percentile of ascending `sorted`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyComparison {
    pub a: LatencySummary,
    pub b: LatencySummary,
    /// `b.mean_s / a.mean_s`.
    pub ratio: f64,
}

impl LatencyComparison {
    pub fn render(&self) -> String {
        let row =
            |s: &LatencySummary| [s.label.clone(), format!("{:.2}", s.accuracy * 100.0), format!("{:.4}", s.mean_s)];
        let mut out = table(["Model", "Accuracy (%)", "Latency (s)"], &[row(&self.a), row(&self.b)]);
        for s in [&self.a, &self.b] {
            out.push_str(&format!("{}: p50 {:.4} s, p95 {:.4} s\n", s.label, s.p50_s, s.p95_s));
        }
        out.push_str(&format!("Latency ratio ({} / {}): {:.3}\n", self.b.label, self.a.label, self.ratio));
        out
    }
}

/// Runs the same items through two models sequentially and compares
/// per-item latency.
#[allow(clippy::too_many_arguments)]
pub fn bench_latency<A: LanguageModel + ?Sized, B: LanguageModel + ?Sized>(
    a: &A,
    label_a: &str,
    b: &B,
    label_b: &str,
    items: &[MCQItem],
    shots: &[MCQItem],
    template: &PromptTemplate,
    tokenizer: &dyn Tokenizer,
) -> Result<LatencyComparison> {
    let ra = evaluate(a, label_a, items, shots, template, tokenizer)?;
    let rb = evaluate(b, label_b, items, shots, template, tokenizer)?;
    let (a, b) = (LatencySummary::from_report(&ra), LatencySummary::from_report(&rb));
    let ratio = b.mean_s / a.mean_s;
    Ok(LatencyComparison { a, b, ratio })
}
