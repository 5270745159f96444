//! CSV writers. Floats use Rust's shortest round-trip formatting, so equal
//! runs produce equal bytes.

use std::io::Write;

use gatedkv::metrics::{RunMetrics, TrendPoint};
use gatedkv::train::StepMetrics;
use gatedkv::PolicySpec;

use crate::CliResult;

/// Per-step training history; one `eviction_l{i}` column per layer.
pub fn write_history(history: &[StepMetrics], n_layers: usize, w: impl Write) -> CliResult<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["step", "lm_loss", "evict_loss", "mean_retention"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n_layers).map(|l| format!("eviction_l{l}")));
    out.write_record(&header)?;
    for row in history {
        let mut rec = vec![
            row.step.to_string(),
            row.lm_loss.to_string(),
            row.evict_loss.to_string(),
            row.mean_retention.to_string(),
        ];
        rec.extend(row.per_layer_eviction.iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// One evaluated policy.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub config: String,
    pub corpus: String,
    pub policy: PolicySpec,
    /// Retained prefill entries per head the baseline was given; the
    /// prompt length for `none`, the measured mean for `ag`.
    pub budget: usize,
    pub prompt_len: usize,
    pub metrics: RunMetrics,
}

pub const BENCH_HEADER: [&str; 16] = [
    "policy",
    "config",
    "corpus",
    "spec",
    "budget",
    "prompt_len",
    "perplexity",
    "eviction_ratio_mean",
    "retained_per_head",
    "kv_bytes_full",
    "kv_bytes_pruned",
    "flops_ag",
    "flops_mha",
    "flops_combined",
    "scored_tokens",
    "eviction_per_layer_head",
];

/// `[layer][head]` as `h0;h1|h0;h1`.
fn grid(v: &[Vec<f64>]) -> String {
    v.iter()
        .map(|row| row.iter().map(f64::to_string).collect::<Vec<_>>().join(";"))
        .collect::<Vec<_>>()
        .join("|")
}

pub fn write_bench(rows: &[BenchRow], w: impl Write) -> CliResult<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BENCH_HEADER)?;
    for r in rows {
        let m = &r.metrics;
        out.write_record(&[
            r.policy.name().to_string(),
            r.config.clone(),
            r.corpus.clone(),
            serde_json::to_string(&r.policy)?,
            r.budget.to_string(),
            r.prompt_len.to_string(),
            m.perplexity.to_string(),
            m.eviction_ratio_mean.to_string(),
            m.retained_per_head.to_string(),
            m.kv_bytes_full.to_string(),
            m.kv_bytes_pruned.to_string(),
            m.flops_ag.to_string(),
            m.flops_mha.to_string(),
            m.flops_combined.to_string(),
            m.scored_tokens.to_string(),
            grid(&m.eviction_per_layer_head),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trend(points: &[TrendPoint], w: impl Write) -> CliResult<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["retention", "perplexity"])?;
    for p in points {
        out.write_record(&[p.retention.to_string(), p.perplexity.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// `layer,head,eviction` for every head.
pub fn write_eviction(per_layer_head: &[Vec<f64>], w: impl Write) -> CliResult<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "head", "eviction"])?;
    for (l, row) in per_layer_head.iter().enumerate() {
        for (h, v) in row.iter().enumerate() {
            out.write_record(&[l.to_string(), h.to_string(), v.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
