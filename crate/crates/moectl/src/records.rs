//! Plain-text input and output records: ballots, loss curves, metric and
//! routing records.

use std::fmt::Write as _;
use std::path::Path;

use moe_edit_core::diffusion::AttentionHeatmap;
use moe_edit_core::eval::{EvalReport, RankingBallot};
use moe_edit_core::moe::RoutingReport;
use moe_edit_core::training::LossRecord;

use crate::error::{CliError, CliResult};

/// One ballot per line: `participant sample method1,method2,...`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_ballots(text: &str) -> CliResult<Vec<RankingBallot>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [participant, sample, ranking] = fields[..] else {
            return Err(CliError::pipeline(format!(
                "ballot line {}: expected 3 fields, got {}",
                i + 1,
                fields.len()
            )));
        };
        let ranking: Vec<String> = ranking.split(',').map(|m| m.trim().to_string()).collect();
        if ranking.iter().any(String::is_empty) {
            return Err(CliError::pipeline(format!(
                "ballot line {}: empty method name (participant {participant}, sample {sample})",
                i + 1
            )));
        }
        out.push(RankingBallot::new(participant, sample, ranking));
    }
    Ok(out)
}

pub fn read_ballots(path: &Path) -> CliResult<Vec<RankingBallot>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_ballots(&text)
}

pub const LOSS_HEADER: &str = "step\tterm1\tterm2\ttotal\n";

pub fn loss_line(r: &LossRecord) -> String {
    format!("{}\t{:?}\t{:?}\t{:?}\n", r.step, r.term1, r.term2, r.total)
}

/// Metric record file mirroring the table: one line per (method, sample).
pub fn eval_records(report: &EvalReport) -> String {
    let mut out = String::from("method\tsample\tclass\tclip_t\tclip_d\tdegenerate\n");
    for r in &report.records {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:?}\t{:?}\t{}",
            r.method,
            r.sample_id,
            r.class.as_str(),
            r.clip_t,
            r.clip_d,
            r.degenerate
        );
    }
    out
}

/// Per-method class means, machine readable.
pub fn eval_summary(report: &EvalReport) -> String {
    let mut out = String::from("method\tglobal_clip_t\tglobal_clip_d\tlocal_clip_t\tlocal_clip_d\tprefer\n");
    for r in &report.rows {
        let prefer = r.prefer.map_or_else(|| "-".to_string(), |p| format!("{p:?}"));
        let _ = writeln!(
            out,
            "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{prefer}",
            r.method, r.global.clip_t, r.global.clip_d, r.local.clip_t, r.local.clip_d
        );
    }
    out
}

pub fn routing_records(report: &RoutingReport) -> String {
    let mut out = String::from("family\tdominant\tweights\tinstruction\n");
    for r in &report.records {
        let weights: Vec<String> = r.weights.iter().map(|w| format!("{w:.6}")).collect();
        let _ = writeln!(
            out,
            "{}\texpert{}\t{}\t{}",
            r.family.label(),
            r.dominant + 1,
            weights.join(","),
            r.text
        );
    }
    out
}

/// Attention mass per (token, pixel); each pixel's row sums to 1 over tokens.
pub fn heatmap_records(h: &AttentionHeatmap) -> String {
    let mut out = String::from("token\ty\tx\tweight\n");
    for t in 0..h.tokens {
        for (i, w) in h.map(t).iter().enumerate() {
            let _ = writeln!(out, "{t}\t{}\t{}\t{w:?}", i / h.width, i % h.width);
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
