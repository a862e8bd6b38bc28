//! Human-readable tables and the structured JSON twin of every report.
//!
//! JSON schemas are the serde forms of [`EvalReport`] and
//! [`AblationReport`]; see `docs/formats.md`.

use std::fmt::Write as _;

use super::ablation::{AblationReport, Section};
use super::eval::EvalReport;
use crate::error::{Error, Result};

pub fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing report: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn pct(x: f64) -> String {
    format!("{:6.2}", 100.0 * x)
}

pub fn render_eval(title: &str, fp: &EvalReport, q: Option<&EvalReport>) -> String {
    let mut out = format!("# {title}\n\n");
    let _ = writeln!(
        out,
        "{:<14} {:>8} {:>9} {:>12} {:>12}",
        "model", "top1 %", "agree %", "|dlogit|", "size bits"
    );
    let mut line = |name: &str, r: &EvalReport| {
        let _ = writeln!(
            out,
            "{:<14} {:>8} {:>9} {:>12.6} {:>12}",
            name,
            pct(r.top1),
            pct(r.agreement),
            r.mean_abs_logit_dev,
            r.size_bits
        );
    };
    line("full precision", fp);
    if let Some(q) = q {
        line("quantized", q);
    }
    if let Some(q) = q.filter(|q| !q.bits.is_empty()) {
        out.push_str("\nlayer          w_bits a_bits\n");
        for b in &q.bits {
            let w = b.w_bits.map_or_else(|| "-".to_string(), |w| w.to_string());
            let _ = writeln!(out, "{:<14} {:>6} {:>6}", b.layer.to_string(), w, b.a_bits);
        }
    }
    if let Some(h) = q.and_then(|q| q.provenance.config_hash.as_ref()) {
        let _ = writeln!(out, "\nconfig {h}");
    }
    out
}

pub fn render_ablation(r: &AblationReport) -> String {
    let mut out = format!(
        "# quantization ablation (base {} bits, {} eval images, seed {})\n\nfull-precision top1: {}%\nsize budget: {} bits\nconfig: {}\n",
        r.base_bits,
        r.eval_images,
        r.seed,
        pct(r.fp_top1).trim(),
        r.budget_bits,
        r.config_hash
    );
    for section in Section::ALL {
        let _ = writeln!(out, "\n## {}\n", section.title());
        let _ = writeln!(
            out,
            "{:<22} {:>8} {:>9} {:>12} {:>10} {:>7}",
            "row", "top1 %", "agree %", "|dlogit|", "size bits", "budget"
        );
        for row in r.rows.iter().filter(|x| x.section == section) {
            let _ = writeln!(
                out,
                "{:<22} {:>8} {:>9} {:>12.6} {:>10} {:>7}",
                row.name,
                pct(row.top1),
                pct(row.agreement),
                row.mean_abs_logit_dev,
                row.size_bits,
                if row.within_budget { "ok" } else { "over" }
            );
        }
    }
    out.push_str("\n## importance\n\nlayer          importance\n");
    for e in &r.importance.entries {
        let _ = writeln!(out, "{:<14} {:.6}", e.layer.to_string(), e.importance);
    }
    out
}

/// What `evaluate` stores: the full-precision baseline beside one
/// quantized stage, both measured on the same images.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub stage: String,
    pub fp: EvalReport,
    pub quantized: EvalReport,
}

impl EvalSummary {
    pub fn render(&self) -> String {
        render_eval(
            &format!("evaluation ({})", self.stage),
            &self.fp,
            Some(&self.quantized),
        )
    }
}
