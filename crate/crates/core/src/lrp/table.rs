use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::LayerId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub layer: LayerId,
    /// Contribution score `C ≥ 0`.
    pub contribution: f64,
    /// Normalized importance `I = C / ΣC`.
    pub importance: f64,
}

/// Per-layer contribution and importance, in layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    /// Images averaged over.
    pub samples: usize,
    pub entries: Vec<ImportanceEntry>,
}

/// Normalize contributions so the importances sum to one.
pub fn importance_scores(
    contributions: &[(LayerId, f64)],
    samples: usize,
) -> Result<ImportanceTable> {
    if let Some((id, c)) = contributions
        .iter()
        .find(|(_, c)| !(c.is_finite() && *c >= 0.0))
    {
        return Err(Error::Domain(format!(
            "contribution of {id} is {c}; must be finite and nonnegative"
        )));
    }
    let total: f64 = contributions.iter().map(|(_, c)| c).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all contribution scores are zero".into()));
    }
    let mut entries: Vec<ImportanceEntry> = contributions
        .iter()
        .map(|&(layer, contribution)| ImportanceEntry {
            layer,
            contribution,
            importance: contribution / total,
        })
        .collect();
    entries.sort_by_key(|e| e.layer);
    if entries.windows(2).any(|w| w[0].layer == w[1].layer) {
        return Err(Error::Usage(
            "duplicate layer in contribution scores".into(),
        ));
    }
    Ok(ImportanceTable { samples, entries })
}

impl ImportanceTable {
    pub fn get(&self, layer: LayerId) -> Option<&ImportanceEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn importance(&self, layer: LayerId) -> Option<f64> {
        self.get(layer).map(|e| e.importance)
    }

    /// Layers sorted by ascending importance; ties keep layer order.
    pub fn ranking(&self) -> Vec<LayerId> {
        let mut ids: Vec<&ImportanceEntry> = self.entries.iter().collect();
        ids.sort_by(|a, b| {
            a.importance
                .total_cmp(&b.importance)
                .then(a.layer.cmp(&b.layer))
        });
        ids.into_iter().map(|e| e.layer).collect()
    }

    /// Tab-separated table; floats are written in shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# samples\t{}\nlayer\tcontribution\timportance\n",
            self.samples
        );
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{:?}\t{:?}", e.layer, e.contribution, e.importance);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("importance table: {msg}"));
        let mut lines = text.lines();
        let samples = lines
            .next()
            .and_then(|l| l.strip_prefix("# samples\t"))
            .ok_or_else(|| bad("missing `# samples` line".into()))?
            .parse()
            .map_err(|e| bad(format!("sample count: {e}")))?;
        if lines.next() != Some("layer\tcontribution\timportance") {
            return Err(bad("missing header".into()));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(format!("row {} has {} columns", n + 1, cols.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| bad(format!("row {}: {e}", n + 1)))
            };
            entries.push(ImportanceEntry {
                layer: cols[0].parse()?,
                contribution: num(cols[1])?,
                importance: num(cols[2])?,
            });
        }
        Ok(Self { samples, entries })
    }
}
