//! Per-layer bit widths under a model-size budget.
//!
//! Mixed modes raise every layer of the first `boosted_blocks` blocks by one
//! bit and pay for it by lowering the least important layers of the remaining
//! blocks. Size counts weight-matrix entries only; activation-only sites
//! (matmul1, attn, matmul2) carry no parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::ImportanceTable;
use crate::quant::MAX_BITS;
use crate::vit::{LayerId, ViTConfig, ViTParams};

pub const MIN_BITS: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocMode {
    /// Every layer at the base width.
    Uniform,
    /// Boosted blocks up; the `per_block` least important layers of every
    /// other block down, whatever the resulting size.
    PerBlock,
    /// Boosted blocks up; weight-bearing layers lowered in ascending
    /// importance-per-parameter order until the size budget holds.
    Greedy,
    /// Boosted blocks up, nothing lowered (exceeds the budget).
    BoostOnly,
}

impl AllocMode {
    pub fn name(self) -> &'static str {
        match self {
            AllocMode::Uniform => "uniform",
            AllocMode::PerBlock => "per-block",
            AllocMode::Greedy => "greedy",
            AllocMode::BoostOnly => "boost-only",
        }
    }
}

impl FromStr for AllocMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AllocMode::Uniform),
            "per-block" => Ok(AllocMode::PerBlock),
            "greedy" => Ok(AllocMode::Greedy),
            "boost-only" => Ok(AllocMode::BoostOnly),
            _ => Err(Error::Config(format!("unknown allocation mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBits {
    /// `None` for activation-only sites.
    pub w_bits: Option<u32>,
    pub a_bits: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    pub mode: AllocMode,
    pub base_bits: u32,
    pub bits: BTreeMap<LayerId, LayerBits>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocOptions {
    pub base_bits: u32,
    pub mode: AllocMode,
    /// Leading blocks raised by one bit in mixed modes.
    pub boosted_blocks: usize,
    /// Bits removed from a lowered layer.
    pub demotion: u32,
    /// Layers lowered per block in [`AllocMode::PerBlock`].
    pub per_block: usize,
}

impl Default for AllocOptions {
    fn default() -> Self {
        Self {
            base_bits: 4,
            mode: AllocMode::Greedy,
            boosted_blocks: 2,
            demotion: 1,
            per_block: 2,
        }
    }
}

impl BitAllocation {
    /// Every layer of `config` at `(bits, bits)`.
    pub fn uniform(config: &ViTConfig, bits: u32) -> Result<Self> {
        check_width(bits)?;
        let bits_map = LayerId::all(config.blocks)
            .into_iter()
            .map(|id| (id, LayerBits::joint(id, bits)))
            .collect();
        Ok(Self {
            mode: AllocMode::Uniform,
            base_bits: bits,
            bits: bits_map,
        })
    }

    pub fn get(&self, layer: LayerId) -> Result<LayerBits> {
        self.bits
            .get(&layer)
            .copied()
            .ok_or_else(|| Error::Config(format!("allocation has no entry for {layer}")))
    }

    /// Same layers as `config`, widths in range, weight bits exactly where
    /// weights exist.
    pub fn validate(&self, config: &ViTConfig) -> Result<()> {
        let expected = LayerId::all(config.blocks);
        if let Some(extra) = self.bits.keys().find(|id| !expected.contains(id)) {
            return Err(Error::Config(format!(
                "allocation references {extra}, which the model does not have"
            )));
        }
        for id in expected {
            let b = self.get(id)?;
            if b.w_bits.is_some() != id.has_weights() {
                return Err(Error::Config(format!(
                    "{id}: weight bits present iff the layer has weights"
                )));
            }
            for w in b.w_bits.into_iter().chain([b.a_bits]) {
                check_width(w).map_err(|e| Error::Config(format!("{id}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Tab-separated `layer  w_bits  a_bits`; `-` marks absent weight bits.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# mode\t{}\n# base_bits\t{}\nlayer\tw_bits\ta_bits\n",
            self.mode.name(),
            self.base_bits
        );
        for (id, b) in &self.bits {
            let w = b.w_bits.map_or_else(|| "-".to_string(), |w| w.to_string());
            let _ = writeln!(out, "{id}\t{w}\t{}", b.a_bits);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("bit allocation table: {msg}"));
        let mut lines = text.lines();
        let mut meta = |key: &str| {
            lines
                .next()
                .and_then(|l| l.strip_prefix(&format!("# {key}\t")).map(str::to_owned))
                .ok_or_else(|| bad(format!("missing `# {key}` line")))
        };
        let mode: AllocMode = meta("mode")?.parse()?;
        let base_bits = meta("base_bits")?
            .parse()
            .map_err(|e| bad(format!("base_bits: {e}")))?;
        if lines.next() != Some("layer\tw_bits\ta_bits") {
            return Err(bad("missing header".into()));
        }
        let mut bits = BTreeMap::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, w, a] = cols[..] else {
                return Err(bad(format!("malformed row `{line}`")));
            };
            let num = |s: &str| s.parse::<u32>().map_err(|e| bad(format!("`{line}`: {e}")));
            let w_bits = if w == "-" { None } else { Some(num(w)?) };
            let id: LayerId = id.parse()?;
            if bits
                .insert(
                    id,
                    LayerBits {
                        w_bits,
                        a_bits: num(a)?,
                    },
                )
                .is_some()
            {
                return Err(bad(format!("duplicate row for {id}")));
            }
        }
        Ok(Self {
            mode,
            base_bits,
            bits,
        })
    }
}

impl LayerBits {
    fn joint(id: LayerId, bits: u32) -> Self {
        Self {
            w_bits: id.has_weights().then_some(bits),
            a_bits: bits,
        }
    }
}

fn check_width(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )))
    }
}

/// `Σ param_count · w_bits` over weight-bearing layers.
pub fn model_size_bits(alloc: &BitAllocation, params: &ViTParams) -> Result<u64> {
    let mut total = 0u64;
    for id in LayerId::all(params.config.blocks)
        .into_iter()
        .filter(|id| id.has_weights())
    {
        let w = alloc
            .get(id)?
            .w_bits
            .ok_or_else(|| Error::Config(format!("{id} has no weight bits")))?;
        total += params.weight_count(id) as u64 * u64::from(w);
    }
    Ok(total)
}

pub fn allocate_bits(
    table: &ImportanceTable,
    params: &ViTParams,
    opts: &AllocOptions,
) -> Result<BitAllocation> {
    let config = &params.config;
    let b = opts.base_bits;
    let mut alloc = BitAllocation::uniform(config, b)?;
    alloc.mode = opts.mode;
    if opts.mode == AllocMode::Uniform {
        return Ok(alloc);
    }
    if opts.demotion == 0 {
        return Err(Error::Config("demotion depth must be at least 1".into()));
    }
    let low = b
        .checked_sub(opts.demotion)
        .filter(|&l| l >= MIN_BITS)
        .ok_or_else(|| {
            Error::Config(format!(
                "base width {b} cannot be lowered by {} bits",
                opts.demotion
            ))
        })?;
    let high = b + 1;
    check_width(high)?;
    if opts.boosted_blocks == 0 || opts.boosted_blocks >= config.blocks {
        return Err(Error::Config(format!(
            "boosted_blocks must be in [1, {}), got {}",
            config.blocks, opts.boosted_blocks
        )));
    }
    let boosted = |id: LayerId| id.block_index().is_some_and(|i| i <= opts.boosted_blocks);
    let demotable = |id: &LayerId| id.block_index().is_some_and(|i| i > opts.boosted_blocks);
    for (id, bits) in alloc.bits.iter_mut() {
        if boosted(*id) {
            *bits = LayerBits::joint(*id, high);
        }
    }
    let importance = |id: LayerId| {
        table
            .importance(id)
            .ok_or_else(|| Error::Config(format!("importance table has no entry for {id}")))
    };

    match opts.mode {
        AllocMode::Uniform | AllocMode::BoostOnly => {}
        AllocMode::PerBlock => {
            for block in opts.boosted_blocks + 1..=config.blocks {
                let mut kinds = Vec::new();
                for id in LayerId::scored(config.blocks)
                    .into_iter()
                    .filter(|id| id.block_index() == Some(block))
                {
                    kinds.push((importance(id)?, id));
                }
                kinds.sort_by(|a, c| a.0.total_cmp(&c.0).then(a.1.cmp(&c.1)));
                for &(_, id) in kinds.iter().take(opts.per_block) {
                    alloc.bits.insert(id, LayerBits::joint(id, low));
                }
            }
        }
        AllocMode::Greedy => {
            let budget = model_size_bits(&BitAllocation::uniform(config, b)?, params)?;
            let mut candidates = Vec::new();
            for id in LayerId::all(config.blocks)
                .into_iter()
                .filter(|id| id.has_weights() && demotable(id))
            {
                let n = params.weight_count(id) as f64;
                candidates.push((importance(id)? / n, id));
            }
            candidates.sort_by(|a, c| a.0.total_cmp(&c.0).then(a.1.cmp(&c.1)));
            let mut size = model_size_bits(&alloc, params)?;
            for &(_, id) in &candidates {
                if size <= budget {
                    break;
                }
                alloc.bits.insert(id, LayerBits::joint(id, low));
                size -= params.weight_count(id) as u64 * u64::from(opts.demotion);
            }
            if size > budget {
                return Err(Error::Allocation(format!(
                    "size budget unattainable: {size} bits after lowering every eligible layer, budget {budget} (shortfall {})",
                    size - budget
                )));
            }
            follow_modal_width(&mut alloc, config, opts.boosted_blocks);
        }
    }
    Ok(alloc)
}

/// Activation-only sites in non-boosted blocks take the most common
/// activation width of their block's weight-bearing layers (ties go up).
fn follow_modal_width(alloc: &mut BitAllocation, config: &ViTConfig, boosted_blocks: usize) {
    for block in boosted_blocks + 1..=config.blocks {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for (id, b) in alloc
            .bits
            .iter()
            .filter(|(id, _)| id.block_index() == Some(block))
        {
            if id.has_weights() {
                *counts.entry(b.a_bits).or_default() += 1;
            }
        }
        let Some(modal) = counts
            .iter()
            .max_by_key(|(w, n)| (**n, **w))
            .map(|(w, _)| *w)
        else {
            continue;
        };
        for (id, b) in alloc.bits.iter_mut() {
            if id.block_index() == Some(block) && !id.has_weights() {
                b.a_bits = modal;
            }
        }
    }
}
