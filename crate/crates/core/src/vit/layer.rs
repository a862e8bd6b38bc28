use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The seven quantization sites inside a transformer block, in dataflow order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockLayer {
    Qkv,
    Matmul1,
    Attn,
    Matmul2,
    Proj,
    Fc1,
    Fc2,
}

impl BlockLayer {
    pub const ALL: [BlockLayer; 7] = [
        BlockLayer::Qkv,
        BlockLayer::Matmul1,
        BlockLayer::Attn,
        BlockLayer::Matmul2,
        BlockLayer::Proj,
        BlockLayer::Fc1,
        BlockLayer::Fc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockLayer::Qkv => "qkv",
            BlockLayer::Matmul1 => "matmul1",
            BlockLayer::Attn => "attn",
            BlockLayer::Matmul2 => "matmul2",
            BlockLayer::Proj => "proj",
            BlockLayer::Fc1 => "fc1",
            BlockLayer::Fc2 => "fc2",
        }
    }

    pub fn has_weights(self) -> bool {
        !matches!(
            self,
            BlockLayer::Matmul1 | BlockLayer::Attn | BlockLayer::Matmul2
        )
    }
}

/// Address of a quantized layer.
///
/// Blocks are numbered from 1. Ordering is dataflow order: stem, blocks in
/// sequence (kinds in [`BlockLayer::ALL`] order), then the head. Serializes
/// as its display string (`patch_embed`, `b3.fc1`, `head`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    PatchEmbed,
    Block { block: usize, kind: BlockLayer },
    Head,
}

impl LayerId {
    pub fn block(block: usize, kind: BlockLayer) -> Self {
        LayerId::Block { block, kind }
    }

    pub fn has_weights(self) -> bool {
        match self {
            LayerId::Block { kind, .. } => kind.has_weights(),
            _ => true,
        }
    }

    /// Number of activation operands quantized at this site.
    ///
    /// `matmul1` quantizes both q and k; `matmul2` only v, since the attention
    /// map feeding it is already quantized at the `attn` site.
    pub fn activation_operands(self) -> usize {
        match self {
            LayerId::Block {
                kind: BlockLayer::Matmul1,
                ..
            } => 2,
            _ => 1,
        }
    }

    pub fn is_attn(self) -> bool {
        matches!(
            self,
            LayerId::Block {
                kind: BlockLayer::Attn,
                ..
            }
        )
    }

    pub fn block_index(self) -> Option<usize> {
        match self {
            LayerId::Block { block, .. } => Some(block),
            _ => None,
        }
    }

    /// Every quantized layer of a model with `blocks` transformer blocks.
    pub fn all(blocks: usize) -> Vec<LayerId> {
        let mut ids = vec![LayerId::PatchEmbed];
        ids.extend(Self::scored(blocks));
        ids.push(LayerId::Head);
        ids
    }

    /// Block layers only; the layers that receive importance scores.
    pub fn scored(blocks: usize) -> Vec<LayerId> {
        (1..=blocks)
            .flat_map(|b| BlockLayer::ALL.iter().map(move |&k| LayerId::block(b, k)))
            .collect()
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::PatchEmbed => f.write_str("patch_embed"),
            LayerId::Head => f.write_str("head"),
            LayerId::Block { block, kind } => write!(f, "b{block}.{}", kind.name()),
        }
    }
}

impl Serialize for LayerId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch_embed" => return Ok(LayerId::PatchEmbed),
            "head" => return Ok(LayerId::Head),
            _ => {}
        }
        let bad = || Error::Config(format!("unknown layer id `{s}`"));
        let (block, kind) = s
            .strip_prefix('b')
            .and_then(|r| r.split_once('.'))
            .ok_or_else(bad)?;
        let block: usize = block.parse().map_err(|_| bad())?;
        if block == 0 {
            return Err(bad());
        }
        let kind = BlockLayer::ALL
            .into_iter()
            .find(|k| k.name() == kind)
            .ok_or_else(bad)?;
        Ok(LayerId::Block { block, kind })
    }
}
