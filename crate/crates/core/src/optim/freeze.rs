use serde::{Deserialize, Serialize};

use crate::vit::layer_group;

/// Which parameters an optimizer may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only `head.*`; used by linear probing.
    HeadOnly,
    /// Embeddings and blocks `0..blocks` are frozen.
    FrozenBelow { blocks: usize },
}

impl Trainable {
    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::HeadOnly => name.starts_with("head."),
            Trainable::FrozenBelow { blocks } => {
                if let Some(rest) = name.strip_prefix("blocks.") {
                    rest.split('.')
                        .next()
                        .and_then(|i| i.parse::<usize>().ok())
                        .map_or(true, |b| b >= *blocks)
                } else {
                    layer_group(name, 0) != Some(0)
                }
            }
        }
    }

    pub fn as_predicate(&self) -> impl Fn(&str) -> bool + Sync + '_ {
        move |n: &str| self.contains(n)
    }
}

/// Phase-one freezing of the lower half of the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub freeze_epochs: usize,
    /// Number of frozen blocks; `None` means `floor(depth / 2)`.
    pub frozen_blocks: Option<usize>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            freeze_epochs: 30,
            frozen_blocks: None,
        }
    }
}

pub fn apply_freeze(policy: &FreezePolicy, epoch: usize, depth: usize) -> Trainable {
    if epoch < policy.freeze_epochs {
        Trainable::FrozenBelow {
            blocks: policy.frozen_blocks.unwrap_or(depth / 2).min(depth),
        }
    } else {
        Trainable::All
    }
}
