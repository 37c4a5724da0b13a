use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Word-order transform applied to a concept sentence before rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderRule {
    Identity,
    Reverse,
    /// `[a, b, c] -> [b, c, a]`
    #[serde(rename = "rotate-1")]
    RotateOne,
    /// `[a, b, c, d, e] -> [b, a, d, c, e]`
    SwapAdjacent,
}

impl OrderRule {
    pub const ALL: [OrderRule; 4] = [
        OrderRule::Identity,
        OrderRule::Reverse,
        OrderRule::RotateOne,
        OrderRule::SwapAdjacent,
    ];

    pub fn apply<T: Copy>(self, items: &[T]) -> Vec<T> {
        let mut out = items.to_vec();
        match self {
            OrderRule::Identity => {}
            OrderRule::Reverse => out.reverse(),
            OrderRule::RotateOne => {
                if !out.is_empty() {
                    out.rotate_left(1)
                }
            }
            OrderRule::SwapAdjacent => out.chunks_mut(2).for_each(|c| c.reverse()),
        }
        out
    }

    /// Inverse permutation: recovers concept order from a rendering.
    pub fn invert<T: Copy>(self, items: &[T]) -> Vec<T> {
        let mut out = items.to_vec();
        match self {
            OrderRule::RotateOne => {
                if !out.is_empty() {
                    out.rotate_right(1)
                }
            }
            other => out = other.apply(items),
        }
        out
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OrderRule::Identity => "identity",
            OrderRule::Reverse => "reverse",
            OrderRule::RotateOne => "rotate-1",
            OrderRule::SwapAdjacent => "swap-adjacent",
        }
    }
}

impl fmt::Display for OrderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OrderRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OrderRule::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Corpus(format!("unknown order rule {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: String,
    pub order_rule: OrderRule,
    pub token_prefix: String,
    #[serde(default)]
    pub central: bool,
}

impl LanguageSpec {
    pub fn new(id: &str, order_rule: OrderRule, central: bool) -> Self {
        LanguageSpec {
            id: id.to_string(),
            order_rule,
            token_prefix: format!("{id}_"),
            central,
        }
    }

    /// `L0` central with identity order, then `L1..` cycling through the
    /// reordering rules.
    pub fn defaults(count: usize) -> Vec<LanguageSpec> {
        (0..count)
            .map(|i| {
                let rule = if i == 0 { OrderRule::Identity } else { OrderRule::ALL[1 + (i - 1) % 3] };
                LanguageSpec::new(&format!("L{i}"), rule, i == 0)
            })
            .collect()
    }

    pub fn token(&self, concept: usize) -> String {
        format!("{}w{concept}", self.token_prefix)
    }

    /// Surface tokens of a concept sentence.
    pub fn render(&self, concepts: &[usize]) -> Vec<String> {
        self.order_rule
            .apply(concepts)
            .into_iter()
            .map(|c| self.token(c))
            .collect()
    }
}

/// Ordered (source, target) language indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Direction {
    pub src: usize,
    pub tgt: usize,
}

impl Direction {
    pub fn new(src: usize, tgt: usize) -> Self {
        Direction { src, tgt }
    }
}
