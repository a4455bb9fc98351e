use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Offloadable tensor classes of the transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tensors {
    /// Residual stream kept for backward.
    X,
    M,
    V,
    /// Gradients.
    G,
    /// Weights used by the matmuls (FP8 codes, or the BF16 weights).
    Theta,
    /// BF16 master copy held next to FP8 weights.
    Master,
}

impl Tensors {
    pub const ALL: [Tensors; 6] = [Tensors::X, Tensors::M, Tensors::V, Tensors::G, Tensors::Theta, Tensors::Master];

    fn bit(self) -> u8 {
        1 << self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Tensors::X => "x",
            Tensors::M => "m",
            Tensors::V => "v",
            Tensors::G => "g",
            Tensors::Theta => "theta",
            Tensors::Master => "theta*",
        }
    }
}

impl FromStr for Tensors {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "x" => Ok(Tensors::X),
            "m" => Ok(Tensors::M),
            "v" => Ok(Tensors::V),
            "g" => Ok(Tensors::G),
            "theta" | "θ" | "w" => Ok(Tensors::Theta),
            "theta*" | "θ*" | "master" => Ok(Tensors::Master),
            other => Err(format!("unknown offload class '{other}' (expected x, m, v, g, theta, theta*)")),
        }
    }
}

/// Set of block tensor classes placed in host memory. Embedding and LM head
/// are never offloaded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OffloadSet(u8);

impl OffloadSet {
    pub const NONE: OffloadSet = OffloadSet(0);

    pub fn of(items: &[Tensors]) -> Self {
        OffloadSet(items.iter().fold(0, |a, t| a | t.bit()))
    }

    pub fn all() -> Self {
        Self::of(&Tensors::ALL)
    }

    pub fn contains(&self, t: Tensors) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn with(self, t: Tensors) -> Self {
        OffloadSet(self.0 | t.bit())
    }

    pub fn without(self, t: Tensors) -> Self {
        OffloadSet(self.0 & !t.bit())
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(&self, other: &OffloadSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn items(&self) -> Vec<Tensors> {
        Tensors::ALL.into_iter().filter(|t| self.contains(*t)).collect()
    }

    /// Every subset of `Tensors::ALL`, in bit order.
    pub fn subsets() -> impl Iterator<Item = OffloadSet> {
        (0u8..64).map(OffloadSet)
    }

    pub fn bits(&self) -> u8 {
        self.0
    }
}

impl fmt::Display for OffloadSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.items().iter().map(|t| t.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for OffloadSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "none" || s == "-" || s == "---" {
            return Ok(Self::NONE);
        }
        let items = s.split(',').map(str::parse).collect::<Result<Vec<Tensors>, _>>()?;
        Ok(Self::of(&items))
    }
}

impl Serialize for OffloadSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for OffloadSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}
