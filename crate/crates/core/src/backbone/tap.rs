use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Down,
    Mid,
    Up,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TapKind {
    ResidualHidden,
    Query,
    Key,
    Value,
    /// Capture-only; never overridable.
    AttentionMap,
}

impl TapKind {
    fn token(self) -> &'static str {
        match self {
            TapKind::ResidualHidden => "res",
            TapKind::Query => "q",
            TapKind::Key => "k",
            TapKind::Value => "v",
            TapKind::AttentionMap => "map",
        }
    }
}

/// Names one feature site, written `stage.block.kind.layer` (e.g. `up.1.q.0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TapAddress {
    pub stage: Stage,
    pub block_index: usize,
    pub kind: TapKind,
    pub layer_index: usize,
}

impl TapAddress {
    pub const fn new(stage: Stage, block_index: usize, kind: TapKind, layer_index: usize) -> Self {
        Self {
            stage,
            block_index,
            kind,
            layer_index,
        }
    }

    pub const fn up(block_index: usize, kind: TapKind, layer_index: usize) -> Self {
        Self::new(Stage::Up, block_index, kind, layer_index)
    }

    pub fn with_kind(self, kind: TapKind) -> Self {
        Self { kind, ..self }
    }

    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for TapAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.stage {
            Stage::Down => "down",
            Stage::Mid => "mid",
            Stage::Up => "up",
        };
        write!(
            f,
            "{stage}.{}.{}.{}",
            self.block_index,
            self.kind.token(),
            self.layer_index
        )
    }
}

impl FromStr for TapAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::TapSyntax(s.to_string());
        let parts: Vec<&str> = s.split('.').collect();
        let [stage, block, kind, layer] = parts.as_slice() else {
            return Err(bad());
        };
        let stage = match *stage {
            "down" => Stage::Down,
            "mid" => Stage::Mid,
            "up" => Stage::Up,
            _ => return Err(bad()),
        };
        let kind = match *kind {
            "res" => TapKind::ResidualHidden,
            "q" => TapKind::Query,
            "k" => TapKind::Key,
            "v" => TapKind::Value,
            "map" => TapKind::AttentionMap,
            _ => return Err(bad()),
        };
        Ok(Self {
            stage,
            block_index: block.parse().map_err(|_| bad())?,
            kind,
            layer_index: layer.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for TapAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TapAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub type TapSet = BTreeSet<TapAddress>;

/// Per-site callback invoked during a forward pass.
///
/// `at_site` sees the live value at every overridable site (residual hidden,
/// query, key, value) and may return a same-shaped replacement that flows
/// downstream. Attention maps are never offered.
pub trait SiteHook<T: Float> {
    fn at_site(&mut self, addr: &TapAddress, live: &Var<T>) -> Result<Option<Var<T>>>;

    /// Sites this hook promises to touch; validated before the pass runs.
    fn declared_sites(&self) -> Vec<TapAddress> {
        Vec::new()
    }
}

/// The no-op hook.
pub struct NoHook;

impl<T: Float> SiteHook<T> for NoHook {
    fn at_site(&mut self, _: &TapAddress, _: &Var<T>) -> Result<Option<Var<T>>> {
        Ok(None)
    }
}

/// Whole-tensor substitution at fixed sites.
#[derive(Debug, Clone, Default)]
pub struct StaticOverrides<T: Float> {
    pub map: BTreeMap<TapAddress, Tensor<T>>,
}

impl<T: Float> StaticOverrides<T> {
    pub fn new(map: BTreeMap<TapAddress, Tensor<T>>) -> Self {
        Self { map }
    }
}

impl<T: Float> SiteHook<T> for StaticOverrides<T> {
    fn at_site(&mut self, addr: &TapAddress, _: &Var<T>) -> Result<Option<Var<T>>> {
        Ok(self.map.get(addr).cloned().map(Var::constant))
    }

    fn declared_sites(&self) -> Vec<TapAddress> {
        self.map.keys().copied().collect()
    }
}

/// Per-layer taps captured at one diffusion timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<T: Float = f32> {
    pub timestep: usize,
    pub taps: BTreeMap<TapAddress, Tensor<T>>,
}

impl<T: Float> FeatureBundle<T> {
    pub fn get(&self, addr: &TapAddress) -> Result<&Tensor<T>> {
        self.taps
            .get(addr)
            .ok_or_else(|| Error::UnresolvedTap(format!("{addr} (not captured)")))
    }

    pub fn cast<U: Float>(&self) -> FeatureBundle<U> {
        FeatureBundle {
            timestep: self.timestep,
            taps: self.taps.iter().map(|(a, t)| (*a, t.cast())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_grammar_round_trips() {
        for text in ["up.1.res.0", "up.2.q.1", "down.0.k.0", "mid.0.map.0", "up.0.v.1"] {
            let addr: TapAddress = text.parse().unwrap();
            assert_eq!(addr.to_string(), text);
        }
        let list = TapAddress::parse_list("up.1.res.0, up.2.q.1").unwrap();
        assert_eq!(list[1], TapAddress::up(2, TapKind::Query, 1));
    }

    #[test]
    fn malformed_addresses_are_rejected() {
        for text in ["up.1.res", "side.1.q.0", "up.x.q.0", "up.1.attn.0", ""] {
            assert!(text.parse::<TapAddress>().is_err(), "{text}");
        }
    }
}
