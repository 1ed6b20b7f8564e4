use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Address of one unit (output channel) inside a target network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub model_id: String,
    pub layer_id: String,
    pub unit: usize,
}

impl NeuronRef {
    pub fn new(model_id: impl Into<String>, layer_id: impl Into<String>, unit: usize) -> Self {
        Self {
            model_id: model_id.into(),
            layer_id: layer_id.into(),
            unit,
        }
    }

    /// Directory name used by the exemplar layout, `unit_NNNN`.
    pub fn unit_dir(&self) -> String {
        format!("unit_{:04}", self.unit)
    }
}

impl fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.model_id, self.layer_id, self.unit)
    }
}

/// A unit within a single model, without the model id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: String,
    pub unit: usize,
}

impl UnitId {
    pub fn new(layer: impl Into<String>, unit: usize) -> Self {
        Self {
            layer: layer.into(),
            unit,
        }
    }
}

impl From<&NeuronRef> for UnitId {
    fn from(n: &NeuronRef) -> Self {
        UnitId::new(n.layer_id.clone(), n.unit)
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.layer, self.unit)
    }
}

/// An ordered set of ablated units. Ordering makes hashing and cache keys canonical.
pub type UnitSet = BTreeSet<UnitId>;

/// Stable 64-bit key for a unit set (FNV-1a over the canonical ordering).
pub fn unit_set_key(units: &UnitSet) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for u in units {
        feed(u.layer.as_bytes());
        feed(&[0xff]);
        feed(&(u.unit as u64).to_le_bytes());
    }
    h
}
