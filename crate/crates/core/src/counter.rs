//! Multiply-accumulate tallies per model component.
//!
//! Not thread-safe: one counter per tape, used on a dedicated audit pass.

use std::collections::BTreeMap;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Backbone,
    Sse,
    Csi,
    Head,
    /// Ops recorded outside a model component (unit tests, loss terms).
    Other,
}

impl Component {
    pub const MODEL: [Component; 4] = [Component::Backbone, Component::Sse, Component::Csi, Component::Head];

    pub fn label(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::Sse => "sse",
            Component::Csi => "csi",
            Component::Head => "head",
            Component::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::MODEL.into_iter().chain([Component::Other]).find(|c| c.label() == s)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// What kind of product a MAC belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MacKind {
    /// Weight-bearing projections and convolutions applied to token maps.
    Layer,
    /// Products between two activations: attention scores, attention-weighted
    /// values, hidden-state reduction and expansion.
    Interaction,
    /// Kernel-attention networks acting on pooled descriptors.
    Routing,
    /// Forming a mixed kernel from the K candidate kernels.
    Mixing,
}

impl MacKind {
    pub const ALL: [MacKind; 4] = [MacKind::Layer, MacKind::Interaction, MacKind::Routing, MacKind::Mixing];
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    macs: BTreeMap<(Component, MacKind), u64>,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, component: Component, kind: MacKind, macs: u64) {
        *self.macs.entry((component, kind)).or_insert(0) += macs;
    }

    pub fn macs(&self, component: Component, kind: MacKind) -> u64 {
        self.macs.get(&(component, kind)).copied().unwrap_or(0)
    }

    pub fn component_macs(&self, component: Component) -> u64 {
        MacKind::ALL.iter().map(|&k| self.macs(component, k)).sum()
    }

    pub fn kind_macs(&self, kind: MacKind) -> u64 {
        self.macs.iter().filter(|((_, k), _)| *k == kind).map(|(_, v)| v).sum()
    }

    /// MACs of the listed kinds for one component.
    pub fn select(&self, component: Component, kinds: &[MacKind]) -> u64 {
        kinds.iter().map(|&k| self.macs(component, k)).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    /// FLOPs counted as two per multiply-accumulate.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Component, MacKind, u64)> + '_ {
        self.macs.iter().map(|(&(c, k), &v)| (c, k, v))
    }
}
