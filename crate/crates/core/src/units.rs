// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analysis units (features and neurons) and the fraction-of-max selection
//! rule shared by SAEs, baseline decomposers and attribution maps.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toylm::CaptureSite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Feature,
    Neuron,
}

/// One feature or neuron: the activation site, the layer, and the index
/// within that layer's feature (or neuron) vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId {
    pub site: CaptureSite,
    pub layer: usize,
    pub index: usize,
}

impl UnitId {
    pub fn new(site: CaptureSite, layer: usize, index: usize) -> Self {
        Self { site, layer, index }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/L{}:{}", self.site, self.layer, self.index)
    }
}

/// A thresholded set of units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedUnits {
    pub kind: UnitKind,
    pub units: BTreeSet<UnitId>,
    pub tau: f64,
    /// The maximum the threshold was taken relative to (0 for an empty input).
    pub reference_max: f64,
}

impl SelectedUnits {
    pub fn empty(kind: UnitKind, tau: f64) -> Self {
        Self {
            kind,
            units: BTreeSet::new(),
            tau,
            reference_max: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Unit indices at one (site, layer), ascending.
    pub fn indices_at(&self, site: CaptureSite, layer: usize) -> Vec<usize> {
        self.units
            .iter()
            .filter(|u| u.site == site && u.layer == layer)
            .map(|u| u.index)
            .collect()
    }

    /// Layers that have at least one selected unit.
    pub fn layers(&self) -> BTreeSet<usize> {
        self.units.iter().map(|u| u.layer).collect()
    }

    /// Adds all units of `other` (same kind). The reference max becomes the
    /// larger of the two.
    pub fn union_with(&mut self, other: &SelectedUnits) {
        self.units.extend(other.units.iter().copied());
        self.reference_max = self.reference_max.max(other.reference_max);
    }
}

/// Checks `0 < tau < 1`.
pub fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("threshold must lie in (0, 1), got {tau}")))
    }
}

/// Keeps every unit whose score is strictly greater than `tau` times the
/// maximum score. An all-non-positive input selects nothing.
pub fn select_fraction_of_max(
    kind: UnitKind,
    scores: impl IntoIterator<Item = (UnitId, f64)>,
    tau: f64,
) -> SelectedUnits {
    let scores: Vec<(UnitId, f64)> = scores.into_iter().collect();
    let max = scores
        .iter()
        .map(|&(_, s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return SelectedUnits::empty(kind, tau);
    }
    let cut = tau * max;
    SelectedUnits {
        kind,
        units: scores
            .into_iter()
            .filter(|&(_, s)| s > cut)
            .map(|(u, _)| u)
            .collect(),
        tau,
        reference_max: max,
    }
}

/// Applies the fraction-of-max rule to each input separately (the max is
/// taken jointly over all units scored for that input) and unions the
/// per-input selections.
pub fn select_per_input_union<I>(kind: UnitKind, inputs: I, tau: f64) -> SelectedUnits
where
    I: IntoIterator,
    I::Item: IntoIterator<Item = (UnitId, f64)>,
{
    let mut out = SelectedUnits::empty(kind, tau);
    for scores in inputs {
        out.union_with(&select_fraction_of_max(kind, scores, tau));
    }
    out
}

/// Where the maximum of the fraction-of-max rule is taken when selecting
/// over a set of inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxScope {
    /// Each input against its own maximum, then unioned.
    #[default]
    PerInput,
    /// Every input against the maximum over the whole set.
    Dataset,
}

pub fn select_with_scope(kind: UnitKind, inputs: &[Vec<(UnitId, f64)>], tau: f64, scope: MaxScope) -> SelectedUnits {
    match scope {
        MaxScope::PerInput => select_per_input_union(kind, inputs.iter().map(|v| v.iter().copied()), tau),
        MaxScope::Dataset => select_fraction_of_max(kind, inputs.iter().flatten().copied(), tau),
    }
}
