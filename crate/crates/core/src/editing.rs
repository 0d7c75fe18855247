// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight-space erasure: zeroing `W2` columns picked either directly by
//! neuron selection or through SAE decoder directions (FeatureEdit).

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sae::SaeModel;
use crate::toylm::{CaptureSite, Model};
use crate::units::{SelectedUnits, UnitId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditKind {
    NeuronColumnZero,
    FeatureEdit,
}

/// A `W2` column to zero, with the units that selected it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPosition {
    pub layer: usize,
    pub column: usize,
    pub provenance: Vec<UnitId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub kind: EditKind,
    pub tau2: Option<f64>,
    pub positions: Vec<EditPosition>,
}

impl EditPlan {
    fn from_map(kind: EditKind, tau2: Option<f64>, map: BTreeMap<(usize, usize), BTreeSet<UnitId>>) -> Self {
        Self {
            kind,
            tau2,
            positions: map
                .into_iter()
                .map(|((layer, column), prov)| EditPosition {
                    layer,
                    column,
                    provenance: prov.into_iter().collect(),
                })
                .collect(),
        }
    }

    /// Number of distinct columns zeroed.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One-hot probe of length `d_f`.
pub fn probe_vector(index: usize, d_f: usize) -> Result<Array1<f32>> {
    if index >= d_f {
        return Err(Error::Index {
            what: "feature",
            index,
            limit: d_f,
        });
    }
    let mut p = Array1::zeros(d_f);
    p[index] = 1.0;
    Ok(p)
}

/// The decoder applied to a one-hot probe: decoder column `index`, scaled by
/// the SAE's input standard deviation so it is expressed in raw MLP-activation
/// units, the coordinates W2 columns act on.
pub fn feature_contribution(sae: &SaeModel, index: usize) -> Result<Array1<f32>> {
    if sae.site != CaptureSite::MlpActivation {
        return Err(Error::config(format!(
            "feature contributions need an SAE on mlp_activation, got {}",
            sae.site
        )));
    }
    let p = probe_vector(index, sae.d_f())?;
    Ok(sae.w_dec.dot(&p) * &sae.std)
}

/// Columns `c` with `|h_i[c]| > tau2` for every selected feature `i`, unioned.
/// `saes` maps a layer to its MLP-activation SAE.
pub fn feature_edit_plan(saes: &BTreeMap<usize, &SaeModel>, features: &SelectedUnits, tau2: f64) -> Result<EditPlan> {
    if !(tau2 > 0.0) {
        return Err(Error::config(format!("tau2 must be positive, got {tau2}")));
    }
    let mut map: BTreeMap<(usize, usize), BTreeSet<UnitId>> = BTreeMap::new();
    for unit in &features.units {
        let sae = saes.get(&unit.layer).ok_or_else(|| {
            Error::config(format!("no SAE supplied for layer {} of feature {unit}", unit.layer))
        })?;
        if unit.site != sae.site {
            return Err(Error::config(format!("feature {unit} does not belong to an SAE on {}", sae.site)));
        }
        let h = feature_contribution(sae, unit.index)?;
        for (c, &v) in h.iter().enumerate() {
            if (v as f64).abs() > tau2 {
                map.entry((unit.layer, c)).or_default().insert(*unit);
            }
        }
    }
    if map.is_empty() {
        log::warn!("feature edit plan is empty at tau2 = {tau2}; no weights would change");
    }
    Ok(EditPlan::from_map(EditKind::FeatureEdit, Some(tau2), map))
}

/// One position per selected MLP neuron.
pub fn neuron_edit_plan(neurons: &SelectedUnits) -> Result<EditPlan> {
    let mut map: BTreeMap<(usize, usize), BTreeSet<UnitId>> = BTreeMap::new();
    for unit in &neurons.units {
        if unit.site != CaptureSite::MlpActivation {
            return Err(Error::config(format!("neuron {unit} is not an MLP activation unit")));
        }
        map.entry((unit.layer, unit.index)).or_default().insert(*unit);
    }
    Ok(EditPlan::from_map(EditKind::NeuronColumnZero, None, map))
}

/// A copy of `model` with the plan's `W2` columns zeroed.
pub fn apply_edit(model: &Model, plan: &EditPlan) -> Result<Model> {
    let cfg = &model.config;
    for p in &plan.positions {
        if p.layer >= cfg.n_layers {
            return Err(Error::Index {
                what: "layer",
                index: p.layer,
                limit: cfg.n_layers,
            });
        }
        if p.column >= cfg.d_mlp {
            return Err(Error::Index {
                what: "W2 column",
                index: p.column,
                limit: cfg.d_mlp,
            });
        }
    }
    let mut out = model.clone();
    for p in &plan.positions {
        out.params.layers[p.layer].w2.column_mut(p.column).fill(0.0);
    }
    Ok(out)
}

/// Neuron baseline: zero the `W2` column of every selected neuron.
pub fn zero_neuron_columns(model: &Model, neurons: &SelectedUnits) -> Result<Model> {
    apply_edit(model, &neuron_edit_plan(neurons)?)
}
