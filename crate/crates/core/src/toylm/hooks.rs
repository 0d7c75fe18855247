// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward hooks. A hook sees the full `(positions × width)` activation
//! matrix at every site of every layer, in forward order, and may rewrite it
//! in place before downstream computation continues.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use super::CaptureSite;

pub trait ForwardHook {
    fn visit(&mut self, site: CaptureSite, layer: usize, acts: &mut Array2<f32>);
}

/// Leaves every activation untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl ForwardHook for NoHook {
    fn visit(&mut self, _: CaptureSite, _: usize, _: &mut Array2<f32>) {}
}

/// Adapts a closure into a hook.
pub struct FnHook<F>(pub F);

impl<F> ForwardHook for FnHook<F>
where
    F: FnMut(CaptureSite, usize, &mut Array2<f32>),
{
    fn visit(&mut self, site: CaptureSite, layer: usize, acts: &mut Array2<f32>) {
        (self.0)(site, layer, acts)
    }
}

impl<H: ForwardHook + ?Sized> ForwardHook for &mut H {
    fn visit(&mut self, site: CaptureSite, layer: usize, acts: &mut Array2<f32>) {
        (**self).visit(site, layer, acts)
    }
}

impl<H: ForwardHook> ForwardHook for Vec<H> {
    fn visit(&mut self, site: CaptureSite, layer: usize, acts: &mut Array2<f32>) {
        for h in self.iter_mut() {
            h.visit(site, layer, acts);
        }
    }
}

/// Replaces the activation at one `(site, layer, position)` with a fixed
/// vector. Length is checked by [`crate::toylm::Model::run_with_substitution`].
#[derive(Debug, Clone)]
pub struct Substitution {
    pub site: CaptureSite,
    pub layer: usize,
    pub position: usize,
    pub vector: Array1<f32>,
}

impl ForwardHook for Substitution {
    fn visit(&mut self, site: CaptureSite, layer: usize, acts: &mut Array2<f32>) {
        if site == self.site && layer == self.layer {
            acts.row_mut(self.position).assign(&self.vector);
        }
    }
}

/// Sets listed coordinates at one position to zero at the given layers of a
/// site. Used for neuron ablation.
#[derive(Debug, Clone)]
pub struct Clamp {
    pub site: CaptureSite,
    pub position: usize,
    /// layer -> coordinate indices
    pub indices: BTreeMap<usize, Vec<usize>>,
}

impl ForwardHook for Clamp {
    fn visit(&mut self, site: CaptureSite, layer: usize, acts: &mut Array2<f32>) {
        if site != self.site {
            return;
        }
        if let Some(idx) = self.indices.get(&layer) {
            let mut row = acts.row_mut(self.position);
            for &i in idx {
                row[i] = 0.0;
            }
        }
    }
}

/// Copies the activations at requested `(site, layer)` pairs.
#[derive(Debug, Default, Clone)]
pub struct Recorder {
    wanted: Vec<(CaptureSite, usize)>,
    pub captured: BTreeMap<(CaptureSite, usize), Array2<f32>>,
}

impl Recorder {
    pub fn new(wanted: impl IntoIterator<Item = (CaptureSite, usize)>) -> Self {
        Self {
            wanted: wanted.into_iter().collect(),
            captured: BTreeMap::new(),
        }
    }

    pub fn get(&self, site: CaptureSite, layer: usize) -> Option<&Array2<f32>> {
        self.captured.get(&(site, layer))
    }
}

impl ForwardHook for Recorder {
    fn visit(&mut self, site: CaptureSite, layer: usize, acts: &mut Array2<f32>) {
        if self.wanted.contains(&(site, layer)) {
            self.captured.insert((site, layer), acts.clone());
        }
    }
}
