// SPDX-License-Identifier: MIT OR Apache-2.0

//! Knowledge-neuron localization with integrated gradients over MLP
//! activations, using an all-`<eos>` baseline prompt.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toylm::{CaptureSite, Model, Recorder};
use crate::units::{check_tau, select_fraction_of_max, SelectedUnits, UnitId, UnitKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgConfig {
    /// Riemann steps N.
    pub steps: usize,
    /// Selection threshold as a fraction of the maximum attribution.
    pub tau: f64,
    pub baseline_token: u32,
}

impl IgConfig {
    pub fn new(baseline_token: u32) -> Self {
        Self {
            steps: 20,
            tau: 0.3,
            baseline_token,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("IG steps must be at least 1"));
        }
        check_tau(self.tau)
    }
}

/// Attribution scores, one row per analysed layer, one column per neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub prompt_id: String,
    pub steps: usize,
    pub layers: Vec<usize>,
    pub values: Array2<f64>,
    pub normalized: bool,
}

#[derive(Serialize)]
struct LayerValues<'a> {
    layer: usize,
    values: &'a [f64],
}

#[derive(Serialize)]
struct MapJson<'a> {
    prompt_uuid: &'a str,
    steps: usize,
    normalized: bool,
    layers: Vec<LayerValues<'a>>,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// Divides every score by the sum of all scores.
    pub fn normalize(&mut self) -> Result<()> {
        let total = self.total();
        if !total.is_finite() || total.abs() < 1e-300 {
            return Err(Error::Undefined(format!(
                "attribution total is {total}; normalization undefined"
            )));
        }
        self.values /= total;
        self.normalized = true;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(r, &layer)| LayerValues {
                layer,
                values: self.values.row(r).to_slice().expect("standard layout"),
            })
            .collect();
        Ok(serde_json::to_string(&MapJson {
            prompt_uuid: &self.prompt_id,
            steps: self.steps,
            normalized: self.normalized,
            layers,
        })?)
    }

    /// Unit scores for selection.
    pub fn scored(&self) -> Vec<(UnitId, f64)> {
        let mut out = Vec::with_capacity(self.values.len());
        for (r, &layer) in self.layers.iter().enumerate() {
            for (j, &v) in self.values.row(r).iter().enumerate() {
                out.push((UnitId::new(CaptureSite::MlpActivation, layer, j), v));
            }
        }
        out
    }
}

/// Same length as `prompt`, every token replaced by `eos`.
pub fn baseline_prompt(prompt: &[u32], eos: u32) -> Vec<u32> {
    vec![eos; prompt.len()]
}

/// Riemann integrated gradients along the straight path from `baseline` to
/// `input`: `Δ ⊙ (1/N) Σ_{k=1..N} ∇F(baseline + (k/N)Δ)`.
pub fn integrated_gradients<G>(baseline: &Array1<f64>, input: &Array1<f64>, steps: usize, mut grad: G) -> Result<Array1<f64>>
where
    G: FnMut(&Array1<f64>) -> Result<Array1<f64>>,
{
    if steps == 0 {
        return Err(Error::config("IG steps must be at least 1"));
    }
    if baseline.len() != input.len() {
        return Err(Error::Shape {
            context: "IG baseline",
            expected: input.len(),
            got: baseline.len(),
        });
    }
    let delta = input - baseline;
    let mut acc = Array1::<f64>::zeros(input.len());
    for k in 1..=steps {
        let point = baseline + &(&delta * (k as f64 / steps as f64));
        let g = grad(&point)?;
        if g.len() != input.len() {
            return Err(Error::Shape {
                context: "IG gradient",
                expected: input.len(),
                got: g.len(),
            });
        }
        acc += &g;
    }
    Ok(delta * acc / steps as f64)
}

/// Central finite-difference gradient with step `h`.
pub fn finite_difference_gradient<F>(at: &Array1<f64>, h: f64, mut f: F) -> Result<Array1<f64>>
where
    F: FnMut(&Array1<f64>) -> Result<f64>,
{
    let mut g = Array1::zeros(at.len());
    let mut x = at.clone();
    for i in 0..at.len() {
        x[i] = at[i] + h;
        let up = f(&x)?;
        x[i] = at[i] - h;
        let down = f(&x)?;
        x[i] = at[i];
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

fn mlp_activations(model: &Model, tokens: &[u32], layers: &[usize]) -> Result<Vec<Array2<f32>>> {
    let mut rec = Recorder::new(layers.iter().map(|&l| (CaptureSite::MlpActivation, l)));
    model.hidden(tokens, &mut rec)?;
    Ok(layers
        .iter()
        .map(|&l| rec.get(CaptureSite::MlpActivation, l).expect("recorded").clone())
        .collect())
}

/// Gradient of the first answer token's probability with respect to layer
/// `layer`'s MLP activation at `position`, with that activation set to
/// `value`.
fn prob_grad(model: &Model, prompt: &[u32], target: u32, layer: usize, position: usize, value: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    let v = value.mapv(|x| x as f32);
    let (p, g) = model.prob_grad_wrt_mlp(prompt, layer, position, &v, target)?;
    Ok((p as f64, g.mapv(|x| x as f64)))
}

/// Raw IG attribution map over `layers`, summed over prompt positions.
///
/// At each (layer, position) the whole MLP activation vector is interpolated
/// from its baseline-prompt value to its real value at once, and one
/// gradient evaluation serves every neuron of that layer.
pub fn ig_attribution(
    model: &Model,
    prompt_id: &str,
    prompt: &[u32],
    answer: &[u32],
    layers: &[usize],
    cfg: &IgConfig,
) -> Result<AttributionMap> {
    cfg.validate()?;
    let &target = answer.first().ok_or_else(|| Error::Empty("answer tokens".into()))?;
    if layers.is_empty() {
        return Err(Error::Empty("layer list".into()));
    }
    let base = baseline_prompt(prompt, cfg.baseline_token);
    let real_acts = mlp_activations(model, prompt, layers)?;
    let base_acts = mlp_activations(model, &base, layers)?;
    let d_mlp = model.config.d_mlp;
    let mut values = Array2::<f64>::zeros((layers.len(), d_mlp));
    for (r, &layer) in layers.iter().enumerate() {
        for pos in 0..prompt.len() {
            let w_real = real_acts[r].row(pos).mapv(|x| x as f64);
            let w_base = base_acts[r].row(pos).mapv(|x| x as f64);
            let attr = integrated_gradients(&w_base, &w_real, cfg.steps, |point| {
                Ok(prob_grad(model, prompt, target, layer, pos, point)?.1)
            })?;
            if let Some(j) = attr.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "attribution of layer {layer} neuron {j} at position {pos}"
                )));
            }
            let mut row = values.row_mut(r);
            row += &attr;
        }
    }
    Ok(AttributionMap {
        prompt_id: prompt_id.to_string(),
        steps: cfg.steps,
        layers: layers.to_vec(),
        values,
        normalized: false,
    })
}

/// IG for a single neuron at one position, all other coordinates left at
/// their real values. Used to check completeness against `F(w̄) − F(w′)`.
pub fn ig_single_neuron(
    model: &Model,
    prompt: &[u32],
    answer: &[u32],
    layer: usize,
    position: usize,
    neuron: usize,
    baseline_value: f64,
    steps: usize,
) -> Result<f64> {
    let &target = answer.first().ok_or_else(|| Error::Empty("answer tokens".into()))?;
    let real = mlp_activations(model, prompt, &[layer])?.remove(0).row(position).mapv(|x| x as f64);
    if neuron >= real.len() {
        return Err(Error::Index {
            what: "neuron",
            index: neuron,
            limit: real.len(),
        });
    }
    let b = Array1::from_elem(1, baseline_value);
    let w = Array1::from_elem(1, real[neuron]);
    let attr = integrated_gradients(&b, &w, steps, |point| {
        let mut v = real.clone();
        v[neuron] = point[0];
        let g = prob_grad(model, prompt, target, layer, position, &v)?.1;
        Ok(Array1::from_elem(1, g[neuron]))
    })?;
    Ok(attr[0])
}

/// Probability of the first answer token with one neuron's activation at
/// `position` overridden.
pub fn prob_with_neuron(model: &Model, prompt: &[u32], answer: &[u32], layer: usize, position: usize, neuron: usize, value: f64) -> Result<f64> {
    let &target = answer.first().ok_or_else(|| Error::Empty("answer tokens".into()))?;
    let mut real = mlp_activations(model, prompt, &[layer])?.remove(0).row(position).mapv(|x| x as f64);
    real[neuron] = value;
    Ok(prob_grad(model, prompt, target, layer, position, &real)?.0)
}

/// Neurons whose attribution exceeds `tau` times the map's maximum.
pub fn select_neurons(attr: &AttributionMap, tau: f64) -> Result<SelectedUnits> {
    check_tau(tau)?;
    Ok(select_fraction_of_max(UnitKind::Neuron, attr.scored(), tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn baseline_replaces_every_token() {
        assert_eq!(baseline_prompt(&[5, 6, 7], 0), vec![0, 0, 0]);
        assert!(baseline_prompt(&[], 0).is_empty());
    }

    #[test]
    fn linear_f_is_exact_for_any_n() {
        for n in [1, 2, 7, 20] {
            let a = integrated_gradients(&array![0.0], &array![3.0], n, |_| Ok(array![2.0])).unwrap();
            assert_eq!(a[0], 6.0);
        }
    }

    #[test]
    fn constant_f_gives_zero() {
        let a = integrated_gradients(&array![1.0, 2.0], &array![4.0, -1.0], 10, |_| Ok(array![0.0, 0.0])).unwrap();
        assert_eq!(a, array![0.0, 0.0]);
    }

    #[test]
    fn quadratic_converges() {
        let a = integrated_gradients(&array![1.0], &array![3.0], 300, |w| Ok(w * 2.0)).unwrap();
        assert!((a[0] - 8.0).abs() / 8.0 < 0.01);
    }

    #[test]
    fn finite_differences_of_a_quadratic() {
        let g = finite_difference_gradient(&array![1.0, -2.0], 1e-3, |x| Ok(x[0] * x[0] + 3.0 * x[1])).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn selection_and_normalization() {
        let mut map = AttributionMap {
            prompt_id: "p".into(),
            steps: 20,
            layers: vec![0],
            values: array![[0.5, 0.2, 0.05]],
            normalized: false,
        };
        let s = select_neurons(&map, 0.3).unwrap();
        assert_eq!(s.units.iter().map(|u| (u.layer, u.index)).collect::<Vec<_>>(), vec![(0, 0), (0, 1)]);
        map.normalize().unwrap();
        assert!((map.total() - 1.0).abs() < 1e-12);
        let mut zero = AttributionMap {
            values: array![[0.0, 0.0]],
            ..map.clone()
        };
        assert!(matches!(zero.normalize(), Err(Error::Undefined(_))));
        let json: serde_json::Value = serde_json::from_str(&map.to_json().unwrap()).unwrap();
        assert_eq!(json["prompt_uuid"], "p");
        assert_eq!(json["layers"][0]["values"].as_array().unwrap().len(), 3);
    }
}
