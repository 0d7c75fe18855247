// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation capture at the analysis sites.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::hooks::Recorder;
use super::{CaptureSite, Model};
use crate::error::{Error, Result};

/// One captured activation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub site: CaptureSite,
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<f32>,
    pub input_id: String,
}

/// A tokenized prompt with an identifier carried into its records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureInput {
    pub id: String,
    pub tokens: Vec<u32>,
}

impl CaptureInput {
    pub fn new(id: impl Into<String>, tokens: Vec<u32>) -> Self {
        Self {
            id: id.into(),
            tokens,
        }
    }
}

/// Which token positions to record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// The last prompt token, whose output predicts the answer.
    #[default]
    Final,
    /// Every position of the prompt.
    All,
}

fn check_layers(model: &Model, layers: &[usize]) -> Result<()> {
    if let Some(&l) = layers.iter().find(|&&l| l >= model.config.n_layers) {
        return Err(Error::Index {
            what: "layer",
            index: l,
            limit: model.config.n_layers,
        });
    }
    Ok(())
}

/// One record per (input, layer, selected position), ordered input-major,
/// then layer, then position.
pub fn capture_activations(
    model: &Model,
    inputs: &[CaptureInput],
    site: CaptureSite,
    layers: &[usize],
    position: Position,
) -> Result<Vec<ActivationRecord>> {
    check_layers(model, layers)?;
    let mut out = Vec::new();
    for input in inputs {
        let mut rec = Recorder::new(layers.iter().map(|&l| (site, l)));
        model.hidden(&input.tokens, &mut rec)?;
        let t = input.tokens.len();
        let positions = match position {
            Position::Final => t - 1..t,
            Position::All => 0..t,
        };
        for &l in layers {
            let acts = rec.get(site, l).expect("recorded");
            for p in positions.clone() {
                out.push(ActivationRecord {
                    site,
                    layer: l,
                    position: p,
                    vector: acts.row(p).to_vec(),
                    input_id: input.id.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Final-position activations of every layer in `layers`, one matrix per
/// layer with one row per input. A single forward pass per input.
pub fn capture_matrix(
    model: &Model,
    inputs: &[Vec<u32>],
    site: CaptureSite,
    layers: &[usize],
) -> Result<Vec<Array2<f32>>> {
    check_layers(model, layers)?;
    let width = site.width(&model.config);
    let mut mats: Vec<Array2<f32>> = layers
        .iter()
        .map(|_| Array2::zeros((inputs.len(), width)))
        .collect();
    for (i, tokens) in inputs.iter().enumerate() {
        let mut rec = Recorder::new(layers.iter().map(|&l| (site, l)));
        model.hidden(tokens, &mut rec)?;
        for (m, &l) in mats.iter_mut().zip(layers) {
            let acts = rec.get(site, l).expect("recorded");
            m.row_mut(i).assign(&acts.row(tokens.len() - 1));
        }
    }
    Ok(mats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::{gelu, ModelConfig, Params};
    use ndarray::{array, Array1};

    /// One layer, d_model = d_mlp = 2, attention output zeroed so the
    /// residual stream is embedding plus position.
    fn hand_model() -> Model {
        let cfg = ModelConfig {
            d_model: 2,
            n_layers: 1,
            n_heads: 1,
            d_mlp: 2,
            vocab_size: 3,
            max_seq_len: 4,
            seed: 0,
        };
        let mut p = Params::zeros(&cfg);
        p.tok_emb = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        p.pos_emb = array![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let l = &mut p.layers[0];
        l.ln1_g = Array1::ones(2);
        l.ln2_g = array![1.0, 2.0];
        l.ln2_b = array![0.0, 0.5];
        l.w1 = array![[1.0, 0.0], [0.5, -1.0]];
        l.b1 = array![0.25, 0.0];
        p.lnf_g = Array1::ones(2);
        Model::from_params(cfg, p).unwrap()
    }

    #[test]
    fn mlp_capture_matches_hand_computation() {
        let m = hand_model();
        // token 1 at position 1: x = (2,-1) + (1,0) = (3,-1).
        // mean 1, variance 4, so the normalized vector is (2,-2)/sqrt(4+eps).
        let eps_scale = 2.0 / (4.0f32 + 1e-5).sqrt();
        let xhat = [eps_scale, -eps_scale];
        let mvec = [xhat[0] * 1.0 + 0.0, xhat[1] * 2.0 + 0.5];
        let pre = [mvec[0] + 0.25, 0.5 * mvec[0] - mvec[1]];
        let expect = [gelu(pre[0]), gelu(pre[1])];
        let recs = capture_activations(
            &m,
            &[CaptureInput::new("x", vec![0, 1])],
            CaptureSite::MlpActivation,
            &[0],
            Position::Final,
        )
        .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].position, 1);
        for j in 0..2 {
            assert!((recs[0].vector[j] - expect[j]).abs() < 1e-6, "{:?} vs {expect:?}", recs[0].vector);
        }
    }

    #[test]
    fn record_counts_and_shapes() {
        let cfg = ModelConfig {
            vocab_size: 20,
            ..ModelConfig::new(20, 3)
        };
        let m = Model::new(cfg).unwrap();
        let inputs: Vec<CaptureInput> = (0..10)
            .map(|i| CaptureInput::new(format!("f{i}"), vec![3, 4 + i as u32, 5]))
            .collect();
        let recs = capture_activations(&m, &inputs, CaptureSite::MlpActivation, &[0, 1, 2, 3], Position::Final).unwrap();
        assert_eq!(recs.len(), 40);
        assert!(recs.iter().all(|r| r.vector.len() == 256));
        let all = capture_activations(&m, &inputs[..1], CaptureSite::PostAttnResidual, &[0], Position::All).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|r| r.vector.len() == 64));
        let again = capture_activations(&m, &inputs, CaptureSite::MlpActivation, &[0, 1, 2, 3], Position::Final).unwrap();
        assert_eq!(recs, again);
        assert!(capture_activations(&m, &inputs, CaptureSite::MlpActivation, &[4], Position::Final).is_err());
    }

    #[test]
    fn matrix_capture_agrees_with_records() {
        let m = Model::new(ModelConfig::new(20, 4)).unwrap();
        let toks = vec![vec![3u32, 9, 5], vec![6u32, 7]];
        let mats = capture_matrix(&m, &toks, CaptureSite::PostMlpResidual, &[2]).unwrap();
        let inputs: Vec<CaptureInput> = toks.iter().map(|t| CaptureInput::new("i", t.clone())).collect();
        let recs = capture_activations(&m, &inputs, CaptureSite::PostMlpResidual, &[2], Position::Final).unwrap();
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(mats[0].row(i).to_vec(), r.vector);
        }
    }
}
