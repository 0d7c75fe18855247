// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::hooks::{ForwardHook, NoHook, Substitution};
use super::{CaptureSite, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f32>,
    pub ln1_b: Array1<f32>,
    pub wq: Array2<f32>,
    pub bq: Array1<f32>,
    pub wk: Array2<f32>,
    pub bk: Array1<f32>,
    pub wv: Array2<f32>,
    pub bv: Array1<f32>,
    pub wo: Array2<f32>,
    pub bo: Array1<f32>,
    pub ln2_g: Array1<f32>,
    pub ln2_b: Array1<f32>,
    /// `(d_mlp, d_model)`
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    /// `(d_model, d_mlp)`; column `i` is neuron `i`'s output direction.
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
}

/// Every trainable tensor. Also used as the gradient and optimizer-moment
/// container, since those share the exact shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f32>,
    pub pos_emb: Array2<f32>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f32>,
    pub lnf_b: Array1<f32>,
    pub unembed: Array2<f32>,
}

/// A named view of one parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
    /// Whether weight decay applies (matrices only).
    pub decay: bool,
}

macro_rules! layer_tensors {
    ($m:ident) => {
        [
            ("ln1_g", 1),
            ("ln1_b", 1),
            ("wq", 2),
            ("bq", 1),
            ("wk", 2),
            ("bk", 1),
            ("wv", 2),
            ("bv", 1),
            ("wo", 2),
            ("bo", 1),
            ("ln2_g", 1),
            ("ln2_b", 1),
            ("w1", 2),
            ("b1", 1),
            ("w2", 2),
            ("b2", 1),
        ]
    };
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, m) = (cfg.d_model, cfg.d_mlp);
        Self {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((m, d)),
            b1: Array1::zeros(m),
            w2: Array2::zeros((d, m)),
            b2: Array1::zeros(d),
        }
    }

    fn slices(&self) -> [(&'static str, Vec<usize>, &[f32]); 16] {
        fn a1(a: &Array1<f32>) -> (Vec<usize>, &[f32]) {
            (a.shape().to_vec(), a.as_slice().unwrap())
        }
        fn a2(a: &Array2<f32>) -> (Vec<usize>, &[f32]) {
            (a.shape().to_vec(), a.as_slice().unwrap())
        }
        let names = layer_tensors!(x);
        let parts = [
            a1(&self.ln1_g),
            a1(&self.ln1_b),
            a2(&self.wq),
            a1(&self.bq),
            a2(&self.wk),
            a1(&self.bk),
            a2(&self.wv),
            a1(&self.bv),
            a2(&self.wo),
            a1(&self.bo),
            a1(&self.ln2_g),
            a1(&self.ln2_b),
            a2(&self.w1),
            a1(&self.b1),
            a2(&self.w2),
            a1(&self.b2),
        ];
        let mut i = 0;
        parts.map(|(shape, data)| {
            let name = names[i].0;
            i += 1;
            (name, shape, data)
        })
    }

    fn slices_mut(&mut self) -> [&mut [f32]; 16] {
        [
            self.ln1_g.as_slice_mut().unwrap(),
            self.ln1_b.as_slice_mut().unwrap(),
            self.wq.as_slice_mut().unwrap(),
            self.bq.as_slice_mut().unwrap(),
            self.wk.as_slice_mut().unwrap(),
            self.bk.as_slice_mut().unwrap(),
            self.wv.as_slice_mut().unwrap(),
            self.bv.as_slice_mut().unwrap(),
            self.wo.as_slice_mut().unwrap(),
            self.bo.as_slice_mut().unwrap(),
            self.ln2_g.as_slice_mut().unwrap(),
            self.ln2_b.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            tok_emb: Array2::zeros((cfg.vocab_size, cfg.d_model)),
            pos_emb: Array2::zeros((cfg.max_seq_len, cfg.d_model)),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            lnf_g: Array1::zeros(cfg.d_model),
            lnf_b: Array1::zeros(cfg.d_model),
            unembed: Array2::zeros((cfg.vocab_size, cfg.d_model)),
        }
    }

    /// Seeded initialization: N(0, 0.02) weights, residual-output projections
    /// scaled by `1/sqrt(2 n_layers)`, unit LayerNorm gains, zero biases.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let proj_scale = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
        let mut p = Self::zeros(cfg);
        let fill = |a: &mut [f32], scale: f32, rng: &mut ChaCha8Rng| {
            for x in a.iter_mut() {
                *x = normal.sample(rng) * scale;
            }
        };
        fill(p.tok_emb.as_slice_mut().unwrap(), 1.0, &mut rng);
        fill(p.pos_emb.as_slice_mut().unwrap(), 1.0, &mut rng);
        for l in &mut p.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            fill(l.wq.as_slice_mut().unwrap(), 1.0, &mut rng);
            fill(l.wk.as_slice_mut().unwrap(), 1.0, &mut rng);
            fill(l.wv.as_slice_mut().unwrap(), 1.0, &mut rng);
            fill(l.wo.as_slice_mut().unwrap(), proj_scale, &mut rng);
            fill(l.w1.as_slice_mut().unwrap(), 1.0, &mut rng);
            fill(l.w2.as_slice_mut().unwrap(), proj_scale, &mut rng);
        }
        p.lnf_g.fill(1.0);
        fill(p.unembed.as_slice_mut().unwrap(), 1.0, &mut rng);
        p
    }

    /// All tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![
            ParamRef {
                name: "tok_emb".into(),
                shape: self.tok_emb.shape().to_vec(),
                data: self.tok_emb.as_slice().unwrap(),
                decay: true,
            },
            ParamRef {
                name: "pos_emb".into(),
                shape: self.pos_emb.shape().to_vec(),
                data: self.pos_emb.as_slice().unwrap(),
                decay: true,
            },
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, shape, data) in l.slices() {
                out.push(ParamRef {
                    name: format!("layers.{i}.{name}"),
                    decay: shape.len() == 2,
                    shape,
                    data,
                });
            }
        }
        out.push(ParamRef {
            name: "lnf_g".into(),
            shape: self.lnf_g.shape().to_vec(),
            data: self.lnf_g.as_slice().unwrap(),
            decay: false,
        });
        out.push(ParamRef {
            name: "lnf_b".into(),
            shape: self.lnf_b.shape().to_vec(),
            data: self.lnf_b.as_slice().unwrap(),
            decay: false,
        });
        out.push(ParamRef {
            name: "unembed".into(),
            shape: self.unembed.shape().to_vec(),
            data: self.unembed.as_slice().unwrap(),
            decay: true,
        });
        out
    }

    /// Mutable slices in the same order as [`Params::tensors`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.extend(l.slices_mut());
        }
        out.push(self.lnf_g.as_slice_mut().unwrap());
        out.push(self.lnf_b.as_slice_mut().unwrap());
        out.push(self.unembed.as_slice_mut().unwrap());
        out
    }

    pub fn fill_zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

// ---------------------------------------------------------------------------
// Forward cache
// ---------------------------------------------------------------------------

struct LnCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    probs: Vec<Vec<Array2<f32>>>,
    o: Array2<f32>,
    ln2: LnCache,
    m: Array2<f32>,
    pre: Array2<f32>,
    act: Array2<f32>,
}

pub(crate) struct ForwardCache {
    tokens: Vec<u32>,
    /// `[start, end)` row ranges of the packed sequences.
    segments: Vec<(usize, usize)>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    y: Array2<f32>,
}

impl ForwardCache {
    pub(crate) fn hidden(&self) -> &Array2<f32> {
        &self.y
    }
}

fn layer_norm(x: &Array2<f32>, g: &Array1<f32>, b: &Array1<f32>) -> (Array2<f32>, LnCache) {
    let n = x.ncols() as f32;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f32>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates dg, db.
fn layer_norm_backward(
    dy: &Array2<f32>,
    cache: &LnCache,
    g: &Array1<f32>,
    grads: Option<(&mut Array1<f32>, &mut Array1<f32>)>,
) -> Array2<f32> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let n = dy.ncols() as f32;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / n;
        let mean_dhx = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f32>() / n;
        let r = cache.rstd[i];
        let mut out = dx.row_mut(i);
        for j in 0..dh.len() {
            out[j] = r * (dh[j] - mean_dh - xh[j] * mean_dhx);
        }
    }
    dx
}

fn linear(x: &Array2<f32>, w: &Array2<f32>, b: &Array1<f32>) -> Array2<f32> {
    x.dot(&w.t()) + b
}

/// dy -> dx, accumulating dW += dy^T x and db += colsum(dy).
fn linear_backward(
    dy: &Array2<f32>,
    x: &Array2<f32>,
    w: &Array2<f32>,
    grads: Option<(&mut Array2<f32>, &mut Array1<f32>)>,
) -> Array2<f32> {
    if let Some((dw, db)) = grads {
        ndarray::linalg::general_mat_mul(1.0, &dy.t(), x, 1.0, dw);
        *db += &dy.sum_axis(Axis(0));
    }
    dy.dot(w)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expect = Params::zeros(&config);
        let ok = expect.tensors().iter().zip(params.tensors().iter()).all(|(a, b)| a.shape == b.shape)
            && expect.layers.len() == params.layers.len();
        if !ok {
            return Err(Error::config("parameter shapes do not match config"));
        }
        Ok(Self { config, params })
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Index {
                what: "sequence length",
                index: tokens.len(),
                limit: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token",
                index: t as usize,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32], segments: &[(usize, usize)]) -> Array2<f32> {
        let d = self.config.d_model;
        let mut x = Array2::zeros((tokens.len(), d));
        for &(start, end) in segments {
            for i in start..end {
                let mut row = x.row_mut(i);
                row.assign(&self.params.tok_emb.row(tokens[i] as usize));
                row += &self.params.pos_emb.row(i - start);
            }
        }
        x
    }

    /// Causal multi-head attention within each segment. `probs[s][h]` holds
    /// segment `s`, head `h`.
    #[allow(clippy::type_complexity)]
    fn attention(
        &self,
        l: usize,
        a: &Array2<f32>,
        segments: &[(usize, usize)],
    ) -> (Array2<f32>, Array2<f32>, Array2<f32>, Vec<Vec<Array2<f32>>>, Array2<f32>) {
        let p = &self.params.layers[l];
        let q = linear(a, &p.wq, &p.bq);
        let k = linear(a, &p.wk, &p.bk);
        let v = linear(a, &p.wv, &p.bv);
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut o = Array2::zeros((a.nrows(), self.config.d_model));
        let mut probs = Vec::with_capacity(segments.len());
        for &(start, end) in segments {
            let t = end - start;
            let mut seg_probs = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let r = h * dh..(h + 1) * dh;
                let qh = q.slice(s![start..end, r.clone()]);
                let kh = k.slice(s![start..end, r.clone()]);
                let vh = v.slice(s![start..end, r.clone()]);
                let mut sc = qh.dot(&kh.t());
                for i in 0..t {
                    let mut row = sc.row_mut(i);
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..=i {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for j in 0..t {
                        if j <= i {
                            row[j] = (row[j] - max).exp();
                            sum += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row.mapv_inplace(|x| x / sum);
                }
                o.slice_mut(s![start..end, r]).assign(&sc.dot(&vh));
                seg_probs.push(sc);
            }
            probs.push(seg_probs);
        }
        (q, k, v, probs, o)
    }

    /// Runs the transformer trunk on one sequence, returning the final
    /// LayerNorm output `(T, d_model)` and the backward cache.
    pub(crate) fn forward_cached(&self, tokens: &[u32], hook: &mut dyn ForwardHook) -> ForwardCache {
        self.forward_packed(tokens, vec![(0, tokens.len())], hook)
    }

    /// Several sequences stacked row-wise. Rows of different segments never
    /// attend to each other, and position embeddings restart per segment.
    /// Hooks see the packed matrix.
    pub(crate) fn forward_packed(
        &self,
        tokens: &[u32],
        segments: Vec<(usize, usize)>,
        hook: &mut dyn ForwardHook,
    ) -> ForwardCache {
        let mut x = self.embed(tokens, &segments);
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for (l, p) in self.params.layers.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, &p.ln1_g, &p.ln1_b);
            let (q, k, v, probs, o) = self.attention(l, &a, &segments);
            x = x + linear(&o, &p.wo, &p.bo);
            hook.visit(CaptureSite::PostAttnResidual, l, &mut x);
            let (m, ln2) = layer_norm(&x, &p.ln2_g, &p.ln2_b);
            let pre = linear(&m, &p.w1, &p.b1);
            let mut act = pre.mapv(gelu);
            hook.visit(CaptureSite::MlpActivation, l, &mut act);
            x = x + linear(&act, &p.w2, &p.b2);
            hook.visit(CaptureSite::PostMlpResidual, l, &mut x);
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                m,
                pre,
                act,
            });
        }
        let (y, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);
        ForwardCache {
            tokens: tokens.to_vec(),
            segments,
            layers,
            lnf,
            y,
        }
    }

    /// Final-LayerNorm hidden states `(T, d_model)` under a hook.
    pub fn hidden(&self, tokens: &[u32], hook: &mut dyn ForwardHook) -> Result<Array2<f32>> {
        self.check_tokens(tokens)?;
        Ok(self.forward_cached(tokens, hook).y)
    }

    /// Logits for one hidden row.
    pub fn logits_row(&self, hidden: ArrayView1<f32>) -> Array1<f32> {
        self.params.unembed.dot(&hidden)
    }

    /// Full logits `(T, vocab)` under a hook.
    pub fn logits_with(&self, tokens: &[u32], hook: &mut dyn ForwardHook) -> Result<Array2<f32>> {
        let y = self.hidden(tokens, hook)?;
        Ok(y.dot(&self.params.unembed.t()))
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Array2<f32>> {
        self.logits_with(tokens, &mut NoHook)
    }

    /// Logits at the last position only.
    pub fn last_logits_with(&self, tokens: &[u32], hook: &mut dyn ForwardHook) -> Result<Array1<f32>> {
        let y = self.hidden(tokens, hook)?;
        Ok(self.logits_row(y.row(y.nrows() - 1)))
    }

    /// Forward pass with the activation at `(site, layer, position)` replaced
    /// by `new_vector`.
    pub fn run_with_substitution(
        &self,
        tokens: &[u32],
        site: CaptureSite,
        layer: usize,
        position: usize,
        new_vector: &Array1<f32>,
    ) -> Result<Array2<f32>> {
        self.check_site(site, layer, new_vector.len())?;
        if position >= tokens.len() {
            return Err(Error::Index {
                what: "position",
                index: position,
                limit: tokens.len(),
            });
        }
        let mut hook = Substitution {
            site,
            layer,
            position,
            vector: new_vector.clone(),
        };
        self.logits_with(tokens, &mut hook)
    }

    pub(crate) fn check_site(&self, site: CaptureSite, layer: usize, len: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                limit: self.config.n_layers,
            });
        }
        let width = site.width(&self.config);
        if len != width {
            return Err(Error::Shape {
                context: "substitution vector",
                expected: width,
                got: len,
            });
        }
        Ok(())
    }

    /// Backpropagates `d_logits` `(T, vocab)` through the cached forward pass.
    ///
    /// With `grads`, parameter gradients are accumulated into it. With
    /// `stop_at = Some(l)`, backpropagation halts once the gradient with
    /// respect to layer `l`'s MLP activation is known, and that `(T, d_mlp)`
    /// gradient is returned. Hooked activations are treated as ordinary
    /// values; callers that substitute below the stop layer must not request
    /// parameter gradients.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Array2<f32>,
        mut grads: Option<&mut Params>,
        stop_at: Option<usize>,
    ) -> Option<Array2<f32>> {
        let p = &self.params;
        if let Some(g) = grads.as_deref_mut() {
            ndarray::linalg::general_mat_mul(1.0, &d_logits.t(), &cache.y, 1.0, &mut g.unembed);
        }
        let dy = d_logits.dot(&p.unembed);
        let mut dx = layer_norm_backward(
            &dy,
            &cache.lnf,
            &p.lnf_g,
            grads.as_deref_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
        );
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        for l in (0..self.config.n_layers).rev() {
            let lp = &p.layers[l];
            let c = &cache.layers[l];
            let mut gl = grads.as_deref_mut().map(|g| &mut g.layers[l]);

            // MLP
            let d_act = linear_backward(&dx, &c.act, &lp.w2, gl.as_deref_mut().map(|g| (&mut g.w2, &mut g.b2)));
            if stop_at == Some(l) {
                return Some(d_act);
            }
            let mut d_pre = d_act;
            d_pre.zip_mut_with(&c.pre, |d, &x| *d *= gelu_grad(x));
            let dm = linear_backward(&d_pre, &c.m, &lp.w1, gl.as_deref_mut().map(|g| (&mut g.w1, &mut g.b1)));
            dx += &layer_norm_backward(&dm, &c.ln2, &lp.ln2_g, gl.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)));

            // attention
            let d_o = linear_backward(&dx, &c.o, &lp.wo, gl.as_deref_mut().map(|g| (&mut g.wo, &mut g.bo)));
            let rows = dx.nrows();
            let mut dq = Array2::zeros((rows, self.config.d_model));
            let mut dk = Array2::zeros((rows, self.config.d_model));
            let mut dv = Array2::zeros((rows, self.config.d_model));
            for (si, &(start, end)) in cache.segments.iter().enumerate() {
                let t = end - start;
                for h in 0..self.config.n_heads {
                    let r = h * dh..(h + 1) * dh;
                    let probs = &c.probs[si][h];
                    let d_oh = d_o.slice(s![start..end, r.clone()]);
                    let qh = c.q.slice(s![start..end, r.clone()]);
                    let kh = c.k.slice(s![start..end, r.clone()]);
                    let vh = c.v.slice(s![start..end, r.clone()]);
                    let dp = d_oh.dot(&vh.t());
                    dv.slice_mut(s![start..end, r.clone()]).assign(&probs.t().dot(&d_oh));
                    let mut ds = Array2::zeros((t, t));
                    for i in 0..t {
                        let dot: f32 = (0..=i).map(|j| dp[[i, j]] * probs[[i, j]]).sum();
                        for j in 0..=i {
                            ds[[i, j]] = probs[[i, j]] * (dp[[i, j]] - dot) * scale;
                        }
                    }
                    dq.slice_mut(s![start..end, r.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(s![start..end, r]).assign(&ds.t().dot(&qh));
                }
            }
            let mut da = linear_backward(&dq, &c.a, &lp.wq, gl.as_deref_mut().map(|g| (&mut g.wq, &mut g.bq)));
            da += &linear_backward(&dk, &c.a, &lp.wk, gl.as_deref_mut().map(|g| (&mut g.wk, &mut g.bk)));
            da += &linear_backward(&dv, &c.a, &lp.wv, gl.as_deref_mut().map(|g| (&mut g.wv, &mut g.bv)));
            dx += &layer_norm_backward(&da, &c.ln1, &lp.ln1_g, gl.map(|g| (&mut g.ln1_g, &mut g.ln1_b)));
        }
        if let Some(g) = grads {
            for &(start, end) in &cache.segments {
                for i in start..end {
                    let mut e = g.tok_emb.row_mut(cache.tokens[i] as usize);
                    e += &dx.row(i);
                    let mut pe = g.pos_emb.row_mut(i - start);
                    pe += &dx.row(i);
                }
            }
        }
        None
    }

    /// Gradient of the probability of `target` at the last position with
    /// respect to layer `layer`'s MLP activation, evaluated with the
    /// activation at `position` replaced by `value`. Also returns the
    /// probability itself.
    pub fn prob_grad_wrt_mlp(
        &self,
        tokens: &[u32],
        layer: usize,
        position: usize,
        value: &Array1<f32>,
        target: u32,
    ) -> Result<(f32, Array1<f32>)> {
        self.check_tokens(tokens)?;
        self.check_site(CaptureSite::MlpActivation, layer, value.len())?;
        let mut hook = Substitution {
            site: CaptureSite::MlpActivation,
            layer,
            position,
            vector: value.clone(),
        };
        let cache = self.forward_cached(tokens, &mut hook);
        let t = tokens.len();
        let logits = self.logits_row(cache.y.row(t - 1));
        let probs = softmax(logits.view());
        let pa = probs[target as usize];
        let mut d_logits = Array2::zeros((t, self.config.vocab_size));
        {
            let mut row = d_logits.row_mut(t - 1);
            for (v, d) in row.iter_mut().enumerate() {
                let delta = if v == target as usize { 1.0 } else { 0.0 };
                *d = pa * (delta - probs[v]);
            }
        }
        let d_act = self
            .backward(&cache, &d_logits, None, Some(layer))
            .expect("stop layer is valid");
        Ok((pa, d_act.row(position).to_owned()))
    }

    pub fn w2(&self, layer: usize) -> &Array2<f32> {
        &self.params.layers[layer].w2
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "seed": self.config.seed,
        });
        let mut ck = Checkpoint::new("toylm", meta);
        for t in self.params.tensors() {
            ck.push_f32(t.name, &t.shape, t.data.to_vec());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("toylm")?;
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())?;
        config.validate()?;
        let mut params = Params::zeros(&config);
        let names: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        for ((name, shape), dst) in names.iter().zip(params.slices_mut()) {
            let (got_shape, data) = ck.f32(name)?;
            if got_shape != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {got_shape:?}, expected {shape:?}"
                )));
            }
            dst.copy_from_slice(data);
        }
        Ok(Self { config, params })
    }
}

pub(crate) fn softmax(logits: ArrayView1<f32>) -> Array1<f32> {
    let max = logits.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = logits.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

pub(crate) fn log_softmax(logits: ArrayView1<f32>) -> Array1<f32> {
    let max = logits.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let lse = logits.iter().map(|&x| ((x - max) as f64).exp()).sum::<f64>().ln() as f32 + max;
    logits.mapv(|x| x - lse)
}
