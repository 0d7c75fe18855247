// SPDX-License-Identifier: MIT OR Apache-2.0

//! JumpReLU sparse autoencoders.
//!
//! Inputs are standardized with stored per-dimension statistics, encoded as
//! `f = z ⊙ H(z − θ)` with `z = W_enc x + b_enc`, and decoded as
//! `x̂ = W_dec f + b_dec`. `H(0) = 0`, so a pre-activation exactly at its
//! threshold is inactive. Training minimizes `‖x − x̂‖² + λ‖f‖₀` with a
//! rectangular-kernel straight-through estimator for the threshold gradient.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::toylm::CaptureSite;
use crate::units::{check_tau, select_per_input_union, SelectedUnits, UnitId, UnitKind};

const STD_FLOOR: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    /// Weight of the L0 penalty.
    pub lambda: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// `d_f = n_multiplier · d_in`.
    pub n_multiplier: usize,
    /// Straight-through kernel width, in standardized units.
    pub ste_bandwidth: f32,
    /// Initial threshold for every feature, in standardized units.
    pub theta_init: f32,
    /// Fraction of rows held out for early stopping.
    pub val_fraction: f64,
    pub tied: bool,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            lr: 1e-3,
            batch_size: 256,
            epochs: 100,
            patience: 10,
            n_multiplier: 4,
            ste_bandwidth: 0.001,
            theta_init: 0.5,
            val_fraction: 0.1,
            tied: false,
            seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda must be non-negative"));
        }
        if self.n_multiplier == 0 {
            return Err(Error::config("n_multiplier must be at least 1"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("lr, batch_size and epochs must be positive"));
        }
        if !(self.ste_bandwidth > 0.0) || !(self.theta_init > 0.0) {
            return Err(Error::config("ste_bandwidth and theta_init must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeModel {
    /// `(d_f, d_in)`
    pub w_enc: Array2<f32>,
    pub b_enc: Array1<f32>,
    /// `(d_in, d_f)`; equals `w_enc` transposed when `tied`.
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
    pub theta: Array1<f32>,
    pub tied: bool,
    pub site: CaptureSite,
    pub layer: usize,
    pub mean: Array1<f32>,
    pub std: Array1<f32>,
}

/// Per-epoch training losses (recon + λ·L0, standardized units).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SaeTrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    /// Set when there were fewer than `10·d_f` rows.
    pub few_samples: bool,
}

impl SaeTrainReport {
    pub fn final_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }
}

impl SaeModel {
    pub fn d_in(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn d_f(&self) -> usize {
        self.w_enc.nrows()
    }

    /// An SAE with explicit weights, identity normalization.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        w_enc: Array2<f32>,
        b_enc: Array1<f32>,
        w_dec: Option<Array2<f32>>,
        b_dec: Array1<f32>,
        theta: Array1<f32>,
        site: CaptureSite,
        layer: usize,
    ) -> Result<Self> {
        let (d_f, d_in) = w_enc.dim();
        let tied = w_dec.is_none();
        let w_enc = w_enc.as_standard_layout().into_owned();
        let w_dec = match w_dec {
            Some(w) => w.as_standard_layout().into_owned(),
            None => w_enc.t().as_standard_layout().into_owned(),
        };
        if w_dec.dim() != (d_in, d_f) {
            return Err(Error::Shape {
                context: "decoder matrix rows",
                expected: d_in,
                got: w_dec.nrows(),
            });
        }
        for (ctx, len, want) in [
            ("encoder bias", b_enc.len(), d_f),
            ("threshold vector", theta.len(), d_f),
            ("decoder bias", b_dec.len(), d_in),
        ] {
            if len != want {
                return Err(Error::Shape {
                    context: ctx,
                    expected: want,
                    got: len,
                });
            }
        }
        if theta.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::config("thresholds must be positive"));
        }
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            theta,
            tied,
            site,
            layer,
            mean: Array1::zeros(d_in),
            std: Array1::ones(d_in),
        })
    }

    fn check_len(&self, context: &'static str, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(Error::Shape { context, expected, got });
        }
        Ok(())
    }

    pub fn normalize(&self, h: ArrayView1<f32>) -> Array1<f32> {
        (&h - &self.mean) / &self.std
    }

    pub fn denormalize(&self, x: ArrayView1<f32>) -> Array1<f32> {
        &x * &self.std + &self.mean
    }

    /// Pre-activations `W_enc x + b_enc` of a standardized input.
    pub fn preactivations(&self, x: ArrayView1<f32>) -> Array1<f32> {
        self.w_enc.dot(&x) + &self.b_enc
    }

    /// Feature activations of a raw activation vector.
    pub fn encode(&self, h: ArrayView1<f32>) -> Result<Array1<f32>> {
        self.check_len("sae input", h.len(), self.d_in())?;
        let mut z = self.preactivations(self.normalize(h).view());
        z.zip_mut_with(&self.theta, |z, &t| *z = jump_relu(*z, t));
        Ok(z)
    }

    /// Feature activations of many raw rows.
    pub fn encode_batch(&self, h: &Array2<f32>) -> Result<Array2<f32>> {
        self.check_len("sae input", h.ncols(), self.d_in())?;
        let x = (h - &self.mean) / &self.std;
        let mut z = x.dot(&self.w_enc.t()) + &self.b_enc;
        for mut row in z.rows_mut() {
            row.zip_mut_with(&self.theta, |z, &t| *z = jump_relu(*z, t));
        }
        Ok(z)
    }

    /// Reconstruction in original activation units.
    pub fn decode(&self, f: ArrayView1<f32>) -> Result<Array1<f32>> {
        self.check_len("feature vector", f.len(), self.d_f())?;
        let mut x = self.b_dec.clone();
        for (i, &v) in f.iter().enumerate() {
            if v != 0.0 {
                x.scaled_add(v, &self.w_dec.column(i));
            }
        }
        Ok(self.denormalize(x.view()))
    }

    pub fn decode_batch(&self, f: &Array2<f32>) -> Result<Array2<f32>> {
        self.check_len("feature vector", f.ncols(), self.d_f())?;
        let x = f.dot(&self.w_dec.t()) + &self.b_dec;
        Ok(x * &self.std + &self.mean)
    }

    /// Encodes, zeroes the features in `mask`, and decodes.
    pub fn ablate_and_reconstruct(&self, h: ArrayView1<f32>, mask: &[usize]) -> Result<Array1<f32>> {
        let mut f = self.encode(h)?;
        for &i in mask {
            if i >= self.d_f() {
                return Err(Error::Index {
                    what: "feature",
                    index: i,
                    limit: self.d_f(),
                });
            }
            f[i] = 0.0;
        }
        self.decode(f.view())
    }

    /// Features above `tau1` times this input's maximum activation.
    pub fn select_features(&self, h: ArrayView1<f32>, tau1: f64) -> Result<SelectedUnits> {
        check_tau(tau1)?;
        let f = self.encode(h)?;
        Ok(select_per_input_union(
            UnitKind::Feature,
            std::iter::once(self.scored(&f)),
            tau1,
        ))
    }

    /// Pairs each activation with its unit id.
    pub fn scored(&self, f: &Array1<f32>) -> Vec<(UnitId, f64)> {
        f.iter()
            .enumerate()
            .map(|(i, &v)| (UnitId::new(self.site, self.layer, i), v as f64))
            .collect()
    }

    /// Mean `‖f‖₀` and mean relative L2 error `‖h − ĥ‖ / ‖h‖` (original
    /// units) over the rows of `h`.
    pub fn quality(&self, h: &Array2<f32>) -> Result<SaeQuality> {
        if h.nrows() == 0 {
            return Err(Error::Empty("activation rows".into()));
        }
        let f = self.encode_batch(h)?;
        let rec = self.decode_batch(&f)?;
        let mut l0 = 0.0;
        let mut rel = 0.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..h.nrows() {
            l0 += f.row(i).iter().filter(|&&v| v != 0.0).count() as f64;
            let e: f64 = h.row(i).iter().zip(rec.row(i)).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            let n: f64 = h.row(i).iter().map(|&a| (a as f64).powi(2)).sum();
            rel += (e / n.max(1e-30)).sqrt();
            let xn = self.normalize(h.row(i));
            let xr = self.normalize(rec.row(i));
            num += xn.iter().zip(xr.iter()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            den += xn.iter().map(|&a| (a as f64).powi(2)).sum::<f64>();
        }
        let n = h.nrows() as f64;
        Ok(SaeQuality {
            mean_l0: l0 / n,
            rel_l2: rel / n,
            fvu: num / den.max(1e-30),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "site": self.site,
            "layer": self.layer,
            "tied": self.tied,
            "d_in": self.d_in(),
            "d_f": self.d_f(),
        });
        let mut ck = Checkpoint::new("sae", meta);
        // `iter` walks logical row-major order whatever the memory layout.
        let mut push = |name: &str, a: ndarray::ArrayViewD<f32>| ck.push_f32(name, &a.shape().to_vec(), a.iter().copied().collect());
        push("w_enc", self.w_enc.view().into_dyn());
        push("b_enc", self.b_enc.view().into_dyn());
        if !self.tied {
            push("w_dec", self.w_dec.view().into_dyn());
        }
        push("b_dec", self.b_dec.view().into_dyn());
        push("theta", self.theta.view().into_dyn());
        push("mean", self.mean.view().into_dyn());
        push("std", self.std.view().into_dyn());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("sae")?;
        let site: CaptureSite = serde_json::from_value(ck.meta["site"].clone())?;
        let layer: usize = serde_json::from_value(ck.meta["layer"].clone())?;
        let tied: bool = serde_json::from_value(ck.meta["tied"].clone())?;
        let mat = |name: &str| -> Result<Array2<f32>> {
            let (shape, data) = ck.f32(name)?;
            if shape.len() != 2 {
                return Err(Error::Format(format!("`{name}` is not a matrix")));
            }
            Array2::from_shape_vec((shape[0], shape[1]), data.to_vec()).map_err(|e| Error::Format(e.to_string()))
        };
        let vec = |name: &str| -> Result<Array1<f32>> { Ok(Array1::from(ck.f32(name)?.1.to_vec())) };
        let w_enc = mat("w_enc")?;
        let w_dec = if tied { None } else { Some(mat("w_dec")?) };
        let mut sae = Self::from_parts(w_enc, vec("b_enc")?, w_dec, vec("b_dec")?, vec("theta")?, site, layer)?;
        sae.mean = vec("mean")?;
        sae.std = vec("std")?;
        sae.check_len("normalization mean", sae.mean.len(), sae.d_in())?;
        sae.check_len("normalization std", sae.std.len(), sae.d_in())?;
        Ok(sae)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeQuality {
    pub mean_l0: f64,
    /// Mean per-row `‖h − ĥ‖ / ‖h‖`, original units.
    pub rel_l2: f64,
    /// Fraction of variance unexplained in standardized units.
    pub fvu: f64,
}

/// `z · H(z − θ)` with `H(0) = 0`.
pub fn jump_relu(z: f32, theta: f32) -> f32 {
    if z > theta {
        z
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, p: &mut [f32], g: &[f32], lr: f32, t: i32) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        let bc1 = 1.0 - B1.powi(t);
        let bc2 = 1.0 - B2.powi(t);
        for i in 0..p.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + 1e-8);
        }
    }
}

/// Training-time parameters. The decoder is kept transposed, `(d_f, d_in)`,
/// so a feature's direction is a contiguous row.
#[derive(Clone)]
struct Weights {
    enc: Array2<f32>,
    b_enc: Array1<f32>,
    dec_t: Array2<f32>,
    b_dec: Array1<f32>,
    theta: Array1<f32>,
}

impl Weights {
    fn normalize_decoder(&mut self, tied: bool) {
        let target = if tied { &mut self.enc } else { &mut self.dec_t };
        for mut row in target.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
    }

    fn dec_row(&self, tied: bool, i: usize) -> ArrayView1<'_, f32> {
        if tied {
            self.enc.row(i)
        } else {
            self.dec_t.row(i)
        }
    }
}

struct BatchOut {
    loss: f64,
}

/// Loss (and optionally gradients) for a batch of standardized rows.
fn batch_pass(
    w: &Weights,
    x: &Array2<f32>,
    cfg: &SaeTrainConfig,
    mut grads: Option<&mut Weights>,
) -> BatchOut {
    let z = x.dot(&w.enc.t()) + &w.b_enc;
    let eps = cfg.ste_bandwidth;
    let half = eps / 2.0;
    let inv_b = 1.0 / x.nrows() as f32;
    let d_in = x.ncols();
    let mut loss = 0.0f64;
    let mut xhat = Array1::<f32>::zeros(d_in);
    let mut r = Array1::<f32>::zeros(d_in);
    for b in 0..x.nrows() {
        let zb = z.row(b);
        xhat.assign(&w.b_dec);
        let mut active = 0usize;
        for (i, (&zi, &ti)) in zb.iter().zip(w.theta.iter()).enumerate() {
            if zi > ti {
                xhat.scaled_add(zi, &w.dec_row(cfg.tied, i));
                active += 1;
            }
        }
        r.assign(&xhat);
        r -= &x.row(b);
        let sq: f32 = r.dot(&r);
        loss += sq as f64 + cfg.lambda as f64 * active as f64;
        let Some(g) = grads.as_deref_mut() else { continue };
        // d loss / d xhat = 2 r, averaged over the batch
        let dr = &r * (2.0 * inv_b);
        g.b_dec += &dr;
        for (i, (&zi, &ti)) in zb.iter().zip(w.theta.iter()).enumerate() {
            let on = zi > ti;
            let in_window = (zi - ti).abs() < half;
            if !on && !in_window {
                continue;
            }
            let df = w.dec_row(cfg.tied, i).dot(&dr);
            if on {
                if cfg.tied {
                    g.enc.row_mut(i).scaled_add(zi, &dr);
                } else {
                    g.dec_t.row_mut(i).scaled_add(zi, &dr);
                }
                g.b_enc[i] += df;
                g.enc.row_mut(i).scaled_add(df, &x.row(b));
            }
            if in_window {
                // pseudo-derivatives: ∂f/∂θ ≈ −(θ/ε)K, ∂H/∂θ ≈ −(1/ε)K
                g.theta[i] += -(ti / eps) * df - cfg.lambda * inv_b / eps;
            }
        }
    }
    BatchOut { loss: loss * inv_b as f64 }
}

fn standardize(h: &Array2<f32>) -> (Array1<f32>, Array1<f32>) {
    let mean = h.mean_axis(Axis(0)).expect("non-empty");
    let mut std = h.var_axis(Axis(0), 0.0).mapv(f32::sqrt);
    std.mapv_inplace(|s| s.max(STD_FLOOR));
    (mean, std)
}

/// Trains a JumpReLU SAE on activation rows (one row per sample).
pub fn train_sae(
    h: &Array2<f32>,
    site: CaptureSite,
    layer: usize,
    cfg: &SaeTrainConfig,
) -> Result<(SaeModel, SaeTrainReport)> {
    cfg.validate()?;
    let (n, d_in) = h.dim();
    if n < 2 || d_in == 0 {
        return Err(Error::Empty("need at least two activation rows".into()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SAE training input".into()));
    }
    let d_f = cfg.n_multiplier * d_in;
    let mut report = SaeTrainReport {
        few_samples: n < 10 * d_f,
        ..Default::default()
    };
    if report.few_samples {
        log::warn!("{n} rows for {d_f} features; at least {} recommended", 10 * d_f);
    }

    let (mean, std) = standardize(h);
    let x_all = (h - &mean) / &std;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let x_val = x_all.select(Axis(0), &idx[..n_val]);
    let mut train_idx = idx[n_val..].to_vec();

    let mut dec_t = Array2::<f32>::zeros((d_f, d_in));
    dec_t.mapv_inplace(|_| StandardNormal.sample(&mut rng));
    let mut w = Weights {
        enc: dec_t.clone(),
        b_enc: Array1::zeros(d_f),
        dec_t,
        b_dec: Array1::zeros(d_in),
        theta: Array1::from_elem(d_f, cfg.theta_init),
    };
    w.normalize_decoder(cfg.tied);
    if !cfg.tied {
        w.enc.assign(&w.dec_t);
    }

    let zero = Weights {
        enc: Array2::zeros((d_f, d_in)),
        b_enc: Array1::zeros(d_f),
        dec_t: Array2::zeros(if cfg.tied { (0, 0) } else { (d_f, d_in) }),
        b_dec: Array1::zeros(d_in),
        theta: Array1::zeros(d_f),
    };
    let mut mo: Vec<Moments> = [d_f * d_in, d_f, if cfg.tied { 0 } else { d_f * d_in }, d_in, d_f]
        .into_iter()
        .map(Moments::new)
        .collect();
    let mut t = 0;
    let mut best = (f64::INFINITY, w.clone());
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let xb = x_all.select(Axis(0), chunk);
            let mut g = zero.clone();
            let out = batch_pass(&w, &xb, cfg, Some(&mut g));
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("SAE loss at epoch {epoch}")));
            }
            total += out.loss * chunk.len() as f64;
            t += 1;
            mo[0].step(w.enc.as_slice_mut().unwrap(), g.enc.as_slice().unwrap(), cfg.lr, t);
            mo[1].step(w.b_enc.as_slice_mut().unwrap(), g.b_enc.as_slice().unwrap(), cfg.lr, t);
            if !cfg.tied {
                mo[2].step(w.dec_t.as_slice_mut().unwrap(), g.dec_t.as_slice().unwrap(), cfg.lr, t);
            }
            mo[3].step(w.b_dec.as_slice_mut().unwrap(), g.b_dec.as_slice().unwrap(), cfg.lr, t);
            mo[4].step(w.theta.as_slice_mut().unwrap(), g.theta.as_slice().unwrap(), cfg.lr, t);
            w.theta.mapv_inplace(|v| v.max(1e-4));
            w.normalize_decoder(cfg.tied);
        }
        let val = batch_pass(&w, &x_val, cfg, None).loss;
        report.train_loss.push(total / train_idx.len() as f64);
        report.val_loss.push(val);
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("SAE validation loss at epoch {epoch}")));
        }
        if val < best.0 {
            best = (val, w.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let w = best.1;
    let w_dec = if cfg.tied { None } else { Some(w.dec_t.t().to_owned()) };
    let mut sae = SaeModel::from_parts(w.enc, w.b_enc, w_dec, w.b_dec, w.theta, site, layer)?;
    sae.mean = mean;
    sae.std = std;
    Ok((sae, report))
}
