// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear baseline decompositions: PCA, symmetric FastICA and random
//! orthonormal directions. Each exposes a forward projection and an inverse
//! used to splice masked coefficients back into the model.
//!
//! Fitting runs in f64; projection is f32 like the rest of the pipeline.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::toylm::CaptureSite;
use crate::units::{check_tau, select_per_input_union, SelectedUnits, UnitId, UnitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompKind {
    Pca,
    Ica,
    Rd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcaWarning {
    /// Iteration cap reached; the returned unmixing is the last iterate.
    NotConverged,
    /// Recovered components look Gaussian, so they are not identifiable.
    NearGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposer {
    pub kind: DecompKind,
    pub mean: Array1<f64>,
    /// `(d_f, d_in)`: `f = forward · (h − mean)`.
    pub forward: Array2<f64>,
    /// `(d_in, d_f)`: `h' = inverse · f + mean`.
    pub inverse: Array2<f64>,
    /// PCA only, one per retained component.
    pub explained_variance_ratio: Vec<f64>,
    pub warnings: Vec<IcaWarning>,
    /// ICA iterations used.
    pub iterations: usize,
    pub site: CaptureSite,
    pub layer: usize,
}

fn to_dmatrix(h: &Array2<f32>) -> DMatrix<f64> {
    DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[[i, j]] as f64)
}

fn to_array(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn column_mean(h: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(h.ncols(), |j, _| h.column(j).mean())
}

fn centered(h: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = h.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

/// Eigenpairs of the sample covariance sorted by descending eigenvalue, with
/// eigenvalues below `1e-10 · λ_max` dropped.
fn sorted_eigen(hc: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, f64) {
    let n = hc.nrows() as f64;
    let cov = (hc.transpose() * hc) / (n - 1.0);
    let total = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > 1e-10 * lmax && eig.eigenvalues[i] > 0.0)
        .collect();
    let vals = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(hc.ncols(), keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
    (vals, vecs, total)
}

fn check_rows(h: &Array2<f32>, min: usize) -> Result<()> {
    if h.nrows() < min.max(2) {
        return Err(Error::config(format!(
            "need at least {} samples, got {}",
            min.max(2),
            h.nrows()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decomposition input".into()));
    }
    Ok(())
}

/// PCA keeping the fewest leading components whose cumulative explained
/// variance reaches `var_threshold`.
pub fn fit_pca(h: &Array2<f32>, var_threshold: f64, site: CaptureSite, layer: usize) -> Result<Decomposer> {
    if !(var_threshold > 0.0 && var_threshold <= 1.0) {
        return Err(Error::config(format!("variance threshold must lie in (0, 1], got {var_threshold}")));
    }
    check_rows(h, h.ncols())?;
    let hm = to_dmatrix(h);
    let mean = column_mean(&hm);
    let (vals, vecs, total) = sorted_eigen(&centered(&hm, &mean));
    if vals.is_empty() || !(total > 0.0) {
        return Err(Error::Empty("data has no variance".into()));
    }
    let ratios: Vec<f64> = vals.iter().map(|v| v / total).collect();
    let mut cum = 0.0;
    let mut k = ratios.len();
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        if cum >= var_threshold - 1e-12 {
            k = i + 1;
            break;
        }
    }
    let v = vecs.columns(0, k).into_owned();
    Ok(Decomposer {
        kind: DecompKind::Pca,
        mean: mean.iter().copied().collect(),
        forward: to_array(&v.transpose()),
        inverse: to_array(&v),
        explained_variance_ratio: ratios[..k].to_vec(),
        warnings: Vec::new(),
        iterations: 0,
        site,
        layer,
    })
}

/// `(W Wᵀ)^{-1/2} W`.
fn sym_decorrelate(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(1e-300).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose() * w
}

pub const ICA_MAX_ITER: usize = 500;
pub const ICA_TOL: f64 = 1e-6;
/// Mean |excess kurtosis| below which recovered sources count as Gaussian.
pub const ICA_GAUSSIAN_KURTOSIS: f64 = 0.1;

/// Symmetric FastICA with the cubic contrast `G(u) = u⁴/4`, on data whitened
/// as `H_w = H_c V Λ^{-1/2}`. Returns `min(d_f, rank)` components.
pub fn fit_ica(h: &Array2<f32>, d_f: usize, seed: u64, site: CaptureSite, layer: usize) -> Result<Decomposer> {
    if d_f == 0 {
        return Err(Error::config("d_f must be at least 1"));
    }
    check_rows(h, 2)?;
    let hm = to_dmatrix(h);
    let mean = column_mean(&hm);
    let hc = centered(&hm, &mean);
    let (vals, vecs, _) = sorted_eigen(&hc);
    let k = d_f.min(vals.len());
    if k == 0 {
        return Err(Error::Empty("data has no variance".into()));
    }
    if k < d_f {
        log::info!("ICA: d_f {d_f} capped at data rank {k}");
    }
    let v = vecs.columns(0, k).into_owned();
    let lam = DVector::from_iterator(k, vals[..k].iter().copied());
    let whiten = &v * DMatrix::from_diagonal(&lam.map(|l| 1.0 / l.sqrt()));
    let unwhiten = DMatrix::from_diagonal(&lam.map(f64::sqrt)) * v.transpose();
    let x = &hc * &whiten; // n × k, identity covariance
    let n = x.nrows() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut w = sym_decorrelate(&DMatrix::from_fn(k, k, |_, _| normal.sample(&mut rng)));
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..ICA_MAX_ITER {
        iterations = it + 1;
        let s = &x * w.transpose(); // n × k sources
        let g = s.map(|u| u * u * u);
        let gp_mean = DVector::from_fn(k, |j, _| s.column(j).iter().map(|u| 3.0 * u * u).sum::<f64>() / n);
        let mut w_new = (g.transpose() * &x) / n;
        for j in 0..k {
            let row = w.row(j) * gp_mean[j];
            let mut r = w_new.row_mut(j);
            r -= row;
        }
        let w_new = sym_decorrelate(&w_new);
        let change = (0..k)
            .map(|j| (w_new.row(j).dot(&w.row(j)).abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = w_new;
        if change < ICA_TOL {
            converged = true;
            break;
        }
    }
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(IcaWarning::NotConverged);
    }
    let s = &x * w.transpose();
    let kurt: f64 = (0..k)
        .map(|j| {
            let c = s.column(j);
            let m2 = c.iter().map(|u| u * u).sum::<f64>() / n;
            let m4 = c.iter().map(|u| u.powi(4)).sum::<f64>() / n;
            (m4 / (m2 * m2) - 3.0).abs()
        })
        .sum::<f64>()
        / k as f64;
    if kurt < ICA_GAUSSIAN_KURTOSIS {
        warnings.push(IcaWarning::NearGaussian);
    }
    // W is orthogonal after symmetric decorrelation, so its pseudo-inverse is Wᵀ.
    let forward = &w * whiten.transpose();
    let inverse = unwhiten.transpose() * w.transpose();
    Ok(Decomposer {
        kind: DecompKind::Ica,
        mean: mean.iter().copied().collect(),
        forward: to_array(&forward),
        inverse: to_array(&inverse),
        explained_variance_ratio: Vec::new(),
        warnings,
        iterations,
        site,
        layer,
    })
}

/// Random orthonormal directions: QR of an `N(0, 1/√d_in)` matrix. Data is
/// not centered. `d_f` is capped at `d_in`.
pub fn fit_random(d_in: usize, d_f: usize, seed: u64, site: CaptureSite, layer: usize) -> Result<Decomposer> {
    if d_in == 0 || d_f == 0 {
        return Err(Error::config("d_in and d_f must be at least 1"));
    }
    let k = d_f.min(d_in);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).unwrap();
    let g = DMatrix::from_fn(d_in, k, |_, _| normal.sample(&mut rng));
    let q = g.qr().q();
    Ok(Decomposer {
        kind: DecompKind::Rd,
        mean: Array1::zeros(d_in),
        forward: to_array(&q.transpose()),
        inverse: to_array(&q),
        explained_variance_ratio: Vec::new(),
        warnings: Vec::new(),
        iterations: 0,
        site,
        layer,
    })
}

impl Decomposer {
    pub fn d_in(&self) -> usize {
        self.forward.ncols()
    }

    pub fn d_f(&self) -> usize {
        self.forward.nrows()
    }

    pub fn project(&self, h: ArrayView1<f32>) -> Result<Array1<f32>> {
        if h.len() != self.d_in() {
            return Err(Error::Shape {
                context: "decomposer input",
                expected: self.d_in(),
                got: h.len(),
            });
        }
        let c = h.mapv(|v| v as f64) - &self.mean;
        Ok(self.forward.dot(&c).mapv(|v| v as f32))
    }

    pub fn inverse(&self, f: ArrayView1<f32>) -> Result<Array1<f32>> {
        if f.len() != self.d_f() {
            return Err(Error::Shape {
                context: "coefficient vector",
                expected: self.d_f(),
                got: f.len(),
            });
        }
        let h = self.inverse.dot(&f.mapv(|v| v as f64)) + &self.mean;
        Ok(h.mapv(|v| v as f32))
    }

    /// Projects, zeroes the coefficients in `mask`, and maps back.
    pub fn ablate_and_reconstruct(&self, h: ArrayView1<f32>, mask: &[usize]) -> Result<Array1<f32>> {
        let mut f = self.project(h)?;
        for &i in mask {
            if i >= self.d_f() {
                return Err(Error::Index {
                    what: "component",
                    index: i,
                    limit: self.d_f(),
                });
            }
            f[i] = 0.0;
        }
        self.inverse(f.view())
    }

    /// `|coef|` scores paired with unit ids.
    pub fn scored(&self, f: &Array1<f32>) -> Vec<(UnitId, f64)> {
        f.iter()
            .enumerate()
            .map(|(i, &v)| (UnitId::new(self.site, self.layer, i), v.abs() as f64))
            .collect()
    }

    /// Components whose |coefficient| exceeds `tau1` times this input's max.
    pub fn select_units(&self, h: ArrayView1<f32>, tau1: f64) -> Result<SelectedUnits> {
        check_tau(tau1)?;
        let f = self.project(h)?;
        Ok(select_per_input_union(UnitKind::Feature, std::iter::once(self.scored(&f)), tau1))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": self.kind,
            "site": self.site,
            "layer": self.layer,
            "explained_variance_ratio": self.explained_variance_ratio,
            "warnings": self.warnings,
            "iterations": self.iterations,
        });
        let mut ck = Checkpoint::new("decomposer", meta);
        ck.push_f64("mean", &[self.d_in()], self.mean.to_vec());
        ck.push_f64("forward", &[self.d_f(), self.d_in()], self.forward.iter().copied().collect());
        ck.push_f64("inverse", &[self.d_in(), self.d_f()], self.inverse.iter().copied().collect());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("decomposer")?;
        let m = &ck.meta;
        let mat = |name: &str| -> Result<Array2<f64>> {
            let (shape, data) = ck.f64(name)?;
            if shape.len() != 2 {
                return Err(Error::Format(format!("`{name}` is not a matrix")));
            }
            Array2::from_shape_vec((shape[0], shape[1]), data.to_vec()).map_err(|e| Error::Format(e.to_string()))
        };
        let dec = Decomposer {
            kind: serde_json::from_value(m["kind"].clone())?,
            mean: Array1::from(ck.f64("mean")?.1.to_vec()),
            forward: mat("forward")?,
            inverse: mat("inverse")?,
            explained_variance_ratio: serde_json::from_value(m["explained_variance_ratio"].clone())?,
            warnings: serde_json::from_value(m["warnings"].clone())?,
            iterations: serde_json::from_value(m["iterations"].clone())?,
            site: serde_json::from_value(m["site"].clone())?,
            layer: serde_json::from_value(m["layer"].clone())?,
        };
        if dec.inverse.dim() != (dec.d_in(), dec.d_f()) || dec.mean.len() != dec.d_in() {
            return Err(Error::Format("decomposer matrices disagree in shape".into()));
        }
        Ok(dec)
    }
}
