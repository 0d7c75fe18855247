// SPDX-License-Identifier: MIT OR Apache-2.0

//! Metrics and analyses: ΔProb under unit ablation, progressive ablation
//! curves, interpretability scores, erasure rates, relation-mixture
//! activations, overlap ratios, paired statistics and KDE.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::{Data, OrderStatistics};

use crate::decomp::Decomposer;
use crate::error::{Error, Result};
use crate::interp::{Exemplar, Interpreter};
use crate::sae::SaeModel;
use crate::toylm::{answer_prob, capture_matrix, answer_prob_with, greedy_first_token, perplexity, CaptureSite, Clamp, ForwardHook, Model};
use crate::units::{select_fraction_of_max, SelectedUnits, UnitId, UnitKind};

// ---------------------------------------------------------------------------
// ΔProb
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaProbResult {
    pub prob_before: f64,
    pub prob_after: f64,
    pub delta_raw: f64,
    pub delta_clamped: f64,
    pub units: Vec<UnitId>,
    pub site: CaptureSite,
    pub layers: Vec<usize>,
}

/// `(raw, clamped)` relative probability drop.
pub fn delta_from_probs(prob_before: f64, prob_after: f64) -> Result<(f64, f64)> {
    if !(prob_before > 0.0) {
        return Err(Error::Undefined(format!("probability before ablation is {prob_before}")));
    }
    let raw = (prob_before - prob_after) / prob_before;
    Ok((raw, raw.max(0.0)))
}

/// Encode, mask and decode one activation vector.
pub trait Reconstruct {
    fn site(&self) -> CaptureSite;
    fn width(&self) -> usize;
    fn ablate_and_reconstruct(&self, h: ArrayView1<f32>, mask: &[usize]) -> Result<Array1<f32>>;
    /// Selection scores of every unit for one activation vector.
    fn scores(&self, h: ArrayView1<f32>) -> Result<Vec<(UnitId, f64)>>;
}

impl Reconstruct for SaeModel {
    fn site(&self) -> CaptureSite {
        self.site
    }
    fn width(&self) -> usize {
        self.d_f()
    }
    fn ablate_and_reconstruct(&self, h: ArrayView1<f32>, mask: &[usize]) -> Result<Array1<f32>> {
        SaeModel::ablate_and_reconstruct(self, h, mask)
    }
    fn scores(&self, h: ArrayView1<f32>) -> Result<Vec<(UnitId, f64)>> {
        Ok(self.scored(&self.encode(h)?))
    }
}

impl Reconstruct for Decomposer {
    fn site(&self) -> CaptureSite {
        self.site
    }
    fn width(&self) -> usize {
        self.d_f()
    }
    fn ablate_and_reconstruct(&self, h: ArrayView1<f32>, mask: &[usize]) -> Result<Array1<f32>> {
        Decomposer::ablate_and_reconstruct(self, h, mask)
    }
    fn scores(&self, h: ArrayView1<f32>) -> Result<Vec<(UnitId, f64)>> {
        Ok(self.scored(&self.project(h)?))
    }
}

/// How units are removed from a forward pass.
///
/// Feature ablations substitute the masked reconstruction at the final prompt
/// position of every covered layer, so an empty unit set measures the pure
/// reconstruction effect. Neuron ablations zero the listed MLP activations.
pub enum Ablation<'a> {
    Features(BTreeMap<usize, &'a dyn Reconstruct>),
    Neurons,
}

impl<'a> Ablation<'a> {
    pub fn from_saes(saes: &BTreeMap<usize, &'a SaeModel>) -> Self {
        Ablation::Features(saes.iter().map(|(&l, &s)| (l, s as &dyn Reconstruct)).collect())
    }

    pub fn from_decomposers(decs: &BTreeMap<usize, &'a Decomposer>) -> Self {
        Ablation::Features(decs.iter().map(|(&l, &d)| (l, d as &dyn Reconstruct)).collect())
    }

    pub fn site(&self) -> Result<CaptureSite> {
        match self {
            Ablation::Neurons => Ok(CaptureSite::MlpActivation),
            Ablation::Features(map) => {
                let mut sites = map.values().map(|r| r.site());
                let first = sites.next().ok_or_else(|| Error::Empty("no reconstructors supplied".into()))?;
                if sites.any(|s| s != first) {
                    return Err(Error::config("reconstructors span more than one capture site"));
                }
                Ok(first)
            }
        }
    }

    /// Per-layer mask indices, after checking every unit fits.
    fn masks(&self, units: &[UnitId]) -> Result<BTreeMap<usize, Vec<usize>>> {
        let site = self.site()?;
        let mut masks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        if let Ablation::Features(map) = self {
            for &l in map.keys() {
                masks.insert(l, Vec::new());
            }
        }
        for u in units {
            if u.site != site {
                return Err(Error::config(format!("unit {u} does not match ablation site {site}")));
            }
            if let Ablation::Features(map) = self {
                let r = map
                    .get(&u.layer)
                    .ok_or_else(|| Error::config(format!("no reconstructor for layer {} of unit {u}", u.layer)))?;
                if u.index >= r.width() {
                    return Err(Error::Index {
                        what: "feature",
                        index: u.index,
                        limit: r.width(),
                    });
                }
            }
            masks.entry(u.layer).or_default().push(u.index);
        }
        Ok(masks)
    }

    /// Answer probability with `units` ablated at the final prompt position.
    pub fn prob_after(&self, model: &Model, prompt: &[u32], answer: &[u32], units: &[UnitId]) -> Result<f64> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt tokens".into()));
        }
        let masks = self.masks(units)?;
        let position = prompt.len() - 1;
        match self {
            Ablation::Neurons => {
                let d_mlp = model.config.d_mlp;
                for (l, idx) in &masks {
                    if *l >= model.config.n_layers {
                        return Err(Error::Index {
                            what: "layer",
                            index: *l,
                            limit: model.config.n_layers,
                        });
                    }
                    if let Some(&bad) = idx.iter().find(|&&i| i >= d_mlp) {
                        return Err(Error::Index {
                            what: "neuron",
                            index: bad,
                            limit: d_mlp,
                        });
                    }
                }
                let mut hook = Clamp {
                    site: CaptureSite::MlpActivation,
                    position,
                    indices: masks,
                };
                answer_prob_with(model, prompt, answer, &mut hook)
            }
            Ablation::Features(map) => {
                let mut hook = ReconstructHook {
                    site: self.site()?,
                    position,
                    layers: map.iter().map(|(&l, &r)| (l, (r, masks[&l].clone()))).collect(),
                    error: None,
                };
                let p = answer_prob_with(model, prompt, answer, &mut hook)?;
                match hook.error {
                    Some(e) => Err(e),
                    None => Ok(p),
                }
            }
        }
    }
}

struct ReconstructHook<'a> {
    site: CaptureSite,
    position: usize,
    layers: BTreeMap<usize, (&'a dyn Reconstruct, Vec<usize>)>,
    error: Option<Error>,
}

impl ForwardHook for ReconstructHook<'_> {
    fn visit(&mut self, site: CaptureSite, layer: usize, acts: &mut Array2<f32>) {
        if site != self.site || self.error.is_some() {
            return;
        }
        if let Some((r, mask)) = self.layers.get(&layer) {
            match r.ablate_and_reconstruct(acts.row(self.position), mask) {
                Ok(h) => acts.row_mut(self.position).assign(&h),
                Err(e) => self.error = Some(e),
            }
        }
    }
}

/// Unit scores at the final prompt position, joined over every layer of
/// `map`, from one forward pass.
pub fn final_position_scores(model: &Model, prompt: &[u32], map: &BTreeMap<usize, &dyn Reconstruct>) -> Result<Vec<(UnitId, f64)>> {
    let Some(site) = map.values().next().map(|r| r.site()) else {
        return Err(Error::Empty("no reconstructors supplied".into()));
    };
    let layers: Vec<usize> = map.keys().copied().collect();
    let rows = capture_matrix(model, &[prompt.to_vec()], site, &layers)?;
    let mut out = Vec::new();
    for (r, l) in rows.iter().zip(&layers) {
        out.extend(map[l].scores(r.row(0))?);
    }
    Ok(out)
}

/// MLP activations at the final prompt position as neuron scores.
pub fn neuron_scores(model: &Model, prompt: &[u32], layers: &[usize]) -> Result<Vec<(UnitId, f64)>> {
    let rows = capture_matrix(model, &[prompt.to_vec()], CaptureSite::MlpActivation, layers)?;
    let mut out = Vec::new();
    for (r, &l) in rows.iter().zip(layers) {
        out.extend(r.row(0).iter().enumerate().map(|(j, &v)| (UnitId::new(CaptureSite::MlpActivation, l, j), v as f64)));
    }
    Ok(out)
}

pub fn delta_prob(model: &Model, prompt: &[u32], answer: &[u32], ablation: &Ablation<'_>, units: &[UnitId]) -> Result<DeltaProbResult> {
    let prob_before = answer_prob(model, prompt, answer)?;
    let prob_after = ablation.prob_after(model, prompt, answer, units)?;
    let (delta_raw, delta_clamped) = delta_from_probs(prob_before, prob_after)?;
    let layers: BTreeSet<usize> = match ablation {
        Ablation::Features(map) => map.keys().copied().collect(),
        Ablation::Neurons => units.iter().map(|u| u.layer).collect(),
    };
    Ok(DeltaProbResult {
        prob_before,
        prob_after,
        delta_raw,
        delta_clamped,
        units: units.to_vec(),
        site: ablation.site()?,
        layers: layers.into_iter().collect(),
    })
}

// ---------------------------------------------------------------------------
// Progressive ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub iterations: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for Bootstrap {
    fn default() -> Self {
        Self {
            iterations: 5,
            sample_size: 300,
            seed: 0,
        }
    }
}

/// Mean of per-iteration resample means and their standard error.
pub fn bootstrap_mean(values: &[f64], cfg: &Bootstrap) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("bootstrap values".into()));
    }
    if cfg.iterations == 0 || cfg.sample_size == 0 {
        return Err(Error::config("bootstrap needs at least one iteration and sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<f64> = (0..cfg.iterations)
        .map(|_| (0..cfg.sample_size).map(|_| values[rng.random_range(0..values.len())]).sum::<f64>() / cfg.sample_size as f64)
        .collect();
    let m = mean(&means);
    let se = if means.len() > 1 { sample_sd(&means) / (means.len() as f64).sqrt() } else { 0.0 };
    Ok((m, se))
}

/// One prompt with its units ranked by descending activation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationItem {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub ranked: Vec<UnitId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    /// `0..=max_k`; entry 0 is the empty-set baseline.
    pub k: Vec<usize>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Clamped ΔProb per item (outer) and k (inner).
    pub per_item: Vec<Vec<f64>>,
}

impl AblationCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,mean,stderr\n");
        for i in 0..self.k.len() {
            let _ = writeln!(s, "{},{},{}", self.k[i], self.mean[i], self.stderr[i]);
        }
        s
    }
}

/// Ablates the top-k ranked units for each k and bootstraps clamped ΔProb.
pub fn progressive_ablation(model: &Model, ablation: &Ablation<'_>, items: &[AblationItem], max_k: usize, boot: &Bootstrap) -> Result<AblationCurve> {
    if items.is_empty() {
        return Err(Error::Empty("progressive ablation items".into()));
    }
    if let Some(short) = items.iter().map(|it| it.ranked.len()).find(|&n| n < max_k) {
        return Err(Error::Index {
            what: "ablation k",
            index: max_k,
            limit: short,
        });
    }
    let mut per_item = Vec::with_capacity(items.len());
    for it in items {
        let before = answer_prob(model, &it.prompt, &it.answer)?;
        let mut row = Vec::with_capacity(max_k + 1);
        for k in 0..=max_k {
            let after = ablation.prob_after(model, &it.prompt, &it.answer, &it.ranked[..k])?;
            row.push(delta_from_probs(before, after)?.1);
        }
        per_item.push(row);
    }
    let mut curve = AblationCurve {
        k: (0..=max_k).collect(),
        mean: Vec::new(),
        stderr: Vec::new(),
        per_item,
    };
    for k in 0..=max_k {
        let col: Vec<f64> = curve.per_item.iter().map(|r| r[k]).collect();
        let (m, se) = bootstrap_mean(&col, boot)?;
        curve.mean.push(m);
        curve.stderr.push(se);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Interpretability score
// ---------------------------------------------------------------------------

pub const IS_MIN_SAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsResult {
    pub unit: String,
    pub score: f64,
    pub explanation: String,
    pub samples: Vec<String>,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Pearson correlation; undefined for constant series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            context: "pearson",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Undefined("correlation needs at least two points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Explain from the top 3 samples, predict on the next 3 highest plus 3
/// random others, and correlate with the true normalized activations.
pub fn interpret_score(interp: &dyn Interpreter, unit: &str, samples: &[(String, f64)], seed: u64) -> Result<IsResult> {
    if samples.len() < IS_MIN_SAMPLES {
        return Err(Error::config(format!("interpretability score needs at least {IS_MIN_SAMPLES} samples, got {}", samples.len())));
    }
    if samples.iter().any(|(_, a)| !a.is_finite()) {
        return Err(Error::NonFinite("sample activation".into()));
    }
    let max = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Undefined(format!("unit {unit} never activates")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].1.total_cmp(&samples[a].1).then(a.cmp(&b)));
    let norm = |i: usize| (samples[i].1 / max).clamp(0.0, 1.0);

    let top: Vec<Exemplar> = order[..3]
        .iter()
        .map(|&i| Exemplar {
            text: samples[i].0.clone(),
            activation: norm(i),
        })
        .collect();
    let mut chosen: Vec<usize> = order[3..6].to_vec();
    let mut rest = order[6..].to_vec();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    chosen.extend_from_slice(&rest[..3]);

    let explanation = interp.explain(unit, &top)?;
    let texts: Vec<String> = chosen.iter().map(|&i| samples[i].0.clone()).collect();
    let predicted = interp.predict(&explanation, &texts)?;
    if predicted.len() != texts.len() {
        return Err(Error::Shape {
            context: "interpreter predictions",
            expected: texts.len(),
            got: predicted.len(),
        });
    }
    let actual: Vec<f64> = chosen.iter().map(|&i| norm(i)).collect();
    let score = pearson(&predicted, &actual)?;
    Ok(IsResult {
        unit: unit.to_string(),
        score,
        explanation: explanation.text,
        samples: texts,
        actual,
        predicted,
    })
}

// ---------------------------------------------------------------------------
// Erasure
// ---------------------------------------------------------------------------

/// A prompt and the first token of its stored answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub prompt: Vec<u32>,
    pub answer: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub numerator: usize,
    pub denominator: usize,
    pub value: f64,
}

impl Rate {
    fn new(numerator: usize, denominator: usize) -> Self {
        Self {
            numerator,
            denominator,
            value: numerator as f64 / denominator as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureReport {
    pub rel: Rate,
    pub gen: Rate,
    pub loc: Rate,
    pub ppl_before: f64,
    pub ppl_after: f64,
    /// Relative perplexity increase `(PPL_a − PPL_b) / PPL_b`.
    pub delta_ppl: f64,
}

fn failures(model: &Model, probes: &[Probe], what: &str) -> Result<Rate> {
    if probes.is_empty() {
        return Err(Error::Empty(format!("{what} prompts")));
    }
    let mut wrong = 0;
    for p in probes {
        if greedy_first_token(model, &p.prompt)? != p.answer {
            wrong += 1;
        }
    }
    Ok(Rate::new(wrong, probes.len()))
}

pub fn erasure_metrics(before: &Model, after: &Model, train: &[Probe], rephrase: &[Probe], unrelated: &[Probe], ppl_corpus: &[Vec<u32>]) -> Result<ErasureReport> {
    let rel = failures(after, train, "privacy training")?;
    let gen = failures(after, rephrase, "privacy rephrase")?;
    if unrelated.is_empty() {
        return Err(Error::Empty("unrelated prompts".into()));
    }
    let mut known = 0;
    let mut kept = 0;
    for p in unrelated {
        if greedy_first_token(before, &p.prompt)? == p.answer {
            known += 1;
            if greedy_first_token(after, &p.prompt)? == p.answer {
                kept += 1;
            }
        }
    }
    if known == 0 {
        return Err(Error::Empty("no unrelated fact is answered correctly before the edit".into()));
    }
    let ppl_before = perplexity(before, ppl_corpus)?;
    let ppl_after = perplexity(after, ppl_corpus)?;
    Ok(ErasureReport {
        rel,
        gen,
        loc: Rate::new(kept, known),
        ppl_before,
        ppl_after,
        delta_ppl: (ppl_after - ppl_before) / ppl_before,
    })
}

/// Erasure metrics pooled over independent per-fact edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureSummary {
    pub facts: usize,
    pub rel: Rate,
    pub gen: Rate,
    pub loc: Rate,
    pub mean_delta_ppl: f64,
    pub mean_columns: f64,
}

/// Pools per-fact reports, each paired with the number of columns its plan
/// zeroed. Rates pool numerators and denominators.
pub fn summarize_erasure(per_fact: &[(ErasureReport, usize)]) -> Result<ErasureSummary> {
    if per_fact.is_empty() {
        return Err(Error::Empty("per-fact erasure reports".into()));
    }
    let pool = |f: fn(&ErasureReport) -> &Rate| {
        let (n, d) = per_fact.iter().fold((0, 0), |(n, d), (r, _)| (n + f(r).numerator, d + f(r).denominator));
        Rate::new(n, d)
    };
    let k = per_fact.len() as f64;
    Ok(ErasureSummary {
        facts: per_fact.len(),
        rel: pool(|r| &r.rel),
        gen: pool(|r| &r.gen),
        loc: pool(|r| &r.loc),
        mean_delta_ppl: per_fact.iter().map(|(r, _)| r.delta_ppl).sum::<f64>() / k,
        mean_columns: per_fact.iter().map(|(_, c)| *c as f64).sum::<f64>() / k,
    })
}

// ---------------------------------------------------------------------------
// Relation mixtures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub relations: Vec<String>,
    /// Percentages, strictly ascending.
    pub proportions: Vec<u32>,
    pub total: usize,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            relations: ["P39", "P264", "P37", "P108", "P131"].map(String::from).to_vec(),
            proportions: vec![0, 20, 40, 60, 80, 100],
            total: 500,
            seed: 0,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::config("mixture total must be positive"));
        }
        if self.proportions.is_empty() || self.proportions.iter().any(|&p| p > 100) || self.proportions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("mixture proportions must be strictly ascending percentages"));
        }
        Ok(())
    }

    /// Relation items at `percent`; the rest are non-relation items.
    pub fn relation_count(&self, percent: u32) -> usize {
        (self.total * percent as usize + 50) / 100
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePoint {
    pub proportion: u32,
    pub samples: Vec<f64>,
    pub mean: f64,
    pub kde: Option<KdeCurve>,
}

/// Units whose mean score over a pure relation pass exceeds `tau1` times the
/// largest mean.
pub fn relation_units<T>(pure: &[T], scores: impl Fn(&T) -> Result<Vec<(UnitId, f64)>>, kind: UnitKind, tau1: f64) -> Result<SelectedUnits> {
    crate::units::check_tau(tau1)?;
    if pure.is_empty() {
        return Err(Error::Empty("pure relation pass".into()));
    }
    let mut sums: BTreeMap<UnitId, f64> = BTreeMap::new();
    for item in pure {
        for (u, s) in scores(item)? {
            *sums.entry(u).or_default() += s;
        }
    }
    let n = pure.len() as f64;
    Ok(select_fraction_of_max(kind, sums.into_iter().map(|(u, s)| (u, s / n)), tau1))
}

/// Samples each mixture without replacement and records `activation` on every
/// mixed item.
pub fn mixture_activations<T>(relation_pool: &[T], other_pool: &[T], activation: impl Fn(&T) -> Result<f64>, mix: &MixtureConfig) -> Result<Vec<MixturePoint>> {
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix.seed);
    let mut out = Vec::with_capacity(mix.proportions.len());
    for &p in &mix.proportions {
        let n_rel = mix.relation_count(p);
        let n_other = mix.total - n_rel;
        if n_rel > relation_pool.len() || n_other > other_pool.len() {
            return Err(Error::Exhausted(format!(
                "mixture at {p}% needs {n_rel} relation and {n_other} other items; pools have {} and {}",
                relation_pool.len(),
                other_pool.len()
            )));
        }
        let mut samples = Vec::with_capacity(mix.total);
        for item in relation_pool.choose_multiple(&mut rng, n_rel) {
            samples.push(activation(item)?);
        }
        for item in other_pool.choose_multiple(&mut rng, n_other) {
            samples.push(activation(item)?);
        }
        let kde_curve = if samples.len() >= 2 { Some(kde(&samples, None, KDE_GRID)?) } else { None };
        out.push(MixturePoint {
            proportion: p,
            mean: mean(&samples),
            samples,
            kde: kde_curve,
        });
    }
    Ok(out)
}

/// Spearman rank correlation between proportions and mean activations.
pub fn mixture_trend(points: &[MixturePoint]) -> Result<f64> {
    let props: Vec<f64> = points.iter().map(|p| p.proportion as f64).collect();
    let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
    pearson(&ranks(&props), &ranks(&means))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

// ---------------------------------------------------------------------------
// Overlap ratio
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub n: usize,
    /// One entry per fact; `None` when the probe set was empty.
    pub ratios: Vec<Option<f64>>,
    pub mean: f64,
    pub skipped: usize,
}

/// Fraction of probe `(layer, index)` positions that fall in
/// `[idx·n, (idx+1)·n − 1]` for some base position on the same layer.
pub fn overlap_ratio(base: &[BTreeSet<(usize, usize)>], probe: &[BTreeSet<(usize, usize)>], n: usize) -> Result<OverlapReport> {
    if n == 0 {
        return Err(Error::config("width multiplier n must be at least 1"));
    }
    if base.len() != probe.len() {
        return Err(Error::Shape {
            context: "overlap fact count",
            expected: base.len(),
            got: probe.len(),
        });
    }
    let mut ratios = Vec::with_capacity(base.len());
    for (b, p) in base.iter().zip(probe) {
        if p.is_empty() {
            ratios.push(None);
            continue;
        }
        let windows: BTreeSet<(usize, usize)> = b.iter().map(|&(l, i)| (l, i)).collect();
        let inside = p.iter().filter(|&&(l, j)| windows.contains(&(l, j / n))).count();
        ratios.push(Some(inside as f64 / p.len() as f64));
    }
    let valid: Vec<f64> = ratios.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Empty("every probe set is empty".into()));
    }
    let skipped = ratios.len() - valid.len();
    if skipped > 0 {
        log::warn!("overlap ratio skipped {skipped} facts with empty probe sets");
    }
    Ok(OverlapReport {
        n,
        mean: mean(&valid),
        ratios,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub t_statistic: f64,
    pub p_value: f64,
    pub cohens_d: f64,
    pub n: usize,
    /// Set when the differences have zero spread but nonzero mean, making
    /// `t` and `d` infinite.
    pub overflow: bool,
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: "paired series",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::config("paired statistics need at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("paired difference".into()));
    }
    Ok(d)
}

/// Two-sided paired t-test on `a − b` with `n − 1` degrees of freedom.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<StatResult> {
    let d = differences(a, b)?;
    let n = d.len();
    let m = mean(&d);
    let sd = sample_sd(&d);
    if sd == 0.0 {
        if m == 0.0 {
            return Err(Error::Undefined("identical series: zero mean and zero spread".into()));
        }
        let inf = f64::INFINITY.copysign(m);
        return Ok(StatResult {
            t_statistic: inf,
            p_value: 0.0,
            cohens_d: inf,
            n,
            overflow: true,
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Undefined(e.to_string()))?;
    Ok(StatResult {
        t_statistic: t,
        p_value: (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0),
        cohens_d: m / sd,
        n,
        overflow: false,
    })
}

/// Paired Cohen's d: mean difference over the sd of differences.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(paired_t(a, b)?.cohens_d)
}

// ---------------------------------------------------------------------------
// KDE
// ---------------------------------------------------------------------------

pub const KDE_GRID: usize = 200;
/// Bandwidth used when the data have no spread.
pub const KDE_FALLBACK_BANDWIDTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,density\n");
        for (x, d) in self.x.iter().zip(&self.density) {
            let _ = writeln!(s, "{x},{d}");
        }
        s
    }

    pub fn trapezoid_integral(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| (x[1] - x[0]) * (d[0] + d[1]) / 2.0)
            .sum()
    }
}

/// Silverman's rule: `0.9 · min(sd, IQR/1.34) · n^(−1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let sd = sample_sd(values);
    let iqr = Data::new(values.to_vec()).interquartile_range();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (values.len() as f64).powf(-0.2);
    if h > 0.0 && h.is_finite() {
        h
    } else {
        KDE_FALLBACK_BANDWIDTH
    }
}

/// Gaussian KDE on `grid` evenly spaced points spanning the data ± 3h.
pub fn kde(values: &[f64], bandwidth: Option<f64>, grid: usize) -> Result<KdeCurve> {
    if values.len() < 2 {
        return Err(Error::config("kde needs at least two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kde value".into()));
    }
    if grid < 2 {
        return Err(Error::config("kde grid needs at least two points"));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::config(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(values),
    };
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let x: Vec<f64> = (0..grid).map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64).collect();
    let density = x
        .iter()
        .map(|&g| {
            norm * values
                .iter()
                .map(|&v| {
                    let u = (g - v) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(KdeCurve { x, density, bandwidth: h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{LookupInterpreter, MockInterpreter};
    use crate::toylm::ModelConfig;

    #[test]
    fn delta_formula() {
        let (raw, clamped) = delta_from_probs(0.8, 0.2).unwrap();
        assert!((raw - 0.75).abs() < 1e-12 && clamped == raw);
        assert_eq!(delta_from_probs(0.5, 1.0).unwrap(), (-1.0, 0.0));
        assert!(delta_from_probs(0.0, 0.1).is_err());
    }

    fn tiny() -> Model {
        let mut c = ModelConfig::new(12, 3);
        c.d_model = 8;
        c.n_heads = 2;
        c.d_mlp = 16;
        c.n_layers = 2;
        c.max_seq_len = 8;
        Model::new(c).unwrap()
    }

    #[test]
    fn identity_reconstruction_has_zero_delta() {
        let m = tiny();
        let rd = crate::decomp::fit_random(16, 16, 1, CaptureSite::MlpActivation, 1).unwrap();
        let decs = BTreeMap::from([(1, &rd)]);
        let ab = Ablation::from_decomposers(&decs);
        let r = delta_prob(&m, &[1, 2, 3], &[4], &ab, &[]).unwrap();
        assert!(r.delta_raw.abs() < 1e-5, "{}", r.delta_raw);
        let wrong_site = [UnitId::new(CaptureSite::PostMlpResidual, 1, 0)];
        assert!(delta_prob(&m, &[1, 2, 3], &[4], &ab, &wrong_site).is_err());
        let no_layer = [UnitId::new(CaptureSite::MlpActivation, 0, 0)];
        assert!(delta_prob(&m, &[1, 2, 3], &[4], &ab, &no_layer).is_err());
    }

    #[test]
    fn neuron_clamp_matches_zeroed_column() {
        let m = tiny();
        let units = [UnitId::new(CaptureSite::MlpActivation, 0, 3), UnitId::new(CaptureSite::MlpActivation, 1, 7)];
        let clamped = Ablation::Neurons.prob_after(&m, &[1, 2], &[5], &units).unwrap();
        // Zeroing an activation at the last position only affects that position,
        // which is also the only position the answer reads from.
        let mut edited = m.clone();
        for u in &units {
            edited.params.layers[u.layer].w2.column_mut(u.index).fill(0.0);
        }
        let direct = answer_prob(&edited, &[1, 2], &[5]).unwrap();
        assert!((clamped - direct).abs() < 1e-6);
        let bad = [UnitId::new(CaptureSite::MlpActivation, 0, 99)];
        assert!(Ablation::Neurons.prob_after(&m, &[1, 2], &[5], &bad).is_err());
    }

    #[test]
    fn progressive_needs_enough_units() {
        let m = tiny();
        let items = vec![AblationItem {
            prompt: vec![1, 2],
            answer: vec![3],
            ranked: vec![UnitId::new(CaptureSite::MlpActivation, 0, 0)],
        }];
        assert!(progressive_ablation(&m, &Ablation::Neurons, &items, 2, &Bootstrap::default()).is_err());
        let c = progressive_ablation(&m, &Ablation::Neurons, &items, 1, &Bootstrap::default()).unwrap();
        assert_eq!(c.k, vec![0, 1]);
        assert_eq!(c.mean[0], 0.0);
        assert!(c.to_csv().starts_with("k,mean,stderr\n0,"));
    }

    #[test]
    fn bootstrap_of_constant() {
        let (m, se) = bootstrap_mean(&[0.3; 10], &Bootstrap::default()).unwrap();
        assert!((m - 0.3).abs() < 1e-12 && se.abs() < 1e-12);
    }

    fn unit_samples() -> Vec<(String, f64)> {
        (0..24).map(|i| (format!("sample {i}"), (i % 7) as f64 + 0.5 * (i / 7) as f64)).collect()
    }

    #[test]
    fn is_oracle_and_anti_oracle() {
        let samples = unit_samples();
        let max = samples.iter().map(|s| s.1).fold(0.0, f64::max);
        let oracle = LookupInterpreter {
            table: samples.iter().map(|(t, a)| (t.clone(), a / max)).collect(),
        };
        let anti = LookupInterpreter {
            table: samples.iter().map(|(t, a)| (t.clone(), 1.0 - a / max)).collect(),
        };
        assert!((interpret_score(&oracle, "u", &samples, 1).unwrap().score - 1.0).abs() < 1e-9);
        assert!((interpret_score(&anti, "u", &samples, 1).unwrap().score + 1.0).abs() < 1e-9);
        assert!(interpret_score(&oracle, "u", &samples[..10], 1).is_err());
    }

    #[test]
    fn is_constant_prediction_is_undefined() {
        let r = interpret_score(&LookupInterpreter::default(), "u", &unit_samples(), 0);
        assert!(matches!(r, Err(Error::Undefined(_))));
        let _ = MockInterpreter;
    }

    #[test]
    fn pearson_known() {
        let expected = 4.5 / (2.0f64 * 366.0 / 36.0).sqrt();
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn paired_t_oracle() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0, 1.0, 1.0, 3.0];
        let r = paired_t(&a, &b).unwrap();
        assert!((r.t_statistic - 5.0).abs() < 1e-9);
        assert!((r.cohens_d - 2.5).abs() < 1e-9);
        // Two-sided p for t = 5 with 3 df.
        assert!((r.p_value - 0.015_393_3).abs() < 1e-6, "{}", r.p_value);
        let s = paired_t(&b, &a).unwrap();
        assert!((s.t_statistic + r.t_statistic).abs() < 1e-9);
    }

    #[test]
    fn paired_t_degenerate() {
        assert!(matches!(paired_t(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
        let r = paired_t(&[2.0, 3.0], &[1.0, 2.0]).unwrap();
        assert!(r.overflow && r.t_statistic.is_infinite() && r.p_value == 0.0);
        assert!(paired_t(&[1.0], &[0.0]).is_err());
        assert!(paired_t(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn overlap_windows() {
        let base = vec![BTreeSet::from([(0, 3)])];
        let r = overlap_ratio(&base, &[BTreeSet::from([(0, 6)])], 2).unwrap();
        assert_eq!(r.mean, 1.0);
        let r = overlap_ratio(&base, &[BTreeSet::from([(0, 9)])], 2).unwrap();
        assert_eq!(r.mean, 0.0);
        let r = overlap_ratio(&base, &[BTreeSet::from([(0, 7), (1, 7), (0, 8)])], 2).unwrap();
        assert_eq!(r.ratios[0], Some(1.0 / 3.0));
        assert_eq!(overlap_ratio(&base, &base, 1).unwrap().mean, 1.0);
        let two = vec![BTreeSet::from([(0, 1)]), BTreeSet::from([(0, 2)])];
        let r = overlap_ratio(&two, &[BTreeSet::new(), BTreeSet::from([(0, 4)])], 2).unwrap();
        assert_eq!((r.skipped, r.mean), (1, 1.0));
        assert!(overlap_ratio(&base, &base, 0).is_err());
    }

    #[test]
    fn kde_normalized_and_symmetric() {
        let v = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let c = kde(&v, None, 401).unwrap();
        assert!((c.trapezoid_integral() - 1.0).abs() < 0.01);
        let n = c.density.len();
        for i in 0..n {
            assert!((c.density[i] - c.density[n - 1 - i]).abs() < 1e-6);
        }
        let flat = kde(&[2.0, 2.0, 2.0], None, 50).unwrap();
        assert_eq!(flat.bandwidth, KDE_FALLBACK_BANDWIDTH);
        assert!(kde(&[1.0], None, 50).is_err());
        assert!(kde(&[1.0, 2.0], Some(0.0), 50).is_err());
        assert!(c.to_csv().starts_with("x,density\n"));
    }

    #[test]
    fn mixture_fixture_means_are_exact() {
        let rel: Vec<f64> = vec![1.0; 600];
        let other: Vec<f64> = vec![0.0; 600];
        let pts = mixture_activations(&rel, &other, |&x| Ok(x), &MixtureConfig::default()).unwrap();
        for p in &pts {
            assert_eq!(p.mean, p.proportion as f64 / 100.0);
        }
        assert_eq!(mixture_trend(&pts).unwrap(), 1.0);
        let short = mixture_activations(&rel[..10], &other, |&x| Ok(x), &MixtureConfig::default());
        assert!(matches!(short, Err(Error::Exhausted(_))));
    }

    #[test]
    fn relation_unit_selection_uses_pass_mean() {
        let u = |i| UnitId::new(CaptureSite::MlpActivation, 0, i);
        let pass = vec![vec![(u(0), 1.0), (u(1), 0.1)], vec![(u(0), 0.8), (u(1), 0.0), (u(2), 0.5)]];
        let s = relation_units(&pass, |v| Ok(v.clone()), UnitKind::Feature, 0.2).unwrap();
        assert_eq!(s.units.iter().map(|u| u.index).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn erasure_summary_pools_rates() {
        let report = |rel: (usize, usize), ppl: f64| ErasureReport {
            rel: Rate::new(rel.0, rel.1),
            gen: Rate::new(0, 3),
            loc: Rate::new(9, 10),
            ppl_before: 2.0,
            ppl_after: 2.0 * (1.0 + ppl),
            delta_ppl: ppl,
        };
        let s = summarize_erasure(&[(report((3, 3), 0.1), 4), (report((0, 1), 0.3), 8)]).unwrap();
        assert_eq!((s.rel.numerator, s.rel.denominator), (3, 4));
        assert_eq!(s.loc.value, 0.9);
        assert!((s.mean_delta_ppl - 0.2).abs() < 1e-12);
        assert_eq!(s.mean_columns, 6.0);
        assert!(summarize_erasure(&[]).is_err());
    }
}
