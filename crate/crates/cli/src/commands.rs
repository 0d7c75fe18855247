// SPDX-License-Identifier: MIT OR Apache-2.0

//! One function per subcommand. Each reads upstream artifacts of the same
//! experiment and writes only its own stage directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use featlab::attribution::{ig_attribution, select_neurons, IgConfig};
use featlab::checkpoint::Checkpoint;
use featlab::datasets::{default_relations, gen_fact_dataset, gen_privacy_subset, split, Fact, FactSet, PrivacyComponents, SplitPolicy, PRIVACY_RELATIONS};
use featlab::decomp::{fit_ica, fit_pca, fit_random, DecompKind, Decomposer};
use featlab::editing::{apply_edit, feature_edit_plan, neuron_edit_plan, EditPlan};
use featlab::eval::{
    bootstrap_mean, delta_prob, erasure_metrics, final_position_scores, interpret_score, mixture_activations, mixture_trend, neuron_scores,
    overlap_ratio, paired_t, progressive_ablation, relation_units, summarize_erasure, Ablation, AblationItem, Bootstrap, Probe, Reconstruct,
};
use featlab::interp::{Interpreter, MockInterpreter, RemoteInterpreter};
use featlab::sae::{train_sae as fit_sae, SaeModel};
use featlab::toylm::{capture_activations, greedy_first_token, train_lm as fit_lm, CaptureInput, CaptureSite, Model, Tokenizer, TrainExample};
use featlab::units::{select_fraction_of_max, select_with_scope, SelectedUnits, UnitId, UnitKind};
use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{InterpreterKind, RunConfig};
use crate::run::{read_manifest, require, Stage, FORMAT_VERSION};
use crate::Which;

type Result<T> = anyhow::Result<T>;

// ---------------------------------------------------------------------------
// Shared loading
// ---------------------------------------------------------------------------

struct Data {
    tok: Tokenizer,
    facts: FactSet,
    privacy_train: FactSet,
    privacy_eval: FactSet,
    probes: FactSet,
}

fn upstream(cfg: &RunConfig, stage: &str, name: &str) -> PathBuf {
    cfg.experiment_dir().join(stage).join(name)
}

fn load_data(st: &mut Stage, cfg: &RunConfig) -> Result<Data> {
    let read = |st: &mut Stage, name: &str| -> Result<FactSet> {
        let p = st.input(&upstream(cfg, "data", name))?;
        Ok(FactSet::read_jsonl(&p)?)
    };
    let tok_path = st.input(&upstream(cfg, "data", "tokenizer.json"))?;
    Ok(Data {
        tok: Tokenizer::from_json(&std::fs::read_to_string(tok_path)?)?,
        facts: read(st, "facts.jsonl")?,
        privacy_train: read(st, "privacy_train.jsonl")?,
        privacy_eval: read(st, "privacy_eval.jsonl")?,
        probes: read(st, "probes.jsonl")?,
    })
}

fn examples(tok: &Tokenizer, fs: &FactSet) -> Vec<TrainExample> {
    fs.entries()
        .iter()
        .map(|e| TrainExample {
            prompt: tok.encode(&e.sentence),
            answer: tok.encode(&e.answer),
        })
        .collect()
}

/// The first paraphrase of each of the first `n` facts.
fn first_prompts(tok: &Tokenizer, fs: &FactSet, n: usize) -> Vec<TrainExample> {
    fs.facts
        .iter()
        .take(n)
        .map(|f| TrainExample {
            prompt: tok.encode(&f.paraphrases[0]),
            answer: tok.encode(&f.answer),
        })
        .collect()
}

fn accuracy(model: &Model, ex: &[TrainExample]) -> Result<f64> {
    let mut right = 0;
    for e in ex {
        if greedy_first_token(model, &e.prompt)? == e.answer[0] {
            right += 1;
        }
    }
    Ok(right as f64 / ex.len().max(1) as f64)
}

fn load_checkpoint(st: &mut Stage, path: &Path) -> Result<Checkpoint> {
    let p = st.input(path)?;
    Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))
}

fn model_path(cfg: &RunConfig, which: Which) -> PathBuf {
    match which {
        Which::Base => upstream(cfg, "lm", "model.ckpt"),
        Which::Finetuned => upstream(cfg, "lm-finetune", "model.ckpt"),
    }
}

fn load_model(st: &mut Stage, cfg: &RunConfig, which: Which) -> Result<Model> {
    Ok(Model::from_checkpoint(&load_checkpoint(st, &model_path(cfg, which))?)?)
}

fn layer_file(site: CaptureSite, layer: usize) -> String {
    format!("{site}_L{layer}.ckpt")
}

fn load_activations(st: &mut Stage, cfg: &RunConfig, which: Which, layer: usize) -> Result<Array2<f32>> {
    let ck = load_checkpoint(st, &upstream(cfg, &format!("capture-{}", which.tag()), &layer_file(cfg.capture.site, layer)))?;
    ck.expect_kind("activations")?;
    let (shape, data) = ck.f32("h")?;
    Ok(Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())?)
}

fn load_saes(st: &mut Stage, cfg: &RunConfig, which: Which) -> Result<Vec<SaeModel>> {
    let stage = format!("sae-{}", which.tag());
    cfg.capture
        .layers
        .iter()
        .map(|&l| Ok(SaeModel::from_checkpoint(&load_checkpoint(st, &upstream(cfg, &stage, &layer_file(cfg.capture.site, l)))?)?))
        .collect()
}

fn kind_name(kind: DecompKind) -> &'static str {
    match kind {
        DecompKind::Pca => "pca",
        DecompKind::Ica => "ica",
        DecompKind::Rd => "rd",
    }
}

fn load_decomposers(st: &mut Stage, cfg: &RunConfig, which: Which, kind: DecompKind) -> Result<Vec<Decomposer>> {
    let stage = format!("baseline-{}", which.tag());
    cfg.capture
        .layers
        .iter()
        .map(|&l| {
            let name = format!("{}_{}", kind_name(kind), layer_file(cfg.capture.site, l));
            Ok(Decomposer::from_checkpoint(&load_checkpoint(st, &upstream(cfg, &stage, &name))?)?)
        })
        .collect()
}

fn recon_map<'a, R: Reconstruct>(layers: &[usize], models: &'a [R]) -> BTreeMap<usize, &'a dyn Reconstruct> {
    layers.iter().zip(models).map(|(&l, m)| (l, m as &dyn Reconstruct)).collect()
}

/// Prompts whose activations are captured and used to train SAEs.
fn capture_prompts(data: &Data, which: Which) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = examples(&data.tok, &data.facts).into_iter().map(|e| e.prompt).collect();
    if which == Which::Finetuned {
        out.extend(examples(&data.tok, &data.privacy_train).into_iter().map(|e| e.prompt));
    }
    out
}

fn ranked(mut scores: Vec<(UnitId, f64)>) -> Vec<UnitId> {
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scores.into_iter().map(|(u, _)| u).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Data and model
// ---------------------------------------------------------------------------

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "data")?;
    let d = &cfg.data;
    let facts = gen_fact_dataset(&default_relations(), d.facts_per_relation, cfg.seeds.data)?;
    let privacy = gen_privacy_subset(&PrivacyComponents::default(), d.privacy_per_relation, cfg.seeds.privacy)?;
    let subset = FactSet {
        facts: PRIVACY_RELATIONS
            .iter()
            .flat_map(|r| privacy.by_relation(r).into_iter().take(d.privacy_subset_per_relation).cloned())
            .collect(),
    };
    let policy = SplitPolicy::ParaphraseSplit {
        train: d.privacy_train_templates.clone(),
        eval: d.privacy_eval_templates.clone(),
    };
    let (train, eval) = split(&subset, &policy, cfg.seeds.split)?;
    let probe_set = gen_fact_dataset(&default_relations(), d.probes_per_relation, cfg.seeds.probes)?;

    let mut corpus = facts.corpus();
    corpus.extend(subset.corpus());
    let tok = Tokenizer::build(&corpus)?;

    for (name, fs) in [
        ("facts.jsonl", &facts),
        ("privacy.jsonl", &privacy),
        ("privacy_subset.jsonl", &subset),
        ("privacy_train.jsonl", &train),
        ("privacy_eval.jsonl", &eval),
        ("probes.jsonl", &probe_set),
    ] {
        st.write(name, fs.to_jsonl().as_bytes())?;
    }
    st.write("tokenizer.json", tok.to_json()?.as_bytes())?;
    st.write_report(
        "summary.json",
        &json!({
            "facts": facts.len(),
            "fact_entries": facts.entries().len(),
            "privacy_facts": privacy.len(),
            "privacy_entries": privacy.entries().len(),
            "privacy_subset_facts": subset.len(),
            "probe_facts": probe_set.len(),
            "vocab_size": tok.vocab_size(),
        }),
    )?;
    let dir = st.finish()?;
    log::info!("wrote {}", dir.display());
    Ok(())
}

pub fn train_lm(cfg: &RunConfig, finetune: bool) -> Result<()> {
    let mut st = Stage::begin(cfg, if finetune { "lm-finetune" } else { "lm" })?;
    let data = load_data(&mut st, cfg)?;
    let eos = data.tok.eos_id();
    let facts = examples(&data.tok, &data.facts);
    let report = if finetune {
        let mut model = load_model(&mut st, cfg, Which::Base)?;
        let train = examples(&data.tok, &data.privacy_train);
        let eval = examples(&data.tok, &data.privacy_eval);
        let before = accuracy(&model, &facts)?;
        // Fact examples are rehearsed alongside the privacy facts.
        let mixed: Vec<TrainExample> = train.iter().chain(&facts).cloned().collect();
        let tr = fit_lm(&mut model, &mixed, eos, &cfg.train.to_finetune(cfg.seeds.train))?;
        st.write_checkpoint("model.ckpt", &model.to_checkpoint())?;
        json!({
            "train": tr,
            "privacy_train_accuracy": accuracy(&model, &train)?,
            "privacy_eval_accuracy": accuracy(&model, &eval)?,
            "fact_accuracy_before": before,
            "fact_accuracy": accuracy(&model, &facts)?,
        })
    } else {
        let mut model = Model::new(cfg.model.to_config(data.tok.vocab_size(), cfg.seeds.model))?;
        let tr = fit_lm(&mut model, &facts, eos, &cfg.train.to_config(cfg.seeds.train))?;
        st.write_checkpoint("model.ckpt", &model.to_checkpoint())?;
        json!({ "train": tr, "fact_accuracy": accuracy(&model, &facts)? })
    };
    st.write_report("train.json", &report)?;
    st.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Activations, SAEs and baselines
// ---------------------------------------------------------------------------

pub fn capture(cfg: &RunConfig, which: Which) -> Result<()> {
    let mut st = Stage::begin(cfg, &format!("capture-{}", which.tag()))?;
    let data = load_data(&mut st, cfg)?;
    let model = load_model(&mut st, cfg, which)?;
    let inputs: Vec<CaptureInput> = capture_prompts(&data, which)
        .into_iter()
        .enumerate()
        .map(|(i, p)| CaptureInput::new(i.to_string(), p))
        .collect();
    let site = cfg.capture.site;
    let mut rows = BTreeMap::new();
    for &l in &cfg.capture.layers {
        let recs = capture_activations(&model, &inputs, site, &[l], cfg.capture.position)?;
        let width = site.width(&model.config);
        let mut ck = Checkpoint::new("activations", json!({ "site": site, "layer": l, "position": cfg.capture.position }));
        ck.push_f32("h", &[recs.len(), width], recs.iter().flat_map(|r| r.vector.iter().copied()).collect());
        st.write_checkpoint(&layer_file(site, l), &ck)?;
        rows.insert(l, recs.len());
    }
    st.write_report("capture.json", &json!({ "site": site, "rows": rows }))?;
    st.finish()?;
    Ok(())
}

pub fn train_sae(cfg: &RunConfig, which: Which) -> Result<()> {
    let mut st = Stage::begin(cfg, &format!("sae-{}", which.tag()))?;
    let mut layers = Vec::new();
    for &l in &cfg.capture.layers {
        let h = load_activations(&mut st, cfg, which, l)?;
        let (sae, rep) = fit_sae(&h, cfg.capture.site, l, &cfg.sae.to_config(cfg.seeds.sae + l as u64))?;
        let quality = sae.quality(&h)?;
        log::info!("layer {l}: rel_l2 {:.4} mean L0 {:.2}", quality.rel_l2, quality.mean_l0);
        st.write_checkpoint(&layer_file(cfg.capture.site, l), &sae.to_checkpoint())?;
        layers.push(json!({
            "layer": l,
            "d_f": sae.d_f(),
            "quality": quality,
            "best_epoch": rep.best_epoch,
            "epochs_run": rep.val_loss.len(),
            "best_val_loss": rep.final_loss(),
            "few_samples": rep.few_samples,
        }));
    }
    st.write_report("quality.json", &layers)?;
    st.finish()?;
    Ok(())
}

pub fn fit_baseline(cfg: &RunConfig, which: Which) -> Result<()> {
    let mut st = Stage::begin(cfg, &format!("baseline-{}", which.tag()))?;
    let site = cfg.capture.site;
    let mut summary = Vec::new();
    for &l in &cfg.capture.layers {
        let h = load_activations(&mut st, cfg, which, l)?;
        let width = h.ncols();
        for &kind in &cfg.decomp.kinds {
            let seed = cfg.seeds.decomp + l as u64;
            let dec = match kind {
                DecompKind::Pca => fit_pca(&h, cfg.decomp.pca_variance, site, l)?,
                DecompKind::Ica => {
                    let d_f = if cfg.decomp.ica_components == 0 { width } else { cfg.decomp.ica_components };
                    fit_ica(&h, d_f, seed, site, l)?
                }
                DecompKind::Rd => fit_random(width, width, seed, site, l)?,
            };
            for w in &dec.warnings {
                log::warn!("{} layer {l}: {w:?}", kind_name(kind));
            }
            st.write_checkpoint(&format!("{}_{}", kind_name(kind), layer_file(site, l)), &dec.to_checkpoint())?;
            summary.push(json!({
                "kind": kind,
                "layer": l,
                "d_f": dec.d_f(),
                "iterations": dec.iterations,
                "warnings": dec.warnings,
            }));
        }
    }
    st.write_report("baselines.json", &summary)?;
    st.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MethodDelta {
    mean: f64,
    mean_units: f64,
    bootstrap_mean: f64,
    bootstrap_stderr: f64,
    per_item: Vec<f64>,
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "ablate")?;
    let data = load_data(&mut st, cfg)?;
    let model = load_model(&mut st, cfg, Which::Base)?;
    let layers = &cfg.capture.layers;
    let saes = load_saes(&mut st, cfg, Which::Base)?;
    let mut baselines = BTreeMap::new();
    for &kind in &cfg.decomp.kinds {
        baselines.insert(kind_name(kind), load_decomposers(&mut st, cfg, Which::Base, kind)?);
    }
    let sae_map = recon_map(layers, &saes);
    let base_maps: BTreeMap<&str, BTreeMap<usize, &dyn Reconstruct>> = baselines.iter().map(|(&k, d)| (k, recon_map(layers, d))).collect();
    let items = first_prompts(&data.tok, &data.facts, cfg.eval.ablation_facts);
    let tau1 = cfg.eval.tau1;
    let boot = Bootstrap {
        iterations: cfg.eval.bootstrap_iterations,
        sample_size: cfg.eval.bootstrap_size,
        seed: cfg.seeds.bootstrap,
    };

    let mut deltas: BTreeMap<String, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    let mut curves_in: BTreeMap<String, Vec<AblationItem>> = BTreeMap::new();
    let mut push = |name: &str, d: f64, k: usize, it: &TrainExample, order: Vec<UnitId>| {
        let e = deltas.entry(name.to_string()).or_default();
        e.0.push(d);
        e.1.push(k);
        curves_in.entry(name.to_string()).or_default().push(AblationItem {
            prompt: it.prompt.clone(),
            answer: it.answer.clone(),
            ranked: order,
        });
    };
    let sae_ab = Ablation::Features(sae_map.clone());
    for it in &items {
        let scores = final_position_scores(&model, &it.prompt, &sae_map)?;
        let sel: Vec<UnitId> = select_fraction_of_max(UnitKind::Feature, scores.iter().copied(), tau1).units.into_iter().collect();
        let k = sel.len();
        push("sae", delta_prob(&model, &it.prompt, &it.answer, &sae_ab, &sel)?.delta_clamped, k, it, ranked(scores));
        for (name, map) in &base_maps {
            let order = ranked(final_position_scores(&model, &it.prompt, map)?);
            let ab = Ablation::Features(map.clone());
            let d = delta_prob(&model, &it.prompt, &it.answer, &ab, &order[..k.min(order.len())])?.delta_clamped;
            push(name, d, k, it, order);
        }
        let ns = neuron_scores(&model, &it.prompt, layers)?;
        let nsel: Vec<UnitId> = select_fraction_of_max(UnitKind::Neuron, ns.iter().copied(), tau1).units.into_iter().collect();
        push("neuron", delta_prob(&model, &it.prompt, &it.answer, &Ablation::Neurons, &nsel)?.delta_clamped, nsel.len(), it, ranked(ns));
    }

    let mut methods = BTreeMap::new();
    for (name, (d, ks)) in &deltas {
        let (bm, bse) = bootstrap_mean(d, &boot)?;
        methods.insert(
            name.clone(),
            MethodDelta {
                mean: mean(d),
                mean_units: ks.iter().sum::<usize>() as f64 / ks.len().max(1) as f64,
                bootstrap_mean: bm,
                bootstrap_stderr: bse,
                per_item: d.clone(),
            },
        );
    }
    let mut stats = BTreeMap::new();
    for (name, (d, _)) in &deltas {
        if name != "sae" {
            match paired_t(&deltas["sae"].0, d) {
                Ok(r) => stats.insert(format!("sae_vs_{name}"), json!(r)),
                Err(e) => stats.insert(format!("sae_vs_{name}"), json!({ "undefined": e.to_string() })),
            };
        }
    }
    st.write_report("delta.json", &json!({ "tau1": tau1, "facts": items.len(), "methods": methods, "stats": stats }))?;

    let mut curves = BTreeMap::new();
    for (name, its) in &curves_in {
        let ab = match name.as_str() {
            "sae" => Ablation::Features(sae_map.clone()),
            "neuron" => Ablation::Neurons,
            other => Ablation::Features(base_maps[other].clone()),
        };
        let curve = progressive_ablation(&model, &ab, its, cfg.eval.max_k, &boot)?;
        st.write(&format!("curve_{name}.csv"), curve.to_csv().as_bytes())?;
        curves.insert(name.clone(), json!({ "k": curve.k, "mean": curve.mean, "stderr": curve.stderr }));
    }
    st.write_report("curves.json", &curves)?;
    st.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Attribution, editing and erasure
// ---------------------------------------------------------------------------

/// Privacy facts erased one at a time: training and rephrase versions of each,
/// taken round-robin over relations and capped at `edit.max_facts`.
fn erased_facts<'a>(cfg: &RunConfig, data: &'a Data) -> Result<Vec<(&'a Fact, &'a Fact)>> {
    let rephrase: BTreeMap<&str, &Fact> = data.privacy_eval.facts.iter().map(|f| (f.uuid.as_str(), f)).collect();
    let mut by_rel: Vec<Vec<&Fact>> = data.privacy_train.relations().iter().map(|r| data.privacy_train.by_relation(r)).collect();
    for facts in &mut by_rel {
        facts.reverse();
    }
    let mut out = Vec::new();
    while by_rel.iter().any(|f| !f.is_empty()) {
        for facts in &mut by_rel {
            if let Some(f) = facts.pop() {
                let r = rephrase.get(f.uuid.as_str()).with_context(|| format!("privacy fact {} has no rephrase split", f.uuid))?;
                out.push((f, *r));
            }
        }
    }
    if cfg.edit.max_facts > 0 {
        out.truncate(cfg.edit.max_facts);
    }
    Ok(out)
}

fn fact_probes(tok: &Tokenizer, f: &Fact) -> Vec<Probe> {
    let answer = tok.encode(&f.answer)[0];
    f.paraphrases.iter().map(|s| Probe { prompt: tok.encode(s), answer }).collect()
}

#[derive(Serialize, serde::Deserialize)]
struct PerFact<T> {
    uuid: String,
    #[serde(flatten)]
    value: T,
}

#[derive(Serialize, serde::Deserialize)]
struct Neurons {
    neurons: SelectedUnits,
}

#[derive(Serialize, serde::Deserialize)]
struct Plan {
    plan: EditPlan,
}

pub fn attribute(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "attribute")?;
    let data = load_data(&mut st, cfg)?;
    let model = load_model(&mut st, cfg, Which::Finetuned)?;
    let ig = IgConfig {
        steps: cfg.attribution.steps,
        tau: cfg.attribution.tau,
        baseline_token: data.tok.eos_id(),
    };
    let all_layers: Vec<usize> = (0..model.config.n_layers).collect();
    let mut per_fact = Vec::new();
    let mut lines = String::new();
    for (f, _) in erased_facts(cfg, &data)? {
        let answer = data.tok.encode(&f.answer);
        let mut neurons = SelectedUnits::empty(UnitKind::Neuron, ig.tau);
        for (i, s) in f.paraphrases.iter().enumerate() {
            let map = ig_attribution(&model, &format!("{}#{i}", f.uuid), &data.tok.encode(s), &answer, &all_layers, &ig)?;
            neurons.union_with(&select_neurons(&map, ig.tau)?);
            lines.push_str(&map.to_json()?);
            lines.push('\n');
        }
        per_fact.push(PerFact {
            uuid: f.uuid.clone(),
            value: Neurons { neurons },
        });
    }
    st.write("attributions.jsonl", lines.as_bytes())?;
    st.write_report("neurons.json", &per_fact)?;
    st.finish()?;
    Ok(())
}

fn read_report<T: serde::de::DeserializeOwned>(st: &mut Stage, path: &Path) -> Result<T> {
    let p = st.input(path)?;
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
    Ok(serde_json::from_value(v["report"].clone())?)
}

pub fn edit(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "edit")?;
    let data = load_data(&mut st, cfg)?;
    let model = load_model(&mut st, cfg, Which::Finetuned)?;
    let saes = load_saes(&mut st, cfg, Which::Finetuned)?;
    let neurons: Vec<PerFact<Neurons>> = read_report(&mut st, &upstream(cfg, "attribute", "neurons.json"))?;
    let neurons: BTreeMap<String, SelectedUnits> = neurons.into_iter().map(|n| (n.uuid, n.value.neurons)).collect();

    let map = recon_map(&cfg.capture.layers, &saes);
    let smap: BTreeMap<usize, &SaeModel> = cfg.capture.layers.iter().copied().zip(&saes).collect();
    let (mut fplans, mut nplans, mut counts) = (Vec::new(), Vec::new(), Vec::new());
    for (f, _) in erased_facts(cfg, &data)? {
        let n = neurons.get(&f.uuid).with_context(|| format!("no attributed neurons for privacy fact {}", f.uuid))?;
        let mut per_prompt = Vec::new();
        for p in fact_probes(&data.tok, f) {
            per_prompt.push(final_position_scores(&model, &p.prompt, &map)?);
        }
        let features = select_with_scope(UnitKind::Feature, &per_prompt, cfg.edit.tau1, cfg.edit.scope);
        let fplan = feature_edit_plan(&smap, &features, cfg.edit.tau2)?;
        let nplan = neuron_edit_plan(n)?;
        counts.push(json!({
            "uuid": f.uuid,
            "features": features.len(),
            "feature_columns": fplan.len(),
            "neurons": n.len(),
            "neuron_columns": nplan.len(),
        }));
        fplans.push(PerFact { uuid: f.uuid.clone(), value: Plan { plan: fplan } });
        nplans.push(PerFact { uuid: f.uuid.clone(), value: Plan { plan: nplan } });
    }
    st.write("feature_plans.json", serde_json::to_string_pretty(&fplans)?.as_bytes())?;
    st.write("neuron_plans.json", serde_json::to_string_pretty(&nplans)?.as_bytes())?;
    st.write_report("edit.json", &json!({ "scope": cfg.edit.scope, "tau2": cfg.edit.tau2, "per_fact": counts }))?;
    st.finish()?;
    Ok(())
}

pub fn eval_erasure(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "eval-erasure")?;
    let data = load_data(&mut st, cfg)?;
    let before = load_model(&mut st, cfg, Which::Finetuned)?;
    let eos = data.tok.eos_id();
    let unrelated_ex = first_prompts(&data.tok, &data.facts, data.facts.len());
    let unrelated: Vec<Probe> = unrelated_ex.iter().map(|e| Probe { prompt: e.prompt.clone(), answer: e.answer[0] }).collect();
    let ppl: Vec<Vec<u32>> = unrelated_ex.iter().map(|e| e.sequence(eos)).collect();
    let facts = erased_facts(cfg, &data)?;

    let mut summaries = BTreeMap::new();
    let mut rel = BTreeMap::new();
    let mut loc = BTreeMap::new();
    for tag in ["feature", "neuron"] {
        let path = st.input(&upstream(cfg, "edit", &format!("{tag}_plans.json")))?;
        let plans: Vec<PerFact<Plan>> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let plans: BTreeMap<String, EditPlan> = plans.into_iter().map(|p| (p.uuid, p.value.plan)).collect();
        let mut per_fact = Vec::new();
        for (f, r) in &facts {
            let plan = plans.get(&f.uuid).with_context(|| format!("no {tag} plan for privacy fact {}", f.uuid))?;
            let after = apply_edit(&before, plan)?;
            let report = erasure_metrics(&before, &after, &fact_probes(&data.tok, f), &fact_probes(&data.tok, r), &unrelated, &ppl)?;
            per_fact.push((report, plan.len()));
        }
        rel.insert(tag, per_fact.iter().map(|(r, _)| r.rel.value).collect::<Vec<_>>());
        loc.insert(tag, per_fact.iter().map(|(r, _)| r.loc.value).collect::<Vec<_>>());
        summaries.insert(tag, summarize_erasure(&per_fact)?);
    }
    let stat = |m: &BTreeMap<&str, Vec<f64>>| match paired_t(&m["feature"], &m["neuron"]) {
        Ok(r) => json!(r),
        Err(e) => json!({ "undefined": e.to_string() }),
    };
    let (f, n) = (&summaries["feature"], &summaries["neuron"]);
    st.write_report(
        "erasure.json",
        &json!({
            "reports": summaries,
            "stats": { "rel_feature_vs_neuron": stat(&rel), "loc_feature_vs_neuron": stat(&loc) },
            "feature_rel_ge_neuron": f.rel.value >= n.rel.value,
            "feature_loc_ge_neuron": f.loc.value >= n.loc.value,
            "feature_columns_le_neuron": f.mean_columns <= n.mean_columns,
        }),
    )?;
    st.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Monosemanticity, stability and interpretability
// ---------------------------------------------------------------------------

pub fn mono(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "mono")?;
    let data = load_data(&mut st, cfg)?;
    let model = load_model(&mut st, cfg, Which::Base)?;
    let saes = load_saes(&mut st, cfg, Which::Base)?;
    let layers = cfg.capture.layers.clone();
    let map = recon_map(&layers, &saes);
    let mix = cfg.mixture();
    let tau1 = cfg.eval.tau1;

    let mut by_rel: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
    for e in data.probes.entries() {
        by_rel.entry(e.relation.clone()).or_default().push(data.tok.encode(&e.sentence));
    }
    let mut summary = BTreeMap::new();
    let mut csv = String::from("relation,unit_kind,proportion,mean\n");
    for rel in &mix.relations {
        let Some(prompts) = by_rel.get(rel) else {
            bail!(crate::ConfigError(format!("mixture relation {rel} has no probe prompts")));
        };
        let n_sel = cfg.eval.mixture_selection.min(prompts.len());
        let (pure, pool) = prompts.split_at(n_sel);
        let others: Vec<Vec<u32>> = by_rel.iter().filter(|(r, _)| *r != rel).flat_map(|(_, p)| p.iter().cloned()).collect();

        let mut rel_out = BTreeMap::new();
        for kind in [UnitKind::Feature, UnitKind::Neuron] {
            let scores = |p: &Vec<u32>| -> featlab::Result<Vec<(UnitId, f64)>> {
                match kind {
                    UnitKind::Feature => final_position_scores(&model, p, &map),
                    UnitKind::Neuron => neuron_scores(&model, p, &layers),
                }
            };
            let units = relation_units(pure, scores, kind, tau1)?;
            if units.is_empty() {
                bail!("no {kind:?} units selected for relation {rel}");
            }
            let activation = |p: &Vec<u32>| -> featlab::Result<f64> {
                let s = scores(p)?;
                let picked: Vec<f64> = s.iter().filter(|(u, _)| units.units.contains(u)).map(|x| x.1).collect();
                Ok(mean(&picked))
            };
            let points = mixture_activations(pool, &others, activation, &mix)?;
            let trend = mixture_trend(&points).ok();
            let name = match kind {
                UnitKind::Feature => "feature",
                UnitKind::Neuron => "neuron",
            };
            for p in &points {
                csv.push_str(&format!("{rel},{name},{},{}\n", p.proportion, p.mean));
                if let Some(k) = &p.kde {
                    st.write(&format!("kde_{rel}_{name}_{}.csv", p.proportion), k.to_csv().as_bytes())?;
                }
            }
            let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
            rel_out.insert(
                name,
                json!({
                    "units": units.units,
                    "means": means,
                    "rank_correlation": trend,
                    "strictly_increasing": means.windows(2).all(|w| w[0] < w[1]),
                }),
            );
        }
        summary.insert(rel.clone(), rel_out);
    }
    st.write("means.csv", csv.as_bytes())?;
    st.write_report("mono.json", &json!({ "proportions": mix.proportions, "total": mix.total, "relations": summary }))?;
    st.finish()?;
    Ok(())
}

pub fn stability(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "stability")?;
    let data = load_data(&mut st, cfg)?;
    let model = load_model(&mut st, cfg, Which::Base)?;
    let layers = cfg.eval.stability_layers.clone();
    let mut acts = Vec::new();
    for &l in &layers {
        acts.push(load_activations(&mut st, cfg, Which::Base, l)?);
    }
    let items = first_prompts(&data.tok, &data.facts, cfg.eval.stability_facts);
    let mut widths: Vec<usize> = cfg.eval.stability_n.clone();
    if !widths.contains(&1) {
        widths.insert(0, 1);
    }
    widths.sort_unstable();
    widths.dedup();

    let mut sets: BTreeMap<usize, Vec<BTreeSet<(usize, usize)>>> = BTreeMap::new();
    for &n in &widths {
        let mut scfg = cfg.sae.to_config(cfg.seeds.sae);
        scfg.n_multiplier = n;
        let mut saes = Vec::new();
        for (&l, h) in layers.iter().zip(&acts) {
            scfg.seed = cfg.seeds.sae + l as u64;
            let (sae, _) = fit_sae(h, cfg.capture.site, l, &scfg)?;
            st.write_checkpoint(&format!("sae_n{n}_{}", layer_file(cfg.capture.site, l)), &sae.to_checkpoint())?;
            saes.push(sae);
        }
        let map = recon_map(&layers, &saes);
        let mut per_fact = Vec::new();
        for it in &items {
            let s = final_position_scores(&model, &it.prompt, &map)?;
            let sel = select_fraction_of_max(UnitKind::Feature, s, cfg.eval.tau1);
            per_fact.push(sel.units.iter().map(|u| (u.layer, u.index)).collect());
        }
        sets.insert(n, per_fact);
    }
    let mut means = BTreeMap::new();
    for &n in &cfg.eval.stability_n {
        let rep = overlap_ratio(&sets[&1], &sets[&n], n)?;
        means.insert(n, rep.mean);
        st.write_report(&format!("overlap_n{n}.json"), &rep)?;
    }
    st.write_report("stability.json", &json!({ "layers": layers, "facts": items.len(), "mean_overlap": means }))?;
    st.finish()?;
    Ok(())
}

fn make_interpreter(cfg: &RunConfig) -> Result<Box<dyn Interpreter>> {
    Ok(match cfg.interpreter.kind {
        InterpreterKind::Mock => Box::new(MockInterpreter),
        InterpreterKind::Remote => {
            let mut r = RemoteInterpreter::new(cfg.interpreter.remote.clone())?;
            r.offline = cfg.interpreter.offline;
            Box::new(r)
        }
    })
}

pub fn interpret(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "interpret")?;
    let data = load_data(&mut st, cfg)?;
    let model = load_model(&mut st, cfg, Which::Base)?;
    let saes = load_saes(&mut st, cfg, Which::Base)?;
    let layers = cfg.capture.layers.clone();
    let map = recon_map(&layers, &saes);
    let mut entries = data.facts.entries();
    if cfg.eval.interpret_samples != 0 {
        entries.truncate(cfg.eval.interpret_samples);
    }
    let texts: Vec<String> = entries.iter().map(|e| e.sentence.clone()).collect();
    let mut feat_rows = Vec::new();
    let mut neuron_rows = Vec::new();
    for e in &entries {
        let p = data.tok.encode(&e.sentence);
        feat_rows.push(final_position_scores(&model, &p, &map)?);
        neuron_rows.push(neuron_scores(&model, &p, &layers)?);
    }
    let interp = make_interpreter(cfg)?;
    let mut out = BTreeMap::new();
    for (name, rows) in [("feature", &feat_rows), ("neuron", &neuron_rows)] {
        let mut totals: BTreeMap<UnitId, f64> = BTreeMap::new();
        for r in rows.iter() {
            for &(u, v) in r {
                *totals.entry(u).or_default() += v;
            }
        }
        let top: Vec<UnitId> = ranked(totals.into_iter().collect()).into_iter().take(cfg.eval.interpret_units).collect();
        let mut results = Vec::new();
        let mut scores = Vec::new();
        for (i, u) in top.iter().enumerate() {
            let samples: Vec<(String, f64)> = rows
                .iter()
                .zip(&texts)
                .map(|(r, t)| (t.clone(), r.iter().find(|(x, _)| x == u).map_or(0.0, |x| x.1)))
                .collect();
            match interpret_score(interp.as_ref(), &u.to_string(), &samples, cfg.seeds.interp + i as u64) {
                Ok(r) => {
                    scores.push(r.score);
                    results.push(json!(r));
                }
                Err(e) => results.push(json!({ "unit": u.to_string(), "skipped": e.to_string() })),
            }
        }
        out.insert(name, json!({ "mean_score": if scores.is_empty() { None } else { Some(mean(&scores)) }, "units": results }));
    }
    st.write_report("scores.json", &out)?;
    st.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Report and pipeline
// ---------------------------------------------------------------------------

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::Number(n) => out.push((prefix.to_string(), n.to_string())),
        Value::Bool(b) => out.push((prefix.to_string(), b.to_string())),
        _ => {}
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    require(&cfg.paths.root)?;
    let mut rows: Vec<(String, String, String, String, String, String)> = Vec::new();
    for exp in sorted_dirs(&cfg.paths.root)? {
        for stage_dir in sorted_dirs(&exp)? {
            if stage_dir.file_name().is_some_and(|n| n == "report") || !stage_dir.join("manifest.json").exists() {
                continue;
            }
            let manifest = read_manifest(&stage_dir)?;
            if manifest.format_version != FORMAT_VERSION {
                bail!(
                    "{} has format version {}, expected {FORMAT_VERSION}; refusing to merge",
                    stage_dir.display(),
                    manifest.format_version
                );
            }
            for name in manifest.artifacts.keys().filter(|n| n.ends_with(".json")) {
                let v: Value = serde_json::from_str(&std::fs::read_to_string(stage_dir.join(name))?)?;
                let Some(version) = v.get("format_version").and_then(Value::as_u64) else { continue };
                if version != FORMAT_VERSION as u64 {
                    bail!("{}/{name} has format version {version}; refusing to merge", stage_dir.display());
                }
                let mut flat = Vec::new();
                flatten("", &v["report"], &mut flat);
                for (metric, value) in flat {
                    rows.push((
                        manifest.experiment.clone(),
                        manifest.stage.clone(),
                        name.clone(),
                        metric,
                        value,
                        manifest.config_hash.clone(),
                    ));
                }
            }
        }
    }
    let mut st = Stage::begin(cfg, "report")?;
    let mut csv = String::from("experiment,stage,file,metric,value,config_hash\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.0, r.1, r.2, r.3, r.4, r.5));
    }
    st.write("summary.csv", csv.as_bytes())?;
    st.write_report("summary.json", &json!({ "rows": rows.len() }))?;
    st.finish()?;
    Ok(())
}

pub fn pipeline(cfg: &RunConfig) -> Result<()> {
    gen_data(cfg)?;
    train_lm(cfg, false)?;
    capture(cfg, Which::Base)?;
    train_sae(cfg, Which::Base)?;
    fit_baseline(cfg, Which::Base)?;
    ablate(cfg)?;
    mono(cfg)?;
    stability(cfg)?;
    interpret(cfg)?;
    train_lm(cfg, true)?;
    capture(cfg, Which::Finetuned)?;
    train_sae(cfg, Which::Finetuned)?;
    attribute(cfg)?;
    edit(cfg)?;
    eval_erasure(cfg)?;
    report(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_keeps_scalars_only() {
        let v = json!({ "a": 1, "b": { "c": 2.5, "d": [1, 2] }, "e": "x", "f": true });
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        assert_eq!(
            out,
            vec![("a".into(), "1".into()), ("b.c".into(), "2.5".into()), ("f".into(), "true".into())]
        );
    }

    #[test]
    fn ranked_breaks_ties_by_unit() {
        let u = |i| UnitId::new(CaptureSite::MlpActivation, 0, i);
        assert_eq!(ranked(vec![(u(2), 1.0), (u(0), 1.0), (u(1), 3.0)]), vec![u(1), u(0), u(2)]);
    }
}
