// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any fails. The toy stack (datasets, LM, SAEs) is built once and
//! shared by the criteria that need it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use featlab::attribution::{baseline_prompt, ig_attribution, integrated_gradients, select_neurons, IgConfig};
use featlab::datasets::{
    default_relations, gen_fact_dataset, gen_privacy_dataset, gen_privacy_subset, privacy_answer_regex, split, FactSet, PrivacyComponents,
    SplitPolicy, PRIVACY_RELATIONS,
};
use featlab::decomp::{fit_ica, fit_pca, fit_random, Decomposer};
use featlab::editing::{apply_edit, feature_edit_plan, neuron_edit_plan};
use featlab::eval::{
    delta_prob, erasure_metrics, final_position_scores, summarize_erasure, interpret_score, mixture_activations, mixture_trend, neuron_scores, overlap_ratio,
    paired_t, relation_units, Ablation, MixtureConfig, Probe, Reconstruct,
};
use featlab::interp::{InterpreterConfig, LookupInterpreter, MockInterpreter, RemoteInterpreter, Transport};
use featlab::sae::{jump_relu, train_sae, SaeModel, SaeTrainConfig};
use featlab::toylm::{
    capture_activations, finetune_config, greedy_first_token, train_lm, CaptureInput, CaptureSite, Model, ModelConfig, Position,
    Tokenizer, TrainConfig, TrainExample,
};
use featlab::units::{select_fraction_of_max, select_with_scope, MaxScope, UnitId, UnitKind};
use ndarray::{array, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SITE: CaptureSite = CaptureSite::MlpActivation;
const LAYERS: [usize; 4] = [0, 1, 2, 3];
const TAU1: f64 = 0.3;
const TAU2: f64 = 0.1;

// Privacy facts per relation learned by fine-tuning; the first
// ERASED_PER_RELATION of each relation are erased.
const PRIVACY_SUBSET: usize = 20;
const ERASED_PER_RELATION: usize = 10;
const FINETUNE_EPOCHS: usize = 80;
const FINETUNE_SAE_EPOCHS: usize = 100;
// Fraction of base activation rows kept out of SAE training.
const HELD_OUT: f64 = 0.1;
const EDIT_SCOPE: MaxScope = MaxScope::PerInput;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sae_config(epochs: usize) -> SaeTrainConfig {
    SaeTrainConfig {
        lambda: 0.25,
        batch_size: 64,
        epochs,
        ..Default::default()
    }
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

fn accuracy(model: &Model, ex: &[TrainExample]) -> f64 {
    let right = ex.iter().filter(|e| greedy_first_token(model, &e.prompt).unwrap() == e.answer[0]).count();
    right as f64 / ex.len() as f64
}

/// Activations at every position of every prompt, one row each.
fn activation_rows(model: &Model, prompts: &[Vec<u32>], layer: usize) -> Array2<f32> {
    let inputs: Vec<CaptureInput> = prompts.iter().enumerate().map(|(i, p)| CaptureInput::new(i.to_string(), p.clone())).collect();
    let recs = capture_activations(model, &inputs, SITE, &[layer], Position::All).unwrap();
    let mut h = Array2::zeros((recs.len(), recs[0].vector.len()));
    for (i, r) in recs.iter().enumerate() {
        h.row_mut(i).assign(&Array1::from(r.vector.clone()));
    }
    h
}

/// Splits rows into training and held-out sets by a seeded permutation.
fn split_rows(h: &Array2<f32>, held: f64, seed: u64) -> (Array2<f32>, Array2<f32>) {
    let mut idx: Vec<usize> = (0..h.nrows()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = (h.nrows() as f64 * held).round() as usize;
    (h.select(Axis(0), &idx[n_held..]), h.select(Axis(0), &idx[..n_held]))
}

fn train_saes(model: &Model, prompts: &[Vec<u32>], cfg: &SaeTrainConfig) -> Vec<SaeModel> {
    LAYERS
        .iter()
        .map(|&l| train_sae(&activation_rows(model, prompts, l), SITE, l, &SaeTrainConfig { seed: l as u64, ..cfg.clone() }).unwrap().0)
        .collect()
}

fn recon_map<R: Reconstruct>(models: &[R]) -> BTreeMap<usize, &dyn Reconstruct> {
    LAYERS.iter().zip(models).map(|(&l, m)| (l, m as &dyn Reconstruct)).collect()
}

struct Stack {
    tok: Tokenizer,
    facts: FactSet,
    fact_examples: Vec<TrainExample>,
    privacy_train: FactSet,
    privacy_eval: FactSet,
    probes: FactSet,
    model: Model,
    accuracy: f64,
    identical: bool,
    saes: Vec<SaeModel>,
    /// Base activation rows per layer that no SAE was trained on.
    held: Vec<Array2<f32>>,
}

fn build_stack() -> Stack {
    let facts = gen_fact_dataset(&default_relations(), 20, 7).unwrap();
    let privacy = gen_privacy_subset(&PrivacyComponents::default(), PRIVACY_SUBSET, 11).unwrap();
    let (privacy_train, privacy_eval) = split(
        &privacy,
        &SplitPolicy::ParaphraseSplit {
            train: vec![0, 1, 2],
            eval: vec![3, 4, 5],
        },
        0,
    )
    .unwrap();
    let probes = gen_fact_dataset(&default_relations(), 160, 13).unwrap();
    let mut corpus = facts.corpus();
    corpus.extend(privacy.corpus());
    let tok = Tokenizer::build(&corpus).unwrap();
    let fact_examples = examples(&tok, &facts);

    let train = || {
        let mut m = Model::new(ModelConfig::new(tok.vocab_size(), 7)).unwrap();
        train_lm(&mut m, &fact_examples, tok.eos_id(), &TrainConfig::default()).unwrap();
        m
    };
    let model = train();
    let again = train();
    let identical = model.to_checkpoint().to_bytes() == again.to_checkpoint().to_bytes();
    let accuracy = accuracy(&model, &fact_examples);

    let prompts: Vec<Vec<u32>> = fact_examples.iter().map(|e| e.prompt.clone()).collect();
    let (saes, held) = LAYERS
        .iter()
        .map(|&l| {
            let (train, held) = split_rows(&activation_rows(&model, &prompts, l), HELD_OUT, 100 + l as u64);
            let cfg = SaeTrainConfig { seed: l as u64, ..sae_config(300) };
            (train_sae(&train, SITE, l, &cfg).unwrap().0, held)
        })
        .unzip();
    Stack {
        tok,
        facts,
        fact_examples,
        privacy_train,
        privacy_eval,
        probes,
        model,
        accuracy,
        identical,
        saes,
        held,
    }
}

/// One prompt per fact: the first paraphrase.
fn one_per_fact(s: &Stack) -> Vec<TrainExample> {
    s.facts
        .facts
        .iter()
        .map(|f| TrainExample {
            prompt: s.tok.encode(&f.paraphrases[0]),
            answer: s.tok.encode(&f.answer),
        })
        .collect()
}

// ---------------------------------------------------------------------------

fn c1_memorization(s: &Stack) -> Outcome {
    check(
        s.accuracy >= 0.95 && s.identical,
        format!("training-prompt accuracy {:.3} (need >= 0.95), same-seed runs bitwise identical: {}", s.accuracy, s.identical),
    )
}

fn c2_sae_quality(s: &Stack) -> Outcome {
    let mut worst_l2: f64 = 0.0;
    let mut worst_l0_frac: f64 = 0.0;
    for (sae, held) in s.saes.iter().zip(&s.held) {
        let q = sae.quality(held).unwrap();
        worst_l2 = worst_l2.max(q.rel_l2);
        worst_l0_frac = worst_l0_frac.max(q.mean_l0 / sae.d_f() as f64);
    }
    let map = recon_map(&s.saes);
    let ab = Ablation::Features(map);
    let d0: Vec<f64> = one_per_fact(s)
        .iter()
        .map(|e| delta_prob(&s.model, &e.prompt, &e.answer, &ab, &[]).unwrap().delta_clamped)
        .collect();
    let d0 = mean(&d0);
    check(
        worst_l2 < 0.1 && worst_l0_frac < 0.05 && d0 < 0.05,
        format!("held-out rel L2 max {worst_l2:.4} (< 0.1), L0/d_f max {worst_l0_frac:.4} (< 0.05), empty-set ΔProb {d0:.4} (< 0.05)"),
    )
}

fn c3_jump_relu() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0usize;
    for _ in 0..50 {
        let theta: f32 = rng.random_range(0.001..5.0);
        let mut grid: Vec<f32> = (-400..=400).map(|i| i as f32 * 0.0125).collect();
        grid.extend([theta, f32::from_bits(theta.to_bits() + 1), f32::from_bits(theta.to_bits() - 1), 0.0, -0.0]);
        for z in grid {
            let want = if z <= theta { 0.0 } else { z };
            if jump_relu(z, theta) != want {
                return Err(format!("jump_relu({z}, {theta}) = {}", jump_relu(z, theta)));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} grid points exact"))
}

fn c4_ig() -> Outcome {
    let slope = array![0.5, -2.0, 3.0];
    let base = array![1.0, 1.0, 1.0];
    let input = array![3.0, 0.0, -1.0];
    let want = (&input - &base) * &slope;
    for n in [1, 2, 7, 20, 300] {
        let a = integrated_gradients(&base, &input, n, |_| Ok(slope.clone())).map_err(|e| e.to_string())?;
        if a != want {
            return Err(format!("linear case N={n}: {a} vs {want}"));
        }
    }
    let qb = array![0.2, -0.4, 1.0];
    let qi = array![1.5, 0.7, -0.3];
    let f = |x: &Array1<f64>| x.iter().map(|v| v * v).sum::<f64>();
    let a = integrated_gradients(&qb, &qi, 300, |x| Ok(x * 2.0)).map_err(|e| e.to_string())?;
    let gap = f(&qi) - f(&qb);
    let rel = (a.sum() - gap).abs() / gap.abs();

    let mut c = ModelConfig::new(10, 21);
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_mlp = 12;
    let m = Model::new(c).map_err(|e| e.to_string())?;
    let base_prompt = baseline_prompt(&[3, 5, 7], 0);
    let map = ig_attribution(&m, "b", &base_prompt, &[4], &[0], &IgConfig::new(0)).map_err(|e| e.to_string())?;
    let zero = map.values.iter().all(|&v| v == 0.0);
    check(
        rel <= 0.01 && zero,
        format!("linear exact for N in {{1,2,7,20,300}}, quadratic completeness error {:.2e} (<= 1%), baseline prompt all-zero: {zero}", rel),
    )
}

fn c5_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = Array2::from_shape_fn((200, 6), |(_, j)| rng.random_range(-1.0f32..1.0) * (1.0 + j as f32) + 0.5);
    let pca = fit_pca(&h, 1.0, SITE, 0).map_err(|e| e.to_string())?;
    let x = Array1::from_iter((0..6).map(|i| i as f64 * 0.3 - 1.0));
    let rt_err = (&pca.inverse.dot(&pca.forward.dot(&x)) - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let dir = [0.6f64, 0.0, -0.8, 0.0];
    let h1 = Array2::from_shape_fn((100, 4), |(i, j)| ((i as f64 * 0.37).sin() * 3.0 * dir[j]) as f32);
    let p1 = fit_pca(&h1, 0.99, SITE, 0).map_err(|e| e.to_string())?;
    let cos = p1.forward.row(0).iter().zip(dir).map(|(a, b)| a * b).sum::<f64>().abs();

    let n = 2000;
    let s1: Vec<f64> = (0..n).map(|i| (i as f64 * 0.05).sin().signum()).collect();
    let s2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mixed = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { (s1[i] + 0.6 * s2[i]) as f32 } else { (0.4 * s1[i] + s2[i]) as f32 });
    let ica = fit_ica(&mixed, 2, 0, SITE, 0).map_err(|e| e.to_string())?;
    let rec: Vec<Vec<f64>> = (0..2)
        .map(|k| mixed.rows().into_iter().map(|r| ica.project(r).unwrap()[k] as f64).collect())
        .collect();
    let corr = |a: &[f64], b: &[f64]| featlab::eval::pearson(a, b).unwrap().abs();
    let best = (corr(&rec[0], &s1).min(corr(&rec[1], &s2))).max(corr(&rec[1], &s1).min(corr(&rec[0], &s2)));

    let rd: Decomposer = fit_random(32, 32, 9, SITE, 0).map_err(|e| e.to_string())?;
    let q = &rd.inverse;
    let qtq = q.t().dot(q);
    let ortho = qtq.indexed_iter().fold(0.0f64, |m, ((i, j), &v)| m.max((v - if i == j { 1.0 } else { 0.0 }).abs()));
    check(
        rt_err < 1e-6 && cos > 0.999 && best >= 0.95 && ortho <= 1e-10,
        format!("PCA round trip {rt_err:.1e}, rank-1 cosine {cos:.6}, ICA |corr| {best:.4}, RD orthogonality {ortho:.1e}"),
    )
}

fn c6_ablation(s: &Stack) -> Outcome {
    let rds: Vec<Decomposer> = LAYERS.iter().map(|&l| fit_random(s.model.config.d_mlp, s.model.config.d_mlp, 3 + l as u64, SITE, l).unwrap()).collect();
    let sae_map = recon_map(&s.saes);
    let rd_map = recon_map(&rds);
    let ab_sae = Ablation::Features(sae_map.clone());
    let ab_rd = Ablation::Features(rd_map.clone());
    let (mut ds, mut dr, mut dn) = (vec![], vec![], vec![]);
    for e in one_per_fact(s) {
        let sel: Vec<UnitId> = select_fraction_of_max(UnitKind::Feature, final_position_scores(&s.model, &e.prompt, &sae_map).unwrap(), TAU1)
            .units
            .into_iter()
            .collect();
        let mut rd_scores = final_position_scores(&s.model, &e.prompt, &rd_map).unwrap();
        rd_scores.sort_by(|a, b| b.1.total_cmp(&a.1));
        let rd_units: Vec<UnitId> = rd_scores[..sel.len()].iter().map(|x| x.0).collect();
        let neurons: Vec<UnitId> = select_fraction_of_max(UnitKind::Neuron, neuron_scores(&s.model, &e.prompt, &LAYERS).unwrap(), TAU1)
            .units
            .into_iter()
            .collect();
        ds.push(delta_prob(&s.model, &e.prompt, &e.answer, &ab_sae, &sel).unwrap().delta_clamped);
        dr.push(delta_prob(&s.model, &e.prompt, &e.answer, &ab_rd, &rd_units).unwrap().delta_clamped);
        dn.push(delta_prob(&s.model, &e.prompt, &e.answer, &Ablation::Neurons, &neurons).unwrap().delta_clamped);
    }
    let vs_rd = paired_t(&ds, &dr).map_err(|e| e.to_string())?;
    let vs_n = paired_t(&ds, &dn).map_err(|e| e.to_string())?;
    let (ms, mr, mn) = (mean(&ds), mean(&dr), mean(&dn));
    check(
        ds.len() >= 100 && ms > mr && ms > mn && vs_rd.p_value < 0.05 && vs_n.p_value < 0.05,
        format!(
            "{} facts: SAE {ms:.3} vs random directions {mr:.3} (p {:.1e}) vs neurons {mn:.3} (p {:.1e})",
            ds.len(),
            vs_rd.p_value,
            vs_n.p_value
        ),
    )
}

fn c7_monosemanticity(s: &Stack) -> Outcome {
    // Fixture: relation items activate at 1, others at 0, so the mean at p% is p/100.
    let fixture = MixtureConfig::default();
    let pts = mixture_activations(&vec![1.0; 500], &vec![0.0; 500], |&x: &f64| Ok(x), &fixture).map_err(|e| e.to_string())?;
    let exact = pts.iter().all(|p| p.mean == p.proportion as f64 / 100.0);

    let map = recon_map(&s.saes);
    let mut by_rel: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
    let mut memo: HashMap<Vec<u32>, Vec<(UnitId, f64)>> = HashMap::new();
    for e in s.probes.entries() {
        let p = s.tok.encode(&e.sentence);
        if !memo.contains_key(&p) {
            memo.insert(p.clone(), final_position_scores(&s.model, &p, &map).map_err(|e| e.to_string())?);
        }
        by_rel.entry(e.relation.clone()).or_default().push(p);
    }
    let mut lines = Vec::new();
    let mut ok = exact;
    for rel in &fixture.relations {
        let prompts = &by_rel[rel];
        let (pure, pool) = prompts.split_at(100);
        let others: Vec<Vec<u32>> = by_rel.iter().filter(|(r, _)| *r != rel).flat_map(|(_, p)| p.iter().cloned()).collect();
        let units = relation_units(pure, |p| Ok(memo[p].clone()), UnitKind::Feature, TAU1).map_err(|e| e.to_string())?;
        let act = |p: &Vec<u32>| -> featlab::Result<f64> {
            Ok(mean(&memo[p].iter().filter(|(u, _)| units.units.contains(u)).map(|x| x.1).collect::<Vec<_>>()))
        };
        let pts = mixture_activations(pool, &others, act, &fixture).map_err(|e| e.to_string())?;
        let rho = mixture_trend(&pts).map_err(|e| e.to_string())?;
        let increasing = pts.windows(2).all(|w| w[0].mean < w[1].mean);
        ok &= increasing && rho == 1.0;
        lines.push(format!("{rel} ρ={rho:.2}"));
    }
    check(ok, format!("fixture means exactly p/100: {exact}; {}", lines.join(", ")))
}

fn c8_overlap() -> Outcome {
    let set = |v: &[(usize, usize)]| v.iter().copied().collect::<BTreeSet<_>>();
    let base = vec![set(&[(0, 3), (1, 5)]), set(&[(2, 0)])];
    let probe = vec![set(&[(0, 6), (0, 7), (0, 8), (1, 11)]), set(&[(2, 1), (2, 2)])];
    let r2 = overlap_ratio(&base, &probe, 2).map_err(|e| e.to_string())?;
    let probe4 = vec![set(&[(0, 12), (0, 15), (0, 16), (1, 20)]), set(&[(2, 3), (3, 0)])];
    let r4 = overlap_ratio(&base, &probe4, 4).map_err(|e| e.to_string())?;
    let self1 = overlap_ratio(&base, &base, 1).map_err(|e| e.to_string())?;
    let ok = r2.ratios == vec![Some(0.75), Some(0.5)] && r4.ratios == vec![Some(0.75), Some(0.5)] && self1.mean == 1.0;
    check(ok, format!("n=2 ratios {:?}, n=4 ratios {:?}, n=1 self-overlap {}", r2.ratios, r4.ratios, self1.mean))
}

fn c9_statistics() -> Outcome {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [0.0, 1.0, 1.0, 3.0];
    let r = paired_t(&a, &b).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
    let y: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
    let xy = paired_t(&x, &y).map_err(|e| e.to_string())?;
    let yx = paired_t(&y, &x).map_err(|e| e.to_string())?;
    let shifted = paired_t(&x.iter().map(|v| v + 7.5).collect::<Vec<_>>(), &y.iter().map(|v| v + 7.5).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let ok = (r.t_statistic - 5.0).abs() < 1e-9
        && (r.cohens_d - 2.5).abs() < 1e-9
        && (xy.t_statistic + yx.t_statistic).abs() < 1e-9
        && (xy.t_statistic - shifted.t_statistic).abs() < 1e-9
        && (xy.cohens_d - shifted.cohens_d).abs() < 1e-9;
    check(ok, format!("t {:.12}, d {:.12}; antisymmetry and shift invariance hold to 1e-9", r.t_statistic, r.cohens_d))
}

/// Answers every request from a fixed table, counting calls.
struct Canned {
    calls: AtomicUsize,
    scores: HashMap<String, f64>,
}

impl Transport for Canned {
    fn post(&self, _: &str, _: Option<&str>, body: &str, _: Duration) -> featlab::Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let v: serde_json::Value = serde_json::from_str(body)?;
        let user = v["messages"][1]["content"].as_str().unwrap_or_default();
        let content = self
            .scores
            .iter()
            .find(|(text, _)| user.contains(text.as_str()))
            .map_or_else(|| "a pattern".to_string(), |(_, s)| s.to_string());
        Ok(serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string())
    }
}

fn c10_interpretability(s: &Stack) -> Outcome {
    let samples: Vec<(String, f64)> = (0..30).map(|i| (format!("sample text {i}"), ((i * 37) % 30) as f64 / 3.0)).collect();
    let max = samples.iter().map(|x| x.1).fold(0.0, f64::max);
    let perfect = LookupInterpreter {
        table: samples.iter().map(|(t, a)| (t.clone(), a / max)).collect(),
    };
    let anti = LookupInterpreter {
        table: samples.iter().map(|(t, a)| (t.clone(), 1.0 - a / max)).collect(),
    };
    let p = interpret_score(&perfect, "u", &samples, 0).map_err(|e| e.to_string())?.score;
    let q = interpret_score(&anti, "u", &samples, 0).map_err(|e| e.to_string())?.score;

    // Mock interpreter over real SAE features of the toy stack.
    let map = recon_map(&s.saes);
    let entries = s.facts.entries();
    let rows: Vec<Vec<(UnitId, f64)>> = entries.iter().map(|e| final_position_scores(&s.model, &s.tok.encode(&e.sentence), &map).unwrap()).collect();
    let mut totals: BTreeMap<UnitId, f64> = BTreeMap::new();
    for r in &rows {
        for &(u, v) in r {
            *totals.entry(u).or_default() += v;
        }
    }
    let mut top: Vec<(UnitId, f64)> = totals.into_iter().collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut mock_scores = Vec::new();
    for (u, _) in top.iter().take(5) {
        let col: Vec<(String, f64)> = rows.iter().zip(&entries).map(|(r, e)| (e.sentence.clone(), r.iter().find(|x| x.0 == *u).unwrap().1)).collect();
        match interpret_score(&MockInterpreter, &u.to_string(), &col, 1) {
            Ok(r) => mock_scores.push(r.score),
            Err(featlab::Error::Undefined(_)) => {}
            Err(e) => return Err(format!("mock pipeline failed on {u}: {e}")),
        }
    }

    // Replay cache: record once through a transport, then replay offline.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache = dir.path().join("cache.json");
    let cfg = InterpreterConfig {
        cache_path: Some(cache.clone()),
        backoff_ms: 0,
        ..Default::default()
    };
    let canned = Canned {
        calls: AtomicUsize::new(0),
        scores: samples.iter().map(|(t, a)| (t.clone(), a / max)).collect(),
    };
    let online = RemoteInterpreter::with_transport(cfg.clone(), canned).map_err(|e| e.to_string())?;
    let first = interpret_score(&online, "u", &samples, 0).map_err(|e| e.to_string())?;
    online.cache().save().map_err(|e| e.to_string())?;
    let dead = Canned {
        calls: AtomicUsize::new(0),
        scores: HashMap::new(),
    };
    let mut offline = RemoteInterpreter::with_transport(cfg, dead).map_err(|e| e.to_string())?;
    offline.offline = true;
    let replay = interpret_score(&offline, "u", &samples, 0).map_err(|e| e.to_string())?;
    let replay_ok = replay.score == first.score;
    check(
        (p - 1.0).abs() <= 1e-9 && (q + 1.0).abs() <= 1e-9 && replay_ok,
        format!(
            "oracle IS {p:.12}, anti-oracle IS {q:.12}, mock pipeline scored {} of 5 SAE features, offline replay identical: {replay_ok}",
            mock_scores.len()
        ),
    )
}

fn c11_erasure(s: &Stack) -> Outcome {
    let eos = s.tok.eos_id();
    let ptrain = examples(&s.tok, &s.privacy_train);
    let mut ft = s.model.clone();
    // Rehearsal: one paraphrase per base fact alongside the privacy prompts.
    let mut data = ptrain.clone();
    data.extend(one_per_fact(s));
    let base = TrainConfig::default();
    let mut fcfg = finetune_config(&base, FINETUNE_EPOCHS);
    fcfg.lr = base.lr / 10.0;
    train_lm(&mut ft, &data, eos, &fcfg).map_err(|e| e.to_string())?;

    let mut prompts: Vec<Vec<u32>> = s.fact_examples.iter().map(|e| e.prompt.clone()).collect();
    prompts.extend(ptrain.iter().map(|e| e.prompt.clone()));
    let saes = train_saes(&ft, &prompts, &sae_config(FINETUNE_SAE_EPOCHS));
    let map = recon_map(&saes);
    let smap: BTreeMap<usize, &SaeModel> = LAYERS.iter().copied().zip(&saes).collect();
    let ig = IgConfig::new(eos);
    let fact_probes = |f: &featlab::datasets::Fact| -> Vec<Probe> {
        let answer = s.tok.encode(&f.answer)[0];
        f.paraphrases.iter().map(|p| Probe { prompt: s.tok.encode(p), answer }).collect()
    };
    let unrelated: Vec<Probe> = one_per_fact(s).into_iter().map(|e| Probe { prompt: e.prompt, answer: e.answer[0] }).collect();
    let ppl: Vec<Vec<u32>> = one_per_fact(s).iter().map(|e| e.sequence(eos)).collect();

    // Each privacy fact is erased by its own edit of the fine-tuned model.
    let (mut per_feature, mut per_neuron) = (Vec::new(), Vec::new());
    let erased = PRIVACY_RELATIONS.iter().flat_map(|rel| {
        let train = s.privacy_train.by_relation(rel);
        let eval = s.privacy_eval.by_relation(rel);
        train.into_iter().zip(eval).take(ERASED_PER_RELATION)
    });
    for (f, r) in erased {
        assert_eq!(f.uuid, r.uuid);
        let (train, rephrase) = (fact_probes(f), fact_probes(r));
        let answer = s.tok.encode(&f.answer);
        let mut neurons = featlab::units::SelectedUnits::empty(UnitKind::Neuron, ig.tau);
        let mut per_prompt = Vec::new();
        for p in &train {
            let a = ig_attribution(&ft, &f.uuid, &p.prompt, &answer, &LAYERS, &ig).map_err(|e| e.to_string())?;
            neurons.union_with(&select_neurons(&a, ig.tau).map_err(|e| e.to_string())?);
            per_prompt.push(final_position_scores(&ft, &p.prompt, &map).map_err(|e| e.to_string())?);
        }
        let features = select_with_scope(UnitKind::Feature, &per_prompt, TAU1, EDIT_SCOPE);
        for (plan, out) in [
            (feature_edit_plan(&smap, &features, TAU2).map_err(|e| e.to_string())?, &mut per_feature),
            (neuron_edit_plan(&neurons).map_err(|e| e.to_string())?, &mut per_neuron),
        ] {
            let after = apply_edit(&ft, &plan).map_err(|e| e.to_string())?;
            out.push((erasure_metrics(&ft, &after, &train, &rephrase, &unrelated, &ppl).map_err(|e| e.to_string())?, plan.len()));
        }
    }
    let rf = summarize_erasure(&per_feature).map_err(|e| e.to_string())?;
    let rn = summarize_erasure(&per_neuron).map_err(|e| e.to_string())?;
    let rel_t = paired_t(
        &per_feature.iter().map(|x| x.0.rel.value).collect::<Vec<_>>(),
        &per_neuron.iter().map(|x| x.0.rel.value).collect::<Vec<_>>(),
    )
    .map(|r| format!("{:.1e}", r.p_value))
    .unwrap_or_else(|e| e.to_string());
    check(
        rf.rel.value >= rn.rel.value && rf.loc.value >= rn.loc.value && rf.mean_columns <= rn.mean_columns,
        format!(
            "{} facts; FeatureEdit Rel {:.3} Gen {:.3} Loc {:.3} |P| {:.1} ΔPPL {:.3}; neurons Rel {:.3} Gen {:.3} Loc {:.3} |P| {:.1} ΔPPL {:.3}; Rel paired-t p {rel_t}",
            rf.facts,
            rf.rel.value,
            rf.gen.value,
            rf.loc.value,
            rf.mean_columns,
            rf.mean_delta_ppl,
            rn.rel.value,
            rn.gen.value,
            rn.loc.value,
            rn.mean_columns,
            rn.mean_delta_ppl
        ),
    )
}

fn c12_privacy_dataset() -> Outcome {
    let a = gen_privacy_dataset(11);
    let b = gen_privacy_dataset(11);
    let identical = a.to_jsonl() == b.to_jsonl();
    let entries = a.entries();
    let mut valid = 0;
    for e in &entries {
        if privacy_answer_regex(&e.relation).map_err(|e| e.to_string())?.is_match(&e.answer) {
            valid += 1;
        }
    }
    let per_rel: Vec<usize> = PRIVACY_RELATIONS.iter().map(|r| a.by_relation(r).len()).collect();
    check(
        a.len() == 1500 && entries.len() == 9000 && valid == entries.len() && per_rel.iter().all(|&n| n == 500) && identical,
        format!("{} facts {per_rel:?}, {} entries, {valid} regex-valid, byte-identical regeneration: {identical}", a.len(), entries.len()),
    )
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((3, "JumpReLU unit law", c3_jump_relu()));
    results.push((4, "IG exactness", c4_ig()));
    results.push((5, "decomposition oracles", c5_decomposition()));
    results.push((8, "overlap-ratio correctness", c8_overlap()));
    results.push((9, "statistics oracle", c9_statistics()));
    results.push((12, "privacy dataset contract", c12_privacy_dataset()));
    let stack = build_stack();
    eprintln!("toy stack built in {:.0?}", t0.elapsed());
    let stack_checks: [(usize, &str, fn(&Stack) -> Outcome); 6] = [
        (1, "toy LM memorization", c1_memorization),
        (2, "SAE quality bar", c2_sae_quality),
        (6, "ablation ordering", c6_ablation),
        (7, "relation-feature monosemanticity", c7_monosemanticity),
        (10, "interpretability-score pipeline", c10_interpretability),
        (11, "erasure ordering", c11_erasure),
    ];
    for (n, name, f) in stack_checks {
        let t = Instant::now();
        results.push((n, name, f(&stack)));
        eprintln!("criterion {n} took {:.0?}", t.elapsed());
    }
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed in {:.0?}", results.len() - failed, results.len(), t0.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
