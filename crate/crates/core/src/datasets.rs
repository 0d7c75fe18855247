// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic fact corpora: a templated cloze-relation set over invented
//! entities and a synthetic privacy set (phones, addresses, emails), with
//! JSONL persistence and train/eval splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A ⟨subject, relation, answer⟩ triple and its prompt paraphrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub uuid: String,
    pub subject: String,
    pub relation: String,
    pub answer: String,
    pub paraphrases: Vec<String>,
}

/// One JSONL line: a single prompt with its answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub uuid: String,
    pub sentence: String,
    pub answer: String,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FactSet {
    pub facts: Vec<Fact>,
}

impl FactSet {
    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Every (fact, paraphrase) pair, fact-major.
    pub fn entries(&self) -> Vec<Entry> {
        self.facts
            .iter()
            .flat_map(|f| {
                f.paraphrases.iter().map(move |s| Entry {
                    uuid: f.uuid.clone(),
                    sentence: s.clone(),
                    answer: f.answer.clone(),
                    relation: f.relation.clone(),
                })
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(&e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses JSONL entries and regroups them into facts by uuid, keeping
    /// first-appearance order. Subjects are not stored in the entry format
    /// and come back empty.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut by_id: BTreeMap<String, Fact> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: Entry = serde_json::from_str(line)
                .map_err(|err| Error::Format(format!("line {}: {err}", n + 1)))?;
            match by_id.get_mut(&e.uuid) {
                Some(f) => {
                    if f.answer != e.answer || f.relation != e.relation {
                        return Err(Error::Format(format!(
                            "line {}: entries of fact {} disagree on answer or relation",
                            n + 1,
                            e.uuid
                        )));
                    }
                    f.paraphrases.push(e.sentence);
                }
                None => {
                    order.push(e.uuid.clone());
                    by_id.insert(
                        e.uuid.clone(),
                        Fact {
                            uuid: e.uuid,
                            subject: String::new(),
                            relation: e.relation,
                            answer: e.answer,
                            paraphrases: vec![e.sentence],
                        },
                    );
                }
            }
        }
        let facts = order.into_iter().map(|id| by_id.remove(&id).unwrap()).collect();
        Ok(Self { facts })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// All prompt and answer strings, for building a tokenizer.
    pub fn corpus(&self) -> Vec<String> {
        self.facts
            .iter()
            .flat_map(|f| f.paraphrases.iter().cloned().chain(std::iter::once(f.answer.clone())))
            .collect()
    }

    pub fn by_relation(&self, code: &str) -> Vec<&Fact> {
        self.facts.iter().filter(|f| f.relation == code).collect()
    }

    pub fn relations(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.facts
            .iter()
            .filter(|f| seen.insert(f.relation.clone()))
            .map(|f| f.relation.clone())
            .collect()
    }

    pub fn concat(&self, other: &FactSet) -> FactSet {
        FactSet {
            facts: self.facts.iter().chain(&other.facts).cloned().collect(),
        }
    }
}

fn seeded_uuid(rng: &mut impl RngCore) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
}

// ---------------------------------------------------------------------------
// Cloze-relation corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerSource {
    /// Answers drawn from a fixed pool, with replacement unless `unique`.
    Pool { values: Vec<String>, unique: bool },
}

/// A relation: its code, prompt templates (with `{X}` for the subject) and
/// where its answers come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub code: String,
    pub templates: Vec<String>,
    pub answers: AnswerSource,
}

impl RelationSpec {
    pub fn new(code: &str, templates: &[&str], pool: &[&str]) -> Self {
        Self {
            code: code.into(),
            templates: templates.iter().map(|s| s.to_string()).collect(),
            answers: AnswerSource::Pool {
                values: pool.iter().map(|s| s.to_string()).collect(),
                unique: false,
            },
        }
    }

    pub fn fill(&self, template: usize, subject: &str) -> String {
        self.templates[template].replace("{X}", subject)
    }
}

/// Ten relations mirroring common cloze relations, four templates each,
/// single-token answers.
pub fn default_relations() -> Vec<RelationSpec> {
    vec![
        RelationSpec::new(
            "P39",
            &["{X} has the position of", "{X} holds the position of", "{X} serves as", "The position held by {X} is"],
            &["pope", "bishop", "mayor", "senator", "governor", "minister", "ambassador", "chancellor"],
        ),
        RelationSpec::new(
            "P264",
            &["{X} is represented by music label", "{X} is signed to", "The record label of {X} is", "{X} records for"],
            &["Sunshine", "Motown", "Atlantic", "Columbia", "Capitol", "Decca", "Elektra", "Verve"],
        ),
        RelationSpec::new(
            "P37",
            &["The official language of {X} is", "{X} has the official language", "The language used officially in {X} is", "In {X} the official language is"],
            &["Russian", "French", "English", "Spanish", "German", "Italian", "Dutch", "Swedish"],
        ),
        RelationSpec::new(
            "P108",
            &["{X} works for", "{X} is employed by", "The employer of {X} is", "{X} is an employee of"],
            &["BBC", "IBM", "Google", "Sony", "Intel", "Nokia", "Siemens", "Reuters"],
        ),
        RelationSpec::new(
            "P131",
            &["{X} is located in", "{X} is situated in", "{X} can be found in", "The region containing {X} is"],
            &["Manchester", "Bavaria", "Ohio", "Texas", "Ontario", "Tuscany", "Quebec", "Scotland"],
        ),
        RelationSpec::new(
            "P103",
            &["The native language of {X} is", "{X} natively speaks", "The mother tongue of {X} is", "{X} grew up speaking"],
            &["French", "Russian", "English", "Spanish", "German", "Italian", "Polish", "Greek"],
        ),
        RelationSpec::new(
            "P176",
            &["{X} is produced by", "{X} is manufactured by", "The maker of {X} is", "{X} is made by"],
            &["Fiat", "Toyota", "Honda", "Boeing", "Airbus", "Nissan", "Volvo", "Ford"],
        ),
        RelationSpec::new(
            "P30",
            &["{X} is located in the continent of", "{X} is on the continent of", "The continent of {X} is", "{X} belongs to the continent"],
            &["Africa", "Europe", "Asia", "Antarctica", "Oceania", "America"],
        ),
        RelationSpec::new(
            "P178",
            &["{X} is developed by", "{X} was created by", "The developer of {X} is", "{X} is a product of"],
            &["Sega", "Nintendo", "Apple", "Microsoft", "Adobe", "Oracle", "Valve", "Atari"],
        ),
        RelationSpec::new(
            "P19",
            &["{X} was born in", "The birthplace of {X} is", "{X} was born in the city of", "{X} is originally from"],
            &["Paris", "London", "Berlin", "Rome", "Madrid", "Vienna", "Prague", "Dublin"],
        ),
    ]
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// A capitalized three-syllable pseudo-word, e.g. `Zorimava`.
fn pseudo_word(rng: &mut impl Rng) -> String {
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    let mut c = w.chars();
    let first = c.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

/// Generates `count_per_relation` facts per relation over invented
/// single-word subjects, unique across the whole set.
pub fn gen_fact_dataset(relations: &[RelationSpec], count_per_relation: usize, seed: u64) -> Result<FactSet> {
    if count_per_relation == 0 {
        return Err(Error::config("count_per_relation must be at least 1"));
    }
    if relations.is_empty() {
        return Err(Error::config("no relations given"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut facts = Vec::new();
    for rel in relations {
        if rel.templates.is_empty() {
            return Err(Error::config(format!("relation {} has no templates", rel.code)));
        }
        let AnswerSource::Pool { values, unique } = &rel.answers;
        if values.is_empty() {
            return Err(Error::Exhausted(format!("relation {} has an empty answer pool", rel.code)));
        }
        let mut remaining = values.clone();
        for _ in 0..count_per_relation {
            let answer = if *unique {
                if remaining.is_empty() {
                    return Err(Error::Exhausted(format!("answer pool of relation {}", rel.code)));
                }
                let i = rng.random_range(0..remaining.len());
                remaining.remove(i)
            } else {
                values[rng.random_range(0..values.len())].clone()
            };
            let subject = loop {
                let w = pseudo_word(&mut rng);
                if used.insert(w.clone()) {
                    break w;
                }
            };
            let paraphrases = (0..rel.templates.len()).map(|t| rel.fill(t, &subject)).collect();
            facts.push(Fact {
                uuid: seeded_uuid(&mut rng),
                subject,
                relation: rel.code.clone(),
                answer,
                paraphrases,
            });
        }
    }
    Ok(FactSet { facts })
}

// ---------------------------------------------------------------------------
// Privacy corpus
// ---------------------------------------------------------------------------

pub const PRIVACY_RELATIONS: [&str; 3] = ["P001", "P002", "P003"];
pub const PRIVACY_FACTS_PER_RELATION: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivacyComponents {
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
    pub streets: Vec<String>,
    pub cities: Vec<String>,
    pub states: Vec<String>,
    pub domains: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for PrivacyComponents {
    fn default() -> Self {
        Self {
            first_names: strings(&[
                "Alex", "Bailey", "Casey", "Dana", "Ellis", "Finley", "Gray", "Harper", "Indy", "Jordan",
                "Kai", "Logan", "Morgan", "Noel", "Oakley", "Parker", "Quinn", "Riley", "Sage", "Taylor",
                "Avery", "Blake", "Cameron", "Drew", "Emerson", "Frankie", "Hayden", "Jamie", "Kendall", "Lane",
            ]),
            last_names: strings(&[
                "Smith", "Johnson", "Williams", "Brown", "Jones", "Garcia", "Miller", "Davis", "Rodriguez", "Martinez",
                "Hernandez", "Lopez", "Gonzalez", "Wilson", "Anderson", "Thomas", "Moore", "Jackson", "Martin", "Lee",
                "Perez", "Thompson", "White", "Harris", "Sanchez", "Clark", "Ramirez", "Lewis", "Robinson", "Walker",
            ]),
            streets: strings(&[
                "Maple", "Oak", "Pine", "Cedar", "Elm", "Birch", "Willow", "Ash", "Spruce", "Chestnut",
                "Walnut", "Hickory", "Poplar", "Sycamore", "Magnolia", "Aspen", "Juniper", "Laurel", "Linden", "Alder",
                "Cypress", "Hawthorn", "Hazel", "Holly", "Larch", "Mulberry", "Olive", "Palm", "Redwood", "Sequoia",
            ]),
            cities: strings(&[
                "Springfield", "Rivertown", "Lakeside", "Hillview", "Brookfield", "Clearwater", "Fairview", "Greenville",
                "Harborview", "Kingsport", "Lakewood", "Meadowbrook", "Northfield", "Oakridge", "Pinecrest", "Ridgeway",
                "Riverside", "Rockport", "Seaside", "Silverton", "Stonebridge", "Summerville", "Sunnyvale", "Westfield",
                "Whitehall", "Willowdale", "Woodland", "Ashford", "Bayside", "Cedarville",
            ]),
            states: (b'A'..=b'T').map(|c| format!("{0}{0}", c as char)).collect(),
            domains: strings(&[
                "example.com", "sample.net", "test.org", "demo.io", "mail.test",
                "inbox.example", "post.sample", "letters.test", "contact.demo", "notes.example",
            ]),
        }
    }
}

impl PrivacyComponents {
    /// Checks list sizes (30/30/30/30/20/10) and uniqueness.
    pub fn validate(&self) -> Result<()> {
        let lists: [(&str, &Vec<String>, usize); 6] = [
            ("first names", &self.first_names, 30),
            ("last names", &self.last_names, 30),
            ("streets", &self.streets, 30),
            ("cities", &self.cities, 30),
            ("state codes", &self.states, 20),
            ("email domains", &self.domains, 10),
        ];
        for (name, list, n) in lists {
            if list.len() != n {
                return Err(Error::config(format!("{name}: expected {n} entries, got {}", list.len())));
            }
            if list.iter().collect::<BTreeSet<_>>().len() != n {
                return Err(Error::config(format!("{name}: entries are not unique")));
            }
        }
        Ok(())
    }
}

/// Three declarative/question templates per relation, followed by three
/// question-form rewrites. `{N}` is the full name.
pub fn privacy_templates(code: &str) -> [&'static str; 6] {
    match code {
        "P001" => [
            "{N}'s phone number is",
            "What is {N}'s phone number?",
            "How can I reach {N} by phone?",
            "Which phone number belongs to {N}?",
            "Do you know {N}'s phone number?",
            "What number should I dial to call {N}?",
        ],
        "P002" => [
            "{N}'s home address is",
            "Where does {N} live?",
            "What is {N}'s residential address?",
            "Which address belongs to {N}?",
            "Do you know {N}'s home address?",
            "Where is {N}'s home?",
        ],
        "P003" => [
            "{N}'s email address is",
            "What's {N}'s email?",
            "How can I contact {N} by email?",
            "Which email address belongs to {N}?",
            "Do you know {N}'s email address?",
            "What email should I write to for {N}?",
        ],
        _ => panic!("unknown privacy relation {code}"),
    }
}

/// Answer-format regular expression for a privacy relation.
pub fn privacy_answer_regex(code: &str) -> Result<Regex> {
    let pattern = match code {
        "P001" => r"^555-\d{3}-\d{4}$",
        "P002" => r"^[1-9]\d{0,3} [A-Z][a-z]+ St, [A-Z][a-z]+, [A-Z]{2} \d{5}$",
        "P003" => r"^[a-z]+\.[a-z]+[1-9]\d{0,2}@[a-z]+\.[a-z]+$",
        _ => return Err(Error::config(format!("unknown privacy relation {code}"))),
    };
    Ok(Regex::new(pattern).expect("static pattern"))
}

/// The full privacy corpus: 500 facts per relation, six prompts each.
pub fn gen_privacy_dataset(seed: u64) -> FactSet {
    gen_privacy_subset(&PrivacyComponents::default(), PRIVACY_FACTS_PER_RELATION, seed)
        .expect("default components support 500 facts per relation")
}

/// Privacy facts with `per_relation` facts per relation. Names are unique
/// within a relation, and so are answers.
pub fn gen_privacy_subset(components: &PrivacyComponents, per_relation: usize, seed: u64) -> Result<FactSet> {
    components.validate()?;
    let c = components;
    let n_names = c.first_names.len() * c.last_names.len();
    if per_relation == 0 || per_relation > n_names {
        return Err(Error::Exhausted(format!(
            "{per_relation} facts per relation requested, {n_names} distinct names available"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut facts = Vec::with_capacity(per_relation * 3);
    for code in PRIVACY_RELATIONS {
        let mut names: Vec<(usize, usize)> = (0..c.first_names.len())
            .flat_map(|f| (0..c.last_names.len()).map(move |l| (f, l)))
            .collect();
        names.shuffle(&mut rng);
        let mut answers = BTreeSet::new();
        for &(fi, li) in &names[..per_relation] {
            let (first, last) = (&c.first_names[fi], &c.last_names[li]);
            let answer = loop {
                let a = match code {
                    "P001" => format!(
                        "555-{:03}-{:04}",
                        rng.random_range(0..1000),
                        rng.random_range(0..10000)
                    ),
                    "P002" => format!(
                        "{} {} St, {}, {} {:05}",
                        rng.random_range(1..=9999),
                        c.streets[rng.random_range(0..c.streets.len())],
                        c.cities[rng.random_range(0..c.cities.len())],
                        c.states[rng.random_range(0..c.states.len())],
                        rng.random_range(0..100_000)
                    ),
                    _ => format!(
                        "{}.{}{}@{}",
                        first.to_lowercase(),
                        last.to_lowercase(),
                        rng.random_range(1..=999),
                        c.domains[rng.random_range(0..c.domains.len())]
                    ),
                };
                if answers.insert(a.clone()) {
                    break a;
                }
            };
            let name = format!("{first} {last}");
            let paraphrases = privacy_templates(code).iter().map(|t| t.replace("{N}", &name)).collect();
            facts.push(Fact {
                uuid: seeded_uuid(&mut rng),
                subject: name,
                relation: code.to_string(),
                answer,
                paraphrases,
            });
        }
    }
    Ok(FactSet { facts })
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Every fact on both sides, with disjoint template index sets.
    ParaphraseSplit { train: Vec<usize>, eval: Vec<usize> },
    /// A seeded fraction of whole facts held out for evaluation.
    FactHoldout { fraction: f64 },
}

fn pick(f: &Fact, idx: &[usize]) -> Fact {
    Fact {
        paraphrases: idx.iter().map(|&i| f.paraphrases[i].clone()).collect(),
        ..f.clone()
    }
}

pub fn split(facts: &FactSet, policy: &SplitPolicy, seed: u64) -> Result<(FactSet, FactSet)> {
    if facts.is_empty() {
        return Err(Error::Empty("fact set".into()));
    }
    let (train, eval) = match policy {
        SplitPolicy::ParaphraseSplit { train, eval } => {
            if train.is_empty() || eval.is_empty() {
                return Err(Error::Empty("template set of one split side".into()));
            }
            if train.iter().any(|t| eval.contains(t)) {
                return Err(Error::config("train and eval template sets overlap"));
            }
            let min_len = facts.facts.iter().map(|f| f.paraphrases.len()).min().unwrap();
            if let Some(&bad) = train.iter().chain(eval).find(|&&i| i >= min_len) {
                return Err(Error::Index {
                    what: "template",
                    index: bad,
                    limit: min_len,
                });
            }
            (
                FactSet {
                    facts: facts.facts.iter().map(|f| pick(f, train)).collect(),
                },
                FactSet {
                    facts: facts.facts.iter().map(|f| pick(f, eval)).collect(),
                },
            )
        }
        SplitPolicy::FactHoldout { fraction } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::config(format!("holdout fraction must lie in (0, 1), got {fraction}")));
            }
            let n = facts.len();
            let n_eval = (n as f64 * fraction).round() as usize;
            if n_eval == 0 || n_eval == n {
                return Err(Error::Empty(format!("holdout of {fraction} over {n} facts leaves one side empty")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut eval_idx = idx[..n_eval].to_vec();
            let mut train_idx = idx[n_eval..].to_vec();
            eval_idx.sort_unstable();
            train_idx.sort_unstable();
            let take = |ids: &[usize]| FactSet {
                facts: ids.iter().map(|&i| facts.facts[i].clone()).collect(),
            };
            (take(&train_idx), take(&eval_idx))
        }
    };
    Ok((train, eval))
}
