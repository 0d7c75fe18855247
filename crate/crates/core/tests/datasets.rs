// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use featlab::datasets::*;

#[test]
fn privacy_corpus_counts_and_formats() {
    let set = gen_privacy_dataset(42);
    assert_eq!(set.len(), 1500);
    let entries = set.entries();
    assert_eq!(entries.len(), 9000);
    for code in PRIVACY_RELATIONS {
        let facts = set.by_relation(code);
        assert_eq!(facts.len(), PRIVACY_FACTS_PER_RELATION);
        let re = privacy_answer_regex(code).unwrap();
        for f in &facts {
            assert!(re.is_match(&f.answer), "{code}: {}", f.answer);
            assert_eq!(f.paraphrases.len(), 6);
        }
        let names: BTreeSet<_> = facts.iter().map(|f| &f.subject).collect();
        let answers: BTreeSet<_> = facts.iter().map(|f| &f.answer).collect();
        assert_eq!(names.len(), facts.len());
        assert_eq!(answers.len(), facts.len());
    }
}

#[test]
fn privacy_regeneration_is_byte_identical() {
    assert_eq!(gen_privacy_dataset(9).to_jsonl(), gen_privacy_dataset(9).to_jsonl());
    assert_ne!(gen_privacy_dataset(9).to_jsonl(), gen_privacy_dataset(10).to_jsonl());
}

#[test]
fn email_local_part_matches_name() {
    let set = gen_privacy_subset(&PrivacyComponents::default(), 20, 3).unwrap();
    for f in set.by_relation("P003") {
        let mut parts = f.subject.split(' ');
        let first = parts.next().unwrap().to_lowercase();
        let last = parts.next().unwrap().to_lowercase();
        assert!(f.answer.starts_with(&format!("{first}.{last}")), "{} / {}", f.subject, f.answer);
    }
}

#[test]
fn too_many_privacy_facts_is_exhausted() {
    let r = gen_privacy_subset(&PrivacyComponents::default(), 901, 0);
    assert!(matches!(r, Err(featlab::Error::Exhausted(_))));
}

#[test]
fn broken_components_are_rejected() {
    let mut c = PrivacyComponents::default();
    c.cities.pop();
    assert!(gen_privacy_subset(&c, 5, 0).is_err());
    let mut c = PrivacyComponents::default();
    c.domains[1] = c.domains[0].clone();
    assert!(gen_privacy_subset(&c, 5, 0).is_err());
}

#[test]
fn jsonl_file_round_trip_keeps_entries() {
    let set = gen_privacy_subset(&PrivacyComponents::default(), 4, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("facts.jsonl");
    set.write_jsonl(&path).unwrap();
    let back = FactSet::read_jsonl(&path).unwrap();
    assert_eq!(back.entries(), set.entries());
    assert_eq!(back.to_jsonl(), set.to_jsonl());
}

#[test]
fn paraphrase_split_is_disjoint_and_complete() {
    let set = gen_privacy_subset(&PrivacyComponents::default(), 10, 5).unwrap();
    let policy = SplitPolicy::ParaphraseSplit {
        train: vec![0, 1, 2],
        eval: vec![3, 4, 5],
    };
    let (train, eval) = split(&set, &policy, 0).unwrap();
    assert_eq!(train.len(), set.len());
    assert_eq!(eval.len(), set.len());
    let a: BTreeSet<String> = train.entries().into_iter().map(|e| e.sentence).collect();
    let b: BTreeSet<String> = eval.entries().into_iter().map(|e| e.sentence).collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(a.len() + b.len(), set.entries().len());
}

#[test]
fn fact_holdout_partitions_facts() {
    let set = gen_fact_dataset(&default_relations(), 10, 4).unwrap();
    let (train, eval) = split(&set, &SplitPolicy::FactHoldout { fraction: 0.25 }, 2).unwrap();
    assert_eq!(train.len() + eval.len(), set.len());
    let a: BTreeSet<_> = train.facts.iter().map(|f| f.uuid.clone()).collect();
    assert!(eval.facts.iter().all(|f| !a.contains(&f.uuid)));
}

#[test]
fn fact_dataset_is_seeded() {
    let rel = default_relations();
    let a = gen_fact_dataset(&rel, 20, 7).unwrap();
    assert_eq!(a.len(), 200);
    assert_eq!(a.to_jsonl(), gen_fact_dataset(&rel, 20, 7).unwrap().to_jsonl());
    assert_eq!(a.relations().len(), 10);
}
