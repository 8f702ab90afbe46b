use std::collections::{BTreeSet, HashMap};

use foqa::classifier::parse_classifier_file;
use foqa::kb::{load_kb, parse_annotated_questions};
use foqa::synth::{generate, load_spec, GeneratorSpec, SPLITS};
use foqa::tagger::parse_tagger_file;
use foqa::text::normalize;
use proptest::prelude::*;

fn spec() -> GeneratorSpec {
    GeneratorSpec { seed: 1, num_entities: 200, num_relations: 12, questions_count: 2000, ..GeneratorSpec::default() }
}

#[test]
fn same_seed_gives_identical_output() {
    let (a, b) = (generate(&spec()).unwrap(), generate(&spec()).unwrap());
    assert_eq!(a.files(), b.files());
    assert_eq!(a.manifest_json(), b.manifest_json());
    let c = generate(&GeneratorSpec { seed: 2, ..spec() }).unwrap();
    assert_ne!(a.files(), c.files());
}

#[test]
fn written_files_match_the_manifest_and_parse() {
    let data = generate(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write_to(dir.path()).unwrap();
    let read = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap();
    for (name, count) in &data.manifest.files {
        assert_eq!(read(name).lines().count(), *count, "{name}");
    }
    let kb = load_kb(&read("facts.tsv"), &read("aliases.tsv")).unwrap();
    let s = kb.stats();
    assert_eq!((s.num_entities, s.num_facts, s.num_relations), (200, data.manifest.num_facts, 12));
    let mut seen = BTreeSet::new();
    for split in SPLITS {
        let qs = parse_annotated_questions(&read(&format!("{split}.questions.tsv"))).unwrap();
        let tagged = parse_tagger_file(&read(&format!("{split}.tagger.tsv"))).unwrap();
        let labeled = parse_classifier_file(&read(&format!("{split}.classifier.tsv"))).unwrap();
        assert_eq!(qs.len(), data.manifest.splits[split]);
        assert_eq!((tagged.len(), labeled.len()), (qs.len(), qs.len()));
        for ((q, t), l) in qs.iter().zip(&tagged).zip(&labeled) {
            assert_eq!(normalize(&q.question), t.tokens);
            assert_eq!(l.relation, q.relation);
            let facts: Vec<_> = kb.facts_of(&q.subject).iter().filter(|f| f.relation == q.relation).collect();
            assert_eq!(facts.len(), 1, "{}", q.question);
            assert_eq!(facts[0].object_text, q.object);
            assert!(seen.insert(t.tokens.join(" ")), "duplicate question across splits");
        }
    }
    let loaded = load_spec(&{
        let p = dir.path().join("spec.json");
        std::fs::write(&p, r#"{"seed": 1, "questions_count": 2000}"#).unwrap();
        p
    })
    .unwrap();
    assert_eq!(loaded, spec());
}

#[test]
fn lexicon_has_controlled_overlap() {
    let data = generate(&spec()).unwrap();
    let aliases: Vec<Vec<String>> = data.alias_table.iter().map(|(_, a)| normalize(a)).collect();
    let set: BTreeSet<String> = aliases.iter().map(|a| a.join(" ")).collect();
    assert_eq!(set.len(), aliases.len(), "aliases are unique");
    let pairs = set.iter().filter(|a| a.ends_with(" ii") && set.contains(a.trim_end_matches(" ii"))).count();
    assert!(pairs >= 1);
    assert_eq!(pairs, data.manifest.near_duplicate_pairs);
    let mut unigram: HashMap<&str, usize> = HashMap::new();
    let mut bigram: HashMap<String, usize> = HashMap::new();
    for a in &aliases {
        for w in a.iter().collect::<BTreeSet<_>>() {
            *unigram.entry(w.as_str()).or_default() += 1;
        }
        for b in a.windows(2).map(|w| w.join(" ")).collect::<BTreeSet<_>>() {
            *bigram.entry(b).or_default() += 1;
        }
    }
    assert!(unigram.values().any(|&c| c > 1));
    assert!(bigram.values().any(|&c| c > 1));
}

#[test]
fn noise_drops_one_alias_token() {
    let data = generate(&spec()).unwrap();
    let alias_len: HashMap<_, _> = data.alias_table.iter().map(|(e, a)| (e.clone(), normalize(a).len())).collect();
    let all: Vec<_> = data.splits.iter().flatten().collect();
    for q in &all {
        let e_tokens = q.tagged.tags.0.iter().filter(|t| t.class() == 1).count();
        let full = alias_len[&q.annotated.subject];
        assert_eq!(e_tokens, if q.noisy { full - 1 } else { full });
    }
    let multi = all.iter().filter(|q| alias_len[&q.annotated.subject] >= 2).count();
    let rate = all.iter().filter(|q| q.noisy).count() as f64 / multi as f64;
    assert!((0.05..0.15).contains(&rate), "noise rate {rate}");
    let templates: BTreeSet<String> = all
        .iter()
        .filter(|q| q.annotated.relation.as_str() == "bornOn")
        .map(|q| {
            q.tagged.tokens.iter().zip(&q.tagged.tags.0).filter(|(_, t)| t.class() == 0).map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(" ")
        })
        .collect();
    assert!(templates.len() >= 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_valid_spec_is_consistent(seed in any::<u64>(), entities in 10usize..60, relations in 2usize..16, questions in 10usize..120) {
        let spec = GeneratorSpec {
            seed,
            num_entities: entities,
            num_relations: relations,
            questions_count: questions,
            ..GeneratorSpec::default()
        };
        match generate(&spec) {
            Ok(d) => {
                prop_assert_eq!(d.splits.iter().map(Vec::len).sum::<usize>(), questions);
                for q in d.splits.iter().flatten() {
                    prop_assert_eq!(normalize(&q.annotated.question), q.tagged.tokens.clone());
                    prop_assert!(q.tagged.tags.has_entity());
                }
            }
            Err(e) => prop_assert!(matches!(e, foqa::synth::SynthError::Infeasible { .. }), "{}", e),
        }
    }
}
