mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{random_aliases, random_query, BruteIndex};
use foqa::entity_index::{EntityIndex, KeyKind, NGramKey};
use foqa::kb::{EntityId, KnowledgeBase, RawFact, RelationId};
use foqa::pipeline::{link, select_answer, CandidateSet, Candidate, StructuredQuery};
use foqa::reach_index::ReachIndex;
use foqa::text::normalize;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn index_of(aliases: &[(EntityId, String)]) -> EntityIndex {
    EntityIndex::from_aliases(aliases.iter().map(|(e, a)| (e.clone(), a.as_str())))
}

fn key(n: Option<usize>, text: &str) -> NGramKey {
    match n {
        None => NGramKey::exact(&normalize(text)),
        Some(n) => NGramKey::gram_text(n, text),
    }
}

#[test]
fn two_actresses_share_the_unigram() {
    let aliases = vec![("ei".into(), "Sarah Michelle Gellar".to_string()), ("ej".into(), "Sarah Jessica Parker".to_string())];
    let idx = index_of(&aliases);
    let nodes: BTreeSet<&str> = idx.lookup(&key(Some(1), "sarah")).iter().map(|p| p.node.as_str()).collect();
    assert_eq!(nodes, BTreeSet::from(["ei", "ej"]));
    assert!(idx.lookup(&key(Some(1), "zzz")).is_empty());
    assert!(idx.lookup(&key(Some(2), "michelle gellar")).len() == 1);
}

#[test]
fn jurassic_park_terminates_after_bigrams() {
    let aliases = vec![("jp".into(), "Jurassic Park".to_string()), ("jp2".into(), "Jurassic Park II".to_string())];
    let c = link(&index_of(&aliases), "jurassic park");
    let passes: Vec<Option<usize>> = c.passes.iter().map(|p| p.n).collect();
    assert_eq!(passes, vec![None, Some(3), Some(2)]);
    let nodes: Vec<&str> = c.candidates.iter().map(|c| c.node.as_str()).collect();
    assert_eq!(nodes, vec!["jp", "jp2"]);
    assert_eq!(c.passes[0].matched_keys, vec![key(None, "jurassic park")]);
    assert!(c.passes[1].matched_keys.is_empty());
    assert_eq!(c.candidates[0].matched_key.kind, KeyKind::Exact);
}

#[test]
fn unmatched_text_runs_every_pass() {
    let aliases = vec![("a".into(), "old house".to_string())];
    let c = link(&index_of(&aliases), "zebra");
    assert!(c.is_empty());
    assert_eq!(c.passes.len(), 4);
    assert!(link(&index_of(&aliases), "  ?? ").passes.is_empty());
}

#[test]
fn randomized_index_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let count = rng.gen_range(1..=300);
        let aliases = random_aliases(&mut rng, count);
        let idx = index_of(&aliases);
        let brute = BruteIndex::new(&aliases);
        for k in idx.keys().take(200) {
            let n = match k.kind {
                KeyKind::Exact => None,
                KeyKind::Gram(n) => Some(n as usize),
            };
            let got: Vec<(EntityId, f64)> = idx.lookup(k).iter().map(|p| (p.node.clone(), p.score)).collect();
            let want = brute.lookup(n, &k.text);
            assert_eq!(got.len(), want.len(), "key {k}");
            for ((ge, gs), (we, ws)) in got.iter().zip(&want) {
                assert_eq!(ge, we, "key {k}");
                assert!((gs - ws).abs() <= 1e-9, "key {k}: {gs} vs {ws}");
            }
        }
        for _ in 0..100 {
            let q = random_query(&mut rng, &aliases);
            let got = link(&idx, &q);
            let (want, passes) = brute.link(&q);
            assert_eq!(got.passes.iter().map(|p| p.n).collect::<Vec<_>>(), passes, "query {q}");
            let got: BTreeMap<EntityId, f64> = got.candidates.iter().map(|c| (c.node.clone(), c.score)).collect();
            assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>(), "query {q}");
            for (e, s) in &got {
                assert!((s - want[e]).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn rebuilding_gives_an_identical_dump() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let aliases = random_aliases(&mut rng, 200);
    let a = index_of(&aliases).dump();
    assert_eq!(a, index_of(&aliases).dump());
    assert_eq!(EntityIndex::parse(&a).unwrap().dump(), a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_alias_gram_maps_back(seed in any::<u64>(), count in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aliases = random_aliases(&mut rng, count);
        let idx = index_of(&aliases);
        for (e, a) in &aliases {
            let t = normalize(a);
            prop_assert!(idx.lookup(&NGramKey::exact(&t)).iter().any(|p| &p.node == e));
            for n in 1..=3usize.min(t.len()) {
                for w in t.windows(n) {
                    let k = NGramKey::gram(w).unwrap();
                    prop_assert!(idx.lookup(&k).iter().any(|p| &p.node == e && p.score > 0.0));
                }
            }
        }
    }

    #[test]
    fn rarer_keys_have_larger_idf(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aliases = random_aliases(&mut rng, 40);
        let idx = index_of(&aliases);
        let stats = idx.stats();
        let keys: Vec<&NGramKey> = idx.keys().collect();
        for a in keys.iter().take(20) {
            for b in keys.iter().take(20) {
                if stats.df(a) < stats.df(b) {
                    prop_assert!(stats.idf(a).unwrap() > stats.idf(b).unwrap());
                }
            }
        }
    }

    #[test]
    fn linking_stops_at_the_first_productive_finite_pass(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aliases = random_aliases(&mut rng, 30);
        let idx = index_of(&aliases);
        let q = random_query(&mut rng, &aliases);
        let c = link(&idx, &q);
        let len = normalize(&q).len();
        prop_assert!(c.passes.len() <= 4);
        for (i, p) in c.passes.iter().enumerate() {
            let productive = p.candidates_after > 0 && p.n.is_some_and(|n| n <= len);
            prop_assert!(!productive || i + 1 == c.passes.len());
        }
    }
}

/// Exhaustive reference for answer selection over (candidate, relation, fact).
fn brute_select(kb: &KnowledgeBase, cands: &[(EntityId, f64)], labels: &[RelationId], dist: &[f64]) -> Option<(EntityId, RelationId, String)> {
    let allowed: BTreeSet<&RelationId> = cands.iter().flat_map(|(e, _)| kb.facts_of(e).iter().map(|f| &f.relation)).collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, l) in labels.iter().enumerate() {
        if allowed.contains(l) && best.is_none_or(|(_, p)| dist[i] > p) {
            best = Some((i, dist[i]));
        }
    }
    let r = match best {
        Some((i, _)) => labels[i].clone(),
        None => {
            let i = (0..labels.len()).fold(0, |b, i| if dist[i] > dist[b] { i } else { b });
            labels[i].clone()
        }
    };
    let mut answers: Vec<(f64, EntityId, String)> = Vec::new();
    for (e, s) in cands {
        for f in kb.facts_of(e) {
            if f.relation == r {
                answers.push((*s, e.clone(), f.object_text.clone()));
            }
        }
    }
    answers.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)));
    answers.into_iter().next().map(|(_, e, t)| (e, r, t))
}

#[test]
fn selection_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rels: Vec<RelationId> = ["a", "b", "c", "d", "e"].iter().map(|r| RelationId::new(*r)).collect();
    for _ in 0..300 {
        let n = rng.gen_range(1..8);
        let mut facts = Vec::new();
        for i in 0..n {
            for _ in 0..rng.gen_range(1..4) {
                let r = &rels[rng.gen_range(0..4)];
                facts.push(RawFact::literal(&format!("x{i}"), r.as_str(), &format!("v{}", rng.gen_range(0..5))));
            }
        }
        let kb = KnowledgeBase::new(facts, Vec::new()).unwrap();
        let reach = ReachIndex::build(&kb);
        let mut cands: Vec<(EntityId, f64)> = Vec::new();
        for i in 0..n {
            if rng.gen_bool(0.6) {
                cands.push((EntityId::new(format!("x{i}")), [0.5, 1.0, 1.5][rng.gen_range(0..3)]));
            }
        }
        cands.push((EntityId::new("missing"), 2.0));
        let labels = rels.clone();
        let raw: Vec<f64> = labels.iter().map(|_| [0.1, 0.2, 0.3][rng.gen_range(0..3)]).collect();
        let total: f64 = raw.iter().sum();
        let dist: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let mut set = CandidateSet::default();
        set.candidates = cands
            .iter()
            .map(|(e, s)| Candidate { node: e.clone(), score: *s, matched_key: NGramKey::gram_text(1, "x") })
            .collect();
        set.candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.node.cmp(&b.node)));
        let top = (0..labels.len()).fold(0, |b, i| if dist[i] > dist[b] { i } else { b });
        let query = StructuredQuery { spans: vec!["x".into()], no_entity: false, relation: labels[top].clone(), labels, distribution: dist.clone() };
        let got = select_answer(&reach, &set, &query);
        let want = brute_select(&kb, &cands, &rels, &dist);
        let got = got.answer.map(|a| (a.source_entity, a.relation, a.text));
        assert_eq!(got, want);
    }
}
