#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::Instant;

use foqa::classifier::{train_classifier, LabeledQuestion};
use foqa::kb::{load_kb, EntityId, KnowledgeBase};
use foqa::nn::{CellKind, TrainConfig};
use foqa::pipeline::Engine;
use foqa::synth::{generate, GeneratedData, GeneratorSpec};
use foqa::tagger::{train_tagger, TaggedQuestion, TrainOptions};
use rand::seq::SliceRandom;
use rand::Rng;

/// Linear-scan reference for the n-gram index.
pub struct BruteIndex {
    pub aliases: Vec<(EntityId, Vec<String>)>,
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| w.to_lowercase().trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

fn grams(t: &[String], n: usize) -> Vec<String> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].join(" ")).collect()
}

impl BruteIndex {
    pub fn new(aliases: &[(EntityId, String)]) -> Self {
        let aliases = aliases.iter().map(|(e, a)| (e.clone(), tokens(a))).filter(|(_, t)| !t.is_empty()).collect();
        Self { aliases }
    }

    /// `n = None` is the exact key. Sorted by score descending, then id.
    pub fn lookup(&self, n: Option<usize>, text: &str) -> Vec<(EntityId, f64)> {
        let count = self.aliases.len() as f64;
        let tf = |t: &[String]| -> f64 {
            match n {
                None => {
                    if t.join(" ") == text {
                        1.0
                    } else {
                        0.0
                    }
                }
                Some(n) => {
                    let g = grams(t, n);
                    if g.is_empty() {
                        0.0
                    } else {
                        g.iter().filter(|x| *x == text).count() as f64 / g.len() as f64
                    }
                }
            }
        };
        let df = self.aliases.iter().filter(|(_, t)| tf(t) > 0.0).count();
        if df == 0 {
            return Vec::new();
        }
        let idf = (1.0 + count / df as f64).ln();
        let mut out: Vec<(EntityId, f64)> =
            self.aliases.iter().filter(|(_, t)| tf(t) > 0.0).map(|(e, t)| (e.clone(), tf(t) * idf)).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// The linking loop: candidates with max score, plus the passes run.
    pub fn link(&self, text: &str) -> (BTreeMap<EntityId, f64>, Vec<Option<usize>>) {
        let t = tokens(text);
        let mut c: BTreeMap<EntityId, f64> = BTreeMap::new();
        let mut passes = Vec::new();
        if t.is_empty() {
            return (c, passes);
        }
        for n in [None, Some(3), Some(2), Some(1)] {
            passes.push(n);
            let keys = match n {
                None => vec![t.join(" ")],
                Some(n) => grams(&t, n),
            };
            for k in keys {
                for (e, s) in self.lookup(n, &k) {
                    let v = c.entry(e).or_insert(0.0);
                    *v = v.max(s);
                }
            }
            if !c.is_empty() && n.is_some_and(|n| n <= t.len()) {
                break;
            }
        }
        (c, passes)
    }
}

/// Random alias corpus over a small vocabulary, so n-grams collide often.
pub fn random_aliases(rng: &mut impl Rng, count: usize) -> Vec<(EntityId, String)> {
    const WORDS: &[&str] = &["Park", "jurassic", "the", "Lost", "world", "ii", "river", "old", "house", "of", "sarah", "gellar", "city", "day"];
    (0..count)
        .map(|i| {
            let len = rng.gen_range(1..=5);
            let words: Vec<&str> = (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect();
            (EntityId::new(format!("n{i:04}")), words.join(" "))
        })
        .collect()
}

pub fn random_query(rng: &mut impl Rng, aliases: &[(EntityId, String)]) -> String {
    if rng.gen_bool(0.5) {
        let (_, a) = aliases.choose(rng).unwrap();
        let t: Vec<&str> = a.split(' ').collect();
        let i = rng.gen_range(0..t.len());
        let j = rng.gen_range(i + 1..=t.len());
        t[i..j].join(" ")
    } else {
        let len = rng.gen_range(1..=4);
        let pool = ["park", "world", "zebra", "the", "old", "ii", "quartz"];
        (0..len).map(|_| *pool.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    }
}

pub fn benchmark_spec() -> GeneratorSpec {
    GeneratorSpec {
        seed: 1,
        num_entities: 200,
        num_relations: 12,
        questions_count: 2000,
        split_ratios: [0.8, 0.1, 0.1],
        noise_rate: 0.1,
        ..GeneratorSpec::default()
    }
}

pub fn tagger_config() -> TrainConfig {
    TrainConfig { hidden: 32, embedding_dim: 16, dropout: 0.1, epochs: 10, ..TrainConfig::new(CellKind::Lstm, true, 2) }
}

pub fn classifier_config() -> TrainConfig {
    TrainConfig { hidden: 32, embedding_dim: 16, epochs: 10, ..TrainConfig::new(CellKind::Gru, true, 2) }
}

pub struct Benchmark {
    pub data: GeneratedData,
    pub kb: KnowledgeBase,
    pub engine: Engine,
    pub seconds: f64,
}

/// Generates the seed-1 benchmark and trains both models on it.
pub fn benchmark() -> Benchmark {
    let start = Instant::now();
    let data = generate(&benchmark_spec()).expect("benchmark spec is valid");
    let kb = load_kb(&data.facts, &data.aliases).expect("generated kb loads");
    let options = TrainOptions { seed: 1, jobs: 1, ..Default::default() };
    let tagged = |s: &str| data.split(s).iter().map(|q| q.tagged.clone()).collect::<Vec<_>>();
    let labeled = |s: &str| data.split(s).iter().map(|q| q.labeled()).collect::<Vec<_>>();
    let (tagger, classifier) = std::thread::scope(|scope| {
        let c = scope.spawn(|| train_classifier(&labeled("train"), &labeled("valid"), &[classifier_config()], &options));
        let t = train_tagger(&tagged("train"), &tagged("valid"), &[tagger_config()], &options);
        (t.expect("tagger trains").0, c.join().expect("classifier thread").expect("classifier trains").0)
    });
    let engine = Engine::from_kb(&kb, tagger, classifier);
    Benchmark { data, kb, engine, seconds: start.elapsed().as_secs_f64() }
}

/// Indexes from `kb` with small untrained models; enough for oracle-input paths.
pub fn untrained_engine(kb: &KnowledgeBase) -> Engine {
    let rels: Vec<LabeledQuestion> =
        kb.relation_vocab().iter().map(|r| LabeledQuestion { tokens: vec!["x".into()], relation: r.clone() }).collect();
    let tagged = vec![TaggedQuestion::new("x y", "C E".parse().unwrap()).unwrap()];
    let options = TrainOptions { seed: 1, jobs: 1, ..Default::default() };
    let config = TrainConfig { hidden: 2, embedding_dim: 2, epochs: 1, ..TrainConfig::new(CellKind::Gru, false, 1) };
    let (tagger, _) = train_tagger(&tagged, &tagged, &[config.clone()], &options).unwrap();
    let (classifier, _) = train_classifier(&rels, &rels, &[config], &options).unwrap();
    Engine::from_kb(kb, tagger, classifier)
}
