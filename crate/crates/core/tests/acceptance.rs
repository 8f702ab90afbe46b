mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use common::{random_aliases, random_query, BruteIndex};
use foqa::classifier::most_frequent_relation;
use foqa::entity_index::{EntityIndex, KeyKind};
use foqa::eval::{blame_analysis, evaluate_oracle, evaluate_p_at_1, latency_bench, micro_f1, run_ablations};
use foqa::kb::{load_kb, EntityId};
use foqa::nn::{CellKind, OutputMode, Target, TrainConfig};
use foqa::pipeline::{link, AblationConfig, Engine};
use foqa::synth::{generate, GeneratorSpec};
use foqa::tagger::TagSequence;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

const VOCAB: [&str; 6] = ["how", "old", "is", "sarah", "michelle", "gellar"];

fn tiny_config(cell: CellKind, bi: bool, depth: usize, hidden: usize, dim: usize) -> TrainConfig {
    TrainConfig { hidden, embedding_dim: dim, ..TrainConfig::new(cell, bi, depth) }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut failed = 0;
    let combos: Vec<(CellKind, bool, usize)> = [CellKind::Gru, CellKind::Lstm]
        .into_iter()
        .flat_map(|c| [false, true].into_iter().flat_map(move |b| (1..=3).map(move |d| (c, b, d))))
        .collect();
    for i in 0..20 {
        let (cell, bi, depth) = combos[i % combos.len()];
        let mode = if i % 2 == 0 { OutputMode::PerToken } else { OutputMode::FinalState };
        let k = rng.gen_range(2..=4);
        let config = tiny_config(cell, bi, depth, rng.gen_range(2..=4), rng.gen_range(2..=4));
        let model = config.build_model(None, VOCAB, k, mode, i as u64 + 100).unwrap();
        let len = rng.gen_range(1..=4);
        let tokens: Vec<&str> = (0..len).map(|_| *VOCAB.choose(&mut rng).unwrap()).collect();
        let target = match mode {
            OutputMode::PerToken => Target::PerToken((0..len).map(|_| Some(rng.gen_range(0..k))).collect()),
            OutputMode::FinalState => Target::Whole(rng.gen_range(0..k)),
        };
        let report = model.grad_check(&tokens, &target, 1e-5, 1e-4).unwrap();
        worst = worst.max(report.max_rel_error());
        if !report.passed() {
            failed += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failed == 0 && worst < 1e-4 && secs < 120.0,
        format!("20 models, max relative error {worst:.2e}, {failed} failing, {secs:.1}s"),
    )
}

fn index_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut keys, mut queries, mut mismatches) = (0, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let count = rng.gen_range(1..=1000);
        let aliases = random_aliases(&mut rng, count);
        let idx = EntityIndex::from_aliases(aliases.iter().map(|(e, a)| (e.clone(), a.as_str())));
        let brute = BruteIndex::new(&aliases);
        let mut all: Vec<_> = idx.keys().cloned().collect();
        all.shuffle(&mut rng);
        for k in all.iter().take(60) {
            keys += 1;
            let n = match k.kind {
                KeyKind::Exact => None,
                KeyKind::Gram(n) => Some(n as usize),
            };
            let got: Vec<(EntityId, f64)> = idx.lookup(k).iter().map(|p| (p.node.clone(), p.score)).collect();
            let want = brute.lookup(n, &k.text);
            if got.len() != want.len() || got.iter().zip(&want).any(|(g, w)| g.0 != w.0) {
                mismatches += 1;
            }
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((g.1 - w.1).abs());
            }
        }
        for _ in 0..40 {
            queries += 1;
            let q = random_query(&mut rng, &aliases);
            let got = link(&idx, &q);
            let (want, passes) = brute.link(&q);
            let got_map: BTreeMap<EntityId, f64> = got.candidates.iter().map(|c| (c.node.clone(), c.score)).collect();
            let got_passes: Vec<Option<usize>> = got.passes.iter().map(|p| p.n).collect();
            if got_map.keys().ne(want.keys()) || got_passes != passes {
                mismatches += 1;
            }
            for (e, s) in &got_map {
                if let Some(w) = want.get(e) {
                    worst = worst.max((s - w).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && worst <= 1e-9 && secs < 120.0,
        format!("50 corpora, {keys} keys and {queries} link queries, {mismatches} mismatches, max score diff {worst:.1e}, {secs:.1}s"),
    )
}

fn early_termination() -> Outcome {
    let aliases = [(EntityId::new("jp"), "Jurassic Park"), (EntityId::new("jp2"), "Jurassic Park II")];
    let idx = EntityIndex::from_aliases(aliases.iter().cloned());
    let c = link(&idx, "jurassic park");
    let passes: Vec<Option<usize>> = c.passes.iter().map(|p| p.n).collect();
    let nodes: Vec<&str> = c.candidates.iter().map(|c| c.node.as_str()).collect();
    let labels: Vec<String> = passes.iter().map(|p| p.map_or("inf".to_string(), |n| n.to_string())).collect();
    outcome(
        passes == [None, Some(3), Some(2)] && nodes == ["jp", "jp2"],
        format!("passes {}, candidates {:?}", labels.join(" -> "), nodes),
    )
}

fn oracle_input() -> Outcome {
    let spec = GeneratorSpec {
        seed: 1,
        num_entities: 200,
        questions_count: 500,
        noise_rate: 0.0,
        split_ratios: [0.0, 0.0, 1.0],
        ..GeneratorSpec::default()
    };
    let data = generate(&spec).unwrap();
    let kb = load_kb(&data.facts, &data.aliases).unwrap();
    let engine = common::untrained_engine(&kb);
    let test: Vec<_> = data.split("test").iter().map(|q| (q.annotated.clone(), q.spans())).collect();
    let r = evaluate_oracle(&engine, &test).unwrap();
    outcome(r.total == 500 && r.accuracy == 1.0, format!("P@1 {:.4} ({}/{})", r.accuracy, r.correct, r.total))
}

fn micro_f1_fixture() -> Outcome {
    let src = include_str!("fixtures/micro_f1.tsv");
    let (mut gold, mut pred): (Vec<TagSequence>, Vec<TagSequence>) = (Vec::new(), Vec::new());
    for line in src.lines().filter(|l| !l.starts_with('#')) {
        let (g, p) = line.split_once('\t').unwrap();
        gold.push(g.parse().unwrap());
        pred.push(p.parse().unwrap());
    }
    let s = micro_f1(&pred, &gold).unwrap();
    let half = micro_f1(&["E E E E".parse().unwrap()], &["E E C C".parse().unwrap()]).unwrap();
    let pass = s.precision == 2.0 / 3.0
        && s.recall == 4.0 / 5.0
        && s.f1 == 8.0 / 11.0
        && (half.precision, half.recall, half.f1) == (0.5, 1.0, 2.0 / 3.0);
    outcome(pass, format!("P {:.6} R {:.6} F1 {:.6} (expected 2/3, 4/5, 8/11)", s.precision, s.recall, s.f1))
}

fn softmax_sweep() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut calls, mut worst, mut errors) = (0, 0.0f64, 0);
    for m in 0..20 {
        let cell = if m % 2 == 0 { CellKind::Gru } else { CellKind::Lstm };
        let mode = if m % 3 == 0 { OutputMode::FinalState } else { OutputMode::PerToken };
        let config = tiny_config(cell, m % 4 < 2, 1 + m % 3, rng.gen_range(2..=8), rng.gen_range(2..=8));
        let k = rng.gen_range(1..=12);
        let mut model = config.build_model(None, VOCAB, k, mode, m as u64).unwrap();
        let scale = [1.0, 10.0, 100.0][m % 3];
        model.params_mut().iter_mut().for_each(|p| *p *= scale);
        for _ in 0..500 {
            calls += 1;
            let len = rng.gen_range(1..=12);
            let tokens: Vec<String> = (0..len)
                .map(|_| if rng.gen_bool(0.2) { format!("oov{}", rng.gen_range(0..1000)) } else { VOCAB.choose(&mut rng).unwrap().to_string() })
                .collect();
            match model.forward(&tokens) {
                Ok(out) => {
                    for r in 0..out.rows() {
                        let row = out.row(r);
                        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                            errors += 1;
                        }
                        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    }
                }
                Err(_) => errors += 1,
            }
        }
    }
    outcome(calls == 10_000 && errors == 0 && worst <= 1e-9, format!("{calls} calls, max |sum - 1| {worst:.1e}, {errors} errors"))
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "gradient check", gradient_check()));
    results.push((2, "index and linking oracle", index_oracle()));
    results.push((3, "early termination", early_termination()));
    results.push((4, "oracle-input P@1", oracle_input()));

    let bench = common::benchmark();
    let test: Vec<_> = bench.data.split("test").iter().map(|q| q.annotated.clone()).collect();
    let t = Instant::now();
    let full = evaluate_p_at_1(&bench.engine, &test, AblationConfig::FULL, 1).unwrap();
    let secs = bench.seconds + t.elapsed().as_secs_f64();
    results.push((
        5,
        "trained benchmark",
        outcome(
            full.accuracy >= 0.90 && secs < 900.0,
            format!("P@1 {:.4} ({}/{}), {:.1}s including training", full.accuracy, full.correct, full.total, secs),
        ),
    ));

    let rows = run_ablations(&bench.engine, &test, 1).unwrap();
    let p: Vec<f64> = rows.iter().map(|r| 100.0 * r.p_at_1).collect();
    let mf = most_frequent_relation(bench.data.split("train").iter().map(|q| &q.annotated.relation)).unwrap();
    let prior = 100.0 * test.iter().filter(|q| q.relation == mf).count() as f64 / test.len() as f64;
    results.push((
        6,
        "ablation ordering",
        outcome(
            p[0] > p[1] && p[1] > p[2] && p[2] >= p[3] && (p[2] - prior).abs() <= 2.0,
            format!(
                "full {:.1} > naive ED {:.1} > naive RP {:.1} >= naive both {:.1}; prior of {mf} {:.1}",
                p[0], p[1], p[2], p[3], prior
            ),
        ),
    ));

    let b = blame_analysis(&full.records);
    let sum = b.ed_blame_pct + b.rp_blame_pct + b.both_pct;
    results.push((
        7,
        "blame partition",
        outcome(
            b.correct + b.entity_only + b.relation_only + b.both == test.len() && (b.no_errors || (sum - 100.0).abs() <= 0.1),
            format!(
                "{} correct + {} ED + {} RP + {} both = {}; shares {:.1}/{:.1}/{:.1}",
                b.correct, b.entity_only, b.relation_only, b.both, test.len(), b.ed_blame_pct, b.rp_blame_pct, b.both_pct
            ),
        ),
    ));

    results.push((8, "micro-F1 fixture", micro_f1_fixture()));

    let questions: Vec<String> = test.iter().take(100).map(|q| q.question.clone()).collect();
    let lat = latency_bench(&bench.engine, &questions, 1).unwrap();
    let summary = lat.summary();
    let well_formed = summary.ends_with(" ms") && summary.contains('±');
    results.push((
        9,
        "latency",
        outcome(lat.questions == 100 && lat.total.mean < 50.0 && well_formed, format!("{summary} over 100 questions")),
    ));

    let dir = tempfile::tempdir().unwrap();
    bench.engine.save(dir.path()).unwrap();
    let loaded = Engine::load(dir.path()).unwrap();
    let same_dumps =
        loaded.entity_index.dump() == bench.engine.entity_index.dump() && loaded.reach.dump() == bench.engine.reach.dump();
    let differing = test
        .iter()
        .filter(|q| {
            let (a, b) = (bench.engine.answer_question(&q.question).unwrap(), loaded.answer_question(&q.question).unwrap());
            a.answer() != b.answer() || a.query != b.query
        })
        .count();
    results.push((
        10,
        "engine round trip",
        outcome(same_dumps && differing == 0, format!("dumps identical: {same_dumps}, {differing} of {} answers differ", test.len())),
    ));

    results.push((11, "softmax normalization", softmax_sweep()));

    let mut all = true;
    for (n, name, o) in &results {
        all &= o.pass;
        println!("criterion {n:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
