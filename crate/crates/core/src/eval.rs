//! P@1, ablations, blame analysis, micro-F1 and latency measurement.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{AnnotatedQuestion, EntityId, RelationId};
use crate::pipeline::{AblationConfig, Engine, PipelineError, StageTimes, StructuredQuery};
use crate::tagger::{Tag, TagSequence};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("sequence {index}: {predicted} predicted tags for {gold} gold tags")]
    LengthMismatch { index: usize, predicted: usize, gold: usize },
    #[error("{predicted} predicted sequences for {gold} gold sequences")]
    CountMismatch { predicted: usize, gold: usize },
    #[error("repetitions must be at least 1")]
    ZeroRepetitions,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question: String,
    pub gold_entity: EntityId,
    pub gold_relation: RelationId,
    pub predicted_entity: Option<EntityId>,
    pub predicted_relation: Option<RelationId>,
    pub answer: Option<String>,
    pub correct: bool,
    /// False when the gold relation is outside the classifier's label space.
    pub relation_known: bool,
}

impl EvalRecord {
    pub fn entity_correct(&self) -> bool {
        self.predicted_entity.as_ref() == Some(&self.gold_entity)
    }

    pub fn relation_correct(&self) -> bool {
        self.predicted_relation.as_ref() == Some(&self.gold_relation)
    }
}

fn record(
    q: &AnnotatedQuestion,
    entity: Option<EntityId>,
    relation: Option<RelationId>,
    answer: Option<String>,
    relation_known: bool,
) -> EvalRecord {
    let correct = entity.as_ref() == Some(&q.subject) && relation.as_ref() == Some(&q.relation);
    EvalRecord {
        question: q.question.clone(),
        gold_entity: q.subject.clone(),
        gold_relation: q.relation.clone(),
        predicted_entity: entity,
        predicted_relation: relation,
        answer,
        correct,
        relation_known,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub total: usize,
    pub correct: usize,
    /// Rows whose gold relation is outside the label space (always misses).
    pub unknown_relation: usize,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    fn from_records(records: Vec<EvalRecord>) -> Self {
        let total = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let unknown_relation = records.iter().filter(|r| !r.relation_known).count();
        Self { accuracy: correct as f64 / total as f64, total, correct, unknown_relation, records }
    }
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().expect("thread pool")
}

/// P@1 of `engine` under `mode`; questions are answered `jobs` at a time.
pub fn evaluate_p_at_1(
    engine: &Engine,
    test: &[AnnotatedQuestion],
    mode: AblationConfig,
    jobs: usize,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let records = pool(jobs).install(|| {
        test.par_iter()
            .map(|q| {
                let known = engine.classifier.label_index(&q.relation).is_some();
                match engine.answer_with(&q.question, mode) {
                    Ok(r) => Ok(record(
                        q,
                        r.predicted_entity().cloned(),
                        Some(r.selection.relation.clone()),
                        r.answer().map(|a| a.text.clone()),
                        known,
                    )),
                    Err(PipelineError::EmptyQuestion) => Ok(record(q, None, None, None, known)),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(EvalReport::from_records(records))
}

/// P@1 with gold spans and gold relations fed straight into linking and
/// answer selection.
pub fn evaluate_oracle(engine: &Engine, test: &[(AnnotatedQuestion, Vec<String>)]) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let records = test
        .iter()
        .map(|(q, spans)| {
            let query = StructuredQuery::gold(spans.clone(), q.relation.clone());
            let (candidates, sel) = engine.answer_structured(&query);
            let entity = sel.answer.as_ref().map(|a| a.source_entity.clone()).or_else(|| candidates.candidates.first().map(|c| c.node.clone()));
            record(q, entity, Some(sel.relation), sel.answer.map(|a| a.text), true)
        })
        .collect();
    Ok(EvalReport::from_records(records))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub p_at_1: f64,
    pub correct: usize,
    pub total: usize,
}

/// The four rows: full, naive ED, naive RP, naive ED and RP.
pub fn run_ablations(engine: &Engine, test: &[AnnotatedQuestion], jobs: usize) -> Result<Vec<AblationRow>, EvalError> {
    AblationConfig::all()
        .into_iter()
        .map(|(name, mode)| {
            let r = evaluate_p_at_1(engine, test, mode, jobs)?;
            Ok(AblationRow { config: name.into(), p_at_1: r.accuracy, correct: r.correct, total: r.total })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlameReport {
    pub total: usize,
    pub correct: usize,
    pub entity_only: usize,
    pub relation_only: usize,
    pub both: usize,
    pub ed_blame_pct: f64,
    pub rp_blame_pct: f64,
    pub both_pct: f64,
    pub no_errors: bool,
}

/// Attributes each miss to entity detection, relation prediction, or both.
pub fn blame_analysis(records: &[EvalRecord]) -> BlameReport {
    let (mut correct, mut ed, mut rp, mut both) = (0, 0, 0, 0);
    for r in records {
        match (r.correct, r.entity_correct(), r.relation_correct()) {
            (true, _, _) => correct += 1,
            (false, false, true) => ed += 1,
            (false, true, false) => rp += 1,
            _ => both += 1,
        }
    }
    let errors = ed + rp + both;
    let pct = |x: usize| if errors == 0 { 0.0 } else { 100.0 * x as f64 / errors as f64 };
    BlameReport {
        total: records.len(),
        correct,
        entity_only: ed,
        relation_only: rp,
        both,
        ed_blame_pct: pct(ed),
        rp_blame_pct: pct(rp),
        both_pct: pct(both),
        no_errors: errors == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl F1Score {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { if fp + fn_ == 0 { 1.0 } else { 0.0 } } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Self { precision, recall, f1, true_positives: tp, false_positives: fp, false_negatives: fn_ }
    }
}

/// Token-level precision, recall and F1 of the E class pooled over all sequences.
pub fn micro_f1(predicted: &[TagSequence], gold: &[TagSequence]) -> Result<F1Score, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::CountMismatch { predicted: predicted.len(), gold: gold.len() });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (index, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(EvalError::LengthMismatch { index, predicted: p.len(), gold: g.len() });
        }
        for (a, b) in p.0.iter().zip(&g.0) {
            match (a, b) {
                (Tag::E, Tag::E) => tp += 1,
                (Tag::E, Tag::C) => fp += 1,
                (Tag::C, Tag::E) => fn_ += 1,
                (Tag::C, Tag::C) => {}
            }
        }
    }
    Ok(F1Score::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub stdev: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, stdev: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, stdev: var.sqrt() }
    }

    /// `mean±stdev ms`, with precision adapted to the magnitude.
    pub fn format_ms(&self) -> String {
        let decimals = if self.mean >= 10.0 {
            0
        } else if self.mean >= 1.0 {
            1
        } else if self.mean >= 0.1 {
            2
        } else {
            3
        };
        format!("{:.*}±{:.*} ms", decimals, self.mean, decimals, self.stdev)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub questions: usize,
    pub repetitions: usize,
    pub total: MeanStd,
    pub tagging: MeanStd,
    pub classification: MeanStd,
    pub linking: MeanStd,
    pub selection: MeanStd,
}

impl LatencyReport {
    pub fn summary(&self) -> String {
        self.total.format_ms()
    }

    pub fn table(&self) -> String {
        let rows = [
            ("entity detection", self.tagging),
            ("relation prediction", self.classification),
            ("entity linking", self.linking),
            ("answer selection", self.selection),
            ("total", self.total),
        ];
        let mut out = String::new();
        writeln!(out, "{:<22}{:>18}", "stage", "latency").unwrap();
        for (name, s) in rows {
            writeln!(out, "{:<22}{:>18}", name, s.format_ms()).unwrap();
        }
        out
    }
}

/// Sequential wall-clock latency of `answer_question`. One untimed warm-up
/// pass over the questions precedes the measured repetitions.
pub fn latency_bench(engine: &Engine, questions: &[String], repetitions: usize) -> Result<LatencyReport, EvalError> {
    if questions.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if repetitions == 0 {
        return Err(EvalError::ZeroRepetitions);
    }
    for q in questions {
        engine.answer_question(q)?;
    }
    let mut samples: Vec<StageTimes> = Vec::with_capacity(questions.len() * repetitions);
    for _ in 0..repetitions {
        for q in questions {
            let start = Instant::now();
            let r = engine.answer_question(q)?;
            let mut t = r.timing;
            t.total_ms = start.elapsed().as_secs_f64() * 1000.0;
            samples.push(t);
        }
    }
    let col = |f: fn(&StageTimes) -> f64| MeanStd::of(&samples.iter().map(f).collect::<Vec<_>>());
    Ok(LatencyReport {
        questions: questions.len(),
        repetitions,
        total: col(|t| t.total_ms),
        tagging: col(|t| t.tagging_ms),
        classification: col(|t| t.classification_ms),
        linking: col(|t| t.linking_ms),
        selection: col(|t| t.selection_ms),
    })
}

/// One externally annotated log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub first_order: bool,
    pub entity_correct: bool,
    pub relation_correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CategoryTable {
    pub correct: usize,
    pub incorrect_entity: usize,
    pub incorrect_relation: usize,
    pub not_first_order: usize,
}

impl CategoryTable {
    pub fn total(&self) -> usize {
        self.correct + self.incorrect_entity + self.incorrect_relation + self.not_first_order
    }

    pub fn table(&self) -> String {
        let total = self.total().max(1) as f64;
        let mut out = String::new();
        for (name, n) in [
            ("Correct", self.correct),
            ("Incorrect entity", self.incorrect_entity),
            ("Incorrect relation", self.incorrect_relation),
            ("Not first-order question", self.not_first_order),
        ] {
            writeln!(out, "{name:<26}{n:>6}{:>8.1}%", 100.0 * n as f64 / total).unwrap();
        }
        out
    }
}

impl From<&EvalRecord> for LogEntry {
    fn from(r: &EvalRecord) -> Self {
        Self { first_order: true, entity_correct: r.entity_correct(), relation_correct: r.relation_correct() }
    }
}

/// Counts log entries into the four categories. A wrong entity takes
/// precedence over a wrong relation.
pub fn categorize_real_log(entries: &[LogEntry]) -> CategoryTable {
    let mut t = CategoryTable::default();
    for e in entries {
        match (e.first_order, e.entity_correct, e.relation_correct) {
            (false, _, _) => t.not_first_order += 1,
            (true, false, _) => t.incorrect_entity += 1,
            (true, true, false) => t.incorrect_relation += 1,
            (true, true, true) => t.correct += 1,
        }
    }
    t
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<20}{:>8}{:>14}", "configuration", "P@1", "correct").unwrap();
    for r in rows {
        writeln!(out, "{:<20}{:>8.1}{:>14}", r.config, 100.0 * r.p_at_1, format!("{}/{}", r.correct, r.total)).unwrap();
    }
    out
}

pub fn format_blame_table(b: &BlameReport) -> String {
    let mut out = String::new();
    if b.no_errors {
        writeln!(out, "no errors ({} of {} correct)", b.correct, b.total).unwrap();
        return out;
    }
    writeln!(out, "{:<24}{:>8}{:>9}", "blame", "count", "share").unwrap();
    for (name, n, p) in [
        ("entity detection", b.entity_only, b.ed_blame_pct),
        ("relation prediction", b.relation_only, b.rp_blame_pct),
        ("both", b.both, b.both_pct),
    ] {
        writeln!(out, "{name:<24}{n:>8}{p:>8.1}%").unwrap();
    }
    writeln!(out, "{:<24}{:>8}", "correct", b.correct).unwrap();
    out
}

/// One JSON object per line.
pub fn to_json_lines<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}
