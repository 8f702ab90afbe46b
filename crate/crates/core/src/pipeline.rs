//! Question → structured query → entity linking → answer selection.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{constrain, label_space_hash, ClassifierModel, ClassifyError, RelationPrediction};
use crate::entity_index::{EntityIndex, IndexError, KeyKind, NGramKey, ENTITY_INDEX_HEADER, MAX_GRAM};
use crate::kb::{EntityId, KnowledgeBase, ObjectRef, RelationId};
use crate::nn::MODEL_HEADER;
use crate::reach_index::{ReachError, ReachIndex, REACH_INDEX_HEADER};
use crate::tagger::{extract_entities, DetectError, TaggerModel};
use crate::text::{ngrams, normalize};

pub const ENGINE_FORMAT: &str = "FOQA-ENGINE v1";
pub const ENTITY_INDEX_FILE: &str = "entity.idx";
pub const REACH_INDEX_FILE: &str = "reach.idx";
pub const TAGGER_FILE: &str = "tagger.model";
pub const CLASSIFIER_FILE: &str = "classifier.model";
pub const MANIFEST_FILE: &str = "engine.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("question has no tokens after normalization")]
    EmptyQuestion,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{artifact}: expected format `{expected}`, found `{found}`")]
    VersionMismatch { artifact: String, expected: String, found: String },
    #[error("{artifact}: {reason}")]
    Inconsistent { artifact: String, reason: String },
    #[error("entity index: {0}")]
    Index(#[from] IndexError),
    #[error("reach index: {0}")]
    Reach(#[from] ReachError),
    #[error("tagger: {0}")]
    Tagger(#[from] DetectError),
    #[error("classifier: {0}")]
    Classifier(#[from] ClassifyError),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

/// The intermediate representation between question understanding and retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredQuery {
    pub spans: Vec<String>,
    /// Set when tagging found no entity word and the whole question stands in.
    pub no_entity: bool,
    pub relation: RelationId,
    pub labels: Vec<RelationId>,
    pub distribution: Vec<f64>,
}

impl StructuredQuery {
    /// Query with externally supplied spans and a certain relation.
    pub fn gold(spans: Vec<String>, relation: RelationId) -> Self {
        Self { spans, no_entity: false, labels: vec![relation.clone()], relation, distribution: vec![1.0] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub node: EntityId,
    pub score: f64,
    pub matched_key: NGramKey,
}

/// One iteration of the linking loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkPass {
    /// `None` is the exact-text pass.
    pub n: Option<usize>,
    pub keys_queried: usize,
    /// Keys that returned postings, in query order.
    pub matched_keys: Vec<NGramKey>,
    pub candidates_after: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    /// Sorted by score descending, then entity id.
    pub candidates: Vec<Candidate>,
    pub passes: Vec<LinkPass>,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    /// Merges `other`, keeping the highest score per entity.
    pub fn union(&mut self, other: CandidateSet) {
        let mut by_node: HashMap<EntityId, Candidate> = self.candidates.drain(..).map(|c| (c.node.clone(), c)).collect();
        for c in other.candidates {
            match by_node.get(&c.node) {
                Some(old) if old.score >= c.score => {}
                _ => {
                    by_node.insert(c.node.clone(), c);
                }
            }
        }
        self.candidates = by_node.into_values().collect();
        sort_candidates(&mut self.candidates);
        self.passes.extend(other.passes);
    }

    pub fn get(&self, node: &EntityId) -> Option<&Candidate> {
        self.candidates.iter().find(|c| &c.node == node)
    }
}

fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.node.cmp(&b.node)));
}

/// Links `entity_text` by querying n-gram keys for n = ∞, 3, 2, 1, stopping
/// after the first pass at a finite `n ≤ tokens` that leaves the set non-empty.
pub fn link(idx: &EntityIndex, entity_text: &str) -> CandidateSet {
    let tokens = normalize(entity_text);
    let mut set = CandidateSet::default();
    if tokens.is_empty() {
        return set;
    }
    let mut best: HashMap<EntityId, Candidate> = HashMap::new();
    let orders = std::iter::once(None).chain((1..=MAX_GRAM).rev().map(Some));
    for n in orders {
        let keys: Vec<NGramKey> = match n {
            None => vec![NGramKey::exact(&tokens)],
            Some(n) => ngrams(&tokens, n).map(|g| NGramKey::gram_text(n, g)).collect(),
        };
        let mut matched = Vec::new();
        for key in &keys {
            let postings = idx.lookup(key);
            if !postings.is_empty() {
                matched.push(key.clone());
            }
            for p in postings {
                match best.get(&p.node) {
                    Some(c) if c.score >= p.score => {}
                    _ => {
                        best.insert(p.node.clone(), Candidate { node: p.node.clone(), score: p.score, matched_key: key.clone() });
                    }
                }
            }
        }
        set.passes.push(LinkPass { n, keys_queried: keys.len(), matched_keys: matched, candidates_after: best.len() });
        if !best.is_empty() && n.is_some_and(|n| n <= tokens.len()) {
            break;
        }
    }
    set.candidates = best.into_values().collect();
    sort_candidates(&mut set.candidates);
    set
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Answer {
    pub node: ObjectRef,
    pub text: String,
    pub source_entity: EntityId,
    pub relation: RelationId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Relation after restricting to the candidates' relations.
    pub relation: RelationId,
    /// Whether the restriction applied (false when it would have been empty).
    pub constrained: bool,
    /// Size of the union of the candidates' relation sets.
    pub candidate_relations: usize,
    pub answer: Option<Answer>,
}

/// Picks the relation from the query distribution restricted to relations
/// the candidates have, then the highest-scored node reachable through it.
pub fn select_answer(reach: &ReachIndex, candidates: &CandidateSet, query: &StructuredQuery) -> Selection {
    let allowed: BTreeSet<&RelationId> = candidates.candidates.iter().flat_map(|c| reach.relations_of(&c.node)).collect();
    let (relation, constrained) = match constrain(&query.labels, &query.distribution, |r| allowed.contains(r)) {
        Ok(p) => (p.relation, true),
        Err(_) => (query.relation.clone(), false),
    };
    let answer = best_answer(reach, candidates, &relation);
    Selection { relation, constrained, candidate_relations: allowed.len(), answer }
}

/// Highest-scored node reachable from a candidate via `relation`. Ties go to
/// the smaller entity id, then the smaller object text.
pub fn best_answer(reach: &ReachIndex, candidates: &CandidateSet, relation: &RelationId) -> Option<Answer> {
    let mut best: Option<Answer> = None;
    for c in &candidates.candidates {
        for entry in reach.reachable_via(&c.node, relation) {
            let better = match &best {
                None => true,
                Some(b) => {
                    c.score > b.score
                        || (c.score == b.score && (&c.node, entry.text.as_str()) < (&b.source_entity, b.text.as_str()))
                }
            };
            if better {
                best = Some(Answer {
                    node: entry.node.clone(),
                    text: entry.text.clone(),
                    source_entity: c.node.clone(),
                    relation: relation.clone(),
                    score: c.score,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityDetectionMode {
    Model,
    /// The whole question is the entity text.
    WholeQuestion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationMode {
    Model,
    /// Always the most frequent training relation, unconstrained.
    MostFrequent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    pub entity_detection: EntityDetectionMode,
    pub relation_prediction: RelationMode,
}

impl AblationConfig {
    pub const FULL: Self = Self { entity_detection: EntityDetectionMode::Model, relation_prediction: RelationMode::Model };
    pub const NAIVE_ED: Self =
        Self { entity_detection: EntityDetectionMode::WholeQuestion, relation_prediction: RelationMode::Model };
    pub const NAIVE_RP: Self =
        Self { entity_detection: EntityDetectionMode::Model, relation_prediction: RelationMode::MostFrequent };
    pub const NAIVE_BOTH: Self =
        Self { entity_detection: EntityDetectionMode::WholeQuestion, relation_prediction: RelationMode::MostFrequent };

    pub fn all() -> [(&'static str, Self); 4] {
        [("full", Self::FULL), ("naive ED", Self::NAIVE_ED), ("naive RP", Self::NAIVE_RP), ("naive ED and RP", Self::NAIVE_BOTH)]
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::FULL
    }
}

/// Wall-clock milliseconds per stage of one question.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimes {
    pub tagging_ms: f64,
    pub classification_ms: f64,
    pub linking_ms: f64,
    pub selection_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaResult {
    pub question: String,
    pub query: StructuredQuery,
    pub candidates: CandidateSet,
    pub selection: Selection,
    pub timing: StageTimes,
}

impl QaResult {
    pub fn answer(&self) -> Option<&Answer> {
        self.selection.answer.as_ref()
    }

    /// The entity the system settled on: the answer's source, else the top candidate.
    pub fn predicted_entity(&self) -> Option<&EntityId> {
        self.answer().map(|a| &a.source_entity).or_else(|| self.candidates.candidates.first().map(|c| &c.node))
    }

    pub fn diagnostic(&self) -> DiagnosticRecord {
        DiagnosticRecord {
            question: self.question.clone(),
            spans: self.query.spans.clone(),
            no_entity: self.query.no_entity,
            relation: self.query.relation.to_string(),
            constrained_relation: self.selection.relation.to_string(),
            candidate_count: self.candidates.len(),
            answer: self.answer().map(|a| a.text.clone()),
            answer_entity: self.answer().map(|a| a.source_entity.to_string()),
            timing: self.timing,
        }
    }
}

/// One JSON-lines entry per answered question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub question: String,
    pub spans: Vec<String>,
    pub no_entity: bool,
    pub relation: String,
    pub constrained_relation: String,
    pub candidate_count: usize,
    pub answer: Option<String>,
    pub answer_entity: Option<String>,
    #[serde(flatten)]
    pub timing: StageTimes,
}

/// Contents of `engine.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineManifest {
    pub format: String,
    pub entity_index_format: String,
    pub reach_index_format: String,
    pub model_format: String,
    pub input_length: Option<usize>,
    pub classifier_input_length: Option<usize>,
    pub label_space_hash: Option<String>,
    pub label_count: Option<usize>,
    pub most_frequent_relation: Option<String>,
}

impl EngineManifest {
    pub fn base() -> Self {
        Self {
            format: ENGINE_FORMAT.into(),
            entity_index_format: ENTITY_INDEX_HEADER.into(),
            reach_index_format: REACH_INDEX_HEADER.into(),
            model_format: MODEL_HEADER.into(),
            input_length: None,
            classifier_input_length: None,
            label_space_hash: None,
            label_count: None,
            most_frequent_relation: None,
        }
    }
}

/// Indexes plus both models. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Engine {
    pub entity_index: EntityIndex,
    pub reach: ReachIndex,
    pub tagger: TaggerModel,
    pub classifier: ClassifierModel,
}

impl Engine {
    pub fn new(entity_index: EntityIndex, reach: ReachIndex, tagger: TaggerModel, classifier: ClassifierModel) -> Self {
        Self { entity_index, reach, tagger, classifier }
    }

    /// Builds both indexes from `kb` and pairs them with trained models.
    pub fn from_kb(kb: &KnowledgeBase, tagger: TaggerModel, classifier: ClassifierModel) -> Self {
        Self::new(EntityIndex::build(kb), ReachIndex::build(kb), tagger, classifier)
    }

    pub fn answer_question(&self, question: &str) -> Result<QaResult, PipelineError> {
        self.answer_with(question, AblationConfig::FULL)
    }

    pub fn answer_with(&self, question: &str, mode: AblationConfig) -> Result<QaResult, PipelineError> {
        let start = Instant::now();
        let tokens = normalize(question);
        if tokens.is_empty() {
            return Err(PipelineError::EmptyQuestion);
        }
        let mut timing = StageTimes::default();

        let t = Instant::now();
        let (spans, no_entity) = match mode.entity_detection {
            EntityDetectionMode::Model => {
                let tags = self.tagger.tag_tokens(&tokens)?;
                let spans = extract_entities(&tags, &tokens)?;
                if spans.is_empty() {
                    (vec![tokens.join(" ")], true)
                } else {
                    (spans, false)
                }
            }
            EntityDetectionMode::WholeQuestion => (vec![tokens.join(" ")], false),
        };
        timing.tagging_ms = ms(t);

        let t = Instant::now();
        let query = match mode.relation_prediction {
            RelationMode::Model => {
                let RelationPrediction { relation, distribution } = self.classifier.predict_tokens(&tokens)?;
                StructuredQuery { spans, no_entity, relation, labels: self.classifier.labels().to_vec(), distribution }
            }
            RelationMode::MostFrequent => {
                let r = self.most_frequent_relation()?;
                StructuredQuery { no_entity, ..StructuredQuery::gold(spans, r) }
            }
        };
        timing.classification_ms = ms(t);

        let t = Instant::now();
        let candidates = link_spans(&self.entity_index, &query.spans);
        timing.linking_ms = ms(t);

        let t = Instant::now();
        let selection = match mode.relation_prediction {
            RelationMode::Model => select_answer(&self.reach, &candidates, &query),
            RelationMode::MostFrequent => Selection {
                relation: query.relation.clone(),
                constrained: false,
                candidate_relations: 0,
                answer: best_answer(&self.reach, &candidates, &query.relation),
            },
        };
        timing.selection_ms = ms(t);
        timing.total_ms = ms(start);
        Ok(QaResult { question: question.to_string(), query, candidates, selection, timing })
    }

    /// Links and selects from a caller-supplied query, bypassing both models.
    pub fn answer_structured(&self, query: &StructuredQuery) -> (CandidateSet, Selection) {
        answer_structured(&self.entity_index, &self.reach, query)
    }

    pub fn most_frequent_relation(&self) -> Result<RelationId, PipelineError> {
        self.classifier.most_frequent().cloned().ok_or_else(|| PipelineError::Inconsistent {
            artifact: CLASSIFIER_FILE.into(),
            reason: "no most frequent training relation recorded".into(),
        })
    }

    pub fn manifest(&self) -> EngineManifest {
        EngineManifest {
            input_length: Some(self.tagger.input_length()),
            classifier_input_length: Some(self.classifier.input_length()),
            label_space_hash: Some(label_space_hash(self.classifier.labels())),
            label_count: Some(self.classifier.labels().len()),
            most_frequent_relation: self.classifier.most_frequent().map(|r| r.to_string()),
            ..EngineManifest::base()
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write(&dir.join(ENTITY_INDEX_FILE), &self.entity_index.dump())?;
        write(&dir.join(REACH_INDEX_FILE), &self.reach.dump())?;
        write(&dir.join(TAGGER_FILE), &self.tagger.to_text())?;
        write(&dir.join(CLASSIFIER_FILE), &self.classifier.to_text())?;
        write_manifest(dir, &self.manifest())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let manifest = read_manifest(dir)?;
        let checks = [
            (ENGINE_FORMAT, &manifest.format, MANIFEST_FILE),
            (ENTITY_INDEX_HEADER, &manifest.entity_index_format, ENTITY_INDEX_FILE),
            (REACH_INDEX_HEADER, &manifest.reach_index_format, REACH_INDEX_FILE),
            (MODEL_HEADER, &manifest.model_format, "model files"),
        ];
        for (expected, found, artifact) in checks {
            if expected != found {
                return Err(PipelineError::VersionMismatch { artifact: artifact.into(), expected: expected.into(), found: found.clone() });
            }
        }
        let entity_index = EntityIndex::parse(&read(&dir.join(ENTITY_INDEX_FILE))?)?;
        let reach = ReachIndex::parse(&read(&dir.join(REACH_INDEX_FILE))?)?;
        let tagger = TaggerModel::from_text(&read(&dir.join(TAGGER_FILE))?)?;
        let classifier = ClassifierModel::from_text(&read(&dir.join(CLASSIFIER_FILE))?)?;
        let engine = Self { entity_index, reach, tagger, classifier };
        let actual = engine.manifest();
        let inconsistent = |what: &str| PipelineError::Inconsistent {
            artifact: MANIFEST_FILE.into(),
            reason: format!("{what} does not match the model files"),
        };
        if manifest.label_space_hash.is_some() && manifest.label_space_hash != actual.label_space_hash {
            return Err(inconsistent("label space hash"));
        }
        if manifest.input_length.is_some() && manifest.input_length != actual.input_length {
            return Err(inconsistent("input length"));
        }
        if manifest.classifier_input_length.is_some() && manifest.classifier_input_length != actual.classifier_input_length {
            return Err(inconsistent("classifier input length"));
        }
        Ok(engine)
    }
}

/// Union of the candidate sets of every span.
pub fn link_spans<S: AsRef<str>>(idx: &EntityIndex, spans: &[S]) -> CandidateSet {
    let mut all = CandidateSet::default();
    for s in spans {
        all.union(link(idx, s.as_ref()));
    }
    all
}

pub fn answer_structured(idx: &EntityIndex, reach: &ReachIndex, query: &StructuredQuery) -> (CandidateSet, Selection) {
    let candidates = link_spans(idx, &query.spans);
    let selection = select_answer(reach, &candidates, query);
    (candidates, selection)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.to_path_buf(), source }
}

fn read(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<EngineManifest, PipelineError> {
    let path = dir.join(MANIFEST_FILE);
    serde_json::from_str(&read(&path)?).map_err(|source| PipelineError::Json { path, source })
}

pub fn write_manifest(dir: &Path, manifest: &EngineManifest) -> Result<(), PipelineError> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|source| PipelineError::Json { path: path.clone(), source })?;
    write(&path, &(text + "\n"))
}

/// Rewrites `engine.json` from whichever artifacts in `dir` exist.
pub fn refresh_manifest(dir: &Path) -> Result<EngineManifest, PipelineError> {
    let mut m = EngineManifest::base();
    let tagger_path = dir.join(TAGGER_FILE);
    if tagger_path.exists() {
        m.input_length = Some(TaggerModel::from_text(&read(&tagger_path)?)?.input_length());
    }
    let clf_path = dir.join(CLASSIFIER_FILE);
    if clf_path.exists() {
        let clf = ClassifierModel::from_text(&read(&clf_path)?)?;
        m.classifier_input_length = Some(clf.input_length());
        m.label_space_hash = Some(label_space_hash(clf.labels()));
        m.label_count = Some(clf.labels().len());
        m.most_frequent_relation = clf.most_frequent().map(|r| r.to_string());
    }
    write_manifest(dir, &m)?;
    Ok(m)
}

/// Pass label as printed in audit trails.
pub fn pass_label(n: Option<usize>) -> String {
    n.map_or_else(|| KeyKind::Exact.tag(), |n| n.to_string())
}
