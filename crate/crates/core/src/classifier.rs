//! Relation prediction: a whole-question classifier over relation types, with
//! prediction restricted to an allowed subset.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::kb::RelationId;
use crate::nn::math::argmax;
use crate::nn::{fit, grid_search, read_model, write_model, ConfigReport, Example, ModelHeader, NnError, OutputMode, SequenceModel, Target, TrainConfig};
use crate::tagger::{config_seed, pad_question, DetectError, TrainOptions};
use crate::text::{fnv1a64, normalize};

pub const CLASSIFIER_TASK: &str = "classifier";

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("question has no tokens after normalization")]
    EmptyQuestion,
    #[error("no allowed relation is in the label space")]
    NoAllowedLabel,
    #[error("classifier file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("model file is not a classifier (task `{0}`)")]
    WrongTask(String),
    #[error("empty training or validation set")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] NnError),
}

impl From<DetectError> for ClassifyError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Model(m) => ClassifyError::Model(m),
            _ => ClassifyError::EmptyQuestion,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationPrediction {
    pub relation: RelationId,
    /// Aligned with the classifier's label space.
    pub distribution: Vec<f64>,
}

/// Masks `distribution` to the labels in `allowed`, renormalizes, and takes
/// the argmax (ties by label order).
pub fn constrain(
    labels: &[RelationId],
    distribution: &[f64],
    allowed: impl Fn(&RelationId) -> bool,
) -> Result<RelationPrediction, ClassifyError> {
    let mut masked: Vec<f64> = labels.iter().zip(distribution).map(|(l, &p)| if allowed(l) { p } else { 0.0 }).collect();
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| allowed(&labels[i])).collect();
    if keep.is_empty() {
        return Err(ClassifyError::NoAllowedLabel);
    }
    let total: f64 = masked.iter().sum();
    if total > 0.0 {
        masked.iter_mut().for_each(|p| *p /= total);
    } else {
        for &i in &keep {
            masked[i] = 1.0 / keep.len() as f64;
        }
    }
    let best = keep.iter().copied().fold(keep[0], |b, i| if masked[i] > masked[b] { i } else { b });
    Ok(RelationPrediction { relation: labels[best].clone(), distribution: masked })
}

/// Stable hash of an ordered label space.
pub fn label_space_hash(labels: &[RelationId]) -> String {
    let joined: Vec<&str> = labels.iter().map(RelationId::as_str).collect();
    format!("{:016x}", fnv1a64(joined.join("\n").as_bytes()))
}

/// Most frequent relation (ties to the lexicographically smallest).
pub fn most_frequent_relation<'a>(relations: impl IntoIterator<Item = &'a RelationId>) -> Option<RelationId> {
    let mut counts: BTreeMap<&RelationId, usize> = BTreeMap::new();
    for r in relations {
        *counts.entry(r).or_default() += 1;
    }
    let mut best: Option<(&RelationId, usize)> = None;
    for (r, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((r, c));
        }
    }
    best.map(|(r, _)| r.clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledQuestion {
    pub tokens: Vec<String>,
    pub relation: RelationId,
}

impl LabeledQuestion {
    pub fn new(question: &str, relation: RelationId) -> Result<Self, ClassifyError> {
        let tokens = normalize(question);
        if tokens.is_empty() {
            return Err(ClassifyError::EmptyQuestion);
        }
        Ok(Self { tokens, relation })
    }
}

/// Parses `question<TAB>relation_id` lines.
pub fn parse_classifier_file(src: &str) -> Result<Vec<LabeledQuestion>, ClassifyError> {
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| ClassifyError::Malformed { line: i + 1, reason: reason.into() };
        let (q, r) = line.rsplit_once('\t').ok_or_else(|| bad("expected question<TAB>relation"))?;
        let r = r.trim();
        if r.is_empty() {
            return Err(bad("empty relation"));
        }
        out.push(LabeledQuestion::new(q, r.into()).map_err(|_| bad("empty question"))?);
    }
    Ok(out)
}

pub fn format_classifier_line(q: &LabeledQuestion) -> String {
    format!("{}\t{}", q.tokens.join(" "), q.relation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    model: SequenceModel,
    labels: Vec<RelationId>,
    input_length: usize,
    most_frequent: Option<RelationId>,
}

impl ClassifierModel {
    pub fn new(
        model: SequenceModel,
        labels: Vec<RelationId>,
        input_length: usize,
        most_frequent: Option<RelationId>,
    ) -> Result<Self, ClassifyError> {
        if model.mode() != OutputMode::FinalState || model.output_dim() != labels.len() {
            return Err(NnError::InvalidSpec("classifier needs a final-state model with one output per label".into()).into());
        }
        if input_length == 0 {
            return Err(NnError::InvalidSpec("input length must be positive".into()).into());
        }
        Ok(Self { model, labels, input_length, most_frequent })
    }

    pub fn model(&self) -> &SequenceModel {
        &self.model
    }

    pub fn labels(&self) -> &[RelationId] {
        &self.labels
    }

    pub fn input_length(&self) -> usize {
        self.input_length
    }

    /// Most frequent relation of the training questions.
    pub fn most_frequent(&self) -> Option<&RelationId> {
        self.most_frequent.as_ref()
    }

    pub fn label_index(&self, r: &RelationId) -> Option<usize> {
        self.labels.binary_search(r).ok()
    }

    pub fn predict_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<RelationPrediction, ClassifyError> {
        let padded = pad_question(tokens, self.input_length)?;
        let distribution = self.model.forward(&padded.tokens)?.into_vec();
        Ok(RelationPrediction { relation: self.labels[argmax(&distribution)].clone(), distribution })
    }

    pub fn predict_relation(&self, question: &str) -> Result<RelationPrediction, ClassifyError> {
        self.predict_tokens(&normalize(question))
    }

    pub fn predict_constrained(&self, question: &str, allowed: &BTreeSet<RelationId>) -> Result<RelationPrediction, ClassifyError> {
        let p = self.predict_relation(question)?;
        constrain(&self.labels, &p.distribution, |r| allowed.contains(r))
    }

    pub fn to_text(&self) -> String {
        let mut header = ModelHeader {
            task: CLASSIFIER_TASK.into(),
            labels: self.labels.iter().map(|l| l.to_string()).collect(),
            ..Default::default()
        };
        header.meta.insert("input_length".into(), self.input_length.to_string());
        if let Some(r) = &self.most_frequent {
            header.meta.insert("most_frequent_relation".into(), r.to_string());
        }
        write_model(&self.model, &header)
    }

    pub fn from_text(src: &str) -> Result<Self, ClassifyError> {
        let (model, header) = read_model(src)?;
        if header.task != CLASSIFIER_TASK {
            return Err(ClassifyError::WrongTask(header.task));
        }
        let n = header
            .meta
            .get("input_length")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| NnError::InvalidSpec("classifier file lacks input_length".into()))?;
        let labels: Vec<RelationId> = header.labels.iter().map(|l| RelationId::new(l.as_str())).collect();
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NnError::InvalidSpec("labels must be sorted and unique".into()).into());
        }
        let mf = header.meta.get("most_frequent_relation").map(|r| RelationId::new(r.as_str()));
        Self::new(model, labels, n, mf)
    }
}

/// Trains every grid configuration and keeps the one with the best
/// validation accuracy. The label space is the set of relations in `train`;
/// validation rows outside it always count as misses.
pub fn train_classifier(
    train: &[LabeledQuestion],
    valid: &[LabeledQuestion],
    grid: &[TrainConfig],
    options: &TrainOptions,
) -> Result<(ClassifierModel, Vec<ConfigReport>), ClassifyError> {
    if train.is_empty() || valid.is_empty() {
        return Err(ClassifyError::EmptyDataset);
    }
    let labels: Vec<RelationId> = train.iter().map(|q| q.relation.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let most_frequent = most_frequent_relation(train.iter().map(|q| &q.relation));
    let n = options.resolve_length(train.iter().chain(valid).map(|q| q.tokens.len()));
    let examples = train
        .iter()
        .map(|q| {
            let padded = pad_question(&q.tokens, n)?;
            let class = labels.binary_search(&q.relation).expect("label space built from train");
            Ok(Example { tokens: padded.tokens, target: Target::Whole(class) })
        })
        .collect::<Result<Vec<_>, ClassifyError>>()?;
    let vocab: Vec<&str> = train.iter().flat_map(|q| q.tokens.iter().map(String::as_str)).collect();
    let (model, reports) = grid_search(grid, options.jobs(), |i, config| {
        let seed = config_seed(options.seed, i);
        let mut model = config.build_model(options.embeddings.as_ref(), vocab.iter().copied(), labels.len(), OutputMode::FinalState, seed)?;
        let report = fit(&mut model, &examples, config, seed, |m| {
            let clf = ClassifierModel { model: m.clone(), labels: labels.clone(), input_length: n, most_frequent: None };
            let hits = valid
                .iter()
                .filter(|q| clf.predict_tokens(&q.tokens).map(|p| p.relation == q.relation).unwrap_or(false))
                .count();
            hits as f64 / valid.len() as f64
        })?;
        Ok((model, report))
    })?;
    Ok((ClassifierModel::new(model, labels, n, most_frequent)?, reports))
}
