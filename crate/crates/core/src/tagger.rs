//! Entity detection: a per-token E/C tagger over padded questions, and
//! extraction of entity phrases from its tags.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::eval::micro_f1;
use crate::kb::{AnnotatedQuestion, KnowledgeBase};
use crate::nn::{
    fit, grid_search, read_model, write_model, ConfigReport, EmbeddingTable, Example, ModelHeader, NnError, OutputMode,
    SequenceModel, Target, TrainConfig, PAD_TOKEN,
};
use crate::text::normalize;

pub const TAGGER_TASK: &str = "tagger";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    /// Context word.
    C,
    /// Entity word.
    E,
}

impl Tag {
    pub fn class(self) -> usize {
        match self {
            Tag::C => 0,
            Tag::E => 1,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 1 {
            Tag::E
        } else {
            Tag::C
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagSequence(pub Vec<Tag>);

impl TagSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has_entity(&self) -> bool {
        self.0.contains(&Tag::E)
    }
}

impl fmt::Display for TagSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(if *t == Tag::E { "E" } else { "C" })?;
        }
        Ok(())
    }
}

impl FromStr for TagSequence {
    type Err = DetectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split_whitespace()
            .map(|t| match t {
                "E" => Ok(Tag::E),
                "C" => Ok(Tag::C),
                other => Err(DetectError::BadTag(other.to_string())),
            })
            .collect::<Result<_, _>>()
            .map(TagSequence)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("question has no tokens after normalization")]
    EmptyQuestion,
    #[error("input length must be at least 1")]
    ZeroLength,
    #[error("{tags} tags for {tokens} tokens")]
    LengthMismatch { tags: usize, tokens: usize },
    #[error("unknown tag `{0}` (expected E or C)")]
    BadTag(String),
    #[error("tagger file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("model file is not a tagger (task `{0}`)")]
    WrongTask(String),
    #[error("empty training or validation set")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] NnError),
}

/// A question cut or padded to exactly `N` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedQuestion {
    pub tokens: Vec<String>,
    /// For every padded position, the index of the original token it holds.
    pub source: Vec<Option<usize>>,
    /// Original tokens beyond `N` that were cut off.
    pub dropped: usize,
}

/// Prepends pad tokens up to length `n`, or keeps the first `n` tokens.
pub fn pad_question<S: AsRef<str>>(tokens: &[S], n: usize) -> Result<PaddedQuestion, DetectError> {
    if n == 0 {
        return Err(DetectError::ZeroLength);
    }
    if tokens.is_empty() {
        return Err(DetectError::EmptyQuestion);
    }
    let kept = tokens.len().min(n);
    let pads = n - kept;
    let mut out = Vec::with_capacity(n);
    let mut source = Vec::with_capacity(n);
    for _ in 0..pads {
        out.push(PAD_TOKEN.to_string());
        source.push(None);
    }
    for (i, t) in tokens.iter().take(kept).enumerate() {
        out.push(t.as_ref().to_string());
        source.push(Some(i));
    }
    Ok(PaddedQuestion { tokens: out, source, dropped: tokens.len() - kept })
}

/// Maximal runs of `E`, space-joined, left to right.
pub fn extract_entities<S: AsRef<str>>(tags: &TagSequence, tokens: &[S]) -> Result<Vec<String>, DetectError> {
    if tags.len() != tokens.len() {
        return Err(DetectError::LengthMismatch { tags: tags.len(), tokens: tokens.len() });
    }
    let mut spans = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for (tag, tok) in tags.0.iter().zip(tokens) {
        if *tag == Tag::E {
            current.push(tok.as_ref());
        } else if !current.is_empty() {
            spans.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        spans.push(current.join(" "));
    }
    Ok(spans)
}

/// A normalized question with gold tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedQuestion {
    pub tokens: Vec<String>,
    pub tags: TagSequence,
}

impl TaggedQuestion {
    pub fn new(question: &str, tags: TagSequence) -> Result<Self, DetectError> {
        let tokens = normalize(question);
        if tokens.is_empty() {
            return Err(DetectError::EmptyQuestion);
        }
        if tokens.len() != tags.len() {
            return Err(DetectError::LengthMismatch { tags: tags.len(), tokens: tokens.len() });
        }
        Ok(Self { tokens, tags })
    }

    pub fn spans(&self) -> Vec<String> {
        extract_entities(&self.tags, &self.tokens).expect("aligned by construction")
    }
}

/// Parses `question<TAB>tags` lines, tags aligned to normalized tokens.
pub fn parse_tagger_file(src: &str) -> Result<Vec<TaggedQuestion>, DetectError> {
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| DetectError::Malformed { line: i + 1, reason };
        let (q, t) = line.split_once('\t').ok_or_else(|| bad("expected question<TAB>tags".into()))?;
        let tags = t.parse::<TagSequence>().map_err(|e| bad(e.to_string()))?;
        out.push(TaggedQuestion::new(q, tags).map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

pub fn format_tagger_line(q: &TaggedQuestion) -> String {
    format!("{}\t{}", q.tokens.join(" "), q.tags)
}

/// Result of converting annotated questions into tagger training rows.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Induction {
    pub rows: Vec<TaggedQuestion>,
    /// 1-based row numbers of questions where no alias match was found.
    pub skipped: Vec<usize>,
}

/// Induces gold tags by locating the subject's alias in the question. The
/// longest contiguous piece of the alias that occurs in the question is
/// tagged E (leftmost occurrence); it must cover at least half the alias.
pub fn induce_tags(questions: &[AnnotatedQuestion], kb: &KnowledgeBase) -> Induction {
    let mut out = Induction::default();
    for (i, q) in questions.iter().enumerate() {
        let tokens = normalize(&q.question);
        let alias = kb.entity(&q.subject).and_then(|e| e.alias.as_deref()).map(normalize).unwrap_or_default();
        match longest_alias_match(&tokens, &alias) {
            Some((start, len)) => {
                let tags = (0..tokens.len()).map(|p| if p >= start && p < start + len { Tag::E } else { Tag::C }).collect();
                out.rows.push(TaggedQuestion { tokens, tags: TagSequence(tags) });
            }
            None => out.skipped.push(i + 1),
        }
    }
    out
}

fn longest_alias_match(tokens: &[String], alias: &[String]) -> Option<(usize, usize)> {
    let min_len = alias.len().div_ceil(2).max(1);
    for len in (min_len..=alias.len().min(tokens.len())).rev() {
        for a in 0..=alias.len() - len {
            let piece = &alias[a..a + len];
            if let Some(start) = tokens.windows(len).position(|w| w == piece) {
                return Some((start, len));
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggerModel {
    model: SequenceModel,
    input_length: usize,
}

impl TaggerModel {
    pub fn new(model: SequenceModel, input_length: usize) -> Result<Self, DetectError> {
        if input_length == 0 {
            return Err(DetectError::ZeroLength);
        }
        if model.mode() != OutputMode::PerToken || model.output_dim() != 2 {
            return Err(NnError::InvalidSpec("tagger needs a per-token model with 2 classes".into()).into());
        }
        Ok(Self { model, input_length })
    }

    pub fn model(&self) -> &SequenceModel {
        &self.model
    }

    pub fn input_length(&self) -> usize {
        self.input_length
    }

    /// Tags already-normalized tokens. Tokens cut off by the input length are
    /// tagged C.
    pub fn tag_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<TagSequence, DetectError> {
        let padded = pad_question(tokens, self.input_length)?;
        let probs = self.model.forward(&padded.tokens)?;
        let mut tags = vec![Tag::C; tokens.len()];
        for (pos, src) in padded.source.iter().enumerate() {
            if let Some(i) = *src {
                let row = probs.row(pos);
                tags[i] = if row[1] > row[0] { Tag::E } else { Tag::C };
            }
        }
        Ok(TagSequence(tags))
    }

    pub fn tag(&self, question: &str) -> Result<TagSequence, DetectError> {
        self.tag_tokens(&normalize(question))
    }

    pub fn tag_batch<S: AsRef<str>>(&self, questions: &[S]) -> Result<Vec<TagSequence>, DetectError> {
        questions.iter().map(|q| self.tag(q.as_ref())).collect()
    }

    pub fn to_text(&self) -> String {
        let mut header =
            ModelHeader { task: TAGGER_TASK.into(), labels: vec!["C".into(), "E".into()], ..Default::default() };
        header.meta.insert("input_length".into(), self.input_length.to_string());
        write_model(&self.model, &header)
    }

    pub fn from_text(src: &str) -> Result<Self, DetectError> {
        let (model, header) = read_model(src)?;
        if header.task != TAGGER_TASK {
            return Err(DetectError::WrongTask(header.task));
        }
        let n = header
            .meta
            .get("input_length")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| NnError::InvalidSpec("tagger file lacks input_length".into()))?;
        Self::new(model, n)
    }
}

/// Options shared by tagger and classifier training.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Defaults to the longest question in the training and validation sets.
    pub input_length: Option<usize>,
    /// Pretrained vectors; without them a table is learned from the training words.
    pub embeddings: Option<EmbeddingTable>,
    pub jobs: usize,
}

impl TrainOptions {
    pub(crate) fn resolve_length(&self, lengths: impl Iterator<Item = usize>) -> usize {
        self.input_length.unwrap_or_else(|| lengths.max().unwrap_or(1)).max(1)
    }

    pub(crate) fn jobs(&self) -> usize {
        if self.jobs == 0 {
            rayon::current_num_threads()
        } else {
            self.jobs
        }
    }
}

/// Seed used for grid entry `i`.
pub(crate) fn config_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64 + 1)
}

fn tagger_example(q: &TaggedQuestion, n: usize) -> Result<Example, DetectError> {
    let padded = pad_question(&q.tokens, n)?;
    let target = padded.source.iter().map(|s| s.map(|i| q.tags.0[i].class())).collect();
    Ok(Example { tokens: padded.tokens, target: Target::PerToken(target) })
}

/// Trains every grid configuration and keeps the one with the best
/// validation micro-F1 of the E class.
pub fn train_tagger(
    train: &[TaggedQuestion],
    valid: &[TaggedQuestion],
    grid: &[TrainConfig],
    options: &TrainOptions,
) -> Result<(TaggerModel, Vec<ConfigReport>), DetectError> {
    if train.is_empty() || valid.is_empty() {
        return Err(DetectError::EmptyDataset);
    }
    let n = options.resolve_length(train.iter().chain(valid).map(|q| q.tokens.len()));
    let examples = train.iter().map(|q| tagger_example(q, n)).collect::<Result<Vec<_>, _>>()?;
    let vocab: Vec<&str> = train.iter().flat_map(|q| q.tokens.iter().map(String::as_str)).collect();
    let gold: Vec<TagSequence> = valid.iter().map(|q| q.tags.clone()).collect();
    let (model, reports) = grid_search(grid, options.jobs(), |i, config| {
        let seed = config_seed(options.seed, i);
        let mut model =
            config.build_model(options.embeddings.as_ref(), vocab.iter().copied(), 2, OutputMode::PerToken, seed)?;
        let report = fit(&mut model, &examples, config, seed, |m| {
            let tagger = TaggerModel { model: m.clone(), input_length: n };
            let predicted: Vec<TagSequence> =
                valid.iter().map(|q| tagger.tag_tokens(&q.tokens).expect("valid rows are non-empty")).collect();
            micro_f1(&predicted, &gold).map(|s| s.f1).unwrap_or(0.0)
        })?;
        Ok((model, report))
    })?;
    Ok((TaggerModel::new(model, n)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &str) -> TagSequence {
        s.parse().unwrap()
    }

    #[test]
    fn pads_are_prepended() {
        let p = pad_question(&["a", "b"], 4).unwrap();
        assert_eq!(p.tokens, vec![PAD_TOKEN, PAD_TOKEN, "a", "b"]);
        assert_eq!(p.source, vec![None, None, Some(0), Some(1)]);
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn exact_length_is_unchanged() {
        let p = pad_question(&["a", "b", "c"], 3).unwrap();
        assert_eq!(p.tokens, vec!["a", "b", "c"]);
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn long_input_is_truncated() {
        let p = pad_question(&["a", "b", "c", "d", "e"], 3).unwrap();
        assert_eq!(p.tokens, vec!["a", "b", "c"]);
        assert_eq!(p.source, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(p.dropped, 2);
    }

    #[test]
    fn pad_errors() {
        let empty: [&str; 0] = [];
        assert_eq!(pad_question(&empty, 3), Err(DetectError::EmptyQuestion));
        assert_eq!(pad_question(&["a"], 0), Err(DetectError::ZeroLength));
    }

    #[test]
    fn running_example_extraction() {
        let toks = normalize("how old is michelle gellar");
        assert_eq!(extract_entities(&tags("C C C E E"), &toks).unwrap(), vec!["michelle gellar"]);
        assert!(extract_entities(&tags("C C C C C"), &toks).unwrap().is_empty());
        assert_eq!(extract_entities(&tags("E C E E"), &["a", "b", "c", "d"]).unwrap(), vec!["a", "c d"]);
        assert!(extract_entities(&tags("E"), &["a", "b"]).is_err());
    }

    #[test]
    fn tag_strings_round_trip() {
        assert_eq!(tags("C C E").to_string(), "C C E");
        assert!("C X".parse::<TagSequence>().is_err());
    }

    #[test]
    fn tagger_file_format() {
        let rows = parse_tagger_file("How old is Michelle Gellar?\tC C C E E\n").unwrap();
        assert_eq!(rows[0].spans(), vec!["michelle gellar"]);
        assert_eq!(format_tagger_line(&rows[0]), "how old is michelle gellar\tC C C E E");
        assert!(matches!(parse_tagger_file("a b\tE\n"), Err(DetectError::Malformed { line: 1, .. })));
    }

    #[test]
    fn alias_matching_induces_tags() {
        let kb = crate::kb::load_kb("e1\tbornOn\t4/14/1977\ne2\tbornOn\t1/1/1900\n", "e1\tSarah Michelle Gellar\ne2\tZed\n")
            .unwrap();
        let q = |s: &str, e: &str| AnnotatedQuestion {
            subject: e.into(),
            relation: "bornOn".into(),
            object: "x".into(),
            question: s.into(),
        };
        let rows = [
            q("how old is sarah michelle gellar", "e1"),
            q("how old is michelle gellar", "e1"),
            q("how old is gellar", "e1"),
            q("when was zed born", "e2"),
        ];
        let ind = induce_tags(&rows, &kb);
        assert_eq!(ind.rows[0].tags, tags("C C C E E E"));
        assert_eq!(ind.rows[1].tags, tags("C C C E E"));
        assert_eq!(ind.rows[2].tags, tags("C C E C"));
        assert_eq!(ind.skipped, vec![3]);
    }
}
