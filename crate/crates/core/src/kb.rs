//! Knowledge base of binary facts plus the entity alias table.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub String);

macro_rules! string_id {
    ($t:ty) => {
        impl $t {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
        impl From<&str> for $t {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}
string_id!(EntityId);
string_id!(RelationId);

/// Object side of a fact: another entity or a terminal literal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObjectRef {
    Entity(EntityId),
    Literal(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fact {
    pub subject: EntityId,
    pub relation: RelationId,
    /// Printable form of the object (alias for entities, raw text for literals).
    pub object_text: String,
    pub object: ObjectRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: EntityId,
    /// `None` when the aliases source has no line for this entity.
    pub alias: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbStats {
    pub num_entities: usize,
    pub num_facts: usize,
    pub num_relations: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KbError {
    #[error("{source_name} line {line}: {reason}")]
    Malformed { source_name: &'static str, line: usize, reason: String },
    #[error("aliases line {line}: alias for unknown entity `{id}`")]
    AliasForUnknownEntity { line: usize, id: EntityId },
    #[error("{0} source is empty")]
    EmptySource(&'static str),
    #[error("unknown entity `{0}`")]
    UnknownEntity(EntityId),
}

/// A fact before entity display text is resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFact {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: ObjectRef,
}

impl RawFact {
    pub fn literal(subject: &str, relation: &str, text: &str) -> Self {
        Self { subject: subject.into(), relation: relation.into(), object: ObjectRef::Literal(text.to_string()) }
    }

    pub fn entity(subject: &str, relation: &str, object: &str) -> Self {
        Self { subject: subject.into(), relation: relation.into(), object: ObjectRef::Entity(object.into()) }
    }
}

/// Immutable once built. Facts are kept sorted by `(subject, relation, object text)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    entities: BTreeMap<EntityId, Entity>,
    facts: Vec<Fact>,
    relations: BTreeSet<RelationId>,
    by_subject: HashMap<EntityId, Range<usize>>,
}

fn content_lines(src: &str) -> impl Iterator<Item = (usize, &str)> {
    src.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

pub fn parse_facts(src: &str) -> Result<Vec<RawFact>, KbError> {
    let mut out = Vec::new();
    for (line, text) in content_lines(src) {
        let malformed = |reason: &str| KbError::Malformed { source_name: "facts", line, reason: reason.to_string() };
        let mut parts = text.splitn(3, '\t');
        let (Some(s), Some(r), Some(o)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(malformed("expected subject<TAB>relation<TAB>object"));
        };
        let (s, r, o) = (s.trim(), r.trim(), o.trim());
        if s.is_empty() || r.is_empty() || o.is_empty() {
            return Err(malformed("empty field"));
        }
        let object = match o.strip_prefix('@') {
            Some("") => return Err(malformed("empty entity reference")),
            Some(id) => ObjectRef::Entity(id.into()),
            None => ObjectRef::Literal(o.to_string()),
        };
        out.push(RawFact { subject: s.into(), relation: r.into(), object });
    }
    Ok(out)
}

pub fn parse_aliases(src: &str) -> Result<Vec<(usize, EntityId, String)>, KbError> {
    let mut out = Vec::new();
    for (line, text) in content_lines(src) {
        let Some((id, alias)) = text.split_once('\t') else {
            return Err(KbError::Malformed { source_name: "aliases", line, reason: "expected entity_id<TAB>alias".into() });
        };
        let (id, alias) = (id.trim(), alias.trim());
        if id.is_empty() || normalize(alias).is_empty() {
            return Err(KbError::Malformed { source_name: "aliases", line, reason: "empty id or alias".into() });
        }
        out.push((line, id.into(), alias.to_string()));
    }
    Ok(out)
}

/// Loads a knowledge base from the facts and aliases text formats.
pub fn load_kb(facts_source: &str, aliases_source: &str) -> Result<KnowledgeBase, KbError> {
    let facts = parse_facts(facts_source)?;
    if facts.is_empty() {
        return Err(KbError::EmptySource("facts"));
    }
    let aliases = parse_aliases(aliases_source)?;
    if aliases.is_empty() {
        return Err(KbError::EmptySource("aliases"));
    }
    KnowledgeBase::from_numbered(facts, aliases)
}

impl KnowledgeBase {
    /// Builds a knowledge base from in-memory facts and `(entity, alias)` pairs.
    /// Entities are the subjects and entity-valued objects of the facts.
    pub fn new(
        facts: impl IntoIterator<Item = RawFact>,
        aliases: impl IntoIterator<Item = (EntityId, String)>,
    ) -> Result<Self, KbError> {
        let aliases = aliases.into_iter().enumerate().map(|(i, (id, a))| (i + 1, id, a)).collect();
        Self::from_numbered(facts.into_iter().collect(), aliases)
    }

    fn from_numbered(facts: Vec<RawFact>, aliases: Vec<(usize, EntityId, String)>) -> Result<Self, KbError> {
        let mut entities: BTreeMap<EntityId, Entity> = BTreeMap::new();
        for f in &facts {
            for id in std::iter::once(&f.subject).chain(match &f.object {
                ObjectRef::Entity(e) => Some(e),
                ObjectRef::Literal(_) => None,
            }) {
                entities.entry(id.clone()).or_insert_with(|| Entity { id: id.clone(), alias: None });
            }
        }
        for (line, id, alias) in aliases {
            let Some(entity) = entities.get_mut(&id) else {
                return Err(KbError::AliasForUnknownEntity { line, id });
            };
            if normalize(&alias).is_empty() {
                return Err(KbError::Malformed { source_name: "aliases", line, reason: "alias normalizes to nothing".into() });
            }
            // first alias wins
            entity.alias.get_or_insert(alias);
        }

        let mut resolved: Vec<Fact> = facts
            .into_iter()
            .map(|f| {
                let object_text = match &f.object {
                    ObjectRef::Literal(t) => t.clone(),
                    ObjectRef::Entity(e) => entities[e].alias.clone().unwrap_or_else(|| e.0.clone()),
                };
                Fact { subject: f.subject, relation: f.relation, object_text, object: f.object }
            })
            .collect();
        resolved.sort();
        resolved.dedup();
        Ok(Self::assemble(entities, resolved))
    }

    fn assemble(entities: BTreeMap<EntityId, Entity>, facts: Vec<Fact>) -> Self {
        let relations = facts.iter().map(|f| f.relation.clone()).collect();
        let mut by_subject: HashMap<EntityId, Range<usize>> = HashMap::new();
        for (i, f) in facts.iter().enumerate() {
            by_subject.entry(f.subject.clone()).and_modify(|r| r.end = i + 1).or_insert(i..i + 1);
        }
        Self { entities, facts, relations, by_subject }
    }

    /// Keeps only facts matching `keep`; entities no longer referenced by any
    /// remaining fact are dropped.
    pub fn filter_facts(&self, mut keep: impl FnMut(&Fact) -> bool) -> Self {
        let facts: Vec<Fact> = self.facts.iter().filter(|f| keep(f)).cloned().collect();
        let mut used = BTreeSet::new();
        for f in &facts {
            used.insert(&f.subject);
            if let ObjectRef::Entity(e) = &f.object {
                used.insert(e);
            }
        }
        let entities = self.entities.iter().filter(|(id, _)| used.contains(id)).map(|(k, v)| (k.clone(), v.clone())).collect();
        Self::assemble(entities, facts)
    }

    pub fn entity(&self, id: &EntityId) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    /// Outgoing facts of `id`, empty for unknown ids.
    pub fn facts_of(&self, id: &EntityId) -> &[Fact] {
        self.by_subject.get(id).map_or(&[][..], |r| &self.facts[r.clone()])
    }

    pub fn relation_vocab(&self) -> &BTreeSet<RelationId> {
        &self.relations
    }

    /// Distinct relations with at least one fact whose subject is `id`.
    pub fn relations_of(&self, id: &EntityId) -> Result<BTreeSet<RelationId>, KbError> {
        if !self.entities.contains_key(id) {
            return Err(KbError::UnknownEntity(id.clone()));
        }
        Ok(self.facts_of(id).iter().map(|f| f.relation.clone()).collect())
    }

    pub fn stats(&self) -> KbStats {
        KbStats { num_entities: self.entities.len(), num_facts: self.facts.len(), num_relations: self.relations.len() }
    }
}

/// One row of a SimpleQuestions-style annotated file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedQuestion {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: String,
    pub question: String,
}

/// Parses `subject<TAB>relation<TAB>object<TAB>question` lines.
pub fn parse_annotated_questions(src: &str) -> Result<Vec<AnnotatedQuestion>, KbError> {
    let mut out = Vec::new();
    for (line, text) in content_lines(src) {
        let fields: Vec<&str> = text.splitn(4, '\t').map(str::trim).collect();
        if fields.len() != 4 || fields.iter().any(|f| f.is_empty()) {
            return Err(KbError::Malformed {
                source_name: "questions",
                line,
                reason: "expected subject<TAB>relation<TAB>object<TAB>question".into(),
            });
        }
        out.push(AnnotatedQuestion {
            subject: fields[0].into(),
            relation: fields[1].into(),
            object: fields[2].to_string(),
            question: fields[3].to_string(),
        });
    }
    Ok(out)
}

pub fn format_annotated_question(q: &AnnotatedQuestion) -> String {
    format!("{}\t{}\t{}\t{}", q.subject, q.relation, q.object, q.question)
}
