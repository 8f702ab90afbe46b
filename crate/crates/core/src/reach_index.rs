//! One-hop reachability index: entity → reachable nodes annotated with the
//! relation path that reaches them.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::kb::{EntityId, KnowledgeBase, ObjectRef, RelationId};

pub const REACH_INDEX_HEADER: &str = "FOQA-RIDX v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachEntry {
    pub node: ObjectRef,
    pub text: String,
    /// Always a single relation here; kept as a sequence so longer paths fit
    /// the same shape.
    pub path: Vec<RelationId>,
}

impl ReachEntry {
    fn sort_key(&self) -> (&RelationId, &str, &ObjectRef) {
        (&self.path[0], &self.text, &self.node)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReachError {
    #[error("expected header `{expected}`, found `{found}`")]
    VersionMismatch { expected: &'static str, found: String },
    #[error("reach dump line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReachIndex {
    entries: HashMap<EntityId, Vec<ReachEntry>>,
}

impl ReachIndex {
    /// One entry per fact, keyed by the fact's subject.
    pub fn build(kb: &KnowledgeBase) -> Self {
        let mut entries: HashMap<EntityId, Vec<ReachEntry>> = HashMap::new();
        for f in kb.facts() {
            entries.entry(f.subject.clone()).or_default().push(ReachEntry {
                node: f.object.clone(),
                text: f.object_text.clone(),
                path: vec![f.relation.clone()],
            });
        }
        for list in entries.values_mut() {
            list.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        }
        Self { entries }
    }

    /// All one-hop entries from `e`, ordered by (relation, object text).
    pub fn entries(&self, e: &EntityId) -> &[ReachEntry] {
        self.entries.get(e).map_or(&[][..], Vec::as_slice)
    }

    /// Entries of `e` whose path contains `r`.
    pub fn reachable_via<'a>(&'a self, e: &EntityId, r: &'a RelationId) -> impl Iterator<Item = &'a ReachEntry> + 'a {
        self.entries(e).iter().filter(move |entry| entry.path.contains(r))
    }

    pub fn relations_of(&self, e: &EntityId) -> BTreeSet<&RelationId> {
        self.entries(e).iter().flat_map(|entry| entry.path.iter()).collect()
    }

    pub fn total_entries(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// `subject<TAB>relation<TAB>E|L<TAB>entity id or empty<TAB>text`, subjects
    /// in id order, entries in index order.
    pub fn dump(&self) -> String {
        let ordered: BTreeMap<&EntityId, &Vec<ReachEntry>> = self.entries.iter().collect();
        let mut out = String::new();
        out.push_str(REACH_INDEX_HEADER);
        out.push('\n');
        for (subject, list) in ordered {
            for entry in list {
                let (kind, id) = match &entry.node {
                    ObjectRef::Entity(e) => ("E", e.as_str()),
                    ObjectRef::Literal(_) => ("L", ""),
                };
                let path: Vec<&str> = entry.path.iter().map(RelationId::as_str).collect();
                out.push_str(&format!("{subject}\t{}\t{kind}\t{id}\t{}\n", path.join(" "), entry.text));
            }
        }
        out
    }

    pub fn parse(src: &str) -> Result<Self, ReachError> {
        let mut lines = src.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or("");
        if header != REACH_INDEX_HEADER {
            return Err(ReachError::VersionMismatch { expected: REACH_INDEX_HEADER, found: header.to_string() });
        }
        let mut entries: HashMap<EntityId, Vec<ReachEntry>> = HashMap::new();
        for (i, line) in lines {
            let malformed = |reason: &str| ReachError::Malformed { line: i + 1, reason: reason.to_string() };
            let fields: Vec<&str> = line.splitn(5, '\t').collect();
            let [subject, path, kind, id, text] = fields.as_slice() else {
                return Err(malformed("expected 5 fields"));
            };
            let node = match *kind {
                "E" if !id.is_empty() => ObjectRef::Entity((*id).into()),
                "L" if id.is_empty() => ObjectRef::Literal(text.to_string()),
                _ => return Err(malformed("bad node kind")),
            };
            let path: Vec<RelationId> = path.split(' ').filter(|s| !s.is_empty()).map(RelationId::from).collect();
            if path.is_empty() {
                return Err(malformed("empty path"));
            }
            entries.entry((*subject).into()).or_default().push(ReachEntry { node, text: text.to_string(), path });
        }
        Ok(Self { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::load_kb;

    fn example_kb() -> KnowledgeBase {
        load_kb(
            "ei\tactedIn\t@ei1\nei\tbornOn\t4/14/1977\nei\tmarriedTo\tF. Prinze\nei1\treleased\t2004\n",
            "ei\tSarah Michelle Gellar\nei1\tThe Grudge\n",
        )
        .unwrap()
    }

    #[test]
    fn example_entries() {
        let idx = ReachIndex::build(&example_kb());
        let got: Vec<(String, String)> =
            idx.entries(&"ei".into()).iter().map(|e| (e.path[0].0.clone(), e.text.clone())).collect();
        assert_eq!(
            got,
            vec![
                ("actedIn".into(), "The Grudge".into()),
                ("bornOn".into(), "4/14/1977".into()),
                ("marriedTo".into(), "F. Prinze".into())
            ]
        );
        assert_eq!(idx.entries(&"ei".into())[0].node, ObjectRef::Entity("ei1".into()));
        assert_eq!(idx.total_entries(), 4);
    }

    #[test]
    fn reachable_via_relation() {
        let idx = ReachIndex::build(&example_kb());
        let born = RelationId::from("bornOn");
        let hits: Vec<_> = idx.reachable_via(&"ei".into(), &born).collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].text, "4/14/1977");
        let unknown = RelationId::from("unknownRelation");
        assert_eq!(idx.reachable_via(&"ei".into(), &unknown).count(), 0);
        assert!(idx.entries(&"nobody".into()).is_empty());
    }

    #[test]
    fn dump_round_trip() {
        let idx = ReachIndex::build(&example_kb());
        let dump = idx.dump();
        assert!(dump.starts_with("FOQA-RIDX v1\nei\tactedIn\tE\tei1\tThe Grudge\n"));
        let back = ReachIndex::parse(&dump).unwrap();
        assert_eq!(back, idx);
        assert!(matches!(ReachIndex::parse("FOQA-RIDX v0\n"), Err(ReachError::VersionMismatch { .. })));
        assert!(matches!(ReachIndex::parse("FOQA-RIDX v1\na\tb\tX\t\tt\n"), Err(ReachError::Malformed { line: 2, .. })));
    }
}
