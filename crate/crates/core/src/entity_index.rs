//! Inverted index from alias n-grams (n = 1, 2, 3 and the exact text) to
//! TF-IDF scored entity postings.
//!
//! Scoring: for an n-gram key `g` and alias `a`,
//! `TF(g, a)` is the number of occurrences of `g` among the n-grams of `a` of
//! the same order divided by the number of such n-grams (1 for exact keys),
//! and `IDF(g) = ln(1 + aliasCount / df(g))` where `df` counts aliases
//! containing `g`. Stored scores are rounded to 12 significant digits so the
//! text dump reloads bit-identically.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::kb::{EntityId, KnowledgeBase};
use crate::text::{ngrams, normalize};

pub const ENTITY_INDEX_HEADER: &str = "FOQA-EIDX v1";

/// Largest finite n-gram order indexed.
pub const MAX_GRAM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyKind {
    Gram(u8),
    Exact,
}

impl KeyKind {
    /// Label used in dumps and audit trails: `1`, `2`, `3` or `inf`.
    pub fn tag(self) -> String {
        match self {
            KeyKind::Gram(n) => n.to_string(),
            KeyKind::Exact => "inf".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NGramKey {
    pub kind: KeyKind,
    /// Normalized tokens joined by single spaces.
    pub text: String,
}

impl NGramKey {
    pub fn exact<S: AsRef<str>>(tokens: &[S]) -> Self {
        Self { kind: KeyKind::Exact, text: join(tokens) }
    }

    /// `None` unless `tokens` has between 1 and 3 elements.
    pub fn gram<S: AsRef<str>>(tokens: &[S]) -> Option<Self> {
        (1..=MAX_GRAM).contains(&tokens.len()).then(|| Self { kind: KeyKind::Gram(tokens.len() as u8), text: join(tokens) })
    }

    /// Key of order `n` over already-joined text. Panics if `n` is outside 1..=3.
    pub fn gram_text(n: usize, text: impl Into<String>) -> Self {
        assert!((1..=MAX_GRAM).contains(&n), "n-gram order {n} out of range");
        Self { kind: KeyKind::Gram(n as u8), text: text.into() }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.text.split(' ')
    }
}

impl fmt::Display for NGramKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:\"{}\"", self.kind.tag(), self.text)
    }
}

fn join<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posting {
    pub node: EntityId,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub alias_count: usize,
    pub doc_frequency: HashMap<NGramKey, usize>,
}

impl CorpusStats {
    pub fn df(&self, key: &NGramKey) -> usize {
        self.doc_frequency.get(key).copied().unwrap_or(0)
    }

    pub fn idf(&self, key: &NGramKey) -> Option<f64> {
        let df = self.df(key);
        (df > 0).then(|| (1.0 + self.alias_count as f64 / df as f64).ln())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("key {key} does not occur in alias \"{alias}\"")]
    KeyNotInAlias { key: String, alias: String },
    #[error("key {0} has no document frequency in the corpus")]
    UnknownKey(String),
    #[error("expected header `{expected}`, found `{found}`")]
    VersionMismatch { expected: &'static str, found: String },
    #[error("index dump line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Every key an alias contributes, with its occurrence count, plus the number
/// of n-grams of each order in the alias.
fn alias_keys(tokens: &[String]) -> (BTreeMap<NGramKey, usize>, [usize; MAX_GRAM + 1]) {
    let mut keys = BTreeMap::new();
    let mut totals = [0usize; MAX_GRAM + 1];
    for n in 1..=MAX_GRAM.min(tokens.len()) {
        for g in ngrams(tokens, n) {
            *keys.entry(NGramKey::gram_text(n, g)).or_insert(0) += 1;
            totals[n] += 1;
        }
    }
    keys.insert(NGramKey::exact(tokens), 1);
    (keys, totals)
}

/// TF-IDF weight of `key` with respect to the normalized `alias` tokens.
pub fn tf_idf(key: &NGramKey, alias: &[String], stats: &CorpusStats) -> Result<f64, IndexError> {
    let not_in_alias = || IndexError::KeyNotInAlias { key: key.to_string(), alias: alias.join(" ") };
    let tf = match key.kind {
        KeyKind::Exact => {
            if key.text != alias.join(" ") {
                return Err(not_in_alias());
            }
            1.0
        }
        KeyKind::Gram(n) => {
            let n = n as usize;
            let total = alias.len().saturating_sub(n - 1);
            let count = ngrams(alias, n).filter(|g| *g == key.text).count();
            if count == 0 {
                return Err(not_in_alias());
            }
            count as f64 / total as f64
        }
    };
    let idf = stats.idf(key).ok_or_else(|| IndexError::UnknownKey(key.to_string()))?;
    Ok(tf * idf)
}

fn quantize(x: f64) -> f64 {
    format!("{x:.11e}").parse().expect("formatted float parses")
}

/// The built index. Immutable; lookups are read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityIndex {
    postings: HashMap<NGramKey, Vec<Posting>>,
    stats: CorpusStats,
    skipped: usize,
}

impl EntityIndex {
    /// Indexes every entity alias of `kb`. Entities without a usable alias are
    /// skipped and counted in [`EntityIndex::skipped`].
    pub fn build(kb: &KnowledgeBase) -> Self {
        Self::from_aliases(kb.entities().map(|e| (e.id.clone(), e.alias.as_deref().unwrap_or(""))))
    }

    pub fn from_aliases<'a>(aliases: impl IntoIterator<Item = (EntityId, &'a str)>) -> Self {
        let mut skipped = 0;
        let mut docs = Vec::new();
        for (id, alias) in aliases {
            let tokens = normalize(alias);
            if tokens.is_empty() {
                skipped += 1;
                continue;
            }
            let (keys, totals) = alias_keys(&tokens);
            docs.push((id, keys, totals));
        }

        let mut stats = CorpusStats { alias_count: docs.len(), doc_frequency: HashMap::new() };
        for (_, keys, _) in &docs {
            for key in keys.keys() {
                *stats.doc_frequency.entry(key.clone()).or_insert(0) += 1;
            }
        }

        let mut postings: HashMap<NGramKey, Vec<Posting>> = HashMap::new();
        for (id, keys, totals) in docs {
            for (key, count) in keys {
                let tf = match key.kind {
                    KeyKind::Exact => 1.0,
                    KeyKind::Gram(n) => count as f64 / totals[n as usize] as f64,
                };
                let score = quantize(tf * stats.idf(&key).expect("key counted in df"));
                postings.entry(key).or_default().push(Posting { node: id.clone(), score });
            }
        }
        for list in postings.values_mut() {
            sort_postings(list);
        }
        Self { postings, stats, skipped }
    }

    /// Postings for `key`, score-descending; empty when the key is absent.
    pub fn lookup(&self, key: &NGramKey) -> &[Posting] {
        self.postings.get(key).map_or(&[][..], Vec::as_slice)
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn key_count(&self) -> usize {
        self.postings.len()
    }

    pub fn keys(&self) -> impl Iterator<Item = &NGramKey> {
        self.postings.keys()
    }

    /// Deterministic text dump: header, corpus line, then one line per key in
    /// key order: `kind<TAB>text<TAB>df(<TAB>entity<TAB>score)*`.
    pub fn dump(&self) -> String {
        let mut keys: Vec<&NGramKey> = self.postings.keys().collect();
        keys.sort();
        let mut out = String::new();
        out.push_str(ENTITY_INDEX_HEADER);
        out.push('\n');
        out.push_str(&format!("aliases\t{}\tskipped\t{}\n", self.stats.alias_count, self.skipped));
        for key in keys {
            out.push_str(&format!("{}\t{}\t{}", key.kind.tag(), key.text, self.stats.df(key)));
            for p in &self.postings[key] {
                out.push_str(&format!("\t{}\t{:.11e}", p.node, p.score));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(src: &str) -> Result<Self, IndexError> {
        let mut lines = src.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or("");
        if header != ENTITY_INDEX_HEADER {
            return Err(IndexError::VersionMismatch { expected: ENTITY_INDEX_HEADER, found: header.to_string() });
        }
        let malformed = |line: usize, reason: &str| IndexError::Malformed { line: line + 1, reason: reason.to_string() };
        let (i, corpus) = lines.next().ok_or_else(|| malformed(1, "missing corpus line"))?;
        let fields: Vec<&str> = corpus.split('\t').collect();
        let (alias_count, skipped) = match fields.as_slice() {
            ["aliases", a, "skipped", s] => (
                a.parse().map_err(|_| malformed(i, "bad alias count"))?,
                s.parse().map_err(|_| malformed(i, "bad skipped count"))?,
            ),
            _ => return Err(malformed(i, "bad corpus line")),
        };
        let mut stats = CorpusStats { alias_count, doc_frequency: HashMap::new() };
        let mut postings = HashMap::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 5 || !(fields.len() - 3).is_multiple_of(2) {
                return Err(malformed(i, "wrong field count"));
            }
            let kind = match fields[0] {
                "inf" => KeyKind::Exact,
                n => match n.parse::<u8>() {
                    Ok(n) if (1..=MAX_GRAM as u8).contains(&n) => KeyKind::Gram(n),
                    _ => return Err(malformed(i, "bad key kind")),
                },
            };
            let key = NGramKey { kind, text: fields[1].to_string() };
            let df: usize = fields[2].parse().map_err(|_| malformed(i, "bad df"))?;
            let list = fields[3..]
                .chunks(2)
                .map(|c| {
                    let score: f64 = c[1].parse().map_err(|_| malformed(i, "bad score"))?;
                    if !(score > 0.0 && score.is_finite()) {
                        return Err(malformed(i, "score must be positive"));
                    }
                    Ok(Posting { node: c[0].into(), score })
                })
                .collect::<Result<Vec<_>, _>>()?;
            stats.doc_frequency.insert(key.clone(), df);
            if postings.insert(key, list).is_some() {
                return Err(malformed(i, "duplicate key"));
            }
        }
        Ok(Self { postings, stats, skipped })
    }
}

pub(crate) fn sort_postings(list: &mut [Posting]) {
    list.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.node.cmp(&b.node)));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(aliases: &[(&str, &str)]) -> EntityIndex {
        EntityIndex::from_aliases(aliases.iter().map(|(id, a)| (EntityId::from(*id), *a)))
    }

    fn toks(s: &str) -> Vec<String> {
        normalize(s)
    }

    #[test]
    fn three_token_alias_key_counts() {
        let idx = index(&[("ei", "Sarah Michelle Gellar")]);
        let count = |kind: KeyKind| idx.keys().filter(|k| k.kind == kind).count();
        assert_eq!(count(KeyKind::Gram(1)), 3);
        assert_eq!(count(KeyKind::Gram(2)), 2);
        assert_eq!(count(KeyKind::Gram(3)), 1);
        assert_eq!(count(KeyKind::Exact), 1);
        assert_eq!(idx.lookup(&NGramKey::gram_text(2, "michelle gellar")).len(), 1);
        assert_eq!(idx.lookup(&NGramKey::gram_text(2, "sarah michelle")).len(), 1);
    }

    #[test]
    fn single_token_alias() {
        let idx = index(&[("e", "Gellar")]);
        assert_eq!(idx.key_count(), 2);
        assert_eq!(idx.lookup(&NGramKey::gram_text(1, "gellar")).len(), 1);
        assert_eq!(idx.lookup(&NGramKey::exact(&["gellar"])).len(), 1);
    }

    #[test]
    fn shared_unigram_links_both() {
        let idx = index(&[("ei", "Sarah Michelle Gellar"), ("ej", "Sarah Jessica Parker")]);
        let hits: Vec<_> = idx.lookup(&NGramKey::gram_text(1, "sarah")).iter().map(|p| p.node.0.clone()).collect();
        assert_eq!(hits, vec!["ei", "ej"]);
        assert!(idx.lookup(&NGramKey::gram_text(1, "zzz")).is_empty());
    }

    #[test]
    fn tf_idf_hand_values() {
        let idx = index(&[("e", "a b")]);
        let a = toks("a b");
        let s = tf_idf(&NGramKey::gram_text(1, "a"), &a, idx.stats()).unwrap();
        assert!((s - 2f64.ln() / 2.0).abs() < 1e-15);
        assert!((s - 0.3466).abs() < 1e-4);
        let s = tf_idf(&NGramKey::exact(&a), &a, idx.stats()).unwrap();
        assert!((s - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn idf_when_key_in_every_alias() {
        let aliases: Vec<(String, String)> = (0..10).map(|i| (format!("e{i}"), format!("common w{i}"))).collect();
        let idx = EntityIndex::from_aliases(aliases.iter().map(|(i, a)| (EntityId::from(i.as_str()), a.as_str())));
        assert_eq!(idx.stats().idf(&NGramKey::gram_text(1, "common")), Some(2f64.ln()));
    }

    #[test]
    fn repeated_ngram_folds_into_tf() {
        let idx = index(&[("e", "new new york"), ("f", "york")]);
        let list = idx.lookup(&NGramKey::gram_text(1, "new"));
        assert_eq!(list.len(), 1);
        let expected = (2.0 / 3.0) * (1.0f64 + 2.0).ln();
        assert!((list[0].score - expected).abs() < 1e-11);
    }

    #[test]
    fn tf_idf_errors() {
        let idx = index(&[("e", "a b")]);
        let a = toks("a b");
        assert!(matches!(tf_idf(&NGramKey::gram_text(1, "c"), &a, idx.stats()), Err(IndexError::KeyNotInAlias { .. })));
        assert!(matches!(tf_idf(&NGramKey::exact(&["a"]), &a, idx.stats()), Err(IndexError::KeyNotInAlias { .. })));
    }

    #[test]
    fn monotone_idf() {
        let idx = index(&[("1", "x y"), ("2", "x z"), ("3", "q")]);
        let x = idx.stats().idf(&NGramKey::gram_text(1, "x")).unwrap();
        let y = idx.stats().idf(&NGramKey::gram_text(1, "y")).unwrap();
        assert!(y > x);
    }

    #[test]
    fn skipped_aliases_are_counted() {
        let idx = index(&[("1", "ok"), ("2", "?!"), ("3", "")]);
        assert_eq!(idx.skipped(), 2);
        assert_eq!(idx.stats().alias_count, 1);
    }

    #[test]
    fn dump_round_trip_is_exact() {
        let idx = index(&[("ei", "Sarah Michelle Gellar"), ("ej", "Sarah Jessica Parker"), ("ek", "Gellar")]);
        let dump = idx.dump();
        assert!(dump.starts_with("FOQA-EIDX v1\naliases\t3\tskipped\t0\n1\tgellar\t2\t"));
        let back = EntityIndex::parse(&dump).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.dump(), dump);
    }

    #[test]
    fn parse_rejects_wrong_version() {
        let err = EntityIndex::parse("FOQA-EIDX v2\n").unwrap_err();
        assert!(matches!(err, IndexError::VersionMismatch { .. }));
        let err = EntityIndex::parse("FOQA-EIDX v1\naliases\t1\tskipped\t0\n1\tx\t1\te\n").unwrap_err();
        assert!(matches!(err, IndexError::Malformed { line: 3, .. }));
    }
}
