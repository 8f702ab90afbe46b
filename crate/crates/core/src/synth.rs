//! Deterministic desk-scale knowledge bases and templated question sets with
//! gold entities, relations and E/C tags.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{format_classifier_line, LabeledQuestion};
use crate::kb::{format_annotated_question, AnnotatedQuestion, EntityId, RelationId};
use crate::tagger::{format_tagger_line, Tag, TagSequence, TaggedQuestion};
use crate::text::normalize;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("spec asks for {requested} questions but only {available} distinct ones exist")]
    Infeasible { requested: usize, available: usize },
    #[error("could not draw enough distinct aliases")]
    AliasSpaceExhausted,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

fn d_seed() -> u64 {
    1
}
fn d_entities() -> usize {
    200
}
fn d_relations() -> usize {
    12
}
fn d_alias_len() -> [usize; 2] {
    [1, 3]
}
fn d_templates() -> usize {
    3
}
fn d_questions() -> usize {
    2000
}
fn d_splits() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn d_noise() -> f64 {
    0.1
}
fn d_near_dup() -> f64 {
    0.1
}
fn d_rels_per_entity() -> [usize; 2] {
    [3, 6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_entities")]
    pub num_entities: usize,
    #[serde(default = "d_relations")]
    pub num_relations: usize,
    /// Inclusive token-count range of base aliases.
    #[serde(default = "d_alias_len")]
    pub alias_length_range: [usize; 2],
    #[serde(default = "d_templates")]
    pub templates_per_relation: usize,
    #[serde(default = "d_questions")]
    pub questions_count: usize,
    /// Train, validation and test shares.
    #[serde(default = "d_splits")]
    pub split_ratios: [f64; 3],
    /// Probability that a multi-token mention loses one token.
    #[serde(default = "d_noise")]
    pub noise_rate: f64,
    /// Share of entities whose alias is another alias plus " II".
    #[serde(default = "d_near_dup")]
    pub near_duplicate_fraction: f64,
    /// Inclusive range of relations attached to each entity.
    #[serde(default = "d_rels_per_entity")]
    pub relations_per_entity: [usize; 2],
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if (self.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|r| *r < 0.0) {
            return bad("split ratios must be non-negative and sum to 1".into());
        }
        if self.num_relations < 2 || self.num_relations > CATALOG.len() {
            return bad(format!("num_relations must be in 2..={}", CATALOG.len()));
        }
        if self.questions_count < 10 {
            return bad("questions_count must be at least 10".into());
        }
        if self.num_entities < 4 {
            return bad("num_entities must be at least 4".into());
        }
        let [lo, hi] = self.alias_length_range;
        if lo == 0 || lo > hi || hi > 6 {
            return bad("alias_length_range must satisfy 1 <= min <= max <= 6".into());
        }
        let max_templates = CATALOG.iter().map(|r| r.templates.len()).min().unwrap_or(0);
        if self.templates_per_relation == 0 || self.templates_per_relation > max_templates {
            return bad(format!("templates_per_relation must be in 1..={max_templates}"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise_rate must be in [0, 1]".into());
        }
        if !(0.0..=0.5).contains(&self.near_duplicate_fraction) {
            return bad("near_duplicate_fraction must be in [0, 0.5]".into());
        }
        let [rlo, rhi] = self.relations_per_entity;
        if rlo == 0 || rlo > rhi {
            return bad("relations_per_entity must satisfy 1 <= min <= max".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Person,
    Work,
}

#[derive(Debug, Clone, Copy)]
enum Value {
    Date,
    Year,
    Pick(&'static [&'static str]),
    Person,
    Height,
    Minutes,
}

struct RelationDef {
    id: &'static str,
    subject: Kind,
    value: Value,
    templates: &'static [&'static str],
}

const CITIES: &[&str] = &["Paris", "Lagos", "Osaka", "Lima", "Quebec", "Perth", "Bergen", "Porto", "Tucson", "Dakar", "Hanoi", "Cork"];
const PROFESSIONS: &[&str] = &["actor", "singer", "painter", "chemist", "pilot", "architect", "novelist", "surgeon", "dancer", "judge"];
const GENRES: &[&str] = &["comedy", "drama", "thriller", "western", "musical", "horror", "documentary", "fantasy", "romance"];
const COUNTRIES: &[&str] = &["France", "Nigeria", "Japan", "Peru", "Canada", "Australia", "Norway", "Portugal", "Senegal", "Vietnam"];
const LANGUAGES: &[&str] = &["French", "Yoruba", "Japanese", "Spanish", "Norwegian", "Portuguese", "Wolof", "Vietnamese", "Irish"];
const INSTRUMENTS: &[&str] = &["piano", "violin", "cello", "trumpet", "guitar", "flute", "drums", "harp", "oboe"];
const PUBLISHERS: &[&str] = &["Harbor Press", "Lantern Books", "Northfield", "Red Kite", "Aurora House", "Blue Mesa"];

const CATALOG: &[RelationDef] = &[
    RelationDef {
        id: "bornOn",
        subject: Kind::Person,
        value: Value::Date,
        templates: &["when was {e} born", "how old is {e}", "what is the birth date of {e}", "on what date was {e} born"],
    },
    RelationDef {
        id: "directedBy",
        subject: Kind::Work,
        value: Value::Person,
        templates: &["who directed {e}", "who was the director of {e}", "{e} was directed by whom", "which director made {e}"],
    },
    RelationDef {
        id: "birthPlace",
        subject: Kind::Person,
        value: Value::Pick(CITIES),
        templates: &["where was {e} born", "what is the birthplace of {e}", "in which city was {e} born", "what town is {e} from"],
    },
    RelationDef {
        id: "releaseYear",
        subject: Kind::Work,
        value: Value::Year,
        templates: &["when was {e} released", "what year did {e} come out", "in which year was {e} released", "what is the release year of {e}"],
    },
    RelationDef {
        id: "profession",
        subject: Kind::Person,
        value: Value::Pick(PROFESSIONS),
        templates: &["what does {e} do for a living", "what is the profession of {e}", "what job does {e} have", "what line of work is {e} in"],
    },
    RelationDef {
        id: "genre",
        subject: Kind::Work,
        value: Value::Pick(GENRES),
        templates: &["what genre is {e}", "what kind of film is {e}", "which genre does {e} belong to", "what type of story is {e}"],
    },
    RelationDef {
        id: "nationality",
        subject: Kind::Person,
        value: Value::Pick(COUNTRIES),
        templates: &["what is the nationality of {e}", "which country is {e} a citizen of", "what passport does {e} hold", "what nationality is {e}"],
    },
    RelationDef {
        id: "language",
        subject: Kind::Work,
        value: Value::Pick(LANGUAGES),
        templates: &["what language is {e} in", "in which language was {e} made", "what is the original language of {e}", "which language is spoken in {e}"],
    },
    RelationDef {
        id: "spouse",
        subject: Kind::Person,
        value: Value::Person,
        templates: &["who is {e} married to", "who is the spouse of {e}", "who did {e} marry", "whom is {e} wed to"],
    },
    RelationDef {
        id: "countryOfOrigin",
        subject: Kind::Work,
        value: Value::Pick(COUNTRIES),
        templates: &["which country produced {e}", "what is the country of origin of {e}", "in which country was {e} filmed", "where was {e} produced"],
    },
    RelationDef {
        id: "diedOn",
        subject: Kind::Person,
        value: Value::Date,
        templates: &["when did {e} die", "what is the date of death of {e}", "on what day did {e} pass away", "when was the death of {e}"],
    },
    RelationDef {
        id: "writtenBy",
        subject: Kind::Work,
        value: Value::Person,
        templates: &["who wrote {e}", "who is the author of {e}", "who was {e} written by", "which writer created {e}"],
    },
    RelationDef {
        id: "height",
        subject: Kind::Person,
        value: Value::Height,
        templates: &["how tall is {e}", "what is the height of {e}", "what height is {e}", "how many meters tall is {e}"],
    },
    RelationDef {
        id: "runtime",
        subject: Kind::Work,
        value: Value::Minutes,
        templates: &["how long is {e}", "what is the running time of {e}", "how many minutes is {e}", "what is the length of {e}"],
    },
    RelationDef {
        id: "instrument",
        subject: Kind::Person,
        value: Value::Pick(INSTRUMENTS),
        templates: &["what instrument does {e} play", "which instrument is {e} known for", "what does {e} play in the band", "what instrument is played by {e}"],
    },
    RelationDef {
        id: "publisher",
        subject: Kind::Work,
        value: Value::Pick(PUBLISHERS),
        templates: &["who published {e}", "which company published {e}", "who is the publisher of {e}", "what publisher released {e}"],
    },
];

const FIRST_NAMES: &[&str] = &[
    "sarah", "michelle", "james", "maria", "david", "anna", "peter", "lucia", "omar", "grace", "henry", "ines", "kofi",
    "mei", "paul", "rosa", "ivan", "nora", "samuel", "alice", "tomas", "leila", "victor", "helen", "amir", "clara",
    "felix", "jade", "oscar", "ruth", "hugo", "vera", "marco", "elena", "yusuf", "iris", "leon", "dora", "emil", "zara",
];
const LAST_NAMES: &[&str] = &[
    "gellar", "okafor", "tanaka", "silva", "novak", "brennan", "haddad", "lindqvist", "moreau", "castillo", "petrov",
    "nakamura", "oduya", "fischer", "rossi", "kowalski", "mensah", "duarte", "ibsen", "varga", "quinn", "achebe",
    "sato", "keller", "marsh", "delgado", "horvat", "abara", "lund", "ferreira", "kimura", "baptiste", "osei", "weber",
    "ricci", "sandoval", "eriksen", "mbeki", "korhonen", "adeyemi", "vance", "morrow", "holt", "carver", "bishop",
    "sterling", "ward", "frost", "blake", "monroe", "pryce", "lowell", "ashby", "crane", "dunmore", "ellery", "garland",
    "hollis", "kessler", "lyle",
];
// Title vocabulary deliberately shares words with the question templates.
const TITLE_ADJ: &[&str] = &[
    "old", "last", "silent", "red", "long", "hidden", "golden", "broken", "wild", "dark", "little", "lost", "first",
    "great", "quiet", "strange", "happy", "high",
];
const TITLE_NOUN: &[&str] = &[
    "house", "city", "river", "time", "day", "story", "night", "garden", "kingdom", "road", "song", "war", "island",
    "winter", "mountain", "dream", "family", "world", "country", "language", "author", "birth", "death", "work",
];

fn title_case(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) if w != "of" && w != "the" => f.to_uppercase().chain(c).collect(),
                Some(_) => w.to_string(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn person_alias(rng: &mut ChaCha8Rng, len: usize) -> String {
    let mut parts: Vec<&str> = (1..len).map(|_| *FIRST_NAMES.choose(rng).unwrap()).collect();
    parts.push(LAST_NAMES.choose(rng).unwrap());
    title_case(&parts.join(" "))
}

fn work_alias(rng: &mut ChaCha8Rng, len: usize) -> String {
    let adj = |rng: &mut ChaCha8Rng| *TITLE_ADJ.choose(rng).unwrap();
    let noun = |rng: &mut ChaCha8Rng| *TITLE_NOUN.choose(rng).unwrap();
    let mut parts: Vec<&str> = match len {
        1 => vec![noun(rng)],
        2 => vec![adj(rng), noun(rng)],
        3 if rng.gen_bool(0.5) => vec!["the", adj(rng), noun(rng)],
        3 => vec![noun(rng), "of", noun(rng)],
        _ => vec!["the", noun(rng), "of", noun(rng)],
    };
    while parts.len() < len {
        parts.insert(parts.len() - 1, adj(rng));
    }
    title_case(&parts.join(" "))
}

fn value(rng: &mut ChaCha8Rng, v: Value, persons: &[usize], subject: usize, ids: &[EntityId]) -> String {
    match v {
        Value::Date => format!("{}/{}/{}", rng.gen_range(1..=12), rng.gen_range(1..=28), rng.gen_range(1900..=2005)),
        Value::Year => rng.gen_range(1930..=2020).to_string(),
        Value::Pick(list) => list.choose(rng).unwrap().to_string(),
        Value::Height => format!("{:.2} m", rng.gen_range(1.50..2.05)),
        Value::Minutes => format!("{} minutes", rng.gen_range(70..=190)),
        Value::Person => {
            let others: Vec<usize> = persons.iter().copied().filter(|&p| p != subject).collect();
            format!("@{}", ids[*others.choose(rng).expect("at least two persons")])
        }
    }
}

/// One generated question with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedQuestion {
    pub annotated: AnnotatedQuestion,
    pub tagged: TaggedQuestion,
    /// Whether a token of the alias was dropped from the mention.
    pub noisy: bool,
}

impl GeneratedQuestion {
    /// Gold entity spans of the question.
    pub fn spans(&self) -> Vec<String> {
        self.tagged.spans()
    }

    pub fn labeled(&self) -> LabeledQuestion {
        LabeledQuestion { tokens: self.tagged.tokens.clone(), relation: self.annotated.relation.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: GeneratorSpec,
    pub num_entities: usize,
    pub num_facts: usize,
    pub num_relations: usize,
    pub relations: Vec<String>,
    pub near_duplicate_pairs: usize,
    pub noisy_questions: usize,
    pub splits: BTreeMap<String, usize>,
    /// Line count of every emitted file.
    pub files: BTreeMap<String, usize>,
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub facts: String,
    pub aliases: String,
    /// `(entity id, alias)` in id order.
    pub alias_table: Vec<(EntityId, String)>,
    /// Questions per split, in [`SPLITS`] order.
    pub splits: [Vec<GeneratedQuestion>; 3],
    pub manifest: Manifest,
}

impl GeneratedData {
    pub fn split(&self, name: &str) -> &[GeneratedQuestion] {
        let i = SPLITS.iter().position(|s| *s == name).expect("known split name");
        &self.splits[i]
    }

    /// File name → contents, for every emitted file except the manifest.
    pub fn files(&self) -> BTreeMap<String, String> {
        let mut files = BTreeMap::new();
        files.insert("facts.tsv".to_string(), self.facts.clone());
        files.insert("aliases.tsv".to_string(), self.aliases.clone());
        for (name, qs) in SPLITS.iter().zip(&self.splits) {
            let lines = |f: &dyn Fn(&GeneratedQuestion) -> String| qs.iter().map(|q| f(q) + "\n").collect::<String>();
            files.insert(format!("{name}.questions.tsv"), lines(&|q| format_annotated_question(&q.annotated)));
            files.insert(format!("{name}.tagger.tsv"), lines(&|q| format_tagger_line(&q.tagged)));
            files.insert(format!("{name}.classifier.tsv"), lines(&|q| format_classifier_line(&q.labeled())));
        }
        files
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("serializable") + "\n"
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SynthError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, text) in self.files() {
            let p = dir.join(name);
            fs::write(&p, text).map_err(io(&p))?;
        }
        let p = dir.join("manifest.json");
        fs::write(&p, self.manifest_json()).map_err(io(&p))
    }
}

pub fn load_spec(path: &Path) -> Result<GeneratorSpec, SynthError> {
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| SynthError::Json { path: path.to_path_buf(), source })
}

pub fn generate(spec: &GeneratorSpec) -> Result<GeneratedData, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let relations: Vec<&RelationDef> = CATALOG.iter().take(spec.num_relations).collect();
    let n = spec.num_entities;
    let width = n.to_string().len().max(4);
    let ids: Vec<EntityId> = (0..n).map(|i| EntityId::new(format!("e{:0width$}", i + 1))).collect();
    let kinds: Vec<Kind> = (0..n).map(|i| if i % 2 == 0 { Kind::Person } else { Kind::Work }).collect();
    let persons: Vec<usize> = (0..n).filter(|&i| kinds[i] == Kind::Person).collect();

    // aliases
    let [lo, hi] = spec.alias_length_range;
    let mut taken: HashSet<String> = HashSet::new();
    let mut aliases: Vec<String> = Vec::with_capacity(n);
    for &kind in &kinds {
        let mut found = None;
        for _ in 0..10_000 {
            let len = rng.gen_range(lo..=hi);
            let a = match kind {
                Kind::Person => person_alias(&mut rng, len),
                Kind::Work => work_alias(&mut rng, len),
            };
            if taken.insert(normalize(&a).join(" ")) {
                found = Some(a);
                break;
            }
        }
        aliases.push(found.ok_or(SynthError::AliasSpaceExhausted)?);
    }
    let dup_count = (spec.near_duplicate_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (dups, bases) = order.split_at(dup_count.min(n / 2));
    let mut near_duplicate_pairs = 0;
    for (&d, &b) in dups.iter().zip(bases) {
        let candidate = format!("{} II", aliases[b]);
        if taken.insert(normalize(&candidate).join(" ")) {
            taken.remove(&normalize(&aliases[d]).join(" "));
            aliases[d] = candidate;
            near_duplicate_pairs += 1;
        }
    }

    // facts
    let mut facts: Vec<(usize, &RelationDef, String)> = Vec::new();
    let [rlo, rhi] = spec.relations_per_entity;
    for i in 0..n {
        let mut applicable: Vec<&RelationDef> = relations.iter().copied().filter(|r| r.subject == kinds[i]).collect();
        applicable.shuffle(&mut rng);
        let want = rng.gen_range(rlo..=rhi).min(applicable.len());
        let mut chosen: Vec<&RelationDef> = applicable.into_iter().take(want.max(1)).collect();
        chosen.sort_by_key(|r| r.id);
        for r in chosen {
            let v = value(&mut rng, r.value, &persons, i, &ids);
            facts.push((i, r, v));
        }
    }
    let alias_of: BTreeMap<&str, &str> = ids.iter().map(|i| i.as_str()).zip(aliases.iter().map(String::as_str)).collect();
    let display = |v: &str| v.strip_prefix('@').map_or_else(|| v.to_string(), |id| alias_of[id].to_string());

    // questions
    let mut combos: Vec<(usize, usize)> =
        (0..facts.len()).flat_map(|f| (0..spec.templates_per_relation).map(move |t| (f, t))).collect();
    if combos.len() < spec.questions_count {
        return Err(SynthError::Infeasible { requested: spec.questions_count, available: combos.len() });
    }
    combos.shuffle(&mut rng);
    let mut seen: HashSet<String> = HashSet::new();
    let mut questions: Vec<GeneratedQuestion> = Vec::with_capacity(spec.questions_count);
    for (f, t) in combos {
        if questions.len() == spec.questions_count {
            break;
        }
        let (subject, rel, obj) = &facts[f];
        let template = rel.templates[t];
        let (pre, post) = template.split_once("{e}").expect("template has a slot");
        let mut mention: Vec<String> = aliases[*subject].split(' ').map(str::to_string).collect();
        let noisy = mention.len() >= 2 && rng.gen_bool(spec.noise_rate);
        if noisy {
            let drop = rng.gen_range(0..mention.len());
            mention.remove(drop);
        }
        if rng.gen_bool(0.5) {
            mention.iter_mut().for_each(|w| *w = w.to_lowercase());
        }
        let mut text = format!("{pre}{}{post}", mention.join(" "));
        if rng.gen_bool(0.3) {
            let mut c = text.chars();
            text = c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default();
        }
        if rng.gen_bool(0.5) {
            text.push('?');
        }
        let (pre_toks, men_toks, post_toks) = (normalize(pre), normalize(&mention.join(" ")), normalize(post));
        let tags: Vec<Tag> = std::iter::repeat_n(Tag::C, pre_toks.len())
            .chain(std::iter::repeat_n(Tag::E, men_toks.len()))
            .chain(std::iter::repeat_n(Tag::C, post_toks.len()))
            .collect();
        let tagged = TaggedQuestion::new(&text, TagSequence(tags)).expect("tags align with normalized tokens");
        if !seen.insert(tagged.tokens.join(" ")) {
            continue;
        }
        let annotated = AnnotatedQuestion {
            subject: ids[*subject].clone(),
            relation: RelationId::new(rel.id),
            object: display(obj),
            question: text,
        };
        questions.push(GeneratedQuestion { annotated, tagged, noisy });
    }
    if questions.len() < spec.questions_count {
        return Err(SynthError::Infeasible { requested: spec.questions_count, available: questions.len() });
    }

    let total = questions.len();
    let n_train = (spec.split_ratios[0] * total as f64).round() as usize;
    let n_valid = ((spec.split_ratios[1] * total as f64).round() as usize).min(total - n_train);
    let test = questions.split_off(n_train + n_valid);
    let valid = questions.split_off(n_train);
    let splits = [questions, valid, test];

    let facts_text: String = facts.iter().map(|(s, r, v)| format!("{}\t{}\t{}\n", ids[*s], r.id, v)).collect();
    let alias_table: Vec<(EntityId, String)> = ids.iter().cloned().zip(aliases.iter().cloned()).collect();
    let aliases_text: String = alias_table.iter().map(|(id, a)| format!("{id}\t{a}\n")).collect();
    let used_relations: BTreeSet<&str> = facts.iter().map(|(_, r, _)| r.id).collect();

    let mut data = GeneratedData {
        facts: facts_text,
        aliases: aliases_text,
        alias_table,
        splits,
        manifest: Manifest {
            seed: spec.seed,
            spec: spec.clone(),
            num_entities: n,
            num_facts: facts.len(),
            num_relations: used_relations.len(),
            relations: used_relations.iter().map(|r| r.to_string()).collect(),
            near_duplicate_pairs,
            noisy_questions: 0,
            splits: BTreeMap::new(),
            files: BTreeMap::new(),
        },
    };
    data.manifest.noisy_questions = data.splits.iter().flatten().filter(|q| q.noisy).count();
    data.manifest.splits = SPLITS.iter().zip(&data.splits).map(|(s, q)| (s.to_string(), q.len())).collect();
    data.manifest.files = data.files().into_iter().map(|(k, v)| (k, v.lines().count())).collect();
    Ok(data)
}
