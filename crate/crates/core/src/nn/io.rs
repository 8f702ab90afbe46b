//! Plain-text model files.
//!
//! ```text
//! FOQA-MODEL v1
//! task <name>
//! mode per-token|final-state
//! classes <k>
//! trainable_embedding <bool>
//! oov_seed <u64>
//! layers <n>
//! layer <gru|lstm> <hidden> <bi|uni> <dropout>      (n times)
//! meta <key> <value>                                (any number)
//! labels <k>
//! <label>                                           (k times)
//! vocab <rows> <dim>
//! <word> <v1> ... <vdim>                            (rows times, pad first)
//! block <name> <v1> ... <vlen>                      (once per parameter block)
//! end
//! ```
//! Floats carry 17 significant digits, so a reload is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::embedding::EmbeddingTable;
use super::model::{CellKind, OutputMode, RecurrentLayerSpec, SequenceModel};
use super::NnError;

pub const MODEL_HEADER: &str = "FOQA-MODEL v1";

/// Task-level information stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelHeader {
    pub task: String,
    pub labels: Vec<String>,
    pub meta: BTreeMap<String, String>,
}

fn join(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v:.16e}").unwrap();
    }
    s
}

pub fn write_model(model: &SequenceModel, header: &ModelHeader) -> String {
    let mut out = String::new();
    let mode = match model.mode() {
        OutputMode::PerToken => "per-token",
        OutputMode::FinalState => "final-state",
    };
    let emb = model.embedding();
    writeln!(out, "{MODEL_HEADER}").unwrap();
    writeln!(out, "task {}", header.task).unwrap();
    writeln!(out, "mode {mode}").unwrap();
    writeln!(out, "classes {}", model.output_dim()).unwrap();
    writeln!(out, "trainable_embedding {}", model.trainable_embedding()).unwrap();
    writeln!(out, "oov_seed {}", emb.oov_seed()).unwrap();
    writeln!(out, "layers {}", model.layers().len()).unwrap();
    for l in model.layers() {
        let dir = if l.bidirectional { "bi" } else { "uni" };
        writeln!(out, "layer {} {} {dir} {:e}", l.cell.name(), l.hidden_size, l.dropout).unwrap();
    }
    for (k, v) in &header.meta {
        writeln!(out, "meta {k} {v}").unwrap();
    }
    writeln!(out, "labels {}", header.labels.len()).unwrap();
    for label in &header.labels {
        writeln!(out, "{label}").unwrap();
    }
    writeln!(out, "vocab {} {}", emb.len(), emb.dim()).unwrap();
    for (i, w) in emb.words().iter().enumerate() {
        writeln!(out, "{w} {}", join(emb.row(i))).unwrap();
    }
    for b in model.blocks() {
        writeln!(out, "block {} {}", b.name, join(&model.params()[b.range()])).unwrap();
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str, NnError> {
        let (i, l) = self.inner.next().ok_or_else(|| NnError::Format { line: self.line + 1, reason: "unexpected end of file".into() })?;
        self.line = i + 1;
        Ok(l)
    }

    fn err(&self, reason: impl Into<String>) -> NnError {
        NnError::Format { line: self.line, reason: reason.into() }
    }

    /// Reads `<key> <rest>` and returns `rest`.
    fn field(&mut self, key: &str) -> Result<&'a str, NnError> {
        let l = self.next()?;
        match l.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            _ => Err(self.err(format!("expected `{key}` line"))),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, NnError> {
        let raw = self.field(key)?;
        raw.trim().parse().map_err(|_| self.err(format!("bad value for `{key}`")))
    }

    fn floats(&self, raw: &str, expected: usize) -> Result<Vec<f64>, NnError> {
        let v: Vec<f64> = raw.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| self.err("bad number"))?;
        if v.len() != expected {
            return Err(self.err(format!("expected {expected} values, found {}", v.len())));
        }
        Ok(v)
    }
}

pub fn read_model(src: &str) -> Result<(SequenceModel, ModelHeader), NnError> {
    let mut lines = Lines { inner: src.lines().enumerate(), line: 0 };
    let first = lines.next()?;
    if first != MODEL_HEADER {
        return Err(NnError::VersionMismatch { expected: MODEL_HEADER.into(), found: first.into() });
    }
    let task = lines.field("task")?.to_string();
    let mode = match lines.field("mode")? {
        "per-token" => OutputMode::PerToken,
        "final-state" => OutputMode::FinalState,
        _ => return Err(lines.err("unknown output mode")),
    };
    let classes: usize = lines.parsed("classes")?;
    let trainable: bool = lines.parsed("trainable_embedding")?;
    let oov_seed: u64 = lines.parsed("oov_seed")?;
    let n_layers: usize = lines.parsed("layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let raw = lines.field("layer")?;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        let [cell, hidden, dir, dropout] = parts[..] else { return Err(lines.err("layer needs 4 fields")) };
        let cell = CellKind::parse(cell).ok_or_else(|| lines.err("unknown cell kind"))?;
        let hidden_size = hidden.parse().map_err(|_| lines.err("bad hidden size"))?;
        let bidirectional = match dir {
            "bi" => true,
            "uni" => false,
            _ => return Err(lines.err("direction must be bi or uni")),
        };
        let dropout = dropout.parse().map_err(|_| lines.err("bad dropout"))?;
        layers.push(RecurrentLayerSpec { cell, hidden_size, bidirectional, dropout });
    }
    let mut meta = BTreeMap::new();
    let labels_line = loop {
        let l = lines.next()?;
        match l.split_once(' ') {
            Some(("meta", kv)) => {
                let (k, v) = kv.split_once(' ').ok_or_else(|| lines.err("meta needs key and value"))?;
                meta.insert(k.to_string(), v.to_string());
            }
            Some(("labels", n)) => break n,
            _ => return Err(lines.err("expected `meta` or `labels` line")),
        }
    };
    let n_labels: usize = labels_line.trim().parse().map_err(|_| lines.err("bad label count"))?;
    let labels = (0..n_labels).map(|_| lines.next().map(str::to_string)).collect::<Result<Vec<_>, _>>()?;

    let raw = lines.field("vocab")?;
    let dims: Vec<usize> = raw.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| lines.err("bad vocab header"))?;
    let [rows, dim] = dims[..] else { return Err(lines.err("vocab needs rows and dim")) };
    let mut words = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let l = lines.next()?;
        let (w, rest) = l.split_once(' ').ok_or_else(|| lines.err("vocab row"))?;
        words.push(w.to_string());
        data.extend(lines.floats(rest, dim)?);
    }
    let embedding = EmbeddingTable::from_rows(words, dim, data, oov_seed)?;
    let mut model = SequenceModel::with_zero_params(embedding, trainable, layers, classes, mode)?;
    let mut params = Vec::with_capacity(model.params().len());
    for block in model.blocks().to_vec() {
        let raw = lines.field("block")?;
        let (name, rest) = raw.split_once(' ').unwrap_or((raw, ""));
        if name != block.name {
            return Err(lines.err(format!("expected block {}, found {name}", block.name)));
        }
        params.extend(lines.floats(rest, block.len())?);
    }
    if lines.next()? != "end" {
        return Err(lines.err("expected `end`"));
    }
    model.replace_parts(params)?;
    Ok((model, ModelHeader { task, labels, meta }))
}
