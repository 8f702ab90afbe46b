//! Training configurations, grid expansion and the epoch loop with
//! validation-based model selection.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use super::embedding::EmbeddingTable;
use super::model::{CellKind, Example, OutputMode, RecurrentLayerSpec, SequenceModel, MAX_DEPTH, MAX_DROPOUT};
use super::NnError;

/// Half-width of the uniform init for embedding tables learned from scratch.
pub const LEARNED_EMBEDDING_RANGE: f64 = 0.5;

fn default_true() -> bool {
    true
}
fn default_depth() -> usize {
    2
}
fn default_hidden() -> usize {
    32
}
fn default_dim() -> usize {
    16
}
fn default_epochs() -> usize {
    20
}
fn default_lr() -> f64 {
    0.05
}

/// One point of the architecture/hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub cell: CellKind,
    #[serde(default = "default_true")]
    pub bidirectional: bool,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Ignored when a pretrained table is supplied.
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// `None`: learn the table only when no pretrained table is supplied.
    #[serde(default)]
    pub train_embeddings: Option<bool>,
}

impl TrainConfig {
    pub fn new(cell: CellKind, bidirectional: bool, depth: usize) -> Self {
        Self {
            cell,
            bidirectional,
            depth,
            hidden: default_hidden(),
            embedding_dim: default_dim(),
            dropout: 0.0,
            epochs: default_epochs(),
            learning_rate: default_lr(),
            train_embeddings: None,
        }
    }

    pub fn layer_specs(&self) -> Vec<RecurrentLayerSpec> {
        let spec = RecurrentLayerSpec {
            cell: self.cell,
            hidden_size: self.hidden,
            bidirectional: self.bidirectional,
            dropout: self.dropout,
        };
        vec![spec; self.depth]
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return Err(NnError::InvalidSpec(format!("depth {} outside 1..={MAX_DEPTH}", self.depth)));
        }
        if !(0.0..=MAX_DROPOUT).contains(&self.dropout) {
            return Err(NnError::InvalidSpec(format!("dropout {} outside [0, {MAX_DROPOUT}]", self.dropout)));
        }
        if self.hidden == 0 || self.embedding_dim == 0 {
            return Err(NnError::InvalidSpec("hidden and embedding sizes must be positive".into()));
        }
        if self.epochs == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidSpec("epochs and learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Builds an untrained model. With no pretrained table, a table over
    /// `vocab` is initialized randomly and made trainable.
    pub fn build_model<'a>(
        &self,
        pretrained: Option<&EmbeddingTable>,
        vocab: impl IntoIterator<Item = &'a str>,
        output_dim: usize,
        mode: OutputMode,
        seed: u64,
    ) -> Result<SequenceModel, NnError> {
        self.validate()?;
        let (table, default_trainable) = match pretrained {
            Some(t) => (t.clone(), false),
            None => (EmbeddingTable::random(vocab, self.embedding_dim, LEARNED_EMBEDDING_RANGE, seed ^ 0x5eed), true),
        };
        let trainable = self.train_embeddings.unwrap_or(default_trainable);
        SequenceModel::new(table, trainable, self.layer_specs(), output_dim, mode, seed)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = match self.cell {
            CellKind::Gru => "GRU",
            CellKind::Lstm => "LSTM",
        };
        let bi = if self.bidirectional { "Bi" } else { "" };
        write!(f, "{bi}{cell}{} h={} dropout={}", self.depth, self.hidden, self.dropout)
    }
}

/// Cartesian product description of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigGrid {
    pub cells: Vec<CellKind>,
    #[serde(default = "both")]
    pub bidirectional: Vec<bool>,
    pub depths: Vec<usize>,
    #[serde(default = "zero_dropout")]
    pub dropouts: Vec<f64>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn both() -> Vec<bool> {
    vec![false, true]
}
fn zero_dropout() -> Vec<f64> {
    vec![0.0]
}

impl ConfigGrid {
    pub fn expand(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &cell in &self.cells {
            for &bidirectional in &self.bidirectional {
                for &depth in &self.depths {
                    for &dropout in &self.dropouts {
                        out.push(TrainConfig {
                            cell,
                            bidirectional,
                            depth,
                            hidden: self.hidden,
                            embedding_dim: self.embedding_dim,
                            dropout,
                            epochs: self.epochs,
                            learning_rate: self.learning_rate,
                            train_embeddings: None,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GridFile {
    List(Vec<TrainConfig>),
    Single(TrainConfig),
    Grid(ConfigGrid),
}

/// Parses a grid JSON file: a list of configs, a single config, or a
/// [`ConfigGrid`] object.
pub fn parse_grid(json: &str) -> Result<Vec<TrainConfig>, NnError> {
    let grid: GridFile = serde_json::from_str(json).map_err(|e| NnError::Format { line: e.line(), reason: e.to_string() })?;
    let configs = match grid {
        GridFile::List(v) => v,
        GridFile::Single(c) => vec![c],
        GridFile::Grid(g) => g.expand(),
    };
    if configs.is_empty() {
        return Err(NnError::InvalidSpec("empty configuration grid".into()));
    }
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epoch_losses: Vec<f64>,
}

/// Trains for up to `config.epochs` epochs, keeping the parameters with the
/// best `validate` score. Stops early once the score reaches 1.
pub fn fit(
    model: &mut SequenceModel,
    train: &[Example],
    config: &TrainConfig,
    seed: u64,
    mut validate: impl FnMut(&SequenceModel) -> f64,
) -> Result<FitReport, NnError> {
    let mut best = (validate(model), 0usize, model.clone());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let loss = model.sgd_epoch(train, config.learning_rate, config.dropout, seed.wrapping_add(epoch as u64))?;
        epoch_losses.push(loss);
        let metric = validate(model);
        if metric > best.0 {
            best = (metric, epoch, model.clone());
        }
        if best.0 >= 1.0 {
            break;
        }
    }
    let (best_metric, best_epoch, best_model) = best;
    *model = best_model;
    Ok(FitReport { best_metric, best_epoch, epoch_losses })
}

/// Outcome of training one grid configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigReport {
    pub config: TrainConfig,
    pub metric: f64,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub seconds: f64,
}

/// Runs `train` for every configuration, `jobs` at a time, and keeps the
/// model with the highest metric. Ties go to the earlier configuration, so the
/// result does not depend on `jobs`.
pub fn grid_search<M: Send>(
    configs: &[TrainConfig],
    jobs: usize,
    train: impl Fn(usize, &TrainConfig) -> Result<(M, FitReport), NnError> + Sync,
) -> Result<(M, Vec<ConfigReport>), NnError> {
    if configs.is_empty() {
        return Err(NnError::InvalidSpec("empty configuration grid".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let run = |(i, c): (usize, &TrainConfig)| {
        let start = Instant::now();
        let (model, fit) = train(i, c)?;
        let report = ConfigReport {
            config: c.clone(),
            metric: fit.best_metric,
            best_epoch: fit.best_epoch,
            final_train_loss: fit.epoch_losses.last().copied().unwrap_or(f64::NAN),
            seconds: start.elapsed().as_secs_f64(),
        };
        Ok((model, report))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| NnError::InvalidSpec(format!("thread pool: {e}")))?;
    let results: Vec<Result<(M, ConfigReport), NnError>> =
        pool.install(|| configs.par_iter().enumerate().map(run).collect());
    let mut best: Option<(M, f64)> = None;
    let mut reports = Vec::with_capacity(configs.len());
    for r in results {
        let (model, report) = r?;
        if best.as_ref().is_none_or(|(_, m)| report.metric > *m) {
            best = Some((model, report.metric));
        }
        reports.push(report);
    }
    Ok((best.expect("non-empty grid").0, reports))
}
