//! Embedding → stacked (bi)directional GRU/LSTM layers → dense softmax head,
//! with backpropagation through time.
//!
//! Cell equations (gates stacked in this order in every weight block):
//!
//! GRU, gates `[z, r, n]`, reset applied before the candidate's recurrent product:
//! ```text
//! z = σ(W_z x + U_z h + b_z)
//! r = σ(W_r x + U_r h + b_r)
//! n = tanh(W_n x + U_n (r ⊙ h) + b_n)
//! h' = z ⊙ h + (1 − z) ⊙ n
//! ```
//! LSTM, gates `[i, f, g, o]`, no peepholes:
//! ```text
//! i = σ(·), f = σ(·), g = tanh(·), o = σ(·)    each of the form W x + U h + b
//! c' = f ⊙ c + i ⊙ g
//! h' = o ⊙ tanh(c')
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::EmbeddingTable;
use super::math::{log_sum_exp, matvec_acc, matvec_t_acc, outer_acc, sigmoid, softmax_in_place, Matrix};
use super::NnError;

pub const MAX_DEPTH: usize = 3;
pub const MAX_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gru" => Some(CellKind::Gru),
            "lstm" => Some(CellKind::Lstm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrentLayerSpec {
    pub cell: CellKind,
    pub hidden_size: usize,
    pub bidirectional: bool,
    pub dropout: f64,
}

impl RecurrentLayerSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.hidden_size == 0 {
            return Err(NnError::InvalidSpec("hidden size must be positive".into()));
        }
        if !(0.0..=MAX_DROPOUT).contains(&self.dropout) {
            return Err(NnError::InvalidSpec(format!("dropout {} outside [0, {MAX_DROPOUT}]", self.dropout)));
        }
        Ok(())
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn output_width(&self) -> usize {
        self.hidden_size * self.directions()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// One distribution per input position.
    PerToken,
    /// One distribution for the whole sequence.
    FinalState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    /// Class per position; `None` positions (padding) are excluded from the loss.
    PerToken(Vec<Option<usize>>),
    Whole(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub target: Target,
}

/// A named contiguous slice of a parameter vector, row-major `rows × cols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CellSlot {
    kind: CellKind,
    input: usize,
    hidden: usize,
    w: usize,
    u: usize,
    b: usize,
}

impl CellSlot {
    fn gh(&self) -> usize {
        self.kind.gates() * self.hidden
    }
    fn w_len(&self) -> usize {
        self.gh() * self.input
    }
    fn u_len(&self) -> usize {
        self.gh() * self.hidden
    }
}

/// Standalone weights of a single cell, shaped like the model's blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden_size: usize,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

/// Recurrent state; `c` is empty for GRU cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        let c = match kind {
            CellKind::Gru => Vec::new(),
            CellKind::Lstm => vec![0.0; hidden],
        };
        Self { h: vec![0.0; hidden], c }
    }
}

impl CellParams {
    pub fn zeros(kind: CellKind, input_size: usize, hidden_size: usize) -> Self {
        let gh = kind.gates() * hidden_size;
        Self { kind, input_size, hidden_size, w: vec![0.0; gh * input_size], u: vec![0.0; gh * hidden_size], b: vec![0.0; gh] }
    }

    /// One recurrent update.
    pub fn step(&self, x: &[f64], state: &CellState) -> Result<CellState, NnError> {
        let gh = self.kind.gates() * self.hidden_size;
        let check = |expected: usize, found: usize| {
            if expected != found {
                Err(NnError::DimensionMismatch { expected, found })
            } else {
                Ok(())
            }
        };
        check(gh * self.input_size, self.w.len())?;
        check(gh * self.hidden_size, self.u.len())?;
        check(gh, self.b.len())?;
        check(self.input_size, x.len())?;
        check(self.hidden_size, state.h.len())?;
        if self.kind == CellKind::Lstm {
            check(self.hidden_size, state.c.len())?;
        }
        let h = self.hidden_size;
        let mut gates = vec![0.0; gh];
        let mut out = CellState::zeros(self.kind, h);
        let mut rh = vec![0.0; h];
        let zero_c = vec![0.0; h];
        let c_prev = if self.kind == CellKind::Lstm { &state.c } else { &zero_c };
        step_forward(
            self.kind,
            self.input_size,
            h,
            (&self.w, &self.u, &self.b),
            x,
            &state.h,
            c_prev,
            &mut gates,
            &mut out.h,
            &mut out.c,
            &mut rh,
        );
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
fn step_forward(
    kind: CellKind,
    input: usize,
    hidden: usize,
    (w, u, b): (&[f64], &[f64], &[f64]),
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    h_out: &mut [f64],
    c_out: &mut [f64],
    rh: &mut [f64],
) {
    let hh = hidden;
    gates.copy_from_slice(b);
    matvec_acc(w, kind.gates() * hh, input, x, gates);
    match kind {
        CellKind::Gru => {
            matvec_acc(&u[..2 * hh * hh], 2 * hh, hh, h_prev, &mut gates[..2 * hh]);
            for g in &mut gates[..2 * hh] {
                *g = sigmoid(*g);
            }
            for j in 0..hh {
                rh[j] = gates[hh + j] * h_prev[j];
            }
            matvec_acc(&u[2 * hh * hh..], hh, hh, rh, &mut gates[2 * hh..]);
            for j in 0..hh {
                let n = gates[2 * hh + j].tanh();
                gates[2 * hh + j] = n;
                let z = gates[j];
                h_out[j] = z * h_prev[j] + (1.0 - z) * n;
            }
        }
        CellKind::Lstm => {
            matvec_acc(u, 4 * hh, hh, h_prev, gates);
            for j in 0..hh {
                let i = sigmoid(gates[j]);
                let f = sigmoid(gates[hh + j]);
                let g = gates[2 * hh + j].tanh();
                let o = sigmoid(gates[3 * hh + j]);
                gates[j] = i;
                gates[hh + j] = f;
                gates[2 * hh + j] = g;
                gates[3 * hh + j] = o;
                c_out[j] = f * c_prev[j] + i * g;
                h_out[j] = o * c_out[j].tanh();
            }
        }
    }
}

/// Forward record of one direction of one layer, indexed by sequence position.
struct DirTrace {
    h: Vec<f64>,
    c: Vec<f64>,
    gates: Vec<f64>,
    rh: Vec<f64>,
}

struct LayerTrace {
    input: Vec<f64>,
    input_dim: usize,
    dirs: Vec<DirTrace>,
    mask: Option<Vec<f64>>,
    output: Vec<f64>,
}

struct Trace {
    len: usize,
    layers: Vec<LayerTrace>,
    features: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    rows: usize,
}

/// Gradients aligned with a model's parameter vector; `embedding` is present
/// only for models with a trainable embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    embedding: EmbeddingTable,
    trainable_embedding: bool,
    layers: Vec<RecurrentLayerSpec>,
    output_dim: usize,
    mode: OutputMode,
    params: Vec<f64>,
    cells: Vec<Vec<CellSlot>>,
    head_w: usize,
    head_b: usize,
    head_in: usize,
    blocks: Vec<ParamBlock>,
}

/// Positions in processing order for one direction.
fn order(len: usize, reverse: bool) -> impl DoubleEndedIterator<Item = usize> {
    (0..len).map(move |s| if reverse { len - 1 - s } else { s })
}

fn prev_pos(t: usize, len: usize, reverse: bool) -> Option<usize> {
    if reverse {
        (t + 1 < len).then_some(t + 1)
    } else {
        t.checked_sub(1)
    }
}

impl SequenceModel {
    /// Fresh model with parameters drawn from `U[-r, r]`, `r = 1/√fan_in`.
    pub fn new(
        embedding: EmbeddingTable,
        trainable_embedding: bool,
        layers: Vec<RecurrentLayerSpec>,
        output_dim: usize,
        mode: OutputMode,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut model = Self::with_zero_params(embedding, trainable_embedding, layers, output_dim, mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in model.blocks.clone() {
            let fan_in = if block.name.ends_with(".b") && !block.name.starts_with("head") {
                // recurrent biases use the hidden size, like the U block beside them
                block.rows / model.cell_by_block(&block.name).kind.gates()
            } else if block.name.ends_with(".b") {
                model.head_in
            } else {
                block.cols
            };
            let r = 1.0 / (fan_in as f64).sqrt();
            for v in &mut model.params[block.range()] {
                *v = rng.gen_range(-r..=r);
            }
        }
        Ok(model)
    }

    /// Same architecture with every parameter zero.
    pub fn with_zero_params(
        embedding: EmbeddingTable,
        trainable_embedding: bool,
        layers: Vec<RecurrentLayerSpec>,
        output_dim: usize,
        mode: OutputMode,
    ) -> Result<Self, NnError> {
        if layers.is_empty() || layers.len() > MAX_DEPTH {
            return Err(NnError::InvalidSpec(format!("depth {} outside 1..={MAX_DEPTH}", layers.len())));
        }
        for l in &layers {
            l.validate()?;
        }
        if output_dim == 0 {
            return Err(NnError::InvalidSpec("output dimension must be positive".into()));
        }
        if embedding.dim() == 0 {
            return Err(NnError::InvalidSpec("embedding dimension must be positive".into()));
        }
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            blocks.push(ParamBlock { name, offset, rows, cols });
            offset += rows * cols;
            offset - rows * cols
        };
        let mut cells = Vec::new();
        let mut input = embedding.dim();
        for (l, spec) in layers.iter().enumerate() {
            let mut dirs = Vec::new();
            for d in 0..spec.directions() {
                let dir = if d == 0 { "fwd" } else { "bwd" };
                let gh = spec.cell.gates() * spec.hidden_size;
                let w = push(format!("layer{l}.{dir}.W"), gh, input);
                let u = push(format!("layer{l}.{dir}.U"), gh, spec.hidden_size);
                let b = push(format!("layer{l}.{dir}.b"), gh, 1);
                dirs.push(CellSlot { kind: spec.cell, input, hidden: spec.hidden_size, w, u, b });
            }
            cells.push(dirs);
            input = spec.output_width();
        }
        let head_w = push("head.W".into(), output_dim, input);
        let head_b = push("head.b".into(), output_dim, 1);
        Ok(Self {
            embedding,
            trainable_embedding,
            layers,
            output_dim,
            mode,
            params: vec![0.0; offset],
            cells,
            head_w,
            head_b,
            head_in: input,
            blocks,
        })
    }

    fn cell_by_block(&self, name: &str) -> CellSlot {
        let l: usize = name[5..name.find('.').unwrap()].parse().unwrap();
        let d = usize::from(name.contains(".bwd."));
        self.cells[l][d]
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    pub fn trainable_embedding(&self) -> bool {
        self.trainable_embedding
    }

    pub fn layers(&self) -> &[RecurrentLayerSpec] {
        &self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn mode(&self) -> OutputMode {
        self.mode
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter blocks in storage order: per layer, per direction (forward
    /// then backward) `W`, `U`, `b`; then `head.W`, `head.b`.
    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &self.params[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.blocks.iter().find(|b| b.name == name)?.range();
        Some(&mut self.params[range])
    }

    /// Copy of the weights of layer `layer`, direction `dir` (0 forward, 1 backward).
    pub fn cell_params(&self, layer: usize, dir: usize) -> Option<CellParams> {
        let slot = *self.cells.get(layer)?.get(dir)?;
        Some(CellParams {
            kind: slot.kind,
            input_size: slot.input,
            hidden_size: slot.hidden,
            w: self.params[slot.w..slot.w + slot.w_len()].to_vec(),
            u: self.params[slot.u..slot.u + slot.u_len()].to_vec(),
            b: self.params[slot.b..slot.b + slot.gh()].to_vec(),
        })
    }

    fn run_direction(&self, slot: &CellSlot, input: &[f64], len: usize, reverse: bool) -> DirTrace {
        let (hh, gh) = (slot.hidden, slot.gh());
        let lstm = slot.kind == CellKind::Lstm;
        let mut tr = DirTrace {
            h: vec![0.0; len * hh],
            c: if lstm { vec![0.0; len * hh] } else { Vec::new() },
            gates: vec![0.0; len * gh],
            rh: if lstm { Vec::new() } else { vec![0.0; len * hh] },
        };
        let p = &self.params;
        let weights = (&p[slot.w..slot.w + slot.w_len()], &p[slot.u..slot.u + slot.u_len()], &p[slot.b..slot.b + gh]);
        let mut h_prev = vec![0.0; hh];
        let mut c_prev = vec![0.0; hh];
        let mut h = vec![0.0; hh];
        let mut c = vec![0.0; if lstm { hh } else { 0 }];
        let mut rh_scratch = Vec::new();
        for t in order(len, reverse) {
            let x = &input[t * slot.input..(t + 1) * slot.input];
            let rh: &mut [f64] = if lstm { &mut rh_scratch[..] } else { &mut tr.rh[t * hh..(t + 1) * hh] };
            step_forward(
                slot.kind,
                slot.input,
                hh,
                weights,
                x,
                &h_prev,
                &c_prev,
                &mut tr.gates[t * gh..(t + 1) * gh],
                &mut h,
                &mut c,
                rh,
            );
            tr.h[t * hh..(t + 1) * hh].copy_from_slice(&h);
            std::mem::swap(&mut h_prev, &mut h);
            if lstm {
                tr.c[t * hh..(t + 1) * hh].copy_from_slice(&c);
                std::mem::swap(&mut c_prev, &mut c);
            }
        }
        tr
    }

    fn trace<S: AsRef<str>>(&self, tokens: &[S], mut dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Trace, NnError> {
        if tokens.is_empty() {
            return Err(NnError::EmptyInput);
        }
        let len = tokens.len();
        let mut input = self.embedding.embed(tokens).into_vec();
        let mut input_dim = self.embedding.dim();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, spec) in self.layers.iter().enumerate() {
            let dirs: Vec<DirTrace> =
                self.cells[l].iter().enumerate().map(|(d, slot)| self.run_direction(slot, &input, len, d == 1)).collect();
            let (hh, width) = (spec.hidden_size, spec.output_width());
            let mut output = vec![0.0; len * width];
            for t in 0..len {
                for (d, dir) in dirs.iter().enumerate() {
                    output[t * width + d * hh..t * width + (d + 1) * hh].copy_from_slice(&dir.h[t * hh..(t + 1) * hh]);
                }
            }
            let mask = match dropout.as_mut() {
                Some((ratio, rng)) if *ratio > 0.0 => Some(apply_dropout(&mut output, *ratio, rng)),
                _ => None,
            };
            let next = output.clone();
            layers.push(LayerTrace { input, input_dim, dirs, mask, output });
            input = next;
            input_dim = width;
        }

        let last = layers.last().expect("at least one layer");
        let width = self.head_in;
        let (rows, features) = match self.mode {
            OutputMode::PerToken => (len, last.output.clone()),
            OutputMode::FinalState => {
                let spec = self.layers.last().unwrap();
                let hh = spec.hidden_size;
                let mut f = last.output[(len - 1) * width..(len - 1) * width + hh].to_vec();
                if spec.bidirectional {
                    f.extend_from_slice(&last.output[hh..2 * hh]);
                }
                (1, f)
            }
        };
        let k = self.output_dim;
        let mut logits = vec![0.0; rows * k];
        let head_w = &self.params[self.head_w..self.head_w + k * width];
        let head_b = &self.params[self.head_b..self.head_b + k];
        for r in 0..rows {
            let out = &mut logits[r * k..(r + 1) * k];
            out.copy_from_slice(head_b);
            matvec_acc(head_w, k, width, &features[r * width..(r + 1) * width], out);
        }
        let mut probs = logits.clone();
        for r in 0..rows {
            softmax_in_place(&mut probs[r * k..(r + 1) * k]);
        }
        Ok(Trace { len, layers, features, logits, probs, rows })
    }

    /// Probability rows: `T × k` in per-token mode, `1 × k` in final-state mode.
    pub fn forward<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Matrix, NnError> {
        let tr = self.trace(tokens, None)?;
        Ok(Matrix::from_vec(tr.rows, self.output_dim, tr.probs))
    }

    fn check_target(&self, target: &Target, len: usize) -> Result<Vec<Option<usize>>, NnError> {
        let rows = match (self.mode, target) {
            (OutputMode::PerToken, Target::PerToken(t)) => {
                if t.len() != len {
                    return Err(NnError::TargetMismatch(format!("{} targets for {len} positions", t.len())));
                }
                t.clone()
            }
            (OutputMode::FinalState, Target::Whole(c)) => vec![Some(*c)],
            _ => return Err(NnError::TargetMismatch("target kind does not match output mode".into())),
        };
        if let Some(&bad) = rows.iter().flatten().find(|&&c| c >= self.output_dim) {
            return Err(NnError::TargetOutOfRange { target: bad, classes: self.output_dim });
        }
        if rows.iter().all(Option::is_none) {
            return Err(NnError::TargetMismatch("no position carries a target".into()));
        }
        Ok(rows)
    }

    /// Mean cross-entropy over targeted positions, without dropout.
    pub fn loss<S: AsRef<str>>(&self, tokens: &[S], target: &Target) -> Result<f64, NnError> {
        let tr = self.trace(tokens, None)?;
        let rows = self.check_target(target, tr.len)?;
        Ok(self.loss_from_trace(&tr, &rows))
    }

    fn loss_from_trace(&self, tr: &Trace, rows: &[Option<usize>]) -> f64 {
        let k = self.output_dim;
        let count = rows.iter().flatten().count() as f64;
        rows.iter()
            .enumerate()
            .filter_map(|(r, t)| t.map(|c| (r, c)))
            .map(|(r, c)| {
                let l = &tr.logits[r * k..(r + 1) * k];
                log_sum_exp(l) - l[c]
            })
            .sum::<f64>()
            / count
    }

    /// Loss and exact gradients for every trainable parameter.
    pub fn loss_and_gradients<S: AsRef<str>>(&self, tokens: &[S], target: &Target) -> Result<(f64, Gradients), NnError> {
        self.backprop(tokens, target, None)
    }

    fn backprop<S: AsRef<str>>(
        &self,
        tokens: &[S],
        target: &Target,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(f64, Gradients), NnError> {
        let tr = self.trace(tokens, dropout)?;
        let rows = self.check_target(target, tr.len)?;
        let loss = self.loss_from_trace(&tr, &rows);
        let count = rows.iter().flatten().count() as f64;
        let (k, width, len) = (self.output_dim, self.head_in, tr.len);
        let mut grad = vec![0.0; self.params.len()];

        // head
        let mut d_features = vec![0.0; tr.rows * width];
        let head_w = &self.params[self.head_w..self.head_w + k * width];
        let mut dlogit = vec![0.0; k];
        for (r, t) in rows.iter().enumerate() {
            let Some(c) = *t else { continue };
            for j in 0..k {
                dlogit[j] = tr.probs[r * k + j] / count;
            }
            dlogit[c] -= 1.0 / count;
            let feat = &tr.features[r * width..(r + 1) * width];
            outer_acc(&mut grad[self.head_w..self.head_w + k * width], &dlogit, feat);
            for j in 0..k {
                grad[self.head_b + j] += dlogit[j];
            }
            matvec_t_acc(head_w, k, width, &dlogit, &mut d_features[r * width..(r + 1) * width]);
        }

        let mut d_out = match self.mode {
            OutputMode::PerToken => d_features,
            OutputMode::FinalState => {
                let spec = self.layers.last().unwrap();
                let hh = spec.hidden_size;
                let mut d = vec![0.0; len * width];
                d[(len - 1) * width..(len - 1) * width + hh].copy_from_slice(&d_features[..hh]);
                if spec.bidirectional {
                    for j in 0..hh {
                        d[hh + j] += d_features[hh + j];
                    }
                }
                d
            }
        };

        for (l, lt) in tr.layers.iter().enumerate().rev() {
            if let Some(mask) = &lt.mask {
                for (d, m) in d_out.iter_mut().zip(mask) {
                    *d *= m;
                }
            }
            let spec = &self.layers[l];
            let out_width = spec.output_width();
            let mut d_in = vec![0.0; len * lt.input_dim];
            for (d, slot) in self.cells[l].iter().enumerate() {
                self.backward_direction(slot, lt, &lt.dirs[d], d, out_width, &d_out, &mut d_in, &mut grad, len);
            }
            d_out = d_in;
        }

        let embedding = self.trainable_embedding.then(|| {
            let dim = self.embedding.dim();
            let mut g = vec![0.0; self.embedding.len() * dim];
            for (t, tok) in tokens.iter().enumerate() {
                if let Some(row) = self.embedding.row_index(tok.as_ref()).filter(|&r| r != 0) {
                    for j in 0..dim {
                        g[row * dim + j] += d_out[t * dim + j];
                    }
                }
            }
            g
        });
        Ok((loss, Gradients { params: grad, embedding }))
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_direction(
        &self,
        slot: &CellSlot,
        lt: &LayerTrace,
        tr: &DirTrace,
        dir: usize,
        out_width: usize,
        d_out: &[f64],
        d_in: &mut [f64],
        grad: &mut [f64],
        len: usize,
    ) {
        let (hh, gh, input) = (slot.hidden, slot.gh(), slot.input);
        let reverse = dir == 1;
        let p = &self.params;
        let w = &p[slot.w..slot.w + slot.w_len()];
        let u = &p[slot.u..slot.u + slot.u_len()];
        let zeros = vec![0.0; hh];
        let mut dh_carry = vec![0.0; hh];
        let mut dc_carry = vec![0.0; hh];
        let mut dh = vec![0.0; hh];
        let mut da = vec![0.0; gh];
        let mut drh = vec![0.0; hh];
        let mut dh_prev = vec![0.0; hh];

        for t in order(len, reverse).rev() {
            for j in 0..hh {
                dh[j] = d_out[t * out_width + dir * hh + j] + dh_carry[j];
            }
            let prev = prev_pos(t, len, reverse);
            let h_prev = prev.map_or(&zeros[..], |q| &tr.h[q * hh..(q + 1) * hh]);
            let x = &lt.input[t * input..(t + 1) * input];
            let gates = &tr.gates[t * gh..(t + 1) * gh];
            dh_prev.iter_mut().for_each(|v| *v = 0.0);

            match slot.kind {
                CellKind::Gru => {
                    let rh = &tr.rh[t * hh..(t + 1) * hh];
                    for j in 0..hh {
                        let (z, n) = (gates[j], gates[2 * hh + j]);
                        da[j] = dh[j] * (h_prev[j] - n) * z * (1.0 - z);
                        da[2 * hh + j] = dh[j] * (1.0 - z) * (1.0 - n * n);
                        dh_prev[j] = dh[j] * z;
                    }
                    drh.iter_mut().for_each(|v| *v = 0.0);
                    matvec_t_acc(&u[2 * hh * hh..], hh, hh, &da[2 * hh..], &mut drh);
                    for j in 0..hh {
                        let r = gates[hh + j];
                        da[hh + j] = drh[j] * h_prev[j] * r * (1.0 - r);
                        dh_prev[j] += drh[j] * r;
                    }
                    matvec_t_acc(&u[..2 * hh * hh], 2 * hh, hh, &da[..2 * hh], &mut dh_prev);
                    let gu = &mut grad[slot.u..slot.u + slot.u_len()];
                    outer_acc(&mut gu[..2 * hh * hh], &da[..2 * hh], h_prev);
                    outer_acc(&mut gu[2 * hh * hh..], &da[2 * hh..], rh);
                }
                CellKind::Lstm => {
                    let c = &tr.c[t * hh..(t + 1) * hh];
                    let c_prev = prev.map_or(&zeros[..], |q| &tr.c[q * hh..(q + 1) * hh]);
                    for j in 0..hh {
                        let (i, f, g, o) = (gates[j], gates[hh + j], gates[2 * hh + j], gates[3 * hh + j]);
                        let tc = c[j].tanh();
                        let dc = dc_carry[j] + dh[j] * o * (1.0 - tc * tc);
                        da[j] = dc * g * i * (1.0 - i);
                        da[hh + j] = dc * c_prev[j] * f * (1.0 - f);
                        da[2 * hh + j] = dc * i * (1.0 - g * g);
                        da[3 * hh + j] = dh[j] * tc * o * (1.0 - o);
                        dc_carry[j] = dc * f;
                    }
                    matvec_t_acc(u, gh, hh, &da, &mut dh_prev);
                    outer_acc(&mut grad[slot.u..slot.u + slot.u_len()], &da, h_prev);
                }
            }
            matvec_t_acc(w, gh, input, &da, &mut d_in[t * input..(t + 1) * input]);
            outer_acc(&mut grad[slot.w..slot.w + slot.w_len()], &da, x);
            for j in 0..gh {
                grad[slot.b + j] += da[j];
            }
            std::mem::swap(&mut dh_carry, &mut dh_prev);
        }
    }

    /// `θ ← θ − η g`. The pad row never changes.
    pub fn apply_gradients(&mut self, g: &Gradients, learning_rate: f64) {
        for (p, d) in self.params.iter_mut().zip(&g.params) {
            *p -= learning_rate * d;
        }
        if let (true, Some(ge)) = (self.trainable_embedding, &g.embedding) {
            let dim = self.embedding.dim();
            for (p, d) in self.embedding.data_mut().iter_mut().zip(ge).skip(dim) {
                *p -= learning_rate * d;
            }
        }
    }

    /// One pass of per-example SGD over `data` in an order shuffled by `seed`.
    /// Inverted dropout with `dropout_ratio` is applied to every recurrent
    /// layer's output. Returns the mean training loss of the epoch.
    pub fn sgd_epoch(&mut self, data: &[Example], learning_rate: f64, dropout_ratio: f64, seed: u64) -> Result<f64, NnError> {
        if data.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(NnError::InvalidSpec(format!("learning rate {learning_rate} must be finite and non-negative")));
        }
        if !(0.0..=MAX_DROPOUT).contains(&dropout_ratio) {
            return Err(NnError::InvalidSpec(format!("dropout {dropout_ratio} outside [0, {MAX_DROPOUT}]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        for i in idx {
            let ex = &data[i];
            let (loss, g) = self.backprop(&ex.tokens, &ex.target, Some((dropout_ratio, &mut rng)))?;
            if !loss.is_finite() {
                return Err(NnError::Diverged);
            }
            total += loss;
            self.apply_gradients(&g, learning_rate);
        }
        Ok(total / data.len() as f64)
    }

    /// Number of trainable scalars: parameters, plus embedding rows other than
    /// the pad row when the table is trainable.
    pub fn trainable_len(&self) -> usize {
        self.params.len() + if self.trainable_embedding { self.embedding.data().len() - self.embedding.dim() } else { 0 }
    }

    pub fn trainable_blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = self.blocks.clone();
        if self.trainable_embedding && self.embedding.len() > 1 {
            blocks.push(ParamBlock {
                name: "embedding".into(),
                offset: self.params.len(),
                rows: self.embedding.len() - 1,
                cols: self.embedding.dim(),
            });
        }
        blocks
    }

    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut v = self.params.clone();
        if self.trainable_embedding {
            v.extend_from_slice(&self.embedding.data()[self.embedding.dim()..]);
        }
        v
    }

    pub fn set_trainable_vector(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.trainable_len(), "trainable vector length");
        let n = self.params.len();
        self.params.copy_from_slice(&v[..n]);
        if self.trainable_embedding {
            let dim = self.embedding.dim();
            self.embedding.data_mut()[dim..].copy_from_slice(&v[n..]);
        }
    }

    /// Flattens `g` in the layout of [`SequenceModel::trainable_vector`].
    pub fn gradient_vector(&self, g: &Gradients) -> Vec<f64> {
        let mut v = g.params.clone();
        if let (true, Some(e)) = (self.trainable_embedding, &g.embedding) {
            v.extend_from_slice(&e[self.embedding.dim()..]);
        }
        v
    }

    pub(crate) fn replace_parts(&mut self, params: Vec<f64>) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::DimensionMismatch { expected: self.params.len(), found: params.len() });
        }
        self.params = params;
        Ok(())
    }
}

/// Inverted dropout in place: each value is zeroed with probability `ratio`
/// and survivors are scaled by `1 / (1 − ratio)`. Returns the applied mask.
pub fn apply_dropout(values: &mut [f64], ratio: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - ratio);
    let mask: Vec<f64> = values.iter().map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { keep }).collect();
    for (v, m) in values.iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}
