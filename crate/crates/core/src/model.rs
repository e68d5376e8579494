//! The surrogate architecture: a gated dilated temporal-convolution flow
//! branch, a GCN-encoder + recurrent assignment branch, concat or attention
//! fusion, and an MLP decoder whose magnitude head is scaled by a sigmoid
//! gate. One-step prediction, recursive rollout, and the travel-time
//! aggregation live here.
//!
//! Everything is cell-major: hidden states are S×k matrices, windows are
//! consumed one S×1 time slice at a time. Per-cell weights are shared, so
//! the model is equivariant under cell permutation.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concat,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recurrent {
    Lstm,
    Gru,
}

fn default_window() -> usize {
    12
}
fn default_d() -> usize {
    64
}
fn default_blocks() -> usize {
    2
}
fn default_dilations() -> Vec<usize> {
    vec![1, 2]
}
fn default_channels() -> usize {
    32
}
fn default_lambda() -> f64 {
    0.1
}
fn default_fusion() -> Fusion {
    Fusion::Attention
}

fn default_recurrent() -> Recurrent {
    Recurrent::Lstm
}
fn default_input_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// number of cells; 0 means "fill in from the dataset"
    #[serde(default)]
    pub s: usize,
    #[serde(default = "default_window")]
    pub w_q: usize,
    #[serde(default = "default_window")]
    pub w_a: usize,
    /// per-branch hidden width
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_dilations")]
    pub dilations: Vec<usize>,
    /// flow-branch residual channels
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_fusion")]
    pub fusion: Fusion,
    #[serde(default = "default_recurrent")]
    pub recurrent: Recurrent,
    /// gate auxiliary-loss weight
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// aggregation interval, seconds; 0 means "fill in from the simulator"
    #[serde(default)]
    pub delta_t: f64,
    /// divisor applied to raw occupancy inputs so activations stay O(1);
    /// outputs stay in raw units
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
}

impl ModelConfig {
    /// Window length the dilated blocks consume before one step remains.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.s < 1 {
            return Err(Error::validation("model needs S >= 1 cells"));
        }
        if self.d < 1 || self.channels < 1 {
            return Err(Error::validation("hidden width and channels must be >= 1"));
        }
        if self.blocks != self.dilations.len() {
            return Err(Error::validation(format!(
                "{} blocks but {} dilations",
                self.blocks,
                self.dilations.len()
            )));
        }
        if self.dilations.iter().any(|&r| r == 0) {
            return Err(Error::validation("dilations must be >= 1"));
        }
        let rf = self.receptive_field();
        if self.w_q < rf || self.w_a < rf {
            return Err(Error::validation(format!(
                "windows W_Q={}, W_A={} must cover the receptive field {rf}",
                self.w_q, self.w_a
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::validation("lambda must be >= 0"));
        }
        if !(self.delta_t > 0.0) {
            return Err(Error::validation("delta_t must be > 0"));
        }
        if !(self.input_scale > 0.0) {
            return Err(Error::validation("input_scale must be > 0"));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in checkpoint order.
    pub fn parameter_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (c, d) = (self.channels, self.d);
        let mut out: Vec<(String, (usize, usize))> = vec![
            ("flow.in.w".into(), (1, c)),
            ("flow.in.b".into(), (1, c)),
        ];
        for l in 0..self.blocks {
            out.push((format!("flow.l{l}.filter.w"), (2 * c, c)));
            out.push((format!("flow.l{l}.filter.b"), (1, c)));
            out.push((format!("flow.l{l}.gate.w"), (2 * c, c)));
            out.push((format!("flow.l{l}.gate.b"), (1, c)));
            out.push((format!("flow.l{l}.gc.w"), (c, c)));
        }
        out.push(("flow.out.w".into(), (c, d)));
        out.push(("flow.out.b".into(), (1, d)));
        out.push(("assign.enc.w".into(), (1, d)));
        out.push(("assign.enc.b".into(), (1, d)));
        match self.recurrent {
            Recurrent::Lstm => {
                out.push(("assign.lstm.w".into(), (2 * d, 4 * d)));
                out.push(("assign.lstm.b".into(), (1, 4 * d)));
            }
            Recurrent::Gru => {
                out.push(("assign.gru.zr.w".into(), (2 * d, 2 * d)));
                out.push(("assign.gru.zr.b".into(), (1, 2 * d)));
                out.push(("assign.gru.nx.w".into(), (d, d)));
                out.push(("assign.gru.nx.b".into(), (1, d)));
                out.push(("assign.gru.nh.w".into(), (d, d)));
                out.push(("assign.gru.nh.b".into(), (1, d)));
            }
        }
        out.push(("dec.l1.w".into(), (2 * d, d)));
        out.push(("dec.l1.b".into(), (1, d)));
        out.push(("dec.l2.w".into(), (d, d)));
        out.push(("dec.l2.b".into(), (1, d)));
        // decoder output concatenated with F (the skip connection)
        out.push(("head.mag.w".into(), (3 * d, 1)));
        out.push(("head.mag.b".into(), (1, 1)));
        out.push(("head.gate.w".into(), (3 * d, 1)));
        out.push(("head.gate.b".into(), (1, 1)));
        out
    }
}

/// Named parameter arrays in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Array2<f64>)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    fn from_entries(entries: Vec<(String, Array2<f64>)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ModelParams { entries, index }
    }

    /// Seeded Xavier-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig, init_seed: u64) -> Self {
        let mut rng = seed::rng(init_seed);
        let entries = cfg
            .parameter_shapes()
            .into_iter()
            .map(|(name, (r, c))| {
                let arr = if name.ends_with(".b") {
                    Array2::zeros((r, c))
                } else {
                    let bound = (6.0 / (r + c) as f64).sqrt();
                    Array2::from_shape_fn((r, c), |_| rng.gen_range(-bound..bound))
                };
                (name, arr)
            })
            .collect();
        ModelParams::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|(_, a)| a.dim()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.entries[self.index[name]].1
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let i = self
            .index
            .get(name)
            .copied()
            .ok_or_else(|| Error::validation(format!("unknown parameter {name}")))?;
        if self.entries[i].1.dim() != value.dim() {
            return Err(Error::shape("set_param", format!("{name}: wrong shape")));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn values(&self) -> Vec<&Array2<f64>> {
        self.entries.iter().map(|(_, a)| a).collect()
    }

    pub fn values_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.entries.iter_mut().map(|(_, a)| a).collect()
    }

    /// Sum of squared entries over every parameter (diagnostics).
    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, a)| a.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        autodiff::save_params(&self.entries, path)
    }

    /// Load and validate against the names and shapes `cfg` demands.
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let entries = autodiff::load_params(path)?;
        let expected = cfg.parameter_shapes();
        if entries.len() != expected.len() {
            return Err(Error::validation(format!(
                "checkpoint {} holds {} arrays, config expects {}",
                path.display(),
                entries.len(),
                expected.len()
            )));
        }
        for ((name, arr), (want_name, want_shape)) in entries.iter().zip(&expected) {
            if name != want_name {
                return Err(Error::validation(format!(
                    "checkpoint {}: found {name}, expected {want_name}",
                    path.display()
                )));
            }
            if arr.dim() != *want_shape {
                return Err(Error::validation(format!(
                    "checkpoint {}: {name} is {}×{}, expected {}×{}",
                    path.display(),
                    arr.nrows(),
                    arr.ncols(),
                    want_shape.0,
                    want_shape.1
                )));
            }
        }
        Ok(ModelParams::from_entries(entries))
    }
}

/// One-step prediction on a tape, for training and analysis.
pub struct StepOutput {
    /// S×1, strictly nonnegative
    pub q_hat: Var,
    /// S×1 gate pre-activations (for the auxiliary loss)
    pub gate_logits: Var,
    /// S×W_A attention weights when fusion = attention
    pub attention: Option<Var>,
}

/// Model bound to one tape: parameters and Ã already entered as leaves.
pub struct TapeModel<'a> {
    pub cfg: &'a ModelConfig,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
    a_tilde: Var,
    flow_only: bool,
}

impl<'a> TapeModel<'a> {
    pub fn new(
        tape: &mut Tape,
        cfg: &'a ModelConfig,
        params: &ModelParams,
        a_tilde: &Array2<f64>,
        flow_only: bool,
    ) -> Result<TapeModel<'a>> {
        cfg.validate()?;
        if a_tilde.dim() != (cfg.s, cfg.s) {
            return Err(Error::shape(
                "tape_model",
                format!("adjacency is {}×{}, S = {}", a_tilde.nrows(), a_tilde.ncols(), cfg.s),
            ));
        }
        let expected = cfg.parameter_shapes();
        if params.len() != expected.len()
            || params
                .entries
                .iter()
                .zip(&expected)
                .any(|((n, a), (en, es))| n != en || a.dim() != *es)
        {
            return Err(Error::validation("parameters do not match model config"));
        }
        let vars = params
            .entries
            .iter()
            .map(|(_, a)| tape.leaf(a.clone()))
            .collect();
        Ok(TapeModel {
            cfg,
            vars,
            index: params.index.clone(),
            a_tilde: tape.leaf(a_tilde.clone()),
            flow_only,
        })
    }

    /// Tape handles in parameter order, for gradient readout.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn p(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    /// Enter a raw W×S window as per-time S×1 slices, scaled by
    /// 1/input_scale.
    fn window_slices(
        &self,
        tape: &mut Tape,
        window: &Array2<f64>,
        w_expected: usize,
        what: &'static str,
    ) -> Result<Vec<Var>> {
        if window.dim() != (w_expected, self.cfg.s) {
            return Err(Error::shape(
                what,
                format!(
                    "window is {}×{}, expected {}×{}",
                    window.nrows(),
                    window.ncols(),
                    w_expected,
                    self.cfg.s
                ),
            ));
        }
        let scale = 1.0 / self.cfg.input_scale;
        Ok((0..w_expected)
            .map(|t| {
                let col = window.row(t).mapv(|v| v * scale).insert_axis(Axis(1));
                tape.leaf(col.to_owned())
            })
            .collect())
    }

    /// Gated dilated temporal convolutions with graph convolution,
    /// residuals, and a skip sum, reduced to per-cell features H_f: S×d.
    pub fn flow_branch(&self, tape: &mut Tape, q_window: &Array2<f64>) -> Result<Var> {
        let x = self.window_slices(tape, q_window, self.cfg.w_q, "flow_branch")?;
        if q_window.nrows() < self.cfg.receptive_field() {
            return Err(Error::validation(format!(
                "flow window {} is shorter than the receptive field {}",
                q_window.nrows(),
                self.cfg.receptive_field()
            )));
        }
        let (w_in, b_in) = (self.p("flow.in.w"), self.p("flow.in.b"));
        let mut z: Vec<Var> = Vec::with_capacity(x.len());
        for xt in x {
            let proj = tape.matmul(xt, w_in)?;
            z.push(tape.add_row_bcast(proj, b_in)?);
        }
        let mut skip: Option<Var> = None;
        for (l, &r) in self.cfg.dilations.iter().enumerate() {
            let wf = self.p(&format!("flow.l{l}.filter.w"));
            let bf = self.p(&format!("flow.l{l}.filter.b"));
            let wg = self.p(&format!("flow.l{l}.gate.w"));
            let bg = self.p(&format!("flow.l{l}.gate.b"));
            let wgc = self.p(&format!("flow.l{l}.gc.w"));
            let mut next = Vec::with_capacity(z.len() - r);
            for tau in r..z.len() {
                let cat = tape.concat_cols(z[tau - r], z[tau])?;
                let f_pre = tape.matmul(cat, wf)?;
                let f_pre = tape.add_row_bcast(f_pre, bf)?;
                let filt = tape.tanh(f_pre);
                let g_pre = tape.matmul(cat, wg)?;
                let g_pre = tape.add_row_bcast(g_pre, bg)?;
                let gate = tape.sigmoid(g_pre);
                let gated = tape.mul(filt, gate)?;
                // skip taps the gated activations; the graph conv feeds the
                // residual stream, so cross-cell mixing reaches later blocks
                skip = Some(match skip {
                    Some(acc) => tape.add(acc, gated)?,
                    None => gated,
                });
                let hw = tape.matmul(gated, wgc)?;
                let gc = tape.matmul(self.a_tilde, hw)?;
                next.push(tape.add(gc, z[tau])?);
            }
            z = next;
        }
        let skip = skip.expect("receptive-field check guarantees at least one conv output");
        let out = tape.matmul(skip, self.p("flow.out.w"))?;
        let out = tape.add_row_bcast(out, self.p("flow.out.b"))?;
        Ok(tape.relu(out))
    }

    /// Per-timestep GCN encoder and a per-cell recurrent cell with shared
    /// weights. Returns the final hidden state S×d and the full sequence.
    pub fn assignment_branch(
        &self,
        tape: &mut Tape,
        a_window: &Array2<f64>,
    ) -> Result<(Var, Vec<Var>)> {
        let cols = self.window_slices(tape, a_window, self.cfg.w_a, "assignment_branch")?;
        let d = self.cfg.d;
        let (we, be) = (self.p("assign.enc.w"), self.p("assign.enc.b"));
        let mut h = tape.leaf(Array2::zeros((self.cfg.s, d)));
        let mut seq = Vec::with_capacity(cols.len());
        match self.cfg.recurrent {
            Recurrent::Lstm => {
                let (w, b) = (self.p("assign.lstm.w"), self.p("assign.lstm.b"));
                let mut c = tape.leaf(Array2::zeros((self.cfg.s, d)));
                for a_col in cols {
                    let e = self.encode(tape, a_col, we, be)?;
                    let cat = tape.concat_cols(e, h)?;
                    let pre = tape.matmul(cat, w)?;
                    let pre = tape.add_row_bcast(pre, b)?;
                    let i_pre = tape.slice_cols(pre, 0, d)?;
                    let f_pre = tape.slice_cols(pre, d, 2 * d)?;
                    let g_pre = tape.slice_cols(pre, 2 * d, 3 * d)?;
                    let o_pre = tape.slice_cols(pre, 3 * d, 4 * d)?;
                    let i = tape.sigmoid(i_pre);
                    let f = tape.sigmoid(f_pre);
                    let g = tape.tanh(g_pre);
                    let o = tape.sigmoid(o_pre);
                    let fc = tape.mul(f, c)?;
                    let ig = tape.mul(i, g)?;
                    c = tape.add(fc, ig)?;
                    let tc = tape.tanh(c);
                    h = tape.mul(o, tc)?;
                    seq.push(h);
                }
            }
            Recurrent::Gru => {
                let (wzr, bzr) = (self.p("assign.gru.zr.w"), self.p("assign.gru.zr.b"));
                let (wnx, bnx) = (self.p("assign.gru.nx.w"), self.p("assign.gru.nx.b"));
                let (wnh, bnh) = (self.p("assign.gru.nh.w"), self.p("assign.gru.nh.b"));
                let ones = tape.leaf(Array2::ones((self.cfg.s, d)));
                for a_col in cols {
                    let e = self.encode(tape, a_col, we, be)?;
                    let cat = tape.concat_cols(e, h)?;
                    let pre = tape.matmul(cat, wzr)?;
                    let pre = tape.add_row_bcast(pre, bzr)?;
                    let z_pre = tape.slice_cols(pre, 0, d)?;
                    let r_pre = tape.slice_cols(pre, d, 2 * d)?;
                    let z = tape.sigmoid(z_pre);
                    let r = tape.sigmoid(r_pre);
                    let nx = tape.matmul(e, wnx)?;
                    let nx = tape.add_row_bcast(nx, bnx)?;
                    let nh = tape.matmul(h, wnh)?;
                    let nh = tape.add_row_bcast(nh, bnh)?;
                    let rh = tape.mul(r, nh)?;
                    let n_pre = tape.add(nx, rh)?;
                    let n = tape.tanh(n_pre);
                    let zc = tape.sub(ones, z)?;
                    let zn = tape.mul(zc, n)?;
                    let zh = tape.mul(z, h)?;
                    h = tape.add(zn, zh)?;
                    seq.push(h);
                }
            }
        }
        Ok((h, seq))
    }

    fn encode(&self, tape: &mut Tape, a_col: Var, we: Var, be: Var) -> Result<Var> {
        let xw = tape.matmul(a_col, we)?;
        let mixed = tape.matmul(self.a_tilde, xw)?;
        let pre = tape.add_row_bcast(mixed, be)?;
        Ok(tape.relu(pre))
    }

    /// Combine branches: `[H_f ‖ H_a]`, or flow-as-query scaled dot-product
    /// attention over each cell's hidden sequence, `[H_f ‖ c]`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        h_f: Var,
        h_a: Var,
        h_seq: &[Var],
    ) -> Result<(Var, Option<Var>)> {
        match self.cfg.fusion {
            Fusion::Concat => Ok((tape.concat_cols(h_f, h_a)?, None)),
            Fusion::Attention => {
                let scale = 1.0 / (self.cfg.d as f64).sqrt();
                let mut score_cols = Vec::with_capacity(h_seq.len());
                for &ht in h_seq {
                    let prod = tape.mul(h_f, ht)?;
                    let dot = tape.sum_cols(prod);
                    score_cols.push(tape.scale(dot, scale));
                }
                let mut scores = score_cols[0];
                for &c in &score_cols[1..] {
                    scores = tape.concat_cols(scores, c)?;
                }
                let alpha = tape.softmax_rows(scores);
                let mut context: Option<Var> = None;
                for (t, &ht) in h_seq.iter().enumerate() {
                    let at = tape.slice_cols(alpha, t, t + 1)?;
                    let contrib = tape.mul_col_bcast(ht, at)?;
                    context = Some(match context {
                        Some(acc) => tape.add(acc, contrib)?,
                        None => contrib,
                    });
                }
                let context = context.expect("W_A >= 1");
                Ok((tape.concat_cols(h_f, context)?, Some(alpha)))
            }
        }
    }

    /// One-step prediction: q̂ = softplus(magnitude) ⊙ sigmoid(gate).
    pub fn predict_step(
        &self,
        tape: &mut Tape,
        q_window: &Array2<f64>,
        a_window: &Array2<f64>,
    ) -> Result<StepOutput> {
        let h_f = self.flow_branch(tape, q_window)?;
        let (h_a, h_seq) = if self.flow_only {
            let zero = tape.leaf(Array2::zeros((self.cfg.s, self.cfg.d)));
            (zero, vec![zero; self.cfg.w_a])
        } else {
            self.assignment_branch(tape, a_window)?
        };
        let (f, attention) = self.fuse(tape, h_f, h_a, &h_seq)?;
        let h1 = tape.matmul(f, self.p("dec.l1.w"))?;
        let h1 = tape.add_row_bcast(h1, self.p("dec.l1.b"))?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, self.p("dec.l2.w"))?;
        let h2 = tape.add_row_bcast(h2, self.p("dec.l2.b"))?;
        let h2 = tape.relu(h2);
        let zf = tape.concat_cols(h2, f)?;
        let m = tape.matmul(zf, self.p("head.mag.w"))?;
        let m = tape.add_row_bcast(m, self.p("head.mag.b"))?;
        let g = tape.matmul(zf, self.p("head.gate.w"))?;
        let g = tape.add_row_bcast(g, self.p("head.gate.b"))?;
        let mag = tape.softplus(m);
        let gate = tape.sigmoid(g);
        Ok(StepOutput {
            q_hat: tape.mul(mag, gate)?,
            gate_logits: g,
            attention,
        })
    }
}

/// Owned model: config, parameters, and the flow-only switch.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub flow_only: bool,
}

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.ckpt";

impl Model {
    pub fn new(cfg: ModelConfig, params: ModelParams) -> Result<Model> {
        cfg.validate()?;
        Ok(Model { cfg, params, flow_only: false })
    }

    pub fn init(cfg: ModelConfig, init_seed: u64) -> Result<Model> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg, init_seed);
        Ok(Model { cfg, params, flow_only: false })
    }

    /// Same parameters with the assignment branch replaced by zeros.
    pub fn flow_only_variant(&self) -> Model {
        Model { cfg: self.cfg.clone(), params: self.params.clone(), flow_only: true }
    }

    /// One-step prediction values (S×1) on a throwaway tape.
    pub fn predict_values(
        &self,
        q_window: &Array2<f64>,
        a_window: &Array2<f64>,
        a_tilde: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let tm = TapeModel::new(&mut tape, &self.cfg, &self.params, a_tilde, self.flow_only)?;
        let out = tm.predict_step(&mut tape, q_window, a_window)?;
        Ok(tape.value(out.q_hat).clone())
    }

    /// Free-running prediction: zero-seeded windows, Q̂_0 = 0, each later
    /// column predicted from previously predicted (continuous) values.
    pub fn rollout(&self, a: &Array2<u32>, a_tilde: &Array2<f64>) -> Result<Array2<f64>> {
        if a.nrows() != self.cfg.s {
            return Err(Error::shape(
                "rollout",
                format!("assignment has {} rows, S = {}", a.nrows(), self.cfg.s),
            ));
        }
        let t_len = a.ncols();
        let mut q_hat = Array2::<f64>::zeros((self.cfg.s, t_len));
        for t in 1..t_len {
            let q_window = window_f64(&q_hat, t, self.cfg.w_q);
            let a_window = crate::dataset::window_before(a, t, self.cfg.w_a);
            let pred = self.predict_values(&q_window, &a_window, a_tilde)?;
            q_hat.column_mut(t).assign(&pred.column(0));
        }
        Ok(q_hat)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg_json = serde_json::to_string_pretty(&self.cfg)
            .map_err(|e| Error::runtime(format!("serializing model config: {e}")))?;
        table::write_string(&dir.join(CONFIG_FILE), &(cfg_json + "\n"))?;
        self.params.save(&dir.join(PARAMS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let cfg_path = dir.join(CONFIG_FILE);
        let cfg_json = table::read_to_string(&cfg_path)?;
        let cfg: ModelConfig = serde_json::from_str(&cfg_json)
            .map_err(|e| Error::parse(&cfg_path, 1, e.to_string()))?;
        cfg.validate()?;
        let params = ModelParams::load(&dir.join(PARAMS_FILE), &cfg)?;
        Ok(Model { cfg, params, flow_only: false })
    }
}

/// Columns `[t−w, t)` of an f64 matrix as w × S, zero rows before t = 0.
fn window_f64(m: &Array2<f64>, t: usize, w: usize) -> Array2<f64> {
    let s = m.nrows();
    let mut out = Array2::zeros((w, s));
    for k in 0..w {
        let col = (t + k) as isize - w as isize;
        if col >= 0 {
            out.row_mut(k).assign(&m.slice(s![.., col as usize]));
        }
    }
    out
}

/// TT = Σ_t δ_t · Σ_s Q̂[s][t], the occupancy-sum travel-time proxy.
pub fn aggregate_tt(q_hat: &Array2<f64>, delta_t: f64) -> Result<f64> {
    if let Some(neg) = q_hat.iter().find(|v| **v < 0.0) {
        return Err(Error::validation(format!(
            "flow matrix has a negative entry {neg}"
        )));
    }
    Ok(delta_t * q_hat.sum())
}
