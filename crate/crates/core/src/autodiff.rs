//! Minimal reverse-mode automatic differentiation over dense 2-D f64
//! arrays, with exactly the operator set the model needs, plus the Adam
//! optimizer and the named-array checkpoint format.
//!
//! The graph is a flat tape: every op records its inputs by index and
//! returns a [`Var`] handle, so indices are topologically ordered by
//! construction and backward is one reverse sweep. Tapes are cheap and
//! rebuilt per training step; parameters live outside the tape and re-enter
//! as leaves each step.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::table;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    SoftmaxRows(usize),
    Mae(usize, usize),
    /// a(m×n) + bias(1×n) broadcast down the rows
    AddRowBcast(usize, usize),
    /// a(m×n) ⊙ col(m×1) broadcast across the columns
    MulColBcast(usize, usize),
    /// row sums: m×n → m×1
    SumCols(usize),
    /// mean of all entries: m×n → 1×1
    MeanAll(usize),
    Scale(usize, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Error {
    Error::shape(
        op,
        format!("{}×{} vs {}×{}", a.nrows(), a.ncols(), b.nrows(), b.ncols()),
    )
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(x) = ln(1 + eˣ) without overflow for large x.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.dim() != vb.dim() {
            return Err(shape_err(op, va, vb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va, vb));
        }
        let value = va.dot(vb);
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.nrows() != vb.nrows() {
            return Err(shape_err("concat_cols", va, vb));
        }
        let value = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
            .map_err(|e| Error::shape("concat_cols", e.to_string()))?;
        Ok(self.push(value, Op::ConcatCols(a.0, b.0)))
    }

    /// Columns `[c0, c1)` of `a`.
    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if c0 >= c1 || c1 > va.ncols() {
            return Err(Error::shape(
                "slice_cols",
                format!("[{c0}, {c1}) of {}×{}", va.nrows(), va.ncols()),
            ));
        }
        let value = va.slice(s![.., c0..c1]).to_owned();
        Ok(self.push(value, Op::SliceCols(a.0, c0, c1)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(softplus_scalar);
        self.push(value, Op::Softplus(a.0))
    }

    /// Softmax along the last axis (independently per row).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut value = va.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::SoftmaxRows(a.0))
    }

    /// Mean absolute error, a 1×1 scalar.
    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.binary_same_shape("mae", pred, target)?;
        let (vp, vt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        let n = vp.len() as f64;
        let total: f64 = vp.iter().zip(vt.iter()).map(|(p, t)| (p - t).abs()).sum();
        let value = Array2::from_elem((1, 1), total / n);
        Ok(self.push(value, Op::Mae(pred.0, target.0)))
    }

    /// `a + bias`, bias a 1×n row broadcast over a's rows.
    pub fn add_row_bcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(shape_err("add_row_bcast", va, vb));
        }
        let value = va + &vb.row(0);
        Ok(self.push(value, Op::AddRowBcast(a.0, bias.0)))
    }

    /// `a ⊙ col`, col an m×1 column broadcast over a's columns.
    pub fn mul_col_bcast(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(shape_err("mul_col_bcast", va, vc));
        }
        let value = va * &vc.column(0).insert_axis(Axis(1));
        Ok(self.push(value, Op::MulColBcast(a.0, col.0)))
    }

    /// Row sums as an m×1 column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let value = va.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a.0))
    }

    /// Mean over every entry, a 1×1 scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let value = Array2::from_elem((1, 1), va.sum() / va.len() as f64);
        self.push(value, Op::MeanAll(a.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = &self.nodes[a.0].value * factor;
        self.push(value, Op::Scale(a.0, factor))
    }

    /// Populate gradients of everything `loss` depends on. One sweep per
    /// tape: call again and it errors, rebuild the tape instead.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::runtime("backward already ran on this tape"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.dim() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1×1, got {}×{}", lv.nrows(), lv.ncols()),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[a].value.ncols();
                    accumulate(&mut grads, a, g.slice(s![.., ..na]).to_owned());
                    accumulate(&mut grads, b, g.slice(s![.., na..]).to_owned());
                }
                Op::SliceCols(a, c0, _c1) => {
                    let va = &self.nodes[a].value;
                    let mut ga = Array2::zeros(va.dim());
                    ga.slice_mut(s![.., c0..c0 + g.ncols()]).assign(&g);
                    accumulate(&mut grads, a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, a, &g * &(y * &(1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, a, &g * &(1.0 - y * y));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a].value;
                    accumulate(&mut grads, a, &g * &x.mapv(|v| f64::from(v > 0.0)));
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a].value;
                    accumulate(&mut grads, a, &g * &x.mapv(sigmoid_scalar));
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Mae(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let scale = g[[0, 0]] / va.len() as f64;
                    let mut ga = Array2::zeros(va.dim());
                    ndarray::Zip::from(&mut ga).and(va).and(vb).for_each(|o, &p, &t| {
                        *o = scale * (p - t).signum() * f64::from(p != t);
                    });
                    accumulate(&mut grads, b, -&ga);
                    accumulate(&mut grads, a, ga);
                }
                Op::AddRowBcast(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, a, g);
                    accumulate(&mut grads, bias, gb);
                }
                Op::MulColBcast(a, col) => {
                    let vc = self.nodes[col].value.column(0).insert_axis(Axis(1)).to_owned();
                    let ga = &g * &vc;
                    let gc = (&g * &self.nodes[a].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, col, gc);
                }
                Op::SumCols(a) => {
                    let va = &self.nodes[a].value;
                    let ga = g.broadcast(va.dim()).expect("m×1 broadcasts to m×n").to_owned();
                    accumulate(&mut grads, a, ga);
                }
                Op::MeanAll(a) => {
                    let va = &self.nodes[a].value;
                    let ga = Array2::from_elem(va.dim(), g[[0, 0]] / va.len() as f64);
                    accumulate(&mut grads, a, ga);
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, a, &g * factor);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], target: usize, g: Array2<f64>) {
    match &mut grads[target] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

/// Gradients keyed by tape handle; absent means the loss never saw it.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Bias-corrected Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub struct AdamState {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            v: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        let mut views: Vec<&mut Array2<f64>> = params.iter_mut().collect();
        self.step_views(&mut views, grads)
    }

    /// Same update through mutable borrows (parameters owned elsewhere).
    pub fn step_views(
        &mut self,
        params: &mut [&mut Array2<f64>],
        grads: &[Array2<f64>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam_step", "parameter/gradient count mismatch"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.dim() != g.dim() || p.dim() != m.dim() {
                return Err(Error::shape("adam_step", "parameter/gradient shape mismatch"));
            }
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

// --- checkpoint format ---

/// `name;dims;d0,d1` header per array, then one comma-separated line per
/// row. f64 Display round-trips exactly, so save → load is bit-faithful.
pub fn save_params(named: &[(String, Array2<f64>)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (name, arr) in named {
        if name.contains(';') || name.contains('\n') {
            return Err(Error::validation(format!("parameter name {name:?} has reserved characters")));
        }
        let _ = writeln!(out, "{name};2;{},{}", arr.nrows(), arr.ncols());
        for row in arr.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
    }
    table::write_string(path, &out)
}

pub fn load_params(path: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let text = table::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let mut out = Vec::new();
    while let Some((lineno, header)) = lines.next() {
        if header.is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split(';').collect();
        if parts.len() != 3 || parts[1] != "2" {
            return Err(Error::parse(path, lineno + 1, "expected header name;2;rows,cols"));
        }
        let dims: Vec<&str> = parts[2].split(',').collect();
        if dims.len() != 2 {
            return Err(Error::parse(path, lineno + 1, "expected two dimensions"));
        }
        let rows: usize = table::parse_field(path, lineno + 1, dims[0], "rows")?;
        let cols: usize = table::parse_field(path, lineno + 1, dims[1], "cols")?;
        let mut arr = Array2::zeros((rows, cols));
        for r in 0..rows {
            let (vlineno, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, lineno + 1, format!("{}: missing row {r}", parts[0])))?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::parse(
                    path,
                    vlineno + 1,
                    format!("{}: expected {cols} values, found {}", parts[0], fields.len()),
                ));
            }
            for (c, f) in fields.iter().enumerate() {
                arr[[r, c]] = table::parse_field(path, vlineno + 1, f, "value")?;
            }
        }
        out.push((parts[0].to_string(), arr));
    }
    Ok(out)
}
