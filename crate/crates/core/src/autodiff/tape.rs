//! Reverse-mode tape over dense `f64` tensors.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and a single reverse sweep suffices for backward.

use super::linalg::{gemm, MatRef};
use super::tensor::{GradientVector, ParameterVector, Tensor};
use crate::error::{Error, Result};

/// Probabilities inside losses are clipped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct LstmCache {
    /// Post-activation gates (i, f, g, o) per step, `[N, T, 4H]`.
    gates: Vec<f64>,
    /// Cell states `[N, T, H]`.
    cells: Vec<f64>,
    /// tanh of the cell states `[N, T, H]`.
    tanh_cells: Vec<f64>,
}

enum Op {
    Input,
    Param { offset: usize },
    Dense { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var, kernel: usize },
    Lstm { x: Var, w_ih: Var, w_hh: Var, b: Var, cache: LstmCache },
    ReverseTime { x: Var },
    ConcatLast { a: Var, b: Var },
    SelectStep { x: Var, step: usize },
    Reshape { x: Var },
    MeanTime { x: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    WeightedCe { logits: Var, scale: Vec<f64>, probs: Vec<f64>, labels: Vec<usize> },
    DistillKl { student: Var, teacher: Vec<f64>, student_probs: Vec<f64>, temperature: f64 },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Dense { .. } => "dense",
            Op::Conv1d { .. } => "conv1d",
            Op::Lstm { .. } => "lstm",
            Op::ReverseTime { .. } => "reverse_time",
            Op::ConcatLast { .. } => "concat",
            Op::SelectStep { .. } => "select_step",
            Op::Reshape { .. } => "reshape",
            Op::MeanTime { .. } => "mean_time",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::WeightedCe { .. } => "weighted_cross_entropy",
            Op::DistillKl { .. } => "distill_kl",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Values are computed eagerly as ops are appended.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: Option<usize>,
}

fn shape_err(op: &str, msg: String) -> Error {
    Error::Data(format!("{op}: {msg}"))
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax_into(row: &[f64], scale: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let lse = row.iter().map(|&v| (v * scale - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v * scale - lse;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid tensors")
    }

    /// Names of the ops recorded so far, in order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Smallest |pre-activation| feeding any relu on the tape, if there is one.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(
                    self.nodes[x.0]
                        .value
                        .iter()
                        .fold(f64::INFINITY, |m, v| m.min(v.abs())),
                ),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, false)
    }

    /// Leaf bound to the named slice of `params`.
    pub fn param(&mut self, params: &ParameterVector, name: &str) -> Result<Var> {
        match self.n_params {
            Some(n) if n != params.len() => {
                return Err(Error::Usage(format!(
                    "tape already bound to {n} parameters, got a vector of {}",
                    params.len()
                )))
            }
            _ => self.n_params = Some(params.len()),
        }
        let entry = params
            .entry(name)
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))?;
        let value = params.values()[entry.range()].to_vec();
        Ok(self.push(
            entry.shape.clone(),
            value,
            Op::Param {
                offset: entry.offset,
            },
            true,
        ))
    }

    /// `y = x W^T + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(shape_err(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?} are incompatible"),
            ));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * out];
        gemm(
            MatRef::rows(self.value(x), n, inp),
            MatRef::transposed(self.value(w), out, inp),
            &mut y,
            0.0,
        );
        let bias = self.value(b);
        for row in y.chunks_exact_mut(out) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(vec![n, out], y, Op::Dense { x, w, b }, ng))
    }

    /// Valid-padding, stride-1 temporal convolution.
    /// `x: [N, T, Cin]`, `w: [Cout, K, Cin]`, `b: [Cout]` → `[N, T-K+1, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 || xs[2] != ws[2] || bs[0] != ws[0] {
            return Err(shape_err(
                "conv1d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?} are incompatible"),
            ));
        }
        let (n, t, cin) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[1]);
        if k > t {
            return Err(shape_err(
                "conv1d",
                format!("kernel width {k} exceeds sequence length {t}"),
            ));
        }
        let t_out = t - k + 1;
        let mut y = vec![0.0; n * t_out * cout];
        let xv = self.value(x);
        let wv = self.value(w);
        for s in 0..n {
            let patches = MatRef {
                data: &xv[s * t * cin..(s + 1) * t * cin],
                rows: t_out,
                cols: k * cin,
                row_stride: cin,
                col_stride: 1,
            };
            gemm(
                patches,
                MatRef::transposed(wv, cout, k * cin),
                &mut y[s * t_out * cout..(s + 1) * t_out * cout],
                0.0,
            );
        }
        let bias = self.value(b);
        for row in y.chunks_exact_mut(cout) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(vec![n, t_out, cout], y, Op::Conv1d { x, w, b, kernel: k }, ng))
    }

    /// Unidirectional LSTM over a whole sequence with zero initial state.
    /// `x: [N, T, D]`, `w_ih: [4H, D]`, `w_hh: [4H, H]`, `b: [4H]` → hidden states `[N, T, H]`.
    /// Gate order is input, forget, cell, output.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let (xs, wis, whs, bs) = (
            self.shape(x),
            self.shape(w_ih),
            self.shape(w_hh),
            self.shape(b),
        );
        let ok = xs.len() == 3
            && wis.len() == 2
            && whs.len() == 2
            && bs.len() == 1
            && whs[0] == 4 * whs[1]
            && wis[0] == whs[0]
            && wis[1] == xs[2]
            && bs[0] == whs[0];
        if !ok {
            return Err(shape_err(
                "lstm",
                format!("input {xs:?}, w_ih {wis:?}, w_hh {whs:?}, bias {bs:?} are incompatible"),
            ));
        }
        let (n, t, d) = (xs[0], xs[1], xs[2]);
        let h = whs[1];
        let g4 = 4 * h;
        let xv = self.value(x);
        let wih = self.value(w_ih);
        let whh = self.value(w_hh);
        let bias = self.value(b);

        let mut gates = vec![0.0; n * t * g4];
        gemm(
            MatRef::rows(xv, n * t, d),
            MatRef::transposed(wih, g4, d),
            &mut gates,
            0.0,
        );
        let mut hs = vec![0.0; n * t * h];
        let mut cells = vec![0.0; n * t * h];
        let mut tanh_cells = vec![0.0; n * t * h];
        let mut rec = vec![0.0; n * g4];
        for step in 0..t {
            if step > 0 {
                let prev = MatRef {
                    data: &hs[(step - 1) * h..],
                    rows: n,
                    cols: h,
                    row_stride: t * h,
                    col_stride: 1,
                };
                gemm(prev, MatRef::transposed(whh, g4, h), &mut rec, 0.0);
            }
            for s in 0..n {
                let gbase = (s * t + step) * g4;
                let hbase = (s * t + step) * h;
                let g = &mut gates[gbase..gbase + g4];
                for j in 0..g4 {
                    let mut pre = g[j] + bias[j];
                    if step > 0 {
                        pre += rec[s * g4 + j];
                    }
                    g[j] = if (2 * h..3 * h).contains(&j) {
                        pre.tanh()
                    } else {
                        sigmoid(pre)
                    };
                }
                for j in 0..h {
                    let c_prev = if step > 0 { cells[hbase - h + j] } else { 0.0 };
                    let c = g[h + j] * c_prev + g[j] * g[2 * h + j];
                    let tc = c.tanh();
                    cells[hbase + j] = c;
                    tanh_cells[hbase + j] = tc;
                    hs[hbase + j] = g[3 * h + j] * tc;
                }
            }
        }
        let ng = self.ng(&[x, w_ih, w_hh, b]);
        let cache = LstmCache {
            gates,
            cells,
            tanh_cells,
        };
        Ok(self.push(
            vec![n, t, h],
            hs,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                cache,
            },
            ng,
        ))
    }

    /// Reverses `[N, T, C]` along time.
    pub fn reverse_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("reverse_time", format!("expected [N, T, C], got {xs:?}")));
        }
        let y = reverse_time(self.value(x), &xs);
        let ng = self.ng(&[x]);
        Ok(self.push(xs, y, Op::ReverseTime { x }, ng))
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", format!("cannot concatenate {sa:?} and {sb:?}")));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).len() / ca;
        let mut y = Vec::with_capacity(rows * (ca + cb));
        let (va, vb) = (self.value(a), self.value(b));
        for r in 0..rows {
            y.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            y.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, y, Op::ConcatLast { a, b }, ng))
    }

    /// `[N, T, C]` → `[N, C]` at time `step`.
    pub fn select_step(&mut self, x: Var, step: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || step >= xs[1] {
            return Err(shape_err("select_step", format!("step {step} out of range for {xs:?}")));
        }
        let (n, t, c) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let mut y = Vec::with_capacity(n * c);
        for s in 0..n {
            let base = (s * t + step) * c;
            y.extend_from_slice(&xv[base..base + c]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, c], y, Op::SelectStep { x, step }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let y = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, y, Op::Reshape { x }, ng))
    }

    /// Global mean over time, `[N, T, C]` → `[N, C]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("mean_time", format!("expected [N, T, C], got {xs:?}")));
        }
        let (n, t, c) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let mut y = vec![0.0; n * c];
        for s in 0..n {
            for step in 0..t {
                let base = (s * t + step) * c;
                for j in 0..c {
                    y[s * c + j] += xv[base + j];
                }
            }
        }
        let inv = 1.0 / t as f64;
        y.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, c], y, Op::MeanTime { x }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(shape, y, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let mut y = vec![0.0; self.value(x).len()];
        for (row, out) in self.value(x).chunks_exact(c).zip(y.chunks_exact_mut(c)) {
            log_softmax_into(row, 1.0, out);
            out.iter_mut().for_each(|v| *v = v.exp());
        }
        let ng = self.ng(&[x]);
        self.push(shape, y, Op::Softmax { x }, ng)
    }

    /// Mean over samples of `-w[y] * log softmax(logits)[y]`, probabilities
    /// clipped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err(
                "weighted_cross_entropy",
                format!("logits {shape:?} do not match {} labels", labels.len()),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        if class_weights.len() != c || class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config(format!(
                "class weights must be {c} strictly positive values, got {class_weights:?}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Data(format!("label {bad} is not a valid class out of {c}")));
        }
        let mut probs = vec![0.0; n * c];
        let mut scale = vec![0.0; n];
        let mut total = 0.0;
        for (s, (row, out)) in self
            .value(logits)
            .chunks_exact(c)
            .zip(probs.chunks_exact_mut(c))
            .enumerate()
        {
            log_softmax_into(row, 1.0, out);
            let y = labels[s];
            let logp = out[y];
            out.iter_mut().for_each(|v| *v = v.exp());
            let p = out[y];
            let w = class_weights[y];
            let clipped = if p < PROB_FLOOR {
                PROB_FLOOR.ln()
            } else if p > 1.0 - PROB_FLOOR {
                (1.0 - PROB_FLOOR).ln()
            } else {
                scale[s] = w / n as f64;
                logp
            };
            total -= w * clipped;
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total / n as f64],
            Op::WeightedCe {
                logits,
                scale,
                probs,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// `T^2 * mean_n KL(teacher_n || softmax(student_n / T))` where `teacher`
    /// holds already-softened teacher probabilities.
    pub fn distill_kl(&mut self, student: Var, teacher: &[f64], temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let shape = self.shape(student).to_vec();
        if shape.len() != 2 || teacher.len() != self.value(student).len() {
            return Err(shape_err(
                "distill_kl",
                format!("student {shape:?} and {} teacher probabilities differ", teacher.len()),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        let mut sp = vec![0.0; n * c];
        let mut total = 0.0;
        for ((row, out), pt) in self
            .value(student)
            .chunks_exact(c)
            .zip(sp.chunks_exact_mut(c))
            .zip(teacher.chunks_exact(c))
        {
            log_softmax_into(row, 1.0 / temperature, out);
            for (ls, &p) in out.iter().zip(pt) {
                if p > 0.0 {
                    total += p * (p.ln() - ls);
                }
            }
            out.iter_mut().for_each(|v| *v = v.exp());
        }
        let value = temperature * temperature * total / n as f64;
        let ng = self.ng(&[student]);
        Ok(self.push(
            vec![1],
            vec![value],
            Op::DistillKl {
                student,
                teacher: teacher.to_vec(),
                student_probs: sp,
                temperature,
            },
            ng,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        let y: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        let op = if name == "add" { Op::Add { a, b } } else { Op::Mul { a, b } };
        Ok(self.push(shape, y, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum { x }, ng)
    }

    /// Gradient of the scalar `loss` with respect to every bound parameter.
    /// Parameters the loss does not depend on receive exactly 0.
    pub fn backward(&self, loss: Var) -> Result<GradientVector> {
        let n_params = self
            .n_params
            .ok_or_else(|| Error::Usage("backward on a tape with no parameters".into()))?;
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss is not a node of this tape".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut out = GradientVector::zeros(n_params);
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut GradientVector,
    ) {
        // Lazily zero-initialised gradient slot for `v`, or None if `v` is constant.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    Some(
                        grads[v.0]
                            .get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            }};
        }

        match &node.op {
            Op::Input => {}
            Op::Param { offset } => {
                let dst = &mut out.values_mut()[*offset..*offset + gy.len()];
                for (d, g) in dst.iter_mut().zip(gy) {
                    *d += g;
                }
            }
            Op::Dense { x, w, b } => {
                let xs = &self.nodes[x.0].shape;
                let (n, inp) = (xs[0], xs[1]);
                let out_dim = node.shape[1];
                if let Some(gw) = slot!(*w) {
                    gemm(
                        MatRef::transposed(gy, n, out_dim),
                        MatRef::rows(&self.nodes[x.0].value, n, inp),
                        gw,
                        1.0,
                    );
                }
                if let Some(gb) = slot!(*b) {
                    for row in gy.chunks_exact(out_dim) {
                        for (d, g) in gb.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    gemm(
                        MatRef::rows(gy, n, out_dim),
                        MatRef::rows(&self.nodes[w.0].value, out_dim, inp),
                        gx,
                        1.0,
                    );
                }
            }
            Op::Conv1d { x, w, b, kernel } => {
                let xs = &self.nodes[x.0].shape;
                let (n, t, cin) = (xs[0], xs[1], xs[2]);
                let (t_out, cout) = (node.shape[1], node.shape[2]);
                let k = *kernel;
                let xv = &self.nodes[x.0].value;
                if let Some(gw) = slot!(*w) {
                    for s in 0..n {
                        let patches = MatRef {
                            data: &xv[s * t * cin..(s + 1) * t * cin],
                            rows: t_out,
                            cols: k * cin,
                            row_stride: cin,
                            col_stride: 1,
                        };
                        gemm(
                            MatRef::transposed(&gy[s * t_out * cout..(s + 1) * t_out * cout], t_out, cout),
                            patches,
                            gw,
                            1.0,
                        );
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for row in gy.chunks_exact(cout) {
                        for (d, g) in gb.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let wv = &self.nodes[w.0].value;
                    let mut dp = vec![0.0; t_out * k * cin];
                    for s in 0..n {
                        gemm(
                            MatRef::rows(&gy[s * t_out * cout..(s + 1) * t_out * cout], t_out, cout),
                            MatRef::rows(wv, cout, k * cin),
                            &mut dp,
                            0.0,
                        );
                        for step in 0..t_out {
                            let dst = &mut gx[(s * t + step) * cin..(s * t + step + k) * cin];
                            for (d, g) in dst.iter_mut().zip(&dp[step * k * cin..(step + 1) * k * cin]) {
                                *d += g;
                            }
                        }
                    }
                }
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                cache,
            } => self.lstm_backward(node, gy, *x, *w_ih, *w_hh, *b, cache, grads),
            Op::ReverseTime { x } => {
                if let Some(gx) = slot!(*x) {
                    let r = reverse_time(gy, &node.shape);
                    for (d, g) in gx.iter_mut().zip(&r) {
                        *d += g;
                    }
                }
            }
            Op::ConcatLast { a, b } => {
                let ca = *self.nodes[a.0].shape.last().unwrap();
                let cb = *self.nodes[b.0].shape.last().unwrap();
                if let Some(ga) = slot!(*a) {
                    for (dst, src) in ga.chunks_exact_mut(ca).zip(gy.chunks_exact(ca + cb)) {
                        for (d, g) in dst.iter_mut().zip(&src[..ca]) {
                            *d += g;
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (dst, src) in gb.chunks_exact_mut(cb).zip(gy.chunks_exact(ca + cb)) {
                        for (d, g) in dst.iter_mut().zip(&src[ca..]) {
                            *d += g;
                        }
                    }
                }
            }
            Op::SelectStep { x, step } => {
                let xs = &self.nodes[x.0].shape;
                let (n, t, c) = (xs[0], xs[1], xs[2]);
                if let Some(gx) = slot!(*x) {
                    for s in 0..n {
                        let base = (s * t + step) * c;
                        for j in 0..c {
                            gx[base + j] += gy[s * c + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot!(*x) {
                    for (d, g) in gx.iter_mut().zip(gy) {
                        *d += g;
                    }
                }
            }
            Op::MeanTime { x } => {
                let xs = &self.nodes[x.0].shape;
                let (n, t, c) = (xs[0], xs[1], xs[2]);
                let inv = 1.0 / t as f64;
                if let Some(gx) = slot!(*x) {
                    for s in 0..n {
                        for step in 0..t {
                            let base = (s * t + step) * c;
                            for j in 0..c {
                                gx[base + j] += gy[s * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(gx) = slot!(*x) {
                    for ((d, g), &v) in gx.iter_mut().zip(gy).zip(&self.nodes[x.0].value) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(gx) = slot!(*x) {
                    for ((d, g), &y) in gx.iter_mut().zip(gy).zip(&node.value) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = slot!(*x) {
                    for ((d, g), &y) in gx.iter_mut().zip(gy).zip(&node.value) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { x } => {
                let c = *node.shape.last().unwrap();
                if let Some(gx) = slot!(*x) {
                    for ((dst, g), y) in gx
                        .chunks_exact_mut(c)
                        .zip(gy.chunks_exact(c))
                        .zip(node.value.chunks_exact(c))
                    {
                        let inner: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dst[j] += y[j] * (g[j] - inner);
                        }
                    }
                }
            }
            Op::WeightedCe {
                logits,
                scale,
                probs,
                labels,
            } => {
                let c = self.nodes[logits.0].shape[1];
                if let Some(gx) = slot!(*logits) {
                    for (s, (dst, p)) in gx.chunks_exact_mut(c).zip(probs.chunks_exact(c)).enumerate() {
                        let k = scale[s] * gy[0];
                        if k == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == labels[s] { 1.0 } else { 0.0 };
                            dst[j] += k * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::DistillKl {
                student,
                teacher,
                student_probs,
                temperature,
            } => {
                let n = self.nodes[student.0].shape[0];
                let k = gy[0] * temperature / n as f64;
                if let Some(gx) = slot!(*student) {
                    for ((d, ps), pt) in gx.iter_mut().zip(student_probs).zip(teacher) {
                        *d += k * (ps - pt);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = slot!(v) {
                        for (d, g) in gv.iter_mut().zip(gy) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(ga) = slot!(*a) {
                    for ((d, g), y) in ga.iter_mut().zip(gy).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((d, g), y) in gb.iter_mut().zip(gy).zip(va) {
                        *d += g * y;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = slot!(*x) {
                    for (d, g) in gx.iter_mut().zip(gy) {
                        *d += g * factor;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|d| *d += gy[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        node: &Node,
        gy: &[f64],
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        cache: &LstmCache,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = &self.nodes[x.0].shape;
        let (n, t, d) = (xs[0], xs[1], xs[2]);
        let h = node.shape[2];
        let g4 = 4 * h;
        let hs = &node.value;
        let whh = &self.nodes[w_hh.0].value;

        let mut dgates = vec![0.0; n * t * g4];
        let mut dh_next = vec![0.0; n * h];
        let mut dc_next = vec![0.0; n * h];
        let mut dwhh = vec![0.0; g4 * h];
        for step in (0..t).rev() {
            for s in 0..n {
                let gbase = (s * t + step) * g4;
                let hbase = (s * t + step) * h;
                let gate = &cache.gates[gbase..gbase + g4];
                let dg = &mut dgates[gbase..gbase + g4];
                for j in 0..h {
                    let dh = gy[hbase + j] + dh_next[s * h + j];
                    let (i, f, g, o) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                    let tc = cache.tanh_cells[hbase + j];
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[s * h + j];
                    let c_prev = if step > 0 { cache.cells[hbase - h + j] } else { 0.0 };
                    dg[j] = dc * g * i * (1.0 - i);
                    dg[h + j] = dc * c_prev * f * (1.0 - f);
                    dg[2 * h + j] = dc * i * (1.0 - g * g);
                    dg[3 * h + j] = dh * tc * o * (1.0 - o);
                    dc_next[s * h + j] = dc * f;
                }
            }
            if step > 0 {
                let dg_t = MatRef {
                    data: &dgates[step * g4..],
                    rows: n,
                    cols: g4,
                    row_stride: t * g4,
                    col_stride: 1,
                };
                gemm(dg_t, MatRef::rows(whh, g4, h), &mut dh_next, 0.0);
                if self.nodes[w_hh.0].needs_grad {
                    let h_prev = MatRef {
                        data: &hs[(step - 1) * h..],
                        rows: n,
                        cols: h,
                        row_stride: t * h,
                        col_stride: 1,
                    };
                    gemm(dg_t.t(), h_prev, &mut dwhh, 1.0);
                }
            }
        }

        let mut add_into = |v: Var, src: &[f64]| {
            if self.nodes[v.0].needs_grad {
                let dst = grads[v.0].get_or_insert_with(|| vec![0.0; src.len()]);
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        };
        add_into(w_hh, &dwhh);
        if self.nodes[b.0].needs_grad {
            let mut db = vec![0.0; g4];
            for row in dgates.chunks_exact(g4) {
                for (a, g) in db.iter_mut().zip(row) {
                    *a += g;
                }
            }
            add_into(b, &db);
        }
        if self.nodes[w_ih.0].needs_grad {
            let mut dwih = vec![0.0; g4 * d];
            gemm(
                MatRef::transposed(&dgates, n * t, g4),
                MatRef::rows(&self.nodes[x.0].value, n * t, d),
                &mut dwih,
                0.0,
            );
            add_into(w_ih, &dwih);
        }
        if self.nodes[x.0].needs_grad {
            let mut dx = vec![0.0; n * t * d];
            gemm(
                MatRef::rows(&dgates, n * t, g4),
                MatRef::rows(&self.nodes[w_ih.0].value, g4, d),
                &mut dx,
                0.0,
            );
            add_into(x, &dx);
        }
    }
}

fn reverse_time(v: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, t, c) = (shape[0], shape[1], shape[2]);
    let mut y = vec![0.0; v.len()];
    for s in 0..n {
        for step in 0..t {
            let src = (s * t + step) * c;
            let dst = (s * t + (t - 1 - step)) * c;
            y[dst..dst + c].copy_from_slice(&v[src..src + c]);
        }
    }
    y
}
