//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value plus whatever it
//! needs for the backward pass. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.

use rand::Rng;

use super::functional::{gelu, gelu_grad, CE_FLOOR, LAYER_NORM_EPS};
use super::tensor::{
    axpy, matmul_acc, matmul_t_acc, matmul_tn_acc, Gradients, ParamId, ParamSet, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    CrossEntropy(Var, usize),
    Sum(Var),
    AddN(Vec<Var>),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Recording of primitive operations for one loss evaluation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    record_grad: bool,
    clamp_events: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

impl Tape {
    /// A tape whose parameters require gradients.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            record_grad: true,
            clamp_events: 0,
        }
    }

    /// A tape used for evaluation only; parameters are treated as constants.
    pub fn no_grad() -> Self {
        Tape {
            record_grad: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records_grad(&self) -> bool {
        self.record_grad
    }

    /// Number of cross-entropy evaluations whose target probability hit the
    /// clamp floor.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0]
            .value
            .as_deref()
            .expect("value of a freed tape node")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Drop the stored value of a node. A later `backward` over this tape fails.
    pub fn free_activations(&mut self, v: Var) {
        self.nodes[v.0].value = None;
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    /// Bind a parameter. Repeated calls return the same node so that gradients
    /// from every use accumulate into one place.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let t = params.get(id);
        let rg = self.record_grad;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, rg);
        self.params[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a));
        let (n, k2) = dims2(self.shape(b));
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_t_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a).iter().product::<usize>() != self.shape(b).iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    /// Add a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = dims2(self.shape(a));
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                self.shape(a),
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % n])
            .collect();
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    pub fn div_scalar(&mut self, a: Var, d: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x / d).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::DivScalar(a, d), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "layer_norm over {:?} with gain {:?}",
                self.shape(x),
                self.shape(gain)
            )));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        let (xhat, rstd) = if ng { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        if n == 0 {
            return Err(Error::invalid("softmax of an empty vector"));
        }
        let xs = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            super::functional::softmax_into(&xs[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let ng = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), ng))
    }

    /// Inverted dropout. Identity (no node) when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout(a, mask), ng))
    }

    /// Rows `ids` of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = dims2(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("row {bad} out of range for {rows} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), n],
            out,
            Op::GatherRows(table, ids.to_vec()),
            ng,
        ))
    }

    /// Columns `cols` of a 2-D matrix, in the given order.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Shape(format!("column {bad} out of range for {n} columns")));
        }
        let xs = self.value(a);
        let mut out = Vec::with_capacity(m * cols.len());
        for i in 0..m {
            out.extend(cols.iter().map(|&c| xs[i * n + c]));
        }
        let ng = self.needs(a);
        Ok(self.push(
            vec![m, cols.len()],
            out,
            Op::SelectCols(a, cols.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        if start + len > n {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) of {n} columns",
                start + len
            )));
        }
        let xs = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(vec![m, len], out, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat of zero parts"));
        };
        let (m, _) = dims2(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p));
            if pm != m {
                return Err(Error::Shape(format!("concat rows {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// `-ln p[target]` for a probability vector, with `p` floored at 1e-12.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var> {
        let p = self.value(probs);
        if target >= p.len() {
            return Err(Error::invalid(format!(
                "target {target} out of range for {} classes",
                p.len()
            )));
        }
        let pt = p[target];
        if pt < CE_FLOOR {
            self.clamp_events += 1;
        }
        let loss = -pt.max(CE_FLOOR).ln();
        let ng = self.needs(probs);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy(probs, target), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    /// Sum of scalars, accumulated left to right.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Ok(self.constant(0.0));
        }
        let mut s = 0.0;
        for &t in terms {
            if self.value(t).len() != 1 {
                return Err(Error::Shape("add_n expects scalars".into()));
            }
            s += self.value(t)[0];
        }
        let ng = terms.iter().any(|&t| self.needs(t));
        Ok(self.push(vec![1], vec![s], Op::AddN(terms.to_vec()), ng))
    }

    /// `Σ wᵢ·xᵢ` over scalars, evaluated as `((w₀x₀ + w₁x₁) + w₂x₂) …`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for (i, &(t, w)) in terms.iter().enumerate() {
            if self.value(t).len() != 1 {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
            let x = self.value(t)[0];
            s = if i == 0 { w * x } else { s + w * x };
        }
        let ng = terms.iter().any(|&(t, _)| self.needs(t));
        Ok(self.push(vec![1], vec![s], Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Reverse sweep from a scalar output. Returns one gradient array per
    /// parameter in `params`; parameters not on the tape get zeros.
    pub fn backward(&self, output: Var, params: &ParamSet) -> Result<Gradients> {
        let out_node = self.node(output);
        if out_node.shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarBackward(out_node.shape.clone()));
        }
        if let Some(i) = self.nodes[..=output.0].iter().position(|n| n.value.is_none()) {
            return Err(Error::FreedActivation(i));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }

        let mut out = Vec::with_capacity(params.len());
        for id in params.ids() {
            let len = params.get(id).len();
            let g = self
                .params
                .get(id.0)
                .copied()
                .flatten()
                .filter(|v| v.0 <= output.0)
                .and_then(|v| grads[v.0].take())
                .unwrap_or_else(|| vec![0.0; len]);
            out.push(g);
        }
        Ok(Gradients::from_vecs(out))
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let (_, n) = dims2(self.shape(*b));
                if self.needs(*a) {
                    // ga[m,k] += g[m,n] · b[k,n]ᵀ
                    matmul_t_acc(g, self.value(*b), self.slot(grads, *a), m, n, k);
                }
                if self.needs(*b) {
                    // gb[k,n] += a[m,k]ᵀ · g[m,n]
                    matmul_tn_acc(self.value(*a), g, self.slot(grads, *b), m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let (n, _) = dims2(self.shape(*b));
                if self.needs(*a) {
                    // ga[m,k] += g[m,n] · b[n,k]
                    matmul_acc(g, self.value(*b), self.slot(grads, *a), m, n, k);
                }
                if self.needs(*b) {
                    // gb[n,k] += g[m,n]ᵀ · a[m,k]
                    matmul_tn_acc(g, self.value(*a), self.slot(grads, *b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        axpy(1.0, g, self.slot(grads, v));
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.needs(*a) {
                    axpy(1.0, g, self.slot(grads, *a));
                }
                if self.needs(*bias) {
                    let n = self.value(*bias).len();
                    let gb = self.slot(grads, *bias);
                    for row in g.chunks(n) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    for ((s, gi), bi) in self.slot(grads, *a).iter_mut().zip(g).zip(bv) {
                        *s += gi * bi;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    for ((s, gi), ai) in self.slot(grads, *b).iter_mut().zip(g).zip(av) {
                        *s += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => axpy(*c, g, self.slot(grads, *a)),
            Op::DivScalar(a, d) => {
                for (s, gi) in self.slot(grads, *a).iter_mut().zip(g) {
                    *s += gi / d;
                }
            }
            Op::Gelu(a) => {
                let xs = self.value(*a);
                for ((s, gi), &x) in self.slot(grads, *a).iter_mut().zip(g).zip(xs) {
                    *s += gi * gelu_grad(x);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = dims2(self.shape(*x));
                let gv = self.value(*gain);
                if self.needs(*gain) {
                    let gg = self.slot(grads, *gain);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = self.slot(grads, *bias);
                    for row in g.chunks(n) {
                        axpy(1.0, row, gb);
                    }
                }
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    let mut gy = vec![0.0; n];
                    for i in 0..m {
                        let xh = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            gy[j] = g[i * n + j] * gv[j];
                        }
                        let mean_gy = gy.iter().sum::<f64>() / n as f64;
                        let mean_gyx = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (gy[j] - mean_gy - xh[j] * mean_gyx);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = dims2(self.shape(*a));
                let y = node.value.as_deref().expect("checked");
                let ga = self.slot(grads, *a);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let d: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[i * n + j] += yr[j] * (gr[j] - d);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                for ((s, gi), mi) in self.slot(grads, *a).iter_mut().zip(g).zip(mask) {
                    *s += gi * mi;
                }
            }
            Op::GatherRows(table, ids) => {
                let (_, n) = dims2(self.shape(*table));
                let gt = self.slot(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[r * n..(r + 1) * n], &mut gt[id * n..(id + 1) * n]);
                }
            }
            Op::SelectCols(a, cols) => {
                let (m, n) = dims2(self.shape(*a));
                let k = cols.len();
                let ga = self.slot(grads, *a);
                for i in 0..m {
                    for (c, &col) in cols.iter().enumerate() {
                        ga[i * n + col] += g[i * k + c];
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = dims2(self.shape(*a));
                let (_, len) = dims2(&node.shape);
                let ga = self.slot(grads, *a);
                for i in 0..m {
                    axpy(
                        1.0,
                        &g[i * len..(i + 1) * len],
                        &mut ga[i * n + start..i * n + start + len],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = dims2(self.shape(p));
                    if self.needs(p) {
                        let gp = self.slot(grads, p);
                        for i in 0..m {
                            axpy(
                                1.0,
                                &g[i * total + offset..i * total + offset + w],
                                &mut gp[i * w..(i + 1) * w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy(probs, target) => {
                let pt = self.value(*probs)[*target];
                if pt >= CE_FLOOR {
                    self.slot(grads, *probs)[*target] += -g[0] / pt;
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                for s in self.slot(grads, *a).iter_mut() {
                    *s += g0;
                }
            }
            Op::AddN(terms) => {
                for &t in terms {
                    if self.needs(t) {
                        self.slot(grads, t)[0] += g[0];
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    if self.needs(t) {
                        self.slot(grads, t)[0] += w * g[0];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::finite_difference_check;
    use crate::rng::Streams;
    use rand_distr::{Distribution, Normal};

    fn params_of(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamSet {
        let mut rng = Streams::new(seed).child("init").rng();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut p = ParamSet::new();
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            p.add(*name, Tensor::new(shape.clone(), data).unwrap());
        }
        p
    }

    /// Reduce an arbitrary node to a scalar with fixed random weights so every
    /// output entry receives a distinct upstream gradient.
    fn project(tape: &mut Tape, v: Var) -> Var {
        let n = tape.value(v).len();
        let mut rng = Streams::new(99).child("proj").rng();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let wv = tape.leaf(&Tensor::new(tape.shape(v).to_vec(), w).unwrap());
        let prod = tape.mul(v, wv).unwrap();
        tape.sum(prod)
    }

    type Build = fn(&mut Tape, &ParamSet) -> Result<Var>;

    fn check_op(name: &str, shapes: &[(&str, Vec<usize>)], build: Build) {
        for point in 0..10 {
            let params = params_of(shapes, 1000 + point);
            let mut f = |p: &ParamSet| {
                let mut tape = Tape::new();
                let out = build(&mut tape, p)?;
                let y = project(&mut tape, out);
                let g = tape.backward(y, p)?;
                Ok((tape.scalar(y), g))
            };
            let total = params.num_scalars();
            let r = finite_difference_check(&mut f, &params, 1e-5, total, &Streams::new(point))
                .unwrap();
            assert!(
                r.max_rel_error < 1e-6,
                "{name} point {point}: max rel error {}",
                r.max_rel_error
            );
        }
    }

    fn p(t: &mut Tape, ps: &ParamSet, i: usize) -> Var {
        t.param(ps, ParamId(i))
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        check_op("matmul", &[("a", vec![3, 4]), ("b", vec![4, 2])], |t, ps| {
            let (a, b) = (p(t, ps, 0), p(t, ps, 1));
            t.matmul(a, b)
        });
        check_op("matmul_t", &[("a", vec![3, 4]), ("b", vec![5, 4])], |t, ps| {
            let (a, b) = (p(t, ps, 0), p(t, ps, 1));
            t.matmul_t(a, b)
        });
        check_op("add", &[("a", vec![2, 3]), ("b", vec![2, 3])], |t, ps| {
            let (a, b) = (p(t, ps, 0), p(t, ps, 1));
            t.add(a, b)
        });
        check_op("add_row", &[("a", vec![3, 4]), ("b", vec![4])], |t, ps| {
            let (a, b) = (p(t, ps, 0), p(t, ps, 1));
            t.add_row(a, b)
        });
        check_op("mul", &[("a", vec![2, 3]), ("b", vec![2, 3])], |t, ps| {
            let (a, b) = (p(t, ps, 0), p(t, ps, 1));
            t.mul(a, b)
        });
        check_op("scale", &[("a", vec![5])], |t, ps| {
            let a = p(t, ps, 0);
            Ok(t.scale(a, -1.7))
        });
        check_op("div_scalar", &[("a", vec![5])], |t, ps| {
            let a = p(t, ps, 0);
            Ok(t.div_scalar(a, 3.0))
        });
        check_op("gelu", &[("a", vec![2, 5])], |t, ps| {
            let a = p(t, ps, 0);
            Ok(t.gelu(a))
        });
        check_op(
            "layer_norm",
            &[("x", vec![3, 6]), ("g", vec![6]), ("b", vec![6])],
            |t, ps| {
                let (x, g, b) = (p(t, ps, 0), p(t, ps, 1), p(t, ps, 2));
                t.layer_norm(x, g, b)
            },
        );
        check_op("softmax_rows", &[("a", vec![3, 4])], |t, ps| {
            let a = p(t, ps, 0);
            t.softmax_rows(a)
        });
        check_op("dropout", &[("a", vec![4, 4])], |t, ps| {
            let a = p(t, ps, 0);
            let mut rng = Streams::new(4).child("dropout").rng();
            t.dropout(a, 0.3, &mut rng, true)
        });
        check_op("gather_rows", &[("e", vec![5, 3])], |t, ps| {
            let e = p(t, ps, 0);
            t.gather_rows(e, &[4, 0, 4, 2])
        });
        check_op("select_cols", &[("a", vec![2, 6])], |t, ps| {
            let a = p(t, ps, 0);
            t.select_cols(a, &[5, 1, 1])
        });
        check_op("slice_cols", &[("a", vec![3, 6])], |t, ps| {
            let a = p(t, ps, 0);
            t.slice_cols(a, 2, 3)
        });
        check_op("concat_cols", &[("a", vec![2, 3]), ("b", vec![2, 2])], |t, ps| {
            let (a, b) = (p(t, ps, 0), p(t, ps, 1));
            t.concat_cols(&[a, b, a])
        });
        check_op("cross_entropy", &[("z", vec![1, 4])], |t, ps| {
            let z = p(t, ps, 0);
            let probs = t.softmax_rows(z)?;
            t.cross_entropy(probs, 2)
        });
        check_op("sum", &[("a", vec![3, 2])], |t, ps| {
            let a = p(t, ps, 0);
            Ok(t.sum(a))
        });
        check_op("add_n", &[("a", vec![1]), ("b", vec![1])], |t, ps| {
            let (a, b) = (p(t, ps, 0), p(t, ps, 1));
            let ab = t.mul(a, b)?;
            t.add_n(&[a, ab, b])
        });
        check_op("weighted_sum", &[("a", vec![1]), ("b", vec![1])], |t, ps| {
            let (a, b) = (p(t, ps, 0), p(t, ps, 1));
            let ab = t.mul(a, b)?;
            t.weighted_sum(&[(a, 1.0), (ab, 0.25), (b, -2.0)])
        });
    }

    #[test]
    fn backward_examples() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::scalar(2.0));
        ps.add("b", Tensor::scalar(5.0));
        let mut t = Tape::new();
        let (a, b) = (t.param(&ps, ParamId(0)), t.param(&ps, ParamId(1)));
        let ab = t.mul(a, b).unwrap();
        let g = t.backward(ab, &ps).unwrap();
        assert_eq!(g.get(ParamId(0)), &[5.0]);
        assert_eq!(g.get(ParamId(1)), &[2.0]);

        let aa = t.mul(a, a).unwrap();
        let g = t.backward(aa, &ps).unwrap();
        assert_eq!(g.get(ParamId(0)), &[4.0]);
        assert_eq!(g.get(ParamId(1)), &[0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = a*b + a + a  ->  df/da = b + 2
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::scalar(3.0));
        ps.add("b", Tensor::scalar(-4.0));
        let mut t = Tape::new();
        let a = t.param(&ps, ParamId(0));
        let b = t.param(&ps, ParamId(1));
        let again = t.param(&ps, ParamId(0));
        assert_eq!(a, again);
        let ab = t.mul(a, b).unwrap();
        let f = t.add_n(&[ab, a, again]).unwrap();
        let g = t.backward(f, &ps).unwrap();
        assert_eq!(g.get(ParamId(0)), &[-2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut t = Tape::new();
        let w = t.param(&ps, ParamId(0));
        let err = t.backward(w, &ps).unwrap_err();
        assert!(err.to_string().contains("backward requires scalar"));

        let s = t.sum(w);
        let sq = t.mul(s, s).unwrap();
        t.free_activations(s);
        assert!(matches!(t.backward(sq, &ps), Err(Error::FreedActivation(_))));
    }

    #[test]
    fn no_grad_tape_yields_zero_gradients() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(3.0));
        let mut t = Tape::no_grad();
        let w = t.param(&ps, ParamId(0));
        let y = t.mul(w, w).unwrap();
        assert_eq!(t.scalar(y), 9.0);
        assert_eq!(t.backward(y, &ps).unwrap().get(ParamId(0)), &[0.0]);
    }

    #[test]
    fn cross_entropy_clamp_is_recorded() {
        let mut t = Tape::new();
        let probs = t.leaf(&Tensor::vector(vec![1.0, 0.0]));
        let ce = t.cross_entropy(probs, 1).unwrap();
        assert!(t.scalar(ce).is_finite());
        assert_eq!(t.clamp_events(), 1);
    }
}
