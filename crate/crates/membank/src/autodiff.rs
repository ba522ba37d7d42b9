//! Reverse-mode automatic differentiation on a tape of dense `f64` tensors.
//!
//! Forward calls record one entry per operation; [`Tape::backward`] replays
//! the recording in reverse and accumulates gradients into each node. The
//! tape lives for one story: persistent weights sit in a [`ParamStore`],
//! are registered onto a fresh tape with [`Tape::param`], and get their
//! accumulated gradients back through [`Tape::export_grads`].
//!
//! Shape errors are programming errors, so ops panic with a message naming
//! the operation and both shapes rather than returning `Result`.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Tensor rank is at most 2; scalars are `Vector(1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A value node: shape, forward values, and a gradient slot filled in by
/// the backward pass.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Shape,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.len(),
            values.len(),
            "tensor: shape {:?} does not match {} values",
            shape,
            values.len()
        );
        Tensor { shape, values, grad: None }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Straight-through Bernoulli mode: draw a sample during training,
/// threshold at 0.5 during inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StMode {
    Sample,
    Threshold,
}

enum Op {
    Matmul { a: Var, b: Var, out: Var },
    ConstMul { m: std::rc::Rc<Vec<f64>>, rows: usize, cols: usize, x: Var, out: Var },
    Transpose { a: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Hadamard { a: Var, b: Var, out: Var },
    Dot { a: Var, b: Var, out: Var },
    Sigmoid { x: Var, out: Var },
    Tanh { x: Var, out: Var },
    Prelu { x: Var, slope: Var, out: Var },
    Softmax { x: Var, out: Var },
    Concat { parts: Vec<Var>, out: Var },
    Sum { x: Var, out: Var },
    Mean { x: Var, out: Var },
    Scale { x: Var, c: Var, out: Var },
    Exp { x: Var, out: Var },
    Clamp { x: Var, lo: f64, hi: f64, out: Var },
    Log { x: Var, out: Var },
    Row { m: Var, idx: usize, out: Var },
    Reshape { x: Var, out: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::ConstMul { .. } => "const_mul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Hadamard { .. } => "hadamard",
            Op::Dot { .. } => "dot",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Prelu { .. } => "prelu",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Scale { .. } => "scale",
            Op::Exp { .. } => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Log { .. } => "log",
            Op::Row { .. } => "row",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn out(&self) -> Var {
        match *self {
            Op::Matmul { out, .. }
            | Op::Transpose { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Hadamard { out, .. }
            | Op::Dot { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Tanh { out, .. }
            | Op::Prelu { out, .. }
            | Op::Softmax { out, .. }
            | Op::Concat { out, .. }
            | Op::Sum { out, .. }
            | Op::Mean { out, .. }
            | Op::Scale { out, .. }
            | Op::Exp { out, .. }
            | Op::Clamp { out, .. }
            | Op::Log { out, .. }
            | Op::Row { out, .. }
            | Op::Reshape { out, .. }
            | Op::ConstMul { out, .. } => out,
        }
    }
}

/// Persistent named parameters with gradient accumulation slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    items: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Shape, values: Vec<f64>) {
        assert!(
            self.items.insert(name.to_string(), Tensor::new(shape, values)).is_none(),
            "param store: duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.items.get(name).unwrap_or_else(|| panic!("param store: unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.items.get_mut(name).unwrap_or_else(|| panic!("param store: unknown parameter {name}"))
    }

    pub fn try_get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.items.get_mut(name)
    }

    fn index_of(&self, name: &str) -> usize {
        self.items
            .get_index_of(name)
            .unwrap_or_else(|| panic!("param store: unknown parameter {name}"))
    }

    fn by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        self.items.get_index_mut(idx).expect("param store: index out of range").1
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.items.iter_mut() {
            t.grad = None;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.items.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.items.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    // (tape var, param-store slot) for every registered parameter.
    param_origin: Vec<(Var, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Shape, values: Vec<f64>) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Tensor::new(shape, values));
        v
    }

    /// A constant or input node.
    pub fn leaf(&mut self, shape: Shape, values: Vec<f64>) -> Var {
        self.push(shape, values)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Shape::Vector(1), vec![value])
    }

    pub fn filled(&mut self, shape: Shape, value: f64) -> Var {
        let len = shape.len();
        self.push(shape, vec![value; len])
    }

    /// Register a persistent parameter on this tape. Values are snapshotted;
    /// gradients flow back through [`Tape::export_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let slot = store.index_of(name);
        let t = store.get(name);
        let v = self.push(t.shape, t.values.clone());
        self.param_origin.push((v, slot));
        v
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        let vals = self.value(v);
        assert_eq!(vals.len(), 1, "value_scalar: node has {} elements", vals.len());
        vals[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    // ── Shape plumbing ──────────────────────────────────────────────

    fn same_shape(&self, what: &str, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{what}: shape mismatch {sa:?} vs {sb:?}");
    }

    fn vector_len(&self, what: &str, v: Var) -> usize {
        match self.shape(v) {
            Shape::Vector(n) => n,
            s => panic!("{what}: expected a vector, got {s:?}"),
        }
    }

    // ── Operations ──────────────────────────────────────────────────

    /// Matrix times matrix, or matrix times vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = match self.shape(a) {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("matmul: left operand must be a matrix, got {s:?}"),
        };
        let out = match self.shape(b) {
            Shape::Vector(n) => {
                assert_eq!(c, n, "matmul: shape mismatch Matrix({r},{c}) x Vector({n})");
                let mut vals = vec![0.0; r];
                matvec(&self.nodes[a.0].values, &self.nodes[b.0].values, &mut vals, c);
                self.push(Shape::Vector(r), vals)
            }
            Shape::Matrix(c2, d) => {
                assert_eq!(c, c2, "matmul: shape mismatch Matrix({r},{c}) x Matrix({c2},{d})");
                let mut vals = vec![0.0; r * d];
                let (ma, mb) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                for i in 0..r {
                    for k in 0..c {
                        let aik = ma[i * c + k];
                        let (row_b, row_o) = (&mb[k * d..(k + 1) * d], i * d);
                        for (j, &bkj) in row_b.iter().enumerate() {
                            vals[row_o + j] += aik * bkj;
                        }
                    }
                }
                self.push(Shape::Matrix(r, d), vals)
            }
        };
        self.ops.push(Op::Matmul { a, b, out });
        out
    }

    /// Multiply by a constant matrix (row-major, `rows` x `cols`) that is
    /// not a tape node: the gradient flows only into `x`. Used where the
    /// left factor is derived data (e.g. graph adjacency), so backward
    /// skips a pointless rows*cols gradient buffer.
    pub fn const_mul(&mut self, m: std::rc::Rc<Vec<f64>>, rows: usize, cols: usize, x: Var) -> Var {
        assert_eq!(m.len(), rows * cols, "const_mul: matrix data length mismatch");
        let out = match self.shape(x) {
            Shape::Vector(n) => {
                assert_eq!(cols, n, "const_mul: shape mismatch Matrix({rows},{cols}) x Vector({n})");
                let mut vals = vec![0.0; rows];
                matvec(&m, &self.nodes[x.0].values, &mut vals, cols);
                self.push(Shape::Vector(rows), vals)
            }
            Shape::Matrix(r2, d) => {
                assert_eq!(
                    cols, r2,
                    "const_mul: shape mismatch Matrix({rows},{cols}) x Matrix({r2},{d})"
                );
                let mut vals = vec![0.0; rows * d];
                let mx = &self.nodes[x.0].values;
                for i in 0..rows {
                    for k in 0..cols {
                        let mik = m[i * cols + k];
                        if mik == 0.0 {
                            continue;
                        }
                        let (row_x, row_o) = (&mx[k * d..(k + 1) * d], i * d);
                        for (j, &xkj) in row_x.iter().enumerate() {
                            vals[row_o + j] += mik * xkj;
                        }
                    }
                }
                self.push(Shape::Matrix(rows, d), vals)
            }
        };
        self.ops.push(Op::ConstMul { m, rows, cols, x, out });
        out
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = match self.shape(a) {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("transpose: expected a matrix, got {s:?}"),
        };
        let src = &self.nodes[a.0].values;
        let mut vals = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                vals[j * r + i] = src[i * c + j];
            }
        }
        let out = self.push(Shape::Matrix(c, r), vals);
        self.ops.push(Op::Transpose { a, out });
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        let vals =
            zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x + y);
        let out = self.push(self.shape(a), vals);
        self.ops.push(Op::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        let vals =
            zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x - y);
        let out = self.push(self.shape(a), vals);
        self.ops.push(Op::Sub { a, b, out });
        out
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("hadamard", a, b);
        let vals =
            zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x * y);
        let out = self.push(self.shape(a), vals);
        self.ops.push(Op::Hadamard { a, b, out });
        out
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (la, lb) = (self.vector_len("dot", a), self.vector_len("dot", b));
        assert_eq!(la, lb, "dot: shape mismatch Vector({la}) vs Vector({lb})");
        let s: f64 = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .sum();
        let out = self.push(Shape::Vector(1), vec![s]);
        self.ops.push(Op::Dot { a, b, out });
        out
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vals: Vec<f64> =
            self.nodes[x.0].values.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = self.push(self.shape(x), vals);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let vals: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v.tanh()).collect();
        let out = self.push(self.shape(x), vals);
        self.ops.push(Op::Tanh { x, out });
        out
    }

    /// Parametric ReLU with a learned scalar slope for the negative side.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        assert_eq!(
            self.shape(slope),
            Shape::Vector(1),
            "prelu: slope must be a scalar, got {:?}",
            self.shape(slope)
        );
        let s = self.nodes[slope.0].values[0];
        let vals: Vec<f64> =
            self.nodes[x.0].values.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect();
        let out = self.push(self.shape(x), vals);
        self.ops.push(Op::Prelu { x, slope, out });
        out
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.vector_len("softmax", x);
        assert!(n > 0, "softmax: empty input");
        let src = &self.nodes[x.0].values;
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut vals: Vec<f64> = src.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = vals.iter().sum();
        for v in &mut vals {
            *v /= total;
        }
        let out = self.push(Shape::Vector(n), vals);
        self.ops.push(Op::Softmax { x, out });
        out
    }

    /// Concatenate vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let mut vals = Vec::new();
        for &p in parts {
            self.vector_len("concat", p);
            vals.extend_from_slice(&self.nodes[p.0].values);
        }
        let out = self.push(Shape::Vector(vals.len()), vals);
        self.ops.push(Op::Concat { parts: parts.to_vec(), out });
        out
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].values.iter().sum();
        let out = self.push(Shape::Vector(1), vec![s]);
        self.ops.push(Op::Sum { x, out });
        out
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.nodes[x.0].values.len();
        assert!(len > 0, "mean: empty input");
        let s: f64 = self.nodes[x.0].values.iter().sum::<f64>() / len as f64;
        let out = self.push(Shape::Vector(1), vec![s]);
        self.ops.push(Op::Mean { x, out });
        out
    }

    /// Multiply a tensor by a scalar node.
    pub fn scale(&mut self, x: Var, c: Var) -> Var {
        assert_eq!(
            self.shape(c),
            Shape::Vector(1),
            "scale: factor must be a scalar, got {:?}",
            self.shape(c)
        );
        let f = self.nodes[c.0].values[0];
        let vals: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v * f).collect();
        let out = self.push(self.shape(x), vals);
        self.ops.push(Op::Scale { x, c, out });
        out
    }

    /// Multiply by a constant (records a constant scalar leaf).
    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let c = self.scalar(c);
        self.scale(x, c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let vals: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v.exp()).collect();
        let out = self.push(self.shape(x), vals);
        self.ops.push(Op::Exp { x, out });
        out
    }

    /// Elementwise clamp; gradient passes through strictly inside the
    /// interval and is zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp: empty interval [{lo}, {hi}]");
        let vals: Vec<f64> =
            self.nodes[x.0].values.iter().map(|&v| v.clamp(lo, hi)).collect();
        let out = self.push(self.shape(x), vals);
        self.ops.push(Op::Clamp { x, lo, hi, out });
        out
    }

    pub fn log(&mut self, x: Var) -> Var {
        let vals: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v.ln()).collect();
        let out = self.push(self.shape(x), vals);
        self.ops.push(Op::Log { x, out });
        out
    }

    /// Select one row of a matrix (embedding lookup). The backward pass
    /// scatters the gradient into that row only.
    pub fn row(&mut self, m: Var, idx: usize) -> Var {
        let (r, c) = match self.shape(m) {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("row: expected a matrix, got {s:?}"),
        };
        assert!(idx < r, "row: index {idx} out of range for Matrix({r},{c})");
        let vals = self.nodes[m.0].values[idx * c..(idx + 1) * c].to_vec();
        let out = self.push(Shape::Vector(c), vals);
        self.ops.push(Op::Row { m, idx, out });
        out
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Var {
        let cur = self.shape(x);
        assert_eq!(
            cur.len(),
            shape.len(),
            "reshape: cannot view {cur:?} as {shape:?}"
        );
        let vals = self.nodes[x.0].values.clone();
        let out = self.push(shape, vals);
        self.ops.push(Op::Reshape { x, out });
        out
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let ones = self.filled(self.shape(x), 1.0);
        self.sub(ones, x)
    }

    /// Straight-through Bernoulli. Reads the probabilities in `p`, emits a
    /// detached 0/1 tensor (no gradient flows through the output), and
    /// leaves `p` itself on the tape for any loss that consumes it.
    ///
    /// `Sample` draws one Bernoulli sample per element; `Threshold` emits
    /// 1 where p > 0.5. Panics if any probability is outside [0, 1].
    pub fn bernoulli_st(&mut self, p: Var, mode: StMode, rng: &mut ChaCha8Rng) -> Var {
        let vals: Vec<f64> = self.nodes[p.0]
            .values
            .iter()
            .map(|&prob| {
                assert!(
                    (0.0..=1.0).contains(&prob),
                    "bernoulli_st: probability {prob} outside [0, 1]"
                );
                let bit = match mode {
                    StMode::Sample => rng.gen::<f64>() < prob,
                    StMode::Threshold => prob > 0.5,
                };
                if bit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        // Detached: recorded as a leaf, not an op, so backward never
        // propagates through the sample.
        self.push(self.shape(p), vals)
    }

    // ── Backward ────────────────────────────────────────────────────

    fn add_grad(&mut self, v: Var, idx: usize, amount: f64) {
        let node = &mut self.nodes[v.0];
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
        g[idx] += amount;
    }

    fn take_out_grad(&self, out: Var) -> Option<Vec<f64>> {
        self.nodes[out.0].grad.clone()
    }

    /// Backpropagate from a scalar loss node through every recorded op.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.shape(loss),
            Shape::Vector(1),
            "backward: loss must be a scalar, got {:?}",
            self.shape(loss)
        );
        let n = &mut self.nodes[loss.0];
        let g = n.grad.get_or_insert_with(|| vec![0.0; 1]);
        g[0] += 1.0;

        for i in (0..self.ops.len()).rev() {
            let out = self.ops[i].out();
            let Some(g) = self.take_out_grad(out) else { continue };
            // Ops after position i can no longer touch this op's output, so
            // `g` is final here.
            match self.ops[i] {
                Op::Matmul { a, b, out: _ } => match (self.shape(a), self.shape(b)) {
                    (Shape::Matrix(r, c), Shape::Vector(_)) => {
                        for i in 0..r {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                let xj = self.nodes[b.0].values[j];
                                self.add_grad(a, i * c + j, gi * xj);
                                let aij = self.nodes[a.0].values[i * c + j];
                                self.add_grad(b, j, gi * aij);
                            }
                        }
                    }
                    (Shape::Matrix(r, c), Shape::Matrix(_, d)) => {
                        for i in 0..r {
                            for k in 0..c {
                                let mut acc = 0.0;
                                for j in 0..d {
                                    acc += g[i * d + j] * self.nodes[b.0].values[k * d + j];
                                }
                                self.add_grad(a, i * c + k, acc);
                            }
                        }
                        for k in 0..c {
                            for j in 0..d {
                                let mut acc = 0.0;
                                for i in 0..r {
                                    acc += self.nodes[a.0].values[i * c + k] * g[i * d + j];
                                }
                                self.add_grad(b, k * d + j, acc);
                            }
                        }
                    }
                    _ => unreachable!("matmul shapes validated at record time"),
                },
                Op::ConstMul { ref m, rows, cols, x, out: _ } => {
                    let m = m.clone();
                    match self.shape(x) {
                        Shape::Vector(_) => {
                            // dx_j = sum_i m[i][j] * g_i
                            for i in 0..rows {
                                let gi = g[i];
                                if gi == 0.0 {
                                    continue;
                                }
                                for j in 0..cols {
                                    self.add_grad(x, j, gi * m[i * cols + j]);
                                }
                            }
                        }
                        Shape::Matrix(_, d) => {
                            for k in 0..cols {
                                for j in 0..d {
                                    let mut acc = 0.0;
                                    for i in 0..rows {
                                        acc += m[i * cols + k] * g[i * d + j];
                                    }
                                    if acc != 0.0 {
                                        self.add_grad(x, k * d + j, acc);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Transpose { a, out: _ } => {
                    let (c, r) = match self.shape(a) {
                        Shape::Matrix(r, c) => (c, r),
                        _ => unreachable!(),
                    };
                    // g has shape (c, r) here; scatter back transposed.
                    for j in 0..c {
                        for i in 0..r {
                            self.add_grad(a, i * c + j, g[j * r + i]);
                        }
                    }
                }
                Op::Add { a, b, out: _ } => {
                    for (idx, &gi) in g.iter().enumerate() {
                        self.add_grad(a, idx, gi);
                        self.add_grad(b, idx, gi);
                    }
                }
                Op::Sub { a, b, out: _ } => {
                    for (idx, &gi) in g.iter().enumerate() {
                        self.add_grad(a, idx, gi);
                        self.add_grad(b, idx, -gi);
                    }
                }
                Op::Hadamard { a, b, out: _ } => {
                    for (idx, &gi) in g.iter().enumerate() {
                        let (av, bv) = (self.nodes[a.0].values[idx], self.nodes[b.0].values[idx]);
                        self.add_grad(a, idx, gi * bv);
                        self.add_grad(b, idx, gi * av);
                    }
                }
                Op::Dot { a, b, out: _ } => {
                    let gs = g[0];
                    for idx in 0..self.nodes[a.0].values.len() {
                        let (av, bv) = (self.nodes[a.0].values[idx], self.nodes[b.0].values[idx]);
                        self.add_grad(a, idx, gs * bv);
                        self.add_grad(b, idx, gs * av);
                    }
                }
                Op::Sigmoid { x, out } => {
                    for (idx, &gi) in g.iter().enumerate() {
                        let y = self.nodes[out.0].values[idx];
                        self.add_grad(x, idx, gi * y * (1.0 - y));
                    }
                }
                Op::Tanh { x, out } => {
                    for (idx, &gi) in g.iter().enumerate() {
                        let y = self.nodes[out.0].values[idx];
                        self.add_grad(x, idx, gi * (1.0 - y * y));
                    }
                }
                Op::Prelu { x, slope, out: _ } => {
                    let s = self.nodes[slope.0].values[0];
                    for (idx, &gi) in g.iter().enumerate() {
                        let xv = self.nodes[x.0].values[idx];
                        if xv > 0.0 {
                            self.add_grad(x, idx, gi);
                        } else {
                            self.add_grad(x, idx, gi * s);
                            self.add_grad(slope, 0, gi * xv);
                        }
                    }
                }
                Op::Softmax { x, out } => {
                    let y = self.nodes[out.0].values.clone();
                    let inner: f64 = g.iter().zip(&y).map(|(gi, yi)| gi * yi).sum();
                    for (idx, (&gi, &yi)) in g.iter().zip(&y).enumerate() {
                        self.add_grad(x, idx, yi * (gi - inner));
                    }
                }
                Op::Concat { ref parts, out: _ } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].values.len();
                        for idx in 0..len {
                            self.add_grad(p, idx, g[offset + idx]);
                        }
                        offset += len;
                    }
                }
                Op::Sum { x, out: _ } => {
                    let gs = g[0];
                    for idx in 0..self.nodes[x.0].values.len() {
                        self.add_grad(x, idx, gs);
                    }
                }
                Op::Mean { x, out: _ } => {
                    let len = self.nodes[x.0].values.len();
                    let gs = g[0] / len as f64;
                    for idx in 0..len {
                        self.add_grad(x, idx, gs);
                    }
                }
                Op::Scale { x, c, out: _ } => {
                    let f = self.nodes[c.0].values[0];
                    let mut acc = 0.0;
                    for (idx, &gi) in g.iter().enumerate() {
                        acc += gi * self.nodes[x.0].values[idx];
                        self.add_grad(x, idx, gi * f);
                    }
                    self.add_grad(c, 0, acc);
                }
                Op::Exp { x, out } => {
                    for (idx, &gi) in g.iter().enumerate() {
                        let y = self.nodes[out.0].values[idx];
                        self.add_grad(x, idx, gi * y);
                    }
                }
                Op::Clamp { x, lo, hi, out: _ } => {
                    for (idx, &gi) in g.iter().enumerate() {
                        let xv = self.nodes[x.0].values[idx];
                        if xv > lo && xv < hi {
                            self.add_grad(x, idx, gi);
                        }
                    }
                }
                Op::Log { x, out: _ } => {
                    for (idx, &gi) in g.iter().enumerate() {
                        let xv = self.nodes[x.0].values[idx];
                        self.add_grad(x, idx, gi / xv);
                    }
                }
                Op::Row { m, idx, out: _ } => {
                    let c = g.len();
                    for (j, &gi) in g.iter().enumerate() {
                        self.add_grad(m, idx * c + j, gi);
                    }
                }
                Op::Reshape { x, out: _ } => {
                    for (idx, &gi) in g.iter().enumerate() {
                        self.add_grad(x, idx, gi);
                    }
                }
            }
        }
    }

    /// Accumulate this tape's parameter gradients into the store.
    pub fn export_grads(&self, store: &mut ParamStore) {
        for &(var, slot) in &self.param_origin {
            let Some(g) = self.nodes[var.0].grad.as_ref() else { continue };
            let t = store.by_index_mut(slot);
            let acc = t.grad.get_or_insert_with(|| vec![0.0; t.values.len()]);
            for (a, &gi) in acc.iter_mut().zip(g) {
                *a += gi;
            }
        }
    }

    /// Index and kind of the first op whose output contains a non-finite
    /// value, for divergence diagnostics.
    pub fn first_nan(&self) -> Option<String> {
        for (i, op) in self.ops.iter().enumerate() {
            let out = op.out();
            if self.nodes[out.0].values.iter().any(|v| !v.is_finite()) {
                return Some(format!("op #{i} ({})", op.name()));
            }
        }
        None
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matvec(a: &[f64], x: &[f64], out: &mut [f64], cols: usize) {
    for (row, o) in a.chunks_exact(cols).zip(out.iter_mut()) {
        *o = row.iter().zip(x).map(|(&p, &q)| p * q).sum();
    }
}
