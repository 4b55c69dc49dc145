use crate::kernels;
use crate::tensor::numel;
use crate::{NdError, Real, Result, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    ClampMin {
        x: Var,
        min: f64,
    },
    LogSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    SumRows {
        x: Var,
    },
    SegmentSum {
        x: Var,
        lens: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Attention {
        qkv: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass. Nodes are appended in execution order, so every
/// node's parents precede it.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NdError {
    NdError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a leaf copied from `t`; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Registers a constant leaf.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(NdError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node value matches its shape")
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(NdError::Contract(format!(
                "{op}: expected a 2-d tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::Matmul { a, b, m, k, n }, g))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let g = self.grad_flag(&[a, b]);
        self.push(out, shape, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    /// Adds a bias vector to every row of a 2-d tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [c] {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).to_vec();
        let out: Vec<T> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_flag(&[x, bias]);
        Ok(self.push(out, shape, Op::AddRow { x, bias }, g))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| T::from_f64(f(v.to_f64())))
            .collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_flag(&[x]);
        self.push(out, shape, op, g)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, Op::Scale { x, factor }, |v| v * factor)
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu { x }, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu { x }, kernels::gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp { x }, f64::exp)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus { x }, kernels::softplus)
    }

    /// Elementwise `max(x, min)`; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.map(x, Op::ClampMin { x, min }, |v| v.max(min))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| NdError::Contract("log_softmax: scalar input".into()))?;
        let out = kernels::log_softmax(self.value(x), cols);
        let g = self.grad_flag(&[x]);
        Ok(self.push(out, shape, Op::LogSoftmax { x }, g))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, d) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (out, rstd) =
            kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), d);
        let shape = self.shape(x).to_vec();
        let g = self.grad_flag(&[x, gamma, beta]);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
            g,
        ))
    }

    /// Row `i` of the output is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NdError::Index {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let g = self.grad_flag(&[table]);
        Ok(self.push(
            out,
            vec![ids.len(), d],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Picks `x[i, cols[i]]` from every row of a 2-d tensor.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "pick")?;
        if cols.len() != r {
            return Err(shape_err("pick", self.shape(x), &[cols.len()]));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(NdError::Index {
                op: "pick",
                index: bad,
                len: c,
            });
        }
        let src = self.value(x);
        let out = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * c + j])
            .collect();
        let g = self.grad_flag(&[x]);
        Ok(self.push(
            out,
            vec![r],
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            g,
        ))
    }

    /// Sums each row of a 2-d tensor, giving a vector.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "sum_rows")?;
        let out = self
            .value(x)
            .chunks(c)
            .map(|row| T::from_f64(row.iter().map(|v| v.to_f64()).sum()))
            .collect();
        let g = self.grad_flag(&[x]);
        Ok(self.push(out, vec![r], Op::SumRows { x }, g))
    }

    /// Sums consecutive runs of a vector: entry `i` of the result is the sum
    /// of the `lens[i]` elements following the previous runs.
    pub fn segment_sum(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if self.shape(x).len() != 1 || lens.iter().sum::<usize>() != n {
            return Err(shape_err("segment_sum", self.shape(x), lens));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(lens.len());
        let mut at = 0;
        for &l in lens {
            out.push(T::from_f64(
                src[at..at + l].iter().map(|v| v.to_f64()).sum(),
            ));
            at += l;
        }
        let g = self.grad_flag(&[x]);
        Ok(self.push(
            out,
            vec![lens.len()],
            Op::SegmentSum {
                x,
                lens: lens.to_vec(),
            },
            g,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|v| v.to_f64()).sum();
        let g = self.grad_flag(&[x]);
        self.push(vec![T::from_f64(s)], Vec::new(), Op::Sum { x }, g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Causal multi-head self-attention over packed sequences.
    ///
    /// `qkv` is `[N × 3d]` (query, key and value blocks side by side). Each
    /// `(start, len)` segment is an independent sequence; the segments must
    /// tile `0..N` in order.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let (n, w) = self.dims2(qkv, "causal_attention")?;
        if heads == 0 || w % 3 != 0 || (w / 3) % heads != 0 {
            return Err(NdError::Contract(format!(
                "causal_attention: width {w} is not 3·d with d divisible by {heads} heads"
            )));
        }
        let mut next = 0;
        for &(start, len) in segments {
            if start != next {
                return Err(NdError::Contract(
                    "causal_attention: segments must tile the rows in order".into(),
                ));
            }
            next = start + len;
        }
        if next != n {
            return Err(NdError::Contract(format!(
                "causal_attention: segments cover {next} rows, input has {n}"
            )));
        }
        let d = w / 3;
        let (out, probs) = kernels::causal_attention(self.value(qkv), segments, d, heads);
        let g = self.grad_flag(&[qkv]);
        Ok(self.push(
            out,
            vec![n, d],
            Op::Attention {
                qkv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            g,
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape and returns the
    /// gradients of every leaf that requires them.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = self.node(loss);
        if loss_node.value.len() != 1 {
            return Err(NdError::NotScalar(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if loss_node.needs_grad {
            grads[loss.0] = Some(vec![T::ONE]);
        }
        let mut leaves: Vec<Option<Vec<T>>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaves[idx] = Some(g);
            }
        }
        Ok(Gradients { leaves })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Returns the gradient buffer of `v`, or None when `v` takes no gradient.
        fn slot<'a, T: Real>(
            tape: &Tape<T>,
            grads: &'a mut [Option<Vec<T>>],
            v: Var,
        ) -> Option<&'a mut Vec<T>> {
            let n = &tape.nodes[v.0];
            if !n.needs_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; n.value.len()]))
        }
        fn add_into<T: Real>(dst: &mut [T], src: impl Iterator<Item = f64>) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::from_f64(d.to_f64() + s);
            }
        }
        let gf = |i: usize| g[i].to_f64();

        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                if let Some(da) = slot(self, grads, *a) {
                    kernels::matmul_grad_a(g, self.value(*b), *m, *k, *n, da);
                }
                if let Some(db) = slot(self, grads, *b) {
                    kernels::matmul_grad_b(self.value(*a), g, *m, *k, *n, db);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(dst) = slot(self, grads, v) {
                        add_into(dst, g.iter().map(|x| x.to_f64()));
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(dst) = slot(self, grads, *a) {
                    add_into(dst, g.iter().map(|x| x.to_f64()));
                }
                if let Some(dst) = slot(self, grads, *b) {
                    add_into(dst, g.iter().map(|x| -x.to_f64()));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(dst) = slot(self, grads, *a) {
                    add_into(dst, (0..g.len()).map(|i| gf(i) * vb[i].to_f64()));
                }
                if let Some(dst) = slot(self, grads, *b) {
                    add_into(dst, (0..g.len()).map(|i| gf(i) * va[i].to_f64()));
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(dst) = slot(self, grads, *x) {
                    add_into(dst, g.iter().map(|v| v.to_f64()));
                }
                let c = self.shape(*bias)[0];
                if let Some(dst) = slot(self, grads, *bias) {
                    let mut acc = vec![0.0f64; c];
                    for row in g.chunks(c) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v.to_f64();
                        }
                    }
                    add_into(dst, acc.into_iter());
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dst) = slot(self, grads, *x) {
                    add_into(dst, g.iter().map(|v| v.to_f64() * factor));
                }
            }
            Op::Relu { x } => {
                let vx = self.value(*x);
                if let Some(dst) = slot(self, grads, *x) {
                    add_into(
                        dst,
                        (0..g.len()).map(|i| if vx[i].to_f64() > 0.0 { gf(i) } else { 0.0 }),
                    );
                }
            }
            Op::Gelu { x } => {
                let vx = self.value(*x);
                if let Some(dst) = slot(self, grads, *x) {
                    add_into(
                        dst,
                        (0..g.len()).map(|i| gf(i) * kernels::gelu_grad(vx[i].to_f64())),
                    );
                }
            }
            Op::Exp { x } => {
                let y = &node.value;
                if let Some(dst) = slot(self, grads, *x) {
                    add_into(dst, (0..g.len()).map(|i| gf(i) * y[i].to_f64()));
                }
            }
            Op::Softplus { x } => {
                let vx = self.value(*x);
                if let Some(dst) = slot(self, grads, *x) {
                    add_into(
                        dst,
                        (0..g.len()).map(|i| gf(i) * kernels::sigmoid(vx[i].to_f64())),
                    );
                }
            }
            Op::ClampMin { x, min } => {
                let vx = self.value(*x);
                if let Some(dst) = slot(self, grads, *x) {
                    add_into(
                        dst,
                        (0..g.len()).map(|i| if vx[i].to_f64() > *min { gf(i) } else { 0.0 }),
                    );
                }
            }
            Op::LogSoftmax { x } => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(dst) = slot(self, grads, *x) {
                    // dx = dy - softmax · Σ dy
                    for (r, (grow, yrow)) in g.chunks(cols).zip(y.chunks(cols)).enumerate() {
                        let total: f64 = grow.iter().map(|v| v.to_f64()).sum();
                        let drow = &mut dst[r * cols..(r + 1) * cols];
                        add_into(
                            drow,
                            grow.iter()
                                .zip(yrow)
                                .map(|(gv, yv)| gv.to_f64() - yv.to_f64().exp() * total),
                        );
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let lg =
                    kernels::layer_norm_backward(self.value(*x), self.value(*gamma), rstd, g, d);
                if let Some(dst) = slot(self, grads, *x) {
                    add_into(dst, lg.dx.iter().map(|v| v.to_f64()));
                }
                if let Some(dst) = slot(self, grads, *gamma) {
                    add_into(dst, lg.dgamma.into_iter());
                }
                if let Some(dst) = slot(self, grads, *beta) {
                    add_into(dst, lg.dbeta.into_iter());
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dst) = slot(self, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(
                            &mut dst[id * d..(id + 1) * d],
                            g[r * d..(r + 1) * d].iter().map(|v| v.to_f64()),
                        );
                    }
                }
            }
            Op::Pick { x, cols } => {
                let c = self.shape(*x)[1];
                if let Some(dst) = slot(self, grads, *x) {
                    for (i, &j) in cols.iter().enumerate() {
                        let s = &mut dst[i * c + j];
                        *s = T::from_f64(s.to_f64() + gf(i));
                    }
                }
            }
            Op::SumRows { x } => {
                let c = self.shape(*x)[1];
                if let Some(dst) = slot(self, grads, *x) {
                    for (i, row) in dst.chunks_mut(c).enumerate() {
                        add_into(row, std::iter::repeat(gf(i)));
                    }
                }
            }
            Op::SegmentSum { x, lens } => {
                if let Some(dst) = slot(self, grads, *x) {
                    let mut at = 0;
                    for (i, &l) in lens.iter().enumerate() {
                        add_into(&mut dst[at..at + l], std::iter::repeat(gf(i)));
                        at += l;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dst) = slot(self, grads, *x) {
                    add_into(dst, std::iter::repeat(gf(0)));
                }
            }
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                let d = node.shape[1];
                if let Some(dst) = slot(self, grads, *qkv) {
                    kernels::causal_attention_backward(
                        self.value(*qkv),
                        probs,
                        g,
                        segments,
                        d,
                        *heads,
                        dst,
                    );
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    leaves: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `leaf`; `None` if it does not require gradients or the loss
    /// does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<&[T]> {
        self.leaves.get(leaf.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `leaf` into `target`'s gradient buffer.
    pub fn accumulate_into(&self, leaf: Var, target: &mut Tensor<T>) -> Result<()> {
        match self.get(leaf) {
            Some(g) => target.accumulate_grad(g),
            None => {
                if target.requires_grad() {
                    let zeros = vec![T::ZERO; target.numel()];
                    target.accumulate_grad(&zeros)?;
                }
                Ok(())
            }
        }
    }
}
