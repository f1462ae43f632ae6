//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order: an op can only consume nodes that exist.
//! [`Graph::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products into the inputs of each tracked node.
//!
//! Nodes are *tracked* when they are a `leaf` (requires grad) or when any of
//! their inputs is tracked. Untracked subgraphs skip saving activations and
//! are never visited by the backward pass, so a frozen network costs a plain
//! forward evaluation.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom, Exec};
use crate::tensor::{inverse_perm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// An operation whose backward pass is supplied by the caller.
///
/// The forward value is computed outside the graph and handed to
/// [`Graph::custom`]; `backward` receives the input values, the output value
/// and the upstream gradient and returns one gradient per input (`None` when
/// `needs[i]` is false or the input is not differentiable).
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        // im2col buffers per sample; empty for pointwise convs or untracked nodes.
        cols: Vec<f32>,
    },
    Relu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAdd {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Log(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
        coef: Vec<f32>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    tracked: bool,
    op: Op,
}

/// Recorded computation. One graph per forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Reverse-mode gradients keyed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` is not on any
    /// path to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), exec: Exec::default() }
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Operation name recorded for `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, tracked: bool, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, tracked, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input (parameter).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, true, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, false, Op::Leaf)
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let tr = self.tracked(&[a, b]);
        self.push(out, tr, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        let tr = self.tracked(&[a, b]);
        self.push(out, tr, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let tr = self.tracked(&[a, b]);
        self.push(out, tr, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v * s).collect())?;
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v + s).collect())?;
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::AddScalar(a))
    }

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(
            self.exec,
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut c,
            false,
        );
        let tr = self.tracked(&[a, b]);
        self.push(Tensor::new(&[m, n], c)?, tr, Op::MatMul(a, b))
    }

    /// Cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return dim_err(format!("conv2d expects rank-4 input and weight, got {:?} and {:?}", sx, sw));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, wcin, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wcin != cin {
            return dim_err(format!("conv2d: input has {cin} channels, weight expects {wcin}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return dim_err(format!("conv2d bias {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let span_h = h + 2 * padding;
        let span_w = wd + 2 * padding;
        if span_h < kh || span_w < kw || !(span_h - kh).is_multiple_of(stride) || !(span_w - kw).is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "conv2d output size not integral: H={h} W={wd} k={kh}x{kw} stride={stride} pad={padding}"
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            padding,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        };
        let tracked = self.tracked(&[x, w]) || b.is_some_and(|b| self.tracked(&[b]));
        let (k, p) = (geom.patch_len(), geom.out_pixels());
        let keep_cols = tracked && !geom.is_pointwise();
        let mut cols_all = if keep_cols { vec![0.0; n * k * p] } else { Vec::new() };
        let mut scratch = if !keep_cols && !geom.is_pointwise() { vec![0.0; k * p] } else { Vec::new() };
        let mut out = vec![0.0; n * cout * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let plane = cin * h * wd;
            for s in 0..n {
                let xs = &xv[s * plane..(s + 1) * plane];
                let cols: &[f32] = if geom.is_pointwise() {
                    xs
                } else {
                    let buf: &mut [f32] = if keep_cols {
                        &mut cols_all[s * k * p..(s + 1) * k * p]
                    } else {
                        &mut scratch
                    };
                    kernels::im2col(self.exec, &geom, xs, buf);
                    buf
                };
                let os = &mut out[s * cout * p..(s + 1) * cout * p];
                kernels::gemm(self.exec, cout, k, p, wv, false, cols, false, os, false);
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (c, row) in os.chunks_mut(p).enumerate() {
                        for v in row {
                            *v += bv[c];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, cout, geom.oh, geom.ow], out)?;
        self.push(value, tracked, Op::Conv2d { x, w, b, geom, cols: cols_all })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v.max(0.0)).collect())?;
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permuted(perm)?;
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::Permute(a, perm.to_vec()))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return dim_err("concat of zero tensors"),
        };
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} for rank {}", first.len()));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]);
            if !ok {
                return dim_err(format!("concat {:?} with {:?} on axis {axis}", first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk: usize = t.shape()[axis..].iter().product();
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let tr = self.tracked(inputs);
        let value = Tensor::new(&out_shape, data)?;
        self.push(value, tr, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// `out[i] = x.flat[idx[i]]`, shaped `shape`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != idx.len() {
            return dim_err(format!("gather: {} indices for shape {:?}", idx.len(), shape));
        }
        let n = x.len();
        let mut data = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i >= n {
                return Err(Error::Index(format!("gather index {i} out of range {n}")));
            }
            data.push(x.data()[i]);
        }
        let tr = self.tracked(&[a]);
        let value = Tensor::new(shape, data)?;
        self.push(value, tr, Op::Gather { x: a, idx })
    }

    /// `out.flat[idx[i]] += x.flat[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&mut self, a: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.len() {
            return dim_err(format!("scatter_add: {} indices for {} values", idx.len(), x.len()));
        }
        let mut out = Tensor::zeros(shape);
        let n = out.len();
        {
            let od = out.data_mut();
            for (&i, v) in idx.iter().zip(x.data()) {
                if i >= n {
                    return Err(Error::Index(format!("scatter index {i} out of range {n}")));
                }
                od[i] += v;
            }
        }
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::ScatterAdd { x: a, idx })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let tr = self.tracked(&[a]);
        self.push(Tensor::scalar(s), tr, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Degenerate("mean of empty tensor".into()));
        }
        let s = x.sum() / x.len() as f32;
        let tr = self.tracked(&[a]);
        self.push(Tensor::scalar(s), tr, Op::Mean(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = *x.shape().last().ok_or_else(|| Error::Dimension("softmax of scalar".into()))?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_row(row);
        }
        let tr = self.tracked(&[a]);
        let value = Tensor::new(x.shape(), data)?;
        self.push(value, tr, Op::Softmax(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v.ln()).collect())?;
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::Log(a))
    }

    /// Mean over valid rows of `-w[y] * log softmax(logits)[y]`.
    pub fn softmax_ce(
        &mut self,
        logits: Var,
        labels: &[usize],
        valid: &[bool],
        class_weights: Option<&[f32]>,
    ) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 {
            return dim_err(format!("softmax_ce expects [M,C] logits, got {:?}", x.shape()));
        }
        let (m, c) = (x.shape()[0], x.shape()[1]);
        if labels.len() != m || valid.len() != m {
            return dim_err(format!(
                "softmax_ce: {m} rows, {} labels, {} valid flags",
                labels.len(),
                valid.len()
            ));
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return dim_err(format!("softmax_ce: {} class weights for {c} classes", w.len()));
            }
        }
        let n_valid = valid.iter().filter(|v| **v).count();
        if n_valid == 0 {
            return Err(Error::Degenerate("softmax_ce: no valid entries".into()));
        }
        let mut probs = x.data().to_vec();
        let mut coef = vec![0.0f32; m];
        let mut loss = 0.0f64;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            if !valid[i] {
                continue;
            }
            let y = labels[i];
            if y >= c {
                return Err(Error::Index(format!("label {y} out of range [0,{c})")));
            }
            let lse = log_sum_exp(row);
            let w = class_weights.map_or(1.0, |w| w[y]);
            loss += (w * (lse - row[y])) as f64;
            coef[i] = w / n_valid as f32;
            softmax_row(row);
        }
        let value = Tensor::scalar((loss / n_valid as f64) as f32);
        let tr = self.tracked(&[logits]);
        if !tr {
            probs = Vec::new();
        }
        self.push(
            value,
            tr,
            Op::SoftmaxCe { logits, probs, labels: labels.to_vec(), coef },
        )
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: impl CustomOp + 'static) -> Result<Var> {
        let tr = self.tracked(inputs);
        self.push(output, tr, Op::Custom { inputs: inputs.to_vec(), op: Box::new(op) })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                shapes[loss.0]
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shapes[loss.0], 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.node_backward(node, &g, &mut grads)?;
        }
        // Only leaves keep gradients; intermediate ones were consumed above.
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].tracked {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let map = |t: &Tensor, f: &dyn Fn(usize, f32) -> f32| -> Tensor {
            let data = t.data().iter().enumerate().map(|(i, v)| f(i, *v)).collect();
            Tensor::new(t.shape(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, map(g, &|_, v| -v))?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, map(g, &|i, v| v * vb.data()[i]))?;
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, map(g, &|i, v| v * va.data()[i]))?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, map(g, &|_, v| v * s))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.is_tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(self.exec, m, n, k, g.data(), false, vb.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da)?)?;
                }
                if self.is_tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(self.exec, k, m, n, va.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db)?)?;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                self.conv2d_backward(*x, *w, *b, geom, cols, g, grads)?;
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, map(g, &|i, v| if va.data()[i] > 0.0 { v } else { 0.0 }))?;
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshaped(self.shape(*a))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Permute(a, perm) => {
                let ga = g.permuted(&inverse_perm(perm))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = g.shape()[..*axis].iter().product();
                let out_chunk: usize = g.shape()[*axis..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let chunk: usize = s[*axis..].iter().product();
                    if self.is_tracked(v) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * out_chunk + offset;
                            data.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        self.accumulate(grads, v, Tensor::new(s, data)?)?;
                    }
                    offset += chunk;
                }
            }
            Op::Gather { x, idx } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let d = gx.data_mut();
                for (&i, v) in idx.iter().zip(g.data()) {
                    d[i] += v;
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::ScatterAdd { x, idx } => {
                let data = idx.iter().map(|&i| g.data()[i]).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), data)?)?;
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s))?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f32;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g.item() / n))?;
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut data = vec![0.0; y.len()];
                for ((dx, yr), gr) in data.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dx[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape(), data)?)?;
            }
            Op::Log(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, map(g, &|i, v| v / va.data()[i]))?;
            }
            Op::SoftmaxCe { logits, probs, labels, coef } => {
                let s = g.item();
                let shape = self.shape(*logits);
                let c = shape[1];
                let mut data = vec![0.0; probs.len()];
                for (i, (dx, p)) in data.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                    if coef[i] == 0.0 {
                        continue;
                    }
                    let k = s * coef[i];
                    for j in 0..c {
                        dx[j] = k * p[j];
                    }
                    dx[labels[i]] -= k;
                }
                self.accumulate(grads, *logits, Tensor::new(shape, data)?)?;
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.is_tracked(*v)).collect();
                let gs = op.backward(&vals, &node.value, g, &needs)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.shape(*v) {
                            return dim_err(format!(
                                "custom op `{}` gradient {:?} for input {:?}",
                                op.name(),
                                gi.shape(),
                                self.shape(*v)
                            ));
                        }
                        self.accumulate(grads, *v, gi)?;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[f32],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, cout) = (xs[0], ws[0]);
        let (k, p) = (geom.patch_len(), geom.out_pixels());
        let plane = geom.cin * geom.h * geom.w;
        let gd = g.data();

        if let Some(b) = b {
            if self.is_tracked(b) {
                let mut db = vec![0.0; cout];
                for s in 0..n {
                    for (c, row) in gd[s * cout * p..(s + 1) * cout * p].chunks(p).enumerate() {
                        db[c] += row.iter().sum::<f32>();
                    }
                }
                self.accumulate(grads, b, Tensor::new(&[cout], db)?)?;
            }
        }
        if self.is_tracked(w) {
            let mut dw = vec![0.0; cout * k];
            let xv = self.value(x).data();
            for s in 0..n {
                let cs: &[f32] = if geom.is_pointwise() {
                    &xv[s * plane..(s + 1) * plane]
                } else {
                    &cols[s * k * p..(s + 1) * k * p]
                };
                let gs = &gd[s * cout * p..(s + 1) * cout * p];
                kernels::gemm(self.exec, cout, p, k, gs, false, cs, true, &mut dw, true);
            }
            self.accumulate(grads, w, Tensor::new(ws, dw)?)?;
        }
        if self.is_tracked(x) {
            let wv = self.value(w).data();
            let mut dx = vec![0.0; n * plane];
            let mut dcols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
            for s in 0..n {
                let gs = &gd[s * cout * p..(s + 1) * cout * p];
                let dxs = &mut dx[s * plane..(s + 1) * plane];
                if geom.is_pointwise() {
                    kernels::gemm(self.exec, k, cout, p, wv, true, gs, false, dxs, false);
                } else {
                    kernels::gemm(self.exec, k, cout, p, wv, true, gs, false, &mut dcols, false);
                    kernels::col2im(self.exec, geom, &dcols, dxs);
                }
            }
            self.accumulate(grads, x, Tensor::new(xs, dx)?)?;
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f32 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f32 = row.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
