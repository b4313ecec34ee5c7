//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the node
//! order is already a topological order and `backward` walks it in reverse.

use super::kernels::{self, ConvDims};
use super::{Rng, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::parallel::Execution;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Relu,
    Tanh,
    OnePlusTanh,
    Square,
    Sqrt,
    Clamp(f64, f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    /// `x + c` with `c` treated as a constant (used for training noise).
    AddConst {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    /// Sum or mean over the axes whose output extent is 1 (kept dims).
    Reduce {
        x: Var,
        mean_divisor: Option<f64>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        dims: ConvDims,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MinOffDiagonal {
        x: Var,
        argmin: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Running mean/variance buffers of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    /// Exponential update `r ← (1 − m)·r + m·batch`, using the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.unbiased_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Statistics of one train-mode batch-normalization call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnLayout {
    batch: usize,
    features: usize,
    spatial: usize,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    warnings: Vec<String>,
    exec: Execution,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_execution(Execution::default())
    }

    pub fn with_execution(exec: Execution) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            warnings: Vec::new(),
            exec,
        }
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Degenerate-input notices recorded while building (e.g. single-row batch norm).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Which side of every non-differentiable point the forward pass took:
    /// ReLU sign, clamp region, maxpool argmax and off-diagonal argmin. Two
    /// forwards with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary { kind: UnaryKind::Relu, x } => {
                    out.extend(self.value(*x).data().iter().map(|&v| (v > 0.0) as usize));
                }
                Op::Unary {
                    kind: UnaryKind::Clamp(lo, hi),
                    x,
                } => {
                    out.extend(self.value(*x).data().iter().map(|&v| (v >= *lo) as usize + (v > *hi) as usize));
                }
                Op::MaxPool2 { argmax, .. } => out.extend(argmax),
                Op::MinOffDiagonal { argmin, .. } => out.extend(argmin),
                _ => {}
            }
        }
        out
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---------------------------------------------------------------- binary

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Elementwise op. Operands must have equal rank; along each axis the
    /// extents are equal or one of them is 1 (that operand is repeated).
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::Shape {
            op: "elementwise",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, &sa);
            let ob = broadcast_offsets(&out_shape, &sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::Binary { kind, a, b },
            Tensor::new(out_shape, data)?,
            rg,
        ))
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = |v: f64| match kind {
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::OnePlusTanh => 1.0 + v.tanh(),
            UnaryKind::Square => v * v,
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Clamp(lo, hi) => v.clamp(lo, hi),
        };
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(Op::Unary { kind, x }, value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    /// `1 + tanh(x)`, range (0, 2).
    pub fn one_plus_tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::OnePlusTanh, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    /// Gradient is 1 on `[lo, hi]` and 0 outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::Invalid(format!("clamp needs lo < hi, got {lo}, {hi}")));
        }
        Ok(self.unary(UnaryKind::Clamp(lo, hi), x))
    }

    /// Adds `Uniform(lo, hi)` per element; the noise is a constant for gradients.
    pub fn add_noise(&mut self, x: Var, rng: &mut Rng, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::Invalid(format!("noise range needs lo < hi, got {lo}, {hi}")));
        }
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v + rng.uniform(lo, hi)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::AddConst { x }, value, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| k * v);
        let rg = self.rg(x);
        self.push(Op::Scale { x, k }, value, rg)
    }

    // ----------------------------------------------------------------- shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape { x }, value, rg))
    }

    /// Rows `start..end` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).narrow(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Narrow { x, start }, value, rg))
    }

    // ------------------------------------------------------------ reductions

    fn reduce(&mut self, x: Var, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut out_shape = shape.clone();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let mut count = 1usize;
        for &ax in &axes {
            if ax >= shape.len() {
                return Err(Error::Invalid(format!(
                    "reduction axis {ax} out of range for shape {shape:?}"
                )));
            }
            if shape[ax] == 0 {
                return Err(Error::Invalid(format!(
                    "empty reduction axis {ax} in shape {shape:?}"
                )));
            }
            count *= shape[ax];
            out_shape[ax] = 1;
        }
        let offsets = broadcast_offsets(&shape, &out_shape);
        let mut data = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in offsets.iter().zip(self.value(x).data()) {
            data[o] += v;
        }
        let mean_divisor = mean.then_some(count as f64);
        if let Some(d) = mean_divisor {
            data.iter_mut().for_each(|v| *v /= d);
        }
        let rg = self.rg(x);
        let r = self.push(
            Op::Reduce { x, mean_divisor },
            Tensor::new(out_shape.clone(), data)?,
            rg,
        );
        if keepdim {
            return Ok(r);
        }
        let squeezed: Vec<usize> = out_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &e)| e)
            .collect();
        let squeezed = if squeezed.is_empty() { vec![1] } else { squeezed };
        self.reshape(r, &squeezed)
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, keepdim, false)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, keepdim, true)
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false, true)
    }

    /// `Σ (aᵢ − bᵢ)²` for equally shaped operands.
    pub fn squared_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("squared_l2_distance", self.shape(a), self.shape(b));
        }
        let d = self.sub(a, b)?;
        let d2 = self.square(d);
        self.sum_all(d2)
    }

    /// Spatial mean of the trailing two axes: `…×H×W → …`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 3 {
            return Err(Error::Invalid(format!(
                "global_avg_pool needs at least C×H×W, got {:?}",
                self.shape(x)
            )));
        }
        self.mean_axes(x, &[r - 2, r - 1], false)
    }

    // ------------------------------------------------------------------ conv

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 || ks[1] != xs[1] {
            return shape_err("conv2d", &xs, &ks);
        }
        if bs != [ks[0]] {
            return shape_err("conv2d bias", &bs, &ks);
        }
        let dims = ConvDims {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ks[0],
            height: xs[2],
            width: xs[3],
        };
        let out = kernels::conv3x3_forward(
            self.exec,
            dims,
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![xs[0], ks[0], xs[2], xs[3]], out)?;
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        Ok(self.push(Op::Conv2d { x, k, b, dims }, value, rg))
    }

    /// 2×2 window, stride 2, floor on odd extents.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Invalid(format!(
                "maxpool2 needs B×C×H×W with H,W ≥ 2, got {s:?}"
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(s[0] * s[1], s[2], s[3], self.value(x).data());
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaxPool2 { x, argmax }, value, rg))
    }

    // ------------------------------------------------------------ batch norm

    /// Batch normalization over B×F or B×C×H×W input (statistics per F / per C).
    ///
    /// Train mode normalizes with the biased batch variance and returns the
    /// batch statistics for the caller to fold into `running`. A single-row
    /// train batch falls back to `running` and records a warning.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        let layout = match s.len() {
            2 => BnLayout {
                batch: s[0],
                features: s[1],
                spatial: 1,
            },
            4 => BnLayout {
                batch: s[0],
                features: s[1],
                spatial: s[2] * s[3],
            },
            _ => return shape_err("batchnorm", &s, &[]),
        };
        let f = layout.features;
        if layout.batch == 0 {
            return Err(Error::Invalid("batchnorm on empty batch".into()));
        }
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return shape_err("batchnorm affine", &s, self.shape(gamma));
        }
        if running.mean.len() != f || running.var.len() != f {
            return shape_err("batchnorm running stats", &s, &[running.mean.len()]);
        }
        let mut batch_stats = mode == Mode::Train;
        if batch_stats && layout.batch == 1 {
            let msg = format!(
                "batchnorm over {f} features got a single-row train batch; using running statistics"
            );
            log::warn!("{msg}");
            self.warnings.push(msg);
            batch_stats = false;
        }
        let xv = self.value(x).data();
        let m = (layout.batch * layout.spatial) as f64;
        let idx = |b: usize, c: usize, p: usize| (b * f + c) * layout.spatial + p;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for c in 0..f {
                let mut acc = 0.0;
                for b in 0..layout.batch {
                    for p in 0..layout.spatial {
                        acc += xv[idx(b, c, p)];
                    }
                }
                mean[c] = acc / m;
                let mut acc = 0.0;
                for b in 0..layout.batch {
                    for p in 0..layout.spatial {
                        let d = xv[idx(b, c, p)] - mean[c];
                        acc += d * d;
                    }
                }
                var[c] = acc / m;
            }
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..layout.batch {
            for c in 0..f {
                for p in 0..layout.spatial {
                    let i = idx(b, c, p);
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let stats = batch_stats.then(|| BatchStats {
            unbiased_var: if m > 1.0 {
                var.iter().map(|v| v * m / (m - 1.0)).collect()
            } else {
                var.clone()
            },
            mean,
        });
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            },
            value,
            rg,
        );
        Ok((v, stats))
    }

    // ---------------------------------------------------------------- linear

    /// `x·Wᵀ + b` for x: B×F_in, W: F_out×F_in, b: F_out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", &xs, &ws);
        }
        if self.shape(b) != [ws[0]] {
            return shape_err("linear bias", &ws, self.shape(b));
        }
        let (bsz, fin, fout) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; bsz * fout];
        for r in 0..bsz {
            let row = &xv[r * fin..(r + 1) * fin];
            for o in 0..fout {
                let wr = &wv[o * fin..(o + 1) * fin];
                out[r * fout + o] = row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() + bv[o];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Linear { x, w, b }, Tensor::new(vec![bsz, fout], out)?, rg))
    }

    // ------------------------------------------------------------- selection

    /// For `x: N×N×C`, `y[i,c] = min_{j≠i} x[i,j,c]`. Ties resolve to the smallest `j`.
    pub fn min_off_diagonal(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != s[1] {
            return shape_err("min_off_diagonal", &s, &[]);
        }
        let (n, c) = (s[0], s[2]);
        if n < 2 {
            return Err(Error::Invalid(
                "minimum over other classes is empty with a single class".into(),
            ));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        let mut argmin = vec![0; n * c];
        for i in 0..n {
            for ch in 0..c {
                let mut best = f64::INFINITY;
                let mut best_j = usize::MAX;
                for j in (0..n).filter(|&j| j != i) {
                    let v = xv[(i * n + j) * c + ch];
                    if best_j == usize::MAX || v < best {
                        best = v;
                        best_j = j;
                    }
                }
                out[i * c + ch] = best;
                argmin[i * c + ch] = (i * n + best_j) * c + ch;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::MinOffDiagonal { x, argmin }, Tensor::new(vec![n, c], out)?, rg))
    }

    // ------------------------------------------------------------------ loss

    /// Mean cross-entropy of row-wise softmax over `logits: B×N`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err("softmax_cross_entropy", &s, &[labels.len()]);
        }
        let n = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Invalid(format!("label {bad} out of range for {n} classes")));
        }
        let probs = softmax_rows(self.value(logits))?;
        let z = self.value(logits).data();
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &z[r * n..(r + 1) * n];
            let (mx, lse) = log_sum_exp(row);
            loss += -(row[l] - mx - lse);
        }
        loss /= labels.len().max(1) as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    // -------------------------------------------------------------- backward

    /// Reverse accumulation from a one-element root. Fails on a second call
    /// until [`Graph::reset_grads`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        let shape = self.shape(root).to_vec();
        self.grads[root.0] = Some(Tensor::ones(&shape));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g)?;
            self.grads[i] = Some(g);
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let va = self.value(a).data();
                let vb = self.value(b).data();
                let os = node.value.shape();
                let oa = broadcast_offsets(os, &sa);
                let ob = broadcast_offsets(os, &sb);
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for (k, &gv) in gd.iter().enumerate() {
                    let (ia, ib) = (oa[k], ob[k]);
                    let (da, db) = match kind {
                        BinaryKind::Add => (gv, gv),
                        BinaryKind::Sub => (gv, -gv),
                        BinaryKind::Mul => (gv * vb[ib], gv * va[ia]),
                        BinaryKind::Div => (gv / vb[ib], -gv * va[ia] / (vb[ib] * vb[ib])),
                    };
                    ga[ia] += da;
                    gb[ib] += db;
                }
                if self.rg(a) {
                    out.push((a, Tensor::new(sa, ga)?));
                }
                if self.rg(b) {
                    out.push((b, Tensor::new(sb, gb)?));
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let d: Vec<f64> = (0..gd.len())
                    .map(|k| {
                        let local = match kind {
                            UnaryKind::Relu => (xv[k] > 0.0) as u8 as f64,
                            UnaryKind::Tanh => 1.0 - yv[k] * yv[k],
                            UnaryKind::OnePlusTanh => {
                                let t = yv[k] - 1.0;
                                1.0 - t * t
                            }
                            UnaryKind::Square => 2.0 * xv[k],
                            UnaryKind::Sqrt => 0.5 / yv[k],
                            UnaryKind::Clamp(lo, hi) => {
                                (xv[k] >= *lo && xv[k] <= *hi) as u8 as f64
                            }
                        };
                        gd[k] * local
                    })
                    .collect();
                out.push((*x, Tensor::new(self.shape(*x).to_vec(), d)?));
            }
            Op::Scale { x, k } => out.push((*x, g.map(|v| v * k))),
            Op::AddConst { x } => out.push((*x, g.clone())),
            Op::Reshape { x } => out.push((*x, g.reshape(self.shape(*x))?)),
            Op::Narrow { x, start } => {
                let xs = self.shape(*x);
                let row: usize = xs[1..].iter().product();
                let mut d = vec![0.0; xs.iter().product()];
                d[start * row..start * row + gd.len()].copy_from_slice(gd);
                out.push((*x, Tensor::new(xs.to_vec(), d)?));
            }
            Op::Reduce { x, mean_divisor } => {
                let xs = self.shape(*x).to_vec();
                let offs = broadcast_offsets(&xs, node.value.shape());
                let scale = mean_divisor.map_or(1.0, |d| 1.0 / d);
                let d: Vec<f64> = offs.iter().map(|&o| gd[o] * scale).collect();
                out.push((*x, Tensor::new(xs, d)?));
            }
            Op::Conv2d { x, k, b, dims } => {
                if self.rg(*x) {
                    let gin = kernels::conv3x3_backward_input(
                        self.exec,
                        *dims,
                        gd,
                        self.value(*k).data(),
                    );
                    out.push((*x, Tensor::new(self.shape(*x).to_vec(), gin)?));
                }
                if self.rg(*k) || self.rg(*b) {
                    let (gk, gb) = kernels::conv3x3_backward_params(
                        self.exec,
                        *dims,
                        gd,
                        self.value(*x).data(),
                    );
                    out.push((*k, Tensor::new(self.shape(*k).to_vec(), gk)?));
                    out.push((*b, Tensor::new(self.shape(*b).to_vec(), gb)?));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let xs = self.shape(*x).to_vec();
                let mut d = vec![0.0; xs.iter().product()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] += gv;
                }
                out.push((*x, Tensor::new(xs, d)?));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = layout.features;
                let sp = layout.spatial;
                let m = (layout.batch * sp) as f64;
                let gam = self.value(*gamma).data();
                let idx = |b: usize, c: usize, p: usize| (b * f + c) * sp + p;
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for b in 0..layout.batch {
                    for c in 0..f {
                        for p in 0..sp {
                            let i = idx(b, c, p);
                            dgamma[c] += gd[i] * xhat[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for c in 0..f {
                        let k = gam[c] * inv_std[c];
                        for b in 0..layout.batch {
                            for p in 0..sp {
                                let i = idx(b, c, p);
                                dx[i] = if *batch_stats {
                                    k / m * (m * gd[i] - dbeta[c] - xhat[i] * dgamma[c])
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(self.shape(*x).to_vec(), dx)?));
                }
                out.push((*gamma, Tensor::new(vec![f], dgamma)?));
                out.push((*beta, Tensor::new(vec![f], dbeta)?));
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (bsz, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; bsz * fin];
                    for r in 0..bsz {
                        for o in 0..fout {
                            let gv = gd[r * fout + o];
                            for i in 0..fin {
                                dx[r * fin + i] += gv * wv[o * fin + i];
                            }
                        }
                    }
                    out.push((*x, Tensor::new(vec![bsz, fin], dx)?));
                }
                let mut dw = vec![0.0; fout * fin];
                let mut db = vec![0.0; fout];
                for r in 0..bsz {
                    for o in 0..fout {
                        let gv = gd[r * fout + o];
                        db[o] += gv;
                        for i in 0..fin {
                            dw[o * fin + i] += gv * xv[r * fin + i];
                        }
                    }
                }
                out.push((*w, Tensor::new(vec![fout, fin], dw)?));
                out.push((*b, Tensor::new(vec![fout], db)?));
            }
            Op::MinOffDiagonal { x, argmin } => {
                let xs = self.shape(*x).to_vec();
                let mut d = vec![0.0; xs.iter().product()];
                for (&src, &gv) in argmin.iter().zip(gd) {
                    d[src] += gv;
                }
                out.push((*x, Tensor::new(xs, d)?));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = probs.shape()[1];
                let bsz = labels.len() as f64;
                let mut d = probs.data().to_vec();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * n + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= gd[0] / bsz);
                out.push((*logits, Tensor::new(probs.shape().to_vec(), d)?));
            }
        }
        Ok(out)
    }
}

/// Row max and `ln Σ exp(z − max)`; the exponentials are summed in ascending
/// order so the result does not depend on the order of the entries.
fn log_sum_exp(row: &[f64]) -> (f64, f64) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = row.iter().map(|&z| (z - mx).exp()).collect();
    e.sort_by(f64::total_cmp);
    (mx, e.iter().sum::<f64>().ln())
}

/// Numerically stable row-wise softmax of a B×N tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return shape_err("softmax_rows", s, &[]);
    }
    let n = s[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(n) {
        let (mx, lse) = log_sum_exp(row);
        out.extend(row.iter().map(|&z| (z - mx - lse).exp()));
    }
    Tensor::new(s.to_vec(), out)
}

/// Output shape of a same-rank broadcast, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each flat index of `full`, the flat index into `part`, where `part`
/// has the same rank and every extent either equal or 1.
fn broadcast_offsets(full: &[usize], part: &[usize]) -> Vec<usize> {
    let rank = full.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if part[ax] == 1 && full[ax] != 1 { 0 } else { acc };
        acc *= part[ax];
    }
    let n: usize = full.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < full[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
