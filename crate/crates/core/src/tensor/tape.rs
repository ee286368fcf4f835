//! Dynamic Wengert tape: ops append nodes during the forward pass, `backward`
//! replays them in reverse insertion order and accumulates adjoints.
//!
//! One tape per forward pass, one tape per training worker. Node values are
//! immutable after creation; gradients accumulate across repeated `backward`
//! calls until [`Tape::zero_grads`] is called.

use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Cheap to copy, only valid for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Exp(Var),
    Tanh(Var),
    PowI(Var, u32),
    Gelu(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    GroupedRational {
        x: Var,
        num: Vec<Var>,
        den: Vec<Var>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of primitive ops with per-node accumulated adjoints.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Trailing-dimension broadcast: shapes align from the right; each pair of
/// dims must be equal or one of them 1 (missing dims count as 1).
fn broadcast_shape(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let a = if i < lhs.len() { lhs[lhs.len() - 1 - i] } else { 1 };
        let b = if i < rhs.len() { rhs[rhs.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = if a == b {
            a
        } else if a == 1 {
            b
        } else if b == 1 {
            a
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` as seen from `out_shape`, with stride 0 on
/// broadcast dimensions.
fn broadcast_strides(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut own = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        own[i] = acc;
        acc *= shape[i];
    }
    for i in 0..rank {
        let rev = rank - 1 - i;
        if i < shape.len() {
            let dim = shape[shape.len() - 1 - i];
            strides[rev] = if dim == 1 { 0 } else { own[shape.len() - 1 - i] };
        }
    }
    strides
}

/// Maps a flat output index to a flat input index under broadcast strides.
fn project_index(flat: usize, out_shape: &[usize], strides: &[usize]) -> usize {
    let mut rem = flat;
    let mut idx = 0usize;
    for i in (0..out_shape.len()).rev() {
        let coord = rem % out_shape[i];
        rem /= out_shape[i];
        idx += coord * strides[i];
    }
    idx
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
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

    /// Leases a tensor onto the tape as a leaf. Gradient tracking follows the
    /// tensor's `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.clone(), t.wants_grad())
    }

    /// Leaf that never participates in differentiation.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.clone(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            id: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.id >= self.nodes.len() {
            return Err(TensorError::ForeignVar {
                id: v.id,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].requires_grad)
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        op: Op,
        value: Tensor,
        parents: &[Var],
    ) -> Result<Var, TensorError> {
        value.assert_finite(op_name)?;
        let rg = self.needs_grad(parents);
        Ok(self.push(op, value, rg))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Vec<usize>), TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let st_a = broadcast_strides(&out_shape, &sa);
        let st_b = broadcast_strides(&out_shape, &sb);
        let n: usize = out_shape.iter().product();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let ia = project_index(i, &out_shape, &st_a);
            let ib = project_index(i, &out_shape, &st_b);
            out.push(f(da[ia], db[ib]));
        }
        Ok((Tensor::new(out_shape.clone(), out)?, out_shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, _) = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        self.finish("add", Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, _) = self.binary_elementwise("sub", a, b, |x, y| x - y)?;
        self.finish("sub", Op::Sub(a, b), value, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, _) = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        self.finish("mul", Op::Mul(a, b), value, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, _) = self.binary_elementwise("div", a, b, |x, y| x / y)?;
        self.finish("div", Op::Div(a, b), value, &[a, b])
    }

    fn unary(
        &mut self,
        name: &'static str,
        v: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var, TensorError> {
        self.check(v)?;
        let t = self.value(v);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.finish(name, op, value, &[v])
    }

    pub fn neg(&mut self, v: Var) -> Result<Var, TensorError> {
        self.unary("neg", v, Op::Neg(v), |x| -x)
    }

    pub fn scale(&mut self, v: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("scale", v, Op::Scale(v, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, v: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("add_scalar", v, Op::AddScalar(v), |x| x + c)
    }

    pub fn abs(&mut self, v: Var) -> Result<Var, TensorError> {
        self.unary("abs", v, Op::Abs(v), f64::abs)
    }

    pub fn exp(&mut self, v: Var) -> Result<Var, TensorError> {
        self.unary("exp", v, Op::Exp(v), f64::exp)
    }

    pub fn tanh(&mut self, v: Var) -> Result<Var, TensorError> {
        self.unary("tanh", v, Op::Tanh(v), f64::tanh)
    }

    /// Elementwise integer power; `x^0 == 1` for every `x` including zero.
    pub fn powi(&mut self, v: Var, k: u32) -> Result<Var, TensorError> {
        self.unary("powi", v, Op::PowI(v, k), |x| int_pow(x, k))
    }

    pub fn gelu(&mut self, v: Var) -> Result<Var, TensorError> {
        self.unary("gelu", v, Op::Gelu(v), crate::util::special::gelu)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row_out = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row_b = &db[p * n..(p + 1) * n];
                for (o, &bv) in row_out.iter_mut().zip(row_b) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.finish("matmul", Op::Matmul(a, b), value, &[a, b])
    }

    pub fn transpose(&mut self, v: Var) -> Result<Var, TensorError> {
        self.check(v)?;
        let s = self.shape(v).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let d = self.value(v).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.finish("transpose", Op::Transpose(v), value, &[v])
    }

    pub fn sum(&mut self, v: Var) -> Result<Var, TensorError> {
        self.check(v)?;
        let s: f64 = self.value(v).data().iter().sum();
        self.finish("sum", Op::Sum(v), Tensor::scalar(s), &[v])
    }

    pub fn mean(&mut self, v: Var) -> Result<Var, TensorError> {
        self.check(v)?;
        let t = self.value(v);
        if t.numel() == 0 {
            return Err(TensorError::Dimension {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.finish("mean", Op::Mean(v), Tensor::scalar(s), &[v])
    }

    /// Column means of a rank-2 tensor: `[r, c] -> [c]`.
    pub fn mean_rows(&mut self, v: Var) -> Result<Var, TensorError> {
        self.check(v)?;
        let s = self.shape(v).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::Dimension {
                op: "mean_rows",
                msg: format!("expected non-empty rank-2 tensor, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(v).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += d[i * c + j];
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let value = Tensor::new(vec![c], out)?;
        self.finish("mean_rows", Op::MeanRows(v), value, &[v])
    }

    pub fn reshape(&mut self, v: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        self.check(v)?;
        let value = self.value(v).reshaped(shape)?;
        self.finish("reshape", Op::Reshape(v), value, &[v])
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, v: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check(v)?;
        let s = self.shape(v).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::Dimension {
                op: "slice_cols",
                msg: format!("cols [{start}, {}) out of shape {s:?}", start + len),
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(v).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        self.finish("slice_cols", Op::SliceCols { x: v, start, len }, value, &[v])
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Dimension {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        }
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::Dimension {
                    op: "concat_cols",
                    msg: format!("incompatible part shape {s:?}"),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.finish("concat_cols", Op::ConcatCols(parts.to_vec()), value, parts)
    }

    /// Stacks rank-1 tensors of equal length into a rank-2 tensor.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::Dimension {
                op: "stack_rows",
                msg: "no inputs".into(),
            });
        }
        for &r in rows {
            self.check(r)?;
        }
        let width = self.value(rows[0]).numel();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let t = self.value(r);
            if t.shape().len() != 1 || t.numel() != width {
                return Err(TensorError::Dimension {
                    op: "stack_rows",
                    msg: format!("expected rank-1 of len {width}, got {:?}", t.shape()),
                });
            }
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows.len(), width], out)?;
        self.finish("stack_rows", Op::StackRows(rows.to_vec()), value, rows)
    }

    /// Numerically stable softmax over the trailing dimension.
    pub fn softmax(&mut self, v: Var) -> Result<Var, TensorError> {
        self.check(v)?;
        let s = self.shape(v).to_vec();
        if s.is_empty() || *s.last().unwrap() == 0 {
            return Err(TensorError::Dimension {
                op: "softmax",
                msg: format!("empty trailing dim in {s:?}"),
            });
        }
        let w = *s.last().unwrap();
        let d = self.value(v).data();
        let mut out = vec![0.0; d.len()];
        for row in 0..d.len() / w {
            let chunk = &d[row * w..(row + 1) * w];
            let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in chunk.iter().enumerate() {
                let e = (x - m).exp();
                out[row * w + j] = e;
                z += e;
            }
            for j in 0..w {
                out[row * w + j] /= z;
            }
        }
        let value = Tensor::new(s, out)?;
        self.finish("softmax", Op::Softmax(v), value, &[v])
    }

    /// Layer normalization over the trailing dimension with affine params.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or(TensorError::Dimension {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        if self.value(gamma).numel() != w || self.value(beta).numel() != w {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let d = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; d.len()];
        for row in 0..d.len() / w {
            let chunk = &d[row * w..(row + 1) * w];
            let mu = chunk.iter().sum::<f64>() / w as f64;
            let var = chunk.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..w {
                out[row * w + j] = g[j] * (chunk[j] - mu) * inv + b[j];
            }
        }
        let value = Tensor::new(s, out)?;
        self.finish(
            "layer_norm",
            Op::LayerNorm { x, gamma, beta, eps },
            value,
            &[x, gamma, beta],
        )
    }

    /// Mean cross-entropy of `[n, k]` logits against `n` class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                msg: format!("logits {s:?} vs {} labels", labels.len()),
            });
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let d = self.value(logits).data();
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let chunk = &d[row * k..(row + 1) * k];
            let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + chunk.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - chunk[label];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        self.finish(
            "cross_entropy",
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
            &[logits],
        )
    }

    /// Group-shared safe rational activation over the trailing (channel)
    /// dimension. `num[g]`/`den[g]` hold group `g`'s numerator/denominator
    /// coefficients; channel `c` of `C` uses group `c*G/C`. The denominator is
    /// `1 + |Q(x)|`, so it never vanishes.
    pub fn grouped_rational(
        &mut self,
        x: Var,
        num: Vec<Var>,
        den: Vec<Var>,
    ) -> Result<Var, TensorError> {
        self.check(x)?;
        for v in num.iter().chain(den.iter()) {
            self.check(*v)?;
        }
        let groups = num.len();
        if groups == 0 || den.len() != groups {
            return Err(TensorError::Dimension {
                op: "grouped_rational",
                msg: format!("{} numerator groups vs {} denominator groups", groups, den.len()),
            });
        }
        let s = self.shape(x).to_vec();
        let channels = *s.last().ok_or(TensorError::Dimension {
            op: "grouped_rational",
            msg: "rank-0 input".into(),
        })?;
        if channels % groups != 0 {
            return Err(TensorError::Dimension {
                op: "grouped_rational",
                msg: format!("{groups} groups do not divide {channels} channels"),
            });
        }
        let na = self.value(num[0]).numel();
        let nb = self.value(den[0]).numel();
        for &v in &num {
            if self.value(v).numel() != na || self.shape(v).len() != 1 {
                return Err(TensorError::Dimension {
                    op: "grouped_rational",
                    msg: "numerator coefficient vectors must share one length".into(),
                });
            }
        }
        for &v in &den {
            if self.value(v).numel() != nb || self.shape(v).len() != 1 {
                return Err(TensorError::Dimension {
                    op: "grouped_rational",
                    msg: "denominator coefficient vectors must share one length".into(),
                });
            }
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for (i, &xv) in d.iter().enumerate() {
            let g = (i % channels) * groups / channels;
            let p = horner(self.value(num[g]).data(), xv);
            let q = horner(self.value(den[g]).data(), xv);
            out[i] = p / (1.0 + q.abs());
        }
        let value = Tensor::new(s, out)?;
        let mut parents = vec![x];
        parents.extend_from_slice(&num);
        parents.extend_from_slice(&den);
        self.finish(
            "grouped_rational",
            Op::GroupedRational { x, num, den },
            value,
            &parents,
        )
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into the tape's
    /// per-node store; repeated calls without [`Tape::zero_grads`] add up.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.check(loss)?;
        let node = &self.nodes[loss.id];
        if !node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: node.value.shape().to_vec(),
            });
        }
        if !node.requires_grad {
            return Err(TensorError::DetachedLoss);
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let upstream = match adj[id].take() {
                Some(u) => u,
                None => continue,
            };
            self.propagate(id, &upstream, &mut adj);
            if self.nodes[id].requires_grad {
                let slot = &mut self.grads[id];
                match slot {
                    Some(acc) => {
                        for (a, u) in acc.iter_mut().zip(&upstream) {
                            *a += u;
                        }
                    }
                    None => *slot = Some(upstream),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of the most recent backward passes for `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.id)?.as_ref().map(|g| {
            Tensor::new(self.nodes[v.id].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches node shape")
        })
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn accumulate(
        &self,
        adj: &mut [Option<Vec<f64>>],
        target: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.id].requires_grad {
            return;
        }
        let len = self.nodes[target.id].value.numel();
        let slot = adj[target.id].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn broadcast_backward(
        &self,
        adj: &mut [Option<Vec<f64>>],
        out_shape: &[usize],
        upstream: &[f64],
        target: Var,
        other: Var,
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if !self.nodes[target.id].requires_grad {
            return;
        }
        let st_t = broadcast_strides(out_shape, self.nodes[target.id].value.shape());
        let st_o = broadcast_strides(out_shape, self.nodes[other.id].value.shape());
        let dt = self.nodes[target.id].value.data();
        let do_ = self.nodes[other.id].value.data();
        self.accumulate(adj, target, |slot| {
            for (i, &u) in upstream.iter().enumerate() {
                let it = project_index(i, out_shape, &st_t);
                let io = project_index(i, out_shape, &st_o);
                slot[it] += f(u, dt[it], do_[io]);
            }
        });
    }

    fn propagate(&self, id: usize, upstream: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out_shape = self.nodes[id].value.shape().to_vec();
        match self.nodes[id].op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.broadcast_backward(adj, &out_shape, upstream, a, b, |u, _, _| u);
                self.broadcast_backward(adj, &out_shape, upstream, b, a, |u, _, _| u);
            }
            Op::Sub(a, b) => {
                self.broadcast_backward(adj, &out_shape, upstream, a, b, |u, _, _| u);
                self.broadcast_backward(adj, &out_shape, upstream, b, a, |u, _, _| -u);
            }
            Op::Mul(a, b) => {
                self.broadcast_backward(adj, &out_shape, upstream, a, b, |u, _, o| u * o);
                self.broadcast_backward(adj, &out_shape, upstream, b, a, |u, _, o| u * o);
            }
            Op::Div(a, b) => {
                // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
                self.broadcast_backward(adj, &out_shape, upstream, a, b, |u, _, o| u / o);
                self.broadcast_backward(adj, &out_shape, upstream, b, a, |u, t, o| {
                    -u * o / (t * t)
                });
            }
            Op::Neg(a) => self.accumulate(adj, a, |slot| {
                for (s, &u) in slot.iter_mut().zip(upstream) {
                    *s -= u;
                }
            }),
            Op::Scale(a, c) => self.accumulate(adj, a, |slot| {
                for (s, &u) in slot.iter_mut().zip(upstream) {
                    *s += c * u;
                }
            }),
            Op::AddScalar(a) => self.accumulate(adj, a, |slot| {
                for (s, &u) in slot.iter_mut().zip(upstream) {
                    *s += u;
                }
            }),
            Op::Abs(a) => {
                let x = self.nodes[a.id].value.data();
                self.accumulate(adj, a, |slot| {
                    for i in 0..slot.len() {
                        slot[i] += upstream[i] * sign0(x[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = self.nodes[id].value.data();
                self.accumulate(adj, a, |slot| {
                    for i in 0..slot.len() {
                        slot[i] += upstream[i] * y[i];
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[id].value.data();
                self.accumulate(adj, a, |slot| {
                    for i in 0..slot.len() {
                        slot[i] += upstream[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::PowI(a, k) => {
                let x = self.nodes[a.id].value.data();
                self.accumulate(adj, a, |slot| {
                    for i in 0..slot.len() {
                        let d = if k == 0 {
                            0.0
                        } else {
                            k as f64 * int_pow(x[i], k - 1)
                        };
                        slot[i] += upstream[i] * d;
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.nodes[a.id].value.data();
                self.accumulate(adj, a, |slot| {
                    for i in 0..slot.len() {
                        slot[i] += upstream[i] * crate::util::special::gelu_derivative(x[i]);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a.id].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.id].value.shape()[1];
                let da = self.nodes[a.id].value.data();
                let db = self.nodes[b.id].value.data();
                // dA = dY · B^T
                self.accumulate(adj, a, |slot| {
                    for i in 0..m {
                        let up_row = &upstream[i * n..(i + 1) * n];
                        let slot_row = &mut slot[i * k..(i + 1) * k];
                        for p in 0..k {
                            let row_b = &db[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (&u, &bv) in up_row.iter().zip(row_b) {
                                acc += u * bv;
                            }
                            slot_row[p] += acc;
                        }
                    }
                });
                // dB = A^T · dY
                self.accumulate(adj, b, |slot| {
                    for i in 0..m {
                        let up_row = &upstream[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = da[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let slot_row = &mut slot[p * n..(p + 1) * n];
                            for (s, &u) in slot_row.iter_mut().zip(up_row) {
                                *s += aip * u;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (out_shape[0], out_shape[1]);
                self.accumulate(adj, a, |slot| {
                    for j in 0..n {
                        for i in 0..m {
                            slot[i * n + j] += upstream[j * m + i];
                        }
                    }
                });
            }
            Op::Sum(a) => self.accumulate(adj, a, |slot| {
                for s in slot.iter_mut() {
                    *s += upstream[0];
                }
            }),
            Op::Mean(a) => {
                let n = self.nodes[a.id].value.numel() as f64;
                self.accumulate(adj, a, |slot| {
                    for s in slot.iter_mut() {
                        *s += upstream[0] / n;
                    }
                });
            }
            Op::MeanRows(a) => {
                let s_in = self.nodes[a.id].value.shape();
                let (r, c) = (s_in[0], s_in[1]);
                self.accumulate(adj, a, |slot| {
                    for i in 0..r {
                        for j in 0..c {
                            slot[i * c + j] += upstream[j] / r as f64;
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(adj, a, |slot| {
                for (s, &u) in slot.iter_mut().zip(upstream) {
                    *s += u;
                }
            }),
            Op::SliceCols { x, start, len } => {
                let c = self.nodes[x.id].value.shape()[1];
                let rows = out_shape[0];
                self.accumulate(adj, x, |slot| {
                    for i in 0..rows {
                        for j in 0..len {
                            slot[i * c + start + j] += upstream[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = out_shape[0];
                let total = out_shape[1];
                let mut offset = 0usize;
                for &p in &parts {
                    let w = self.nodes[p.id].value.shape()[1];
                    self.accumulate(adj, p, |slot| {
                        for i in 0..rows {
                            for j in 0..w {
                                slot[i * w + j] += upstream[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let width = out_shape[1];
                for (r, &v) in rows.iter().enumerate() {
                    self.accumulate(adj, v, |slot| {
                        for j in 0..width {
                            slot[j] += upstream[r * width + j];
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[id].value.data();
                let w = *out_shape.last().unwrap();
                self.accumulate(adj, a, |slot| {
                    for row in 0..y.len() / w {
                        let o = row * w;
                        let dot: f64 = (0..w).map(|j| upstream[o + j] * y[o + j]).sum();
                        for j in 0..w {
                            slot[o + j] += y[o + j] * (upstream[o + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let w = *out_shape.last().unwrap();
                let xd = self.nodes[x.id].value.data();
                let gd = self.nodes[gamma.id].value.data();
                let rows = xd.len() / w;
                // Shared row statistics for all three parents.
                let mut stats = Vec::with_capacity(rows);
                for row in 0..rows {
                    let chunk = &xd[row * w..(row + 1) * w];
                    let mu = chunk.iter().sum::<f64>() / w as f64;
                    let var = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
                    stats.push((mu, 1.0 / (var + eps).sqrt()));
                }
                self.accumulate(adj, gamma, |slot| {
                    for row in 0..rows {
                        let (mu, inv) = stats[row];
                        for j in 0..w {
                            let xh = (xd[row * w + j] - mu) * inv;
                            slot[j] += upstream[row * w + j] * xh;
                        }
                    }
                });
                self.accumulate(adj, beta, |slot| {
                    for row in 0..rows {
                        for j in 0..w {
                            slot[j] += upstream[row * w + j];
                        }
                    }
                });
                self.accumulate(adj, x, |slot| {
                    for row in 0..rows {
                        let (mu, inv) = stats[row];
                        let o = row * w;
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..w {
                            let xh = (xd[o + j] - mu) * inv;
                            let dxh = upstream[o + j] * gd[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh /= w as f64;
                        mean_dxh_xh /= w as f64;
                        for j in 0..w {
                            let xh = (xd[o + j] - mu) * inv;
                            let dxh = upstream[o + j] * gd[j];
                            slot[o + j] += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let s = self.nodes[logits.id].value.shape();
                let (n, k) = (s[0], s[1]);
                let d = self.nodes[logits.id].value.data();
                self.accumulate(adj, logits, |slot| {
                    for (row, &label) in labels.iter().enumerate() {
                        let chunk = &d[row * k..(row + 1) * k];
                        let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = chunk.iter().map(|&x| (x - m).exp()).sum();
                        for j in 0..k {
                            let p = (chunk[j] - m).exp() / z;
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            slot[row * k + j] += upstream[0] * (p - onehot) / n as f64;
                        }
                    }
                });
            }
            Op::GroupedRational { x, num, den } => {
                let groups = num.len();
                let xd = self.nodes[x.id].value.data();
                let channels = *self.nodes[x.id].value.shape().last().unwrap();
                // d phi / d x = (P' D - P sign(Q) Q') / D^2
                self.accumulate(adj, x, |slot| {
                    for (i, &xv) in xd.iter().enumerate() {
                        let g = (i % channels) * groups / channels;
                        let a = self.nodes[num[g].id].value.data();
                        let b = self.nodes[den[g].id].value.data();
                        let p = horner(a, xv);
                        let q = horner(b, xv);
                        let dp = horner_derivative(a, xv);
                        let dq = horner_derivative(b, xv);
                        let d = 1.0 + q.abs();
                        let phi_prime = (dp * d - p * sign0(q) * dq) / (d * d);
                        slot[i] += upstream[i] * phi_prime;
                    }
                });
                // d phi / d a_i = x^i / D ; d phi / d b_j = -P sign(Q) x^j / D^2
                for g in 0..groups {
                    let a = self.nodes[num[g].id].value.data().to_vec();
                    let b = self.nodes[den[g].id].value.data().to_vec();
                    self.accumulate(adj, num[g], |slot| {
                        for (i, &xv) in xd.iter().enumerate() {
                            if (i % channels) * groups / channels != g {
                                continue;
                            }
                            let q = horner(&b, xv);
                            let d = 1.0 + q.abs();
                            let mut pow = 1.0;
                            for s in slot.iter_mut() {
                                *s += upstream[i] * pow / d;
                                pow *= xv;
                            }
                        }
                    });
                    self.accumulate(adj, den[g], |slot| {
                        for (i, &xv) in xd.iter().enumerate() {
                            if (i % channels) * groups / channels != g {
                                continue;
                            }
                            let p = horner(&a, xv);
                            let q = horner(&b, xv);
                            let d = 1.0 + q.abs();
                            let scale = -p * sign0(q) / (d * d);
                            let mut pow = 1.0;
                            for s in slot.iter_mut() {
                                *s += upstream[i] * scale * pow;
                                pow *= xv;
                            }
                        }
                    });
                }
            }
        }
    }
}

fn int_pow(x: f64, k: u32) -> f64 {
    let mut acc = 1.0;
    for _ in 0..k {
        acc *= x;
    }
    acc
}

fn horner_derivative(coeffs: &[f64], x: f64) -> f64 {
    // P'(x) via Horner on the derivative coefficients i * c_i.
    let mut acc = 0.0;
    for i in (1..coeffs.len()).rev() {
        acc = acc * x + i as f64 * coeffs[i];
    }
    acc
}
