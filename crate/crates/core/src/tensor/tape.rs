use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{strides, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean keep-mask. `true` marks a position that takes part in the softmax.
///
/// The last dimension must equal the masked tensor's last dimension; every
/// other dimension must either match or be 1 (broadcast).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(TensorError::Shape {
                op: "mask",
                left: shape,
                right: vec![keep.len()],
            });
        }
        Ok(Self { shape, keep })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// For every row (all dims but the last) of `target`, the offset of the
    /// mask row that applies to it.
    fn row_offsets(&self, target: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || TensorError::Shape {
            op: "softmax mask",
            left: target.to_vec(),
            right: self.shape.clone(),
        };
        if self.shape.len() != target.len() || target.is_empty() {
            return Err(mismatch());
        }
        let last = target.len() - 1;
        if self.shape[last] != target[last] {
            return Err(mismatch());
        }
        for (m, t) in self.shape.iter().zip(target) {
            if *m != *t && *m != 1 {
                return Err(mismatch());
            }
        }
        let mask_strides = strides(&self.shape);
        let rows: usize = target[..last].iter().product();
        let mut offsets = Vec::with_capacity(rows);
        let mut idx = vec![0usize; last];
        for _ in 0..rows {
            let mut off = 0;
            for d in 0..last {
                if self.shape[d] != 1 {
                    off += idx[d] * mask_strides[d];
                }
            }
            offsets.push(off);
            for d in (0..last).rev() {
                idx[d] += 1;
                if idx[d] < target[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(offsets)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        shared_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    SelectPosition {
        x: Var,
        pos: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Linear record of a forward computation. Nodes are appended in creation
/// order, so reverse order is a valid (and deterministic) topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let rank = out_shape.len();
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: "add",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        check_finite("add", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// `x + bias` with `bias` broadcast along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let last = *vx.shape().last().unwrap_or(&0);
        if vb.rank() != 1 || vb.numel() != last || last == 0 {
            return Err(TensorError::Shape {
                op: "add_bias",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(last) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        check_finite("add_bias", &out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, rg, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: "mul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        check_finite("mul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        check_finite("scale", &out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Scale(x, factor)))
    }

    /// Inverted dropout: zero each element with probability `rate`, scale the
    /// survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let vx = self.value(x);
        let mask: Vec<f64> = (0..vx.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::MulConst(x, mask)))
    }

    /// Matrix product over the last two dimensions. `b` is either a plain
    /// matrix shared across all leading dimensions of `a`, or has exactly the
    /// same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let err = || TensorError::Shape {
            op: "matmul",
            left: va.shape().to_vec(),
            right: vb.shape().to_vec(),
        };
        if va.rank() < 2 || vb.rank() < 2 {
            return Err(err());
        }
        let (sa, sb) = (va.shape(), vb.shape());
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(err());
        }
        let batch: usize = lead_a.iter().product();
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![0.0; batch * n * m];
        for bi in 0..batch {
            let a_off = bi * n * k;
            let b_off = if shared_b { 0 } else { bi * k * m };
            let o_off = bi * n * m;
            for i in 0..n {
                let orow = &mut out[o_off + i * m..o_off + (i + 1) * m];
                let arow = &ad[a_off + i * k..a_off + (i + 1) * k];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &bd[b_off + p * m..b_off + (p + 1) * m];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([n, m]);
        let out = Tensor::new(shape, out)?;
        check_finite("matmul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                shared_b,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let rank = vx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(TensorError::Shape {
                op: "permute",
                left: vx.shape().to_vec(),
                right: axes.to_vec(),
            });
        }
        let (data, shape) = permute_data(vx.data(), vx.shape(), axes);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Permute(x, axes.to_vec())))
    }

    /// Softmax over the last dimension, max-subtracted. Masked positions get
    /// probability 0; a slice with every position masked becomes all zeros.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| TensorError::Contract("softmax of a scalar".into()))?;
        let offsets = match mask {
            Some(m) => Some(m.row_offsets(&shape)?),
            None => None,
        };
        let mut out = vec![0.0; vx.numel()];
        if last > 0 {
            for (r, (row, orow)) in vx.data().chunks(last).zip(out.chunks_mut(last)).enumerate() {
                let keep = |j: usize| match (&offsets, mask) {
                    (Some(off), Some(m)) => m.keep[off[r] + j],
                    _ => true,
                };
                let mut max = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if keep(j) && v > max {
                        max = v;
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    if keep(j) {
                        let e = (v - max).exp();
                        orow[j] = e;
                        total += e;
                    }
                }
                for o in orow.iter_mut() {
                    *o /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        check_finite("softmax", &out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Softmax(x)))
    }

    /// Normalize each last-dimension slice to zero mean and unit variance
    /// (biased variance, `eps` floor), then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let last = *vx.shape().last().unwrap_or(&0);
        if last == 0 || vg.shape() != [last] || vb.shape() != [last] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                left: vx.shape().to_vec(),
                right: vg.shape().to_vec(),
            });
        }
        let rows = vx.numel() / last;
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * last..(r + 1) * last];
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..last {
                let h = (row[j] - mean) * is;
                xhat[r * last + j] = h;
                out[r * last + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        check_finite("layer_norm", &out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gaussian error linear unit, exact (erf) form.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out = Tensor::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|&v| gelu(v)).collect(),
        )?;
        check_finite("gelu", &out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Gelu(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out = Tensor::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|v| v.tanh()).collect(),
        )?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Tanh(x)))
    }

    /// Row lookup: `table[vocab, d]`, `ids` laid out as `shape` → `[shape.., d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::Shape {
                op: "embedding",
                left: vt.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    bound: rows,
                    row: pos,
                });
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let out = Tensor::new(out_shape, out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Select slices along the first dimension (repetition allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let first = *vx
            .shape()
            .first()
            .ok_or_else(|| TensorError::Contract("gather_rows of a scalar".into()))?;
        let width = vx.numel() / first.max(1);
        let mut out = Vec::with_capacity(rows.len() * width);
        for (pos, &r) in rows.iter().enumerate() {
            if r >= first {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    bound: first,
                    row: pos,
                });
            }
            out.extend_from_slice(&vx.data()[r * width..(r + 1) * width]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean over consecutive groups of `group` slices along the first
    /// dimension: `[b * group, ..] → [b, ..]`. Each element is summed in
    /// ascending value order, so the result does not depend on how the
    /// members of a group are ordered.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let vx = self.value(x);
        let first = *vx.shape().first().unwrap_or(&0);
        if group == 0 || !first.is_multiple_of(group) {
            return Err(TensorError::Contract(format!(
                "group_mean: leading dimension {first} not divisible into groups of {group}"
            )));
        }
        let outer = first / group;
        let width = vx.numel() / first.max(1);
        let mut out = vec![0.0; outer * width];
        let mut members = vec![0.0; group];
        for o in 0..outer {
            for w in 0..width {
                for (g, m) in members.iter_mut().enumerate() {
                    *m = vx.data()[(o * group + g) * width + w];
                }
                members.sort_by(f64::total_cmp);
                out[o * width + w] = members.iter().sum::<f64>() / group as f64;
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = outer;
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::GroupMean { x, group }))
    }

    /// `x[:, pos, :]` for `x` of shape `[batch, seq, d]`.
    pub fn select_position(&mut self, x: Var, pos: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 || pos >= vx.shape()[1] {
            return Err(TensorError::Shape {
                op: "select_position",
                left: vx.shape().to_vec(),
                right: vec![pos],
            });
        }
        let (b, s, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * s + pos) * d;
            out.extend_from_slice(&vx.data()[off..off + d]);
        }
        let out = Tensor::new(vec![b, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::SelectPosition { x, pos }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != labels.len() || labels.is_empty() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let classes = vl.shape()[1];
        let mut probs = vec![0.0; vl.numel()];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: y,
                    bound: classes,
                    row: r,
                });
            }
            let row = &vl.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss += lse - row[y];
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / labels.len() as f64);
        check_finite("cross_entropy", &out)?;
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let out = Tensor::scalar(total);
        check_finite("sum", &out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Sum(x)))
    }

    /// Reverse pass from a scalar. Gradients from earlier `backward` calls
    /// are discarded; within one call contributions accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contribution) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.to_vec());
                let n = nodes[bias.0].value.numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*bias, gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::MulConst(x, mask) => acc(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Scale(x, f) => acc(*x, g.iter().map(|g| g * f).collect()),
            &Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                shared_b,
            } => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; batch * n * k];
                    for bi in 0..batch {
                        let b_off = if shared_b { 0 } else { bi * k * m };
                        for i in 0..n {
                            let grow = &g[(bi * n + i) * m..(bi * n + i + 1) * m];
                            for p in 0..k {
                                let brow = &bd[b_off + p * m..b_off + (p + 1) * m];
                                let mut s = 0.0;
                                for (x, y) in grow.iter().zip(brow) {
                                    s += x * y;
                                }
                                ga[(bi * n + i) * k + p] = s;
                            }
                        }
                    }
                    acc(a, ga);
                }
                if nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; nodes[b.0].value.numel()];
                    for bi in 0..batch {
                        let b_off = if shared_b { 0 } else { bi * k * m };
                        for i in 0..n {
                            let grow = &g[(bi * n + i) * m..(bi * n + i + 1) * m];
                            let arow = &ad[(bi * n + i) * k..(bi * n + i + 1) * k];
                            for (p, &av) in arow.iter().enumerate() {
                                let gbrow = &mut gb[b_off + p * m..b_off + (p + 1) * m];
                                for (o, gv) in gbrow.iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                    acc(b, gb);
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (data, _) = permute_data(g, node.value.shape(), &inverse);
                acc(*x, data);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; y.len()];
                if last > 0 {
                    for ((yr, gr), or) in
                        y.chunks(last).zip(g.chunks(last)).zip(gx.chunks_mut(last))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..last {
                            or[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gd = nodes[gain.0].value.data();
                let last = gd.len();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggain = vec![0.0; last];
                let mut gbias = vec![0.0; last];
                let mut dxhat = vec![0.0; last];
                for r in 0..inv_std.len() {
                    let grow = &g[r * last..(r + 1) * last];
                    let hrow = &xhat[r * last..(r + 1) * last];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..last {
                        ggain[j] += grow[j] * hrow[j];
                        gbias[j] += grow[j];
                        dxhat[j] = grow[j] * gd[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hrow[j];
                    }
                    mean_d /= last as f64;
                    mean_dh /= last as f64;
                    for j in 0..last {
                        gx[r * last + j] = inv_std[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                    }
                }
                acc(*x, gx);
                acc(*gain, ggain);
                acc(*bias, gbias);
            }
            Op::Gelu(x) => {
                let xd = nodes[x.0].value.data();
                acc(
                    *x,
                    g.iter().zip(xd).map(|(g, &v)| g * gelu_grad(v)).collect(),
                );
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(
                    *x,
                    g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                );
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                let mut gt = vec![0.0; nodes[table.0].value.numel()];
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[pos * d + j];
                    }
                }
                acc(*table, gt);
            }
            Op::GatherRows { x, rows } => {
                let vx = &nodes[x.0].value;
                let width = vx.numel() / vx.shape()[0].max(1);
                let mut gx = vec![0.0; vx.numel()];
                for (pos, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        gx[r * width + j] += g[pos * width + j];
                    }
                }
                acc(*x, gx);
            }
            Op::GroupMean { x, group } => {
                let vx = &nodes[x.0].value;
                let width = vx.numel() / vx.shape()[0].max(1);
                let inv = 1.0 / *group as f64;
                let mut gx = vec![0.0; vx.numel()];
                for (r, chunk) in gx.chunks_mut(width).enumerate() {
                    let o = r / group;
                    for (j, v) in chunk.iter_mut().enumerate() {
                        *v = g[o * width + j] * inv;
                    }
                }
                acc(*x, gx);
            }
            Op::SelectPosition { x, pos } => {
                let vx = &nodes[x.0].value;
                let (b, s, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let mut gx = vec![0.0; vx.numel()];
                for bi in 0..b {
                    let off = (bi * s + pos) * d;
                    gx[off..off + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
                }
                acc(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * classes + y] -= 1.0;
                }
                for v in gl.iter_mut() {
                    *v *= scale;
                }
                acc(*logits, gl);
            }
            Op::Sum(x) => {
                let n = nodes[x.0].value.numel();
                acc(*x, vec![g[0]; n]);
            }
        }
    }
}
