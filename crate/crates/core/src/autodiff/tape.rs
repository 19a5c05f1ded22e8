use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
    Sigmoid,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the convention used for running estimates.
    pub var: Vec<f64>,
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Exp(Var),
    Act(Var, Activation),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Expand(Var),
    Select {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    PoolW {
        x: Var,
        factor: usize,
    },
    UpsampleW {
        x: Var,
        factor: usize,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    NegPearson {
        pred: Var,
        target: Tensor,
        eps: f64,
    },
    Magnify {
        x: Var,
        extrema: Vec<Option<(usize, usize)>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and `backward` is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Outer/axis/inner extents of a shape split around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Calls `f(out_index, b_index)` for every element of `out`, where `b` is
/// broadcast along its unit dims. Both shapes have the same rank.
fn for_each_broadcast(out: &[usize], b: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if b[d] == 1 { 0 } else { s };
        s *= b[d];
    }
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let mut ib = 0usize;
    for io in 0..n {
        f(io, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ib += strides[d];
            if idx[d] < out[d] {
                break;
            }
            ib -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn check_broadcast(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(Error::shape(format!(
            "cannot broadcast {b:?} onto {a:?} (second operand must match or have unit dims)"
        )));
    }
    Ok(())
}

/// Sums `g` (shaped like `out`) down to the broadcast shape `b`.
fn reduce_to(g: &Tensor, b: &[usize]) -> Tensor {
    if g.shape() == b {
        return g.clone();
    }
    let mut acc = vec![0.0; b.iter().product()];
    let gd = g.data();
    for_each_broadcast(g.shape(), b, |io, ib| acc[ib] += gd[io]);
    Tensor::from_parts(b.to_vec(), acc)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients are only tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf { param: Some(id) },
            needs_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameters bound on this tape, with their leaf handles.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(id) } => Some((id, Var(i))),
            _ => None,
        })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_broadcast(sa, sb)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; ta.len()];
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(ta.data()).zip(tb.data()) {
                *o = f(x, y);
            }
        } else {
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(sa, sb, |io, ib| out[io] = f(da[io], db[ib]));
        }
        Ok(Tensor::from_parts(sa.to_vec(), out))
    }

    /// `a + b`. `b` must have the rank of `a`, each dim equal or 1; unit
    /// dims of `b` are expanded. `a` never broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push(v, Op::Affine(x, scale), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = match kind {
            Activation::Relu => self.value(x).map(|e| e.max(0.0)),
            Activation::Elu => self.value(x).map(|e| if e > 0.0 { e } else { e.exp_m1() }),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(v, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// `x[B,I] · w[I,O] + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape(format!("linear: x {sx:?} · w {sw:?}")));
        }
        let (bsz, din, dout) = (sx[0], sx[1], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!(
                    "linear: bias {:?}, expected [{dout}]",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![0.0; bsz * dout];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            for r in 0..bsz {
                let orow = &mut out[r * dout..(r + 1) * dout];
                if let Some(b) = b {
                    orow.copy_from_slice(self.value(b).data());
                }
                for i in 0..din {
                    let xv = xd[r * din + i];
                    for (o, &wv) in orow.iter_mut().zip(&wd[i * dout..(i + 1) * dout]) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(vec![bsz, dout], out),
            Op::Linear { x, w, b },
            &parents,
        ))
    }

    /// Same-padded (zeros) stride-1 cross-correlation with a `1×k` kernel:
    /// `x[B,Cin,H,W]`, `w[Cout,Cin,1,k]`, `b[Cout]` → `[B,Cout,H,W]`.
    pub fn conv2d_1xk(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != 1 {
            return Err(Error::shape(format!("conv: x {sx:?}, kernel {sw:?}")));
        }
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[3]);
        if sw[1] != cin {
            return Err(Error::shape(format!(
                "conv: kernel expects {} input channels, input has {cin}",
                sw[1]
            )));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv: kernel width {k} must be odd")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("conv: bias {:?}", self.shape(b))));
            }
        }
        let plane = h * wd;
        let mut out = vec![0.0; bsz * cout * plane];
        {
            let xd = self.value(x).data();
            let kd = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            for bi in 0..bsz {
                for o in 0..cout {
                    let ob = &mut out[(bi * cout + o) * plane..][..plane];
                    if let Some(bias) = bias {
                        ob.fill(bias[o]);
                    }
                    for i in 0..cin {
                        let xb = &xd[(bi * cin + i) * plane..][..plane];
                        for j in 0..k {
                            let wt = kd[(o * cin + i) * k + j];
                            let (lo, hi, shift) = tap_range(j, k, wd);
                            if hi <= lo {
                                continue;
                            }
                            for r in 0..h {
                                let orow = &mut ob[r * wd + lo..r * wd + hi];
                                let xrow = &xb[r * wd + lo + shift - k / 2..];
                                for (ov, &xv) in orow.iter_mut().zip(xrow) {
                                    *ov += wt * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(vec![bsz, cout, h, wd], out),
            Op::Conv { x, w, b },
            &parents,
        ))
    }

    /// Training-mode batch norm over axes (0, 2, 3) of `x[B,C,H,W]`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (bsz, c, plane) = self.bn_dims(x, gamma, beta)?;
        let n = (bsz * plane) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..bsz {
            for ch in 0..c {
                mean[ch] += xd[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..bsz {
            for ch in 0..c {
                let m = mean[ch];
                var[ch] += xd[(bi * c + ch) * plane..][..plane]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
        }
        let unbiased: Vec<f64> = var.iter().map(|s| if n > 1.0 { s / (n - 1.0) } else { 0.0 }).collect();
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for idx in off..off + plane {
                    let xh = (xd[idx] - mean[ch]) * inv_std[ch];
                    xhat[idx] = xh;
                    out[idx] = g[ch] * xh + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (bsz, c, plane) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch norm: running stats length".to_string()));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for idx in off..off + plane {
                    out[idx] = g[ch] * (xd[idx] - running_mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(format!("batch norm expects [B,C,H,W], got {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch norm: gamma {:?} / beta {:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((s[0], c, s[2] * s[3]))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let nd = self.shape(x).len();
        if axis >= nd {
            return Err(Error::invalid(format!("axis {axis} out of range for rank {nd}")));
        }
        Ok(())
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..][..inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(Tensor::from_parts(oshape, out), op, &[x]))
    }

    /// Sum along `axis`; the axis is kept with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along `axis`; the axis is kept with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0)
    }

    /// Mean of every element, shape `[1]`.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.mean_axis(flat, 0)
    }

    /// Row mean of `x[B,C,H,W]` → `[B,C,1,W]`.
    pub fn pool_rows_mean(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(Error::shape("pool_rows_mean expects [B,C,H,W]".to_string()));
        }
        self.mean_axis(x, 2)
    }

    /// Global average of `x[B,C,H,W]` → `[B,C]`.
    pub fn global_avg(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg expects [B,C,H,W]".to_string()));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let m = self.mean_axis(flat, 2)?;
        self.reshape(m, &[s[0], s[1]])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Expands unit dims of `x` to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_broadcast(shape, self.shape(x))?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; shape.iter().product()];
        for_each_broadcast(shape, self.shape(x), |io, ib| out[io] = xd[ib]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Expand(x), &[x]))
    }

    /// Gathers `indices` along `axis` (repeats allowed).
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        if indices.is_empty() {
            return Err(Error::invalid("select: empty index list".to_string()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::invalid(format!("select: index {bad} out of range {len}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&xd[(o * len + i) * inner..][..inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = indices.len();
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Select {
                x,
                axis,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing".to_string()))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(Error::shape(format!("concat: {s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Non-overlapping mean pooling by `factor` along the last axis.
    pub fn pool_w(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().unwrap();
        if factor == 0 || !w.is_multiple_of(factor) {
            return Err(Error::shape(format!("pool_w: width {w} not divisible by {factor}")));
        }
        let inv = 1.0 / factor as f64;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(factor)
            .map(|c| c.iter().sum::<f64>() * inv)
            .collect();
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = w / factor;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::PoolW { x, factor }, &[x]))
    }

    /// Nearest-neighbour upsampling by `factor` along the last axis.
    pub fn upsample_w(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample_w: zero factor".to_string()));
        }
        let mut oshape = self.shape(x).to_vec();
        *oshape.last_mut().unwrap() *= factor;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, factor))
            .collect();
        Ok(self.push(Tensor::from_parts(oshape, out), Op::UpsampleW { x, factor }, &[x]))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        out.chunks_exact_mut(k).for_each(softmax_in_place);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`; `logits` is `[N,K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {s:?} with {} targets",
                targets.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {bad} out of range for {k} classes"
            )));
        }
        let ld = self.value(logits).data();
        let mut probs = ld.to_vec();
        let mut loss = 0.0;
        for (row, (p, &t)) in probs.chunks_exact_mut(k).zip(targets).enumerate() {
            let l = &ld[row * k..(row + 1) * k];
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - l[t];
            softmax_in_place(p);
        }
        loss /= targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Row-wise `1 - pearson(pred[r], target[r])` for `pred[N,T]`.
    ///
    /// `eps` is added to both sums of squares; with `eps == 0` a constant row is
    /// rejected instead.
    pub fn neg_pearson(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || target.shape() != s.as_slice() {
            return Err(Error::shape(format!(
                "neg_pearson: pred {s:?}, target {:?}",
                target.shape()
            )));
        }
        let t = s[1];
        if t < 2 {
            return Err(Error::invalid("pearson needs at least 2 samples".to_string()));
        }
        let pd = self.value(pred).data();
        let mut out = Vec::with_capacity(s[0]);
        for (x, y) in pd.chunks_exact(t).zip(target.data().chunks_exact(t)) {
            let st = centered_stats(x, y, eps)?;
            out.push(1.0 - st.r);
        }
        Ok(self.push(
            Tensor::from_parts(vec![s[0]], out),
            Op::NegPearson {
                pred,
                target: target.clone(),
                eps,
            },
            &[pred],
        ))
    }

    /// Per-row min-max scaling of the last axis into `[0, 255]`; rows whose
    /// range is below `1e-9` map to zero.
    pub fn magnify(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let t = *shape.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        let extrema = out.chunks_exact_mut(t).map(magnify_row).collect();
        self.push(Tensor::from_parts(shape, out), Op::Magnify { x, extrema }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let neg = g.map(|v| -v);
                    self.accumulate(grads, *b, reduce_to(&neg, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut ga = vec![0.0; gd.len()];
                    for_each_broadcast(sa, sb, |io, ib| ga[io] = gd[io] * bd[ib]);
                    self.accumulate(grads, *a, Tensor::from_parts(sa.to_vec(), ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    for_each_broadcast(sa, sb, |io, ib| gb[ib] += gd[io] * ad[io]);
                    self.accumulate(grads, *b, Tensor::from_parts(sb.to_vec(), gb));
                }
            }
            Op::Affine(x, scale) => {
                self.accumulate(grads, *x, g.map(|v| v * scale));
            }
            Op::Exp(x) => {
                let out = node.value.data();
                let gx = gd.iter().zip(out).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::Act(x, kind) => {
                let xin = self.value(*x).data();
                let out = node.value.data();
                let gx: Vec<f64> = match kind {
                    Activation::Relu => gd
                        .iter()
                        .zip(xin)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Activation::Elu => gd
                        .iter()
                        .zip(xin.iter().zip(out))
                        .map(|(g, (&v, &y))| if v > 0.0 { *g } else { g * (y + 1.0) })
                        .collect(),
                    Activation::Sigmoid => gd.iter().zip(out).map(|(g, &y)| g * y * (1.0 - y)).collect(),
                };
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, g, grads),
            Op::Conv { x, w, b } => self.backprop_conv(*x, *w, *b, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (bsz, c, plane) = (s[0], s[1], s[2] * s[3]);
                let n = (bsz * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for idx in off..off + plane {
                            sum_g[ch] += gd[idx];
                            sum_gx[ch] += gd[idx] * xhat[idx];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; gd.len()];
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / n;
                            let off = (bi * c + ch) * plane;
                            for idx in off..off + plane {
                                gx[idx] = k * (n * gd[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), gx));
                }
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], sum_gx));
                self.accumulate(grads, *beta, Tensor::from_parts(vec![c], sum_g));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (bsz, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let xd = self.value(*x).data();
                let mut gx = vec![0.0; gd.len()];
                let mut ggam = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for idx in off..off + plane {
                            gx[idx] = gd[idx] * gam[ch] * inv_std[ch];
                            ggam[ch] += gd[idx] * (xd[idx] - mean[ch]) * inv_std[ch];
                            gbeta[ch] += gd[idx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), gx));
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], ggam));
                self.accumulate(grads, *beta, Tensor::from_parts(vec![c], gbeta));
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(src.iter().map(|v| v * scale));
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), gx));
            }
            Op::Reshape(x) => {
                let gx = Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec());
                self.accumulate(grads, *x, gx);
            }
            Op::Expand(x) => {
                self.accumulate(grads, *x, reduce_to(g, self.shape(*x)));
            }
            Op::Select { x, axis, indices } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                let m = indices.len();
                for o in 0..outer {
                    for (slot, &idx) in indices.iter().enumerate() {
                        let src = &gd[(o * m + slot) * inner..][..inner];
                        let dst = &mut gx[(o * len + idx) * inner..][..inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), gx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            gp.extend_from_slice(&gd[(o * total + offset) * inner..][..len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(self.shape(p).to_vec(), gp));
                    }
                    offset += len;
                }
            }
            Op::PoolW { x, factor } => {
                let inv = 1.0 / *factor as f64;
                let gx = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, *factor)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::UpsampleW { x, factor } => {
                let gx = gd.chunks_exact(*factor).map(|c| c.iter().sum()).collect();
                self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::Softmax(x) => {
                let k = *g.shape().last().unwrap();
                let mut gx = vec![0.0; gd.len()];
                for ((gxr, gr), yr) in gx
                    .chunks_exact_mut(k)
                    .zip(gd.chunks_exact(k))
                    .zip(node.value.data().chunks_exact(k))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / targets.len() as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    gx[row * k + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(self.shape(*logits).to_vec(), gx));
            }
            Op::NegPearson { pred, target, eps } => {
                let t = self.shape(*pred)[1];
                let pd = self.value(*pred).data();
                let mut gx = vec![0.0; pd.len()];
                for (row, ((x, y), gr)) in pd
                    .chunks_exact(t)
                    .zip(target.data().chunks_exact(t))
                    .zip(gx.chunks_exact_mut(t))
                    .enumerate()
                {
                    // Statistics were validated on the forward pass.
                    let st = centered_stats(x, y, *eps).expect("validated in forward");
                    let denom = (st.sxx * st.syy).sqrt();
                    for ((o, &xv), &yv) in gr.iter_mut().zip(x).zip(y) {
                        let (xc, yc) = (xv - st.mx, yv - st.my);
                        *o = -gd[row] * (yc / denom - st.r * xc / st.sxx);
                    }
                }
                self.accumulate(grads, *pred, Tensor::from_parts(self.shape(*pred).to_vec(), gx));
            }
            Op::Magnify { x, extrema } => {
                let t = *g.shape().last().unwrap();
                let xd = self.value(*x).data();
                let out = node.value.data();
                let mut gx = vec![0.0; gd.len()];
                for (row, ext) in extrema.iter().enumerate() {
                    let Some((imin, imax)) = *ext else { continue };
                    let base = row * t;
                    let range = xd[base + imax] - xd[base + imin];
                    let (mut gmin, mut gmax) = (0.0, 0.0);
                    for j in 0..t {
                        let (gv, y) = (gd[base + j], out[base + j]);
                        gx[base + j] += gv * 255.0 / range;
                        gmin += gv * (y - 255.0) / range;
                        gmax -= gv * y / range;
                    }
                    gx[base + imin] += gmin;
                    gx[base + imax] += gmax;
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
        }
    }

    fn backprop_linear(&self, x: Var, w: Var, b: Option<Var>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (bsz, din, dout) = (sx[0], sx[1], sw[1]);
        let (xd, wd, gd) = (self.value(x).data(), self.value(w).data(), g.data());
        if self.needs(x) {
            let mut gx = vec![0.0; bsz * din];
            for r in 0..bsz {
                let grow = &gd[r * dout..(r + 1) * dout];
                for i in 0..din {
                    gx[r * din + i] = grow.iter().zip(&wd[i * dout..(i + 1) * dout]).map(|(a, b)| a * b).sum();
                }
            }
            self.accumulate(grads, x, Tensor::from_parts(sx.to_vec(), gx));
        }
        if self.needs(w) {
            let mut gw = vec![0.0; din * dout];
            for r in 0..bsz {
                let grow = &gd[r * dout..(r + 1) * dout];
                for i in 0..din {
                    let xv = xd[r * din + i];
                    for (o, &gv) in gw[i * dout..(i + 1) * dout].iter_mut().zip(grow) {
                        *o += xv * gv;
                    }
                }
            }
            self.accumulate(grads, w, Tensor::from_parts(sw.to_vec(), gw));
        }
        if let Some(b) = b {
            let mut gb = vec![0.0; dout];
            for grow in gd.chunks_exact(dout) {
                for (o, v) in gb.iter_mut().zip(grow) {
                    *o += v;
                }
            }
            self.accumulate(grads, b, Tensor::from_parts(vec![dout], gb));
        }
    }

    fn backprop_conv(&self, x: Var, w: Var, b: Option<Var>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[3]);
        let plane = h * wd;
        let (xd, kd, gd) = (self.value(x).data(), self.value(w).data(), g.data());
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut gx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut gw = vec![0.0; kd.len()];
        for bi in 0..bsz {
            for o in 0..cout {
                let gb = &gd[(bi * cout + o) * plane..][..plane];
                for i in 0..cin {
                    let xoff = (bi * cin + i) * plane;
                    for j in 0..k {
                        let (lo, hi, shift) = tap_range(j, k, wd);
                        if hi <= lo {
                            continue;
                        }
                        let start = lo + shift - k / 2;
                        if need_x {
                            let wt = kd[(o * cin + i) * k + j];
                            let gxb = &mut gx[xoff..xoff + plane];
                            for r in 0..h {
                                let grow = &gb[r * wd + lo..r * wd + hi];
                                let xrow = &mut gxb[r * wd + start..];
                                for (xv, &gv) in xrow.iter_mut().zip(grow) {
                                    *xv += wt * gv;
                                }
                            }
                        }
                        if need_w {
                            let xb = &xd[xoff..xoff + plane];
                            let mut acc = 0.0;
                            for r in 0..h {
                                let grow = &gb[r * wd + lo..r * wd + hi];
                                let xrow = &xb[r * wd + start..];
                                acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gw[(o * cin + i) * k + j] += acc;
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::from_parts(sx.to_vec(), gx));
        }
        if need_w {
            self.accumulate(grads, w, Tensor::from_parts(sw.to_vec(), gw));
        }
        if let Some(b) = b {
            let mut gbias = vec![0.0; cout];
            for bi in 0..bsz {
                for (o, acc) in gbias.iter_mut().enumerate() {
                    *acc += gd[(bi * cout + o) * plane..][..plane].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, b, Tensor::from_parts(vec![cout], gbias));
        }
    }
}

/// Output columns `[lo, hi)` touched by kernel tap `j`, and `shift` such that
/// the input column for output `c` is `c + shift - k/2`.
fn tap_range(j: usize, k: usize, w: usize) -> (usize, usize, usize) {
    let p = k / 2;
    // input col = c + j - p, valid when 0 <= c + j - p < w
    let lo = p.saturating_sub(j);
    let hi = (w + p).saturating_sub(j).min(w);
    (lo, hi.max(lo), j)
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Scales `row` in place; returns the (argmin, argmax) used, or `None` for a
/// constant row.
pub(crate) fn magnify_row(row: &mut [f64]) -> Option<(usize, usize)> {
    let (mut imin, mut imax) = (0, 0);
    for (j, &v) in row.iter().enumerate() {
        if v < row[imin] {
            imin = j;
        }
        if v > row[imax] {
            imax = j;
        }
    }
    let (mn, range) = (row[imin], row[imax] - row[imin]);
    if range < 1e-9 {
        row.fill(0.0);
        return None;
    }
    row.iter_mut().for_each(|v| *v = (*v - mn) / range * 255.0);
    Some((imin, imax))
}

struct CenteredStats {
    mx: f64,
    my: f64,
    sxx: f64,
    syy: f64,
    r: f64,
}

fn centered_stats(x: &[f64], y: &[f64], eps: f64) -> Result<CenteredStats> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, eps, eps);
    for (&a, &b) in x.iter().zip(y) {
        let (xc, yc) = (a - mx, b - my);
        sxy += xc * yc;
        sxx += xc * xc;
        syy += yc * yc;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Numerical(
            "pearson correlation undefined for a constant signal".to_string(),
        ));
    }
    Ok(CenteredStats {
        mx,
        my,
        sxx,
        syy,
        r: sxy / (sxx * syy).sqrt(),
    })
}
