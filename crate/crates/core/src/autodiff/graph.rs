use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which axis of the input carries batchnorm channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnLayout {
    /// `[B, C, H, W]`, statistics over batch and spatial positions.
    Channels2d,
    /// `[..., C]`, statistics over every leading position.
    Features,
}

/// Source of normalization statistics for [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a, T> {
    /// Batch statistics; when `record` is set and the graph tracks statistics,
    /// the batch mean/variance are queued for the given running buffers.
    Batch { record: Option<(ParamId, ParamId)> },
    /// Frozen running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics waiting to be folded into running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, dims: (usize, usize, usize), batch: bool },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    MaxOverSet { x: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, outer: usize, widths: Vec<usize> },
    PairwiseSqDist { x: Var },
    Gather { x: Var, index: Vec<usize>, row: usize },
    Softmax { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Offset { x: Var },
    SumSqRows { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    Log { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Append-only computation tape.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<(ParamId, Var)>,
    stat_updates: Vec<StatUpdate<T>>,
    track_stats: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: alloc::string::String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: Vec::new(), stat_updates: Vec::new(), track_stats: true }
    }

    /// When disabled, train-mode batchnorm still normalizes with batch
    /// statistics but queues no running-stat updates.
    pub fn set_track_stats(&mut self, track: bool) {
        self.track_stats = track;
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        core::mem::take(&mut self.stat_updates)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, op, needs)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls within one graph return
    /// the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.nodes[v.0].param = Some(id);
        self.param_vars.push((id, v));
        v
    }

    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    /// `x[..., K] · wᵀ + b` with `w: [N, K]`, `b: [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let Some(&k) = xs.last() else { return shape_err("linear input must have rank ≥ 1".into()) };
        if ws.len() != 2 || ws[1] != k {
            return shape_err(format!("linear weight {:?} does not match input {:?}", ws, xs));
        }
        let n = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return shape_err(format!("linear bias {:?} does not match {n} outputs", self.shape(b)));
            }
        }
        let m = self.value(x).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(m, k, n, self.data(x), self.data(w), &mut out);
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(n) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(Tensor::new(shape, out)?, Op::Linear { x, w, b }, &inputs))
    }

    /// Same-padded cross-correlation; `x: [B,C,H,W]`, `w: [K,C,k,k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return shape_err(format!("conv2d weight {:?} does not match input {:?}", ws, xs));
        }
        if stride == 0 {
            return shape_err("conv2d stride must be positive".into());
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return shape_err(format!("conv2d bias {:?} does not match {} filters", self.shape(b), ws[0]));
            }
        }
        let (bsz, k_out) = (xs[0], ws[0]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_len = xs[1] * xs[2] * xs[3];
        let mut out = vec![T::zero(); bsz * k_out * cols];
        let mut buf = vec![T::zero(); rows * cols];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            for bi in 0..bsz {
                kernels::im2col(&geom, &xd[bi * in_len..(bi + 1) * in_len], &mut buf);
                kernels::gemm_nn(k_out, rows, cols, wd, &buf, &mut out[bi * k_out * cols..(bi + 1) * k_out * cols]);
            }
        }
        if let Some(b) = b {
            let bias = self.data(b).to_vec();
            for plane in out.chunks_mut(cols).enumerate() {
                let bb = bias[plane.0 % k_out];
                plane.1.iter_mut().for_each(|o| *o += bb);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let value = Tensor::new(vec![bsz, k_out, geom.out_h, geom.out_w], out)?;
        Ok(self.push_op(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    fn bn_dims(&self, x: Var, layout: BnLayout) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        match layout {
            BnLayout::Channels2d if s.len() == 4 => Ok((s[0], s[1], s[2] * s[3])),
            BnLayout::Features if !s.is_empty() => {
                let c = *s.last().unwrap();
                Ok((self.value(x).len() / c.max(1), c, 1))
            }
            _ => shape_err(format!("batchnorm layout {:?} does not fit shape {:?}", layout, s)),
        }
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_, T>, layout: BnLayout) -> Result<Var> {
        let (outer, c, inner) = self.bn_dims(x, layout)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("batchnorm affine parameters must have shape [{c}]"));
        }
        let eps = T::of(BN_EPS);
        let xd = self.data(x);
        let count = outer * inner;
        let (mean, var, batch) = match stats {
            BnStats::Batch { .. } => {
                if count == 0 {
                    return Err(Error::EmptySet);
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for row in xd.chunks_exact(c * inner) {
                    for (m, plane) in mean.iter_mut().zip(row.chunks_exact(inner)) {
                        *m += plane.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
                let nf = T::of(count as f64);
                mean.iter_mut().for_each(|m| *m /= nf);
                for row in xd.chunks_exact(c * inner) {
                    for ((s, &m), plane) in var.iter_mut().zip(&mean).zip(row.chunks_exact(inner)) {
                        *s += plane.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m));
                    }
                }
                var.iter_mut().for_each(|v| *v /= nf);
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err(format!("running statistics must have length {c}"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let rows = xd.chunks_exact(c * inner).zip(xhat.chunks_exact_mut(c * inner)).zip(out.chunks_exact_mut(c * inner));
        for ((xr, hr), or) in rows {
            if inner == 1 {
                for ch in 0..c {
                    let h = (xr[ch] - mean[ch]) * inv_std[ch];
                    hr[ch] = h;
                    or[ch] = g[ch] * h + bt[ch];
                }
                continue;
            }
            let planes = xr.chunks_exact(inner).zip(hr.chunks_exact_mut(inner)).zip(or.chunks_exact_mut(inner));
            for (ch, ((xp, hp), op)) in planes.enumerate() {
                let (m, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for ((&v, h), o) in xp.iter().zip(hp.iter_mut()).zip(op.iter_mut()) {
                    *h = (v - m) * is;
                    *o = gc * *h + bc;
                }
            }
        }
        if let BnStats::Batch { record: Some((mean_id, var_id)) } = stats {
            if self.track_stats {
                let unbias = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
                self.stat_updates.push(StatUpdate {
                    mean_id,
                    var_id,
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbias).collect(),
                });
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, dims: (outer, c, inner), batch };
        Ok(self.push_op(Tensor::new(shape, out)?, op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let t = Tensor::new(v.shape().to_vec(), out).unwrap();
        self.push_op(t, Op::Relu { x }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&a| if a > T::zero() { a } else { a * s }).collect();
        let t = Tensor::new(v.shape().to_vec(), out).unwrap();
        self.push_op(t, Op::LeakyRelu { x, slope: s }, &[x])
    }

    /// 2×2 max-pool with stride 2 over `[B,C,H,W]`; odd trailing rows/columns
    /// are dropped. Ties go to the first position in row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return shape_err(format!("max_pool2 needs [B,C,H≥2,W≥2], got {:?}", s));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = p * h * w + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push_op(t, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// `[B,C,H,W] → [B,C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return shape_err(format!("global_avg_pool needs [B,C,H,W], got {:?}", s));
        }
        let hw = s[2] * s[3];
        let inv = T::of(1.0 / hw as f64);
        let out: Vec<T> = self
            .data(x)
            .chunks(hw)
            .map(|plane| plane.iter().fold(T::zero(), |a, &b| a + b) * inv)
            .collect();
        let t = Tensor::new(vec![s[0], s[1]], out)?;
        Ok(self.push_op(t, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Maximum over the middle axis: `[B,n,D] → [B,D]`. Backward routes to
    /// the first maximizing index.
    pub fn max_over_set(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err(format!("max_over_set needs [B,n,D], got {:?}", s));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        if n == 0 {
            return Err(Error::EmptySet);
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * d];
        let mut argmax = vec![0usize; b * d];
        for bi in 0..b {
            let base = bi * n * d;
            let orow = &mut out[bi * d..(bi + 1) * d];
            let arow = &mut argmax[bi * d..(bi + 1) * d];
            orow.copy_from_slice(&xd[base..base + d]);
            for (j, a) in arow.iter_mut().enumerate() {
                *a = base + j;
            }
            for i in 1..n {
                let row = &xd[base + i * d..base + (i + 1) * d];
                for j in 0..d {
                    if row[j] > orow[j] {
                        orow[j] = row[j];
                        arow[j] = base + i * d + j;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, d], out)?;
        Ok(self.push_op(t, Op::MaxOverSet { x, argmax }, &[x]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else { return Err(Error::EmptySet) };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {:?}", base));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return shape_err(format!("cannot concat {:?} with {:?} along axis {axis}", s, base));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push_op(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), outer, widths }, inputs))
    }

    /// `[B,n,D] → [B,n,n]` with entries `‖x_i − x_j‖²`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err(format!("pairwise_sq_dist needs [B,n,D], got {:?}", s));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let out = pairwise_sq_dist_values(self.data(x), b, n, d);
        Ok(self.push_op(Tensor::new(vec![b, n, n], out)?, Op::PairwiseSqDist { x }, &[x]))
    }

    /// Gathers rows of `x` (rows are its last axis) in `index` order and
    /// reshapes the result to `shape` (whose last extent must be the row size).
    pub fn gather_rows(&mut self, x: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let row = *s.last().ok_or_else(|| Error::Shape("gather_rows on a scalar".into()))?;
        let rows = self.value(x).len() / row.max(1);
        if shape.iter().product::<usize>() != index.len() * row || shape.last() != Some(&row) {
            return shape_err(format!("gather of {} rows of {row} cannot have shape {:?}", index.len(), shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Size(format!("gather index {bad} out of range for {rows} rows")));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&xd[i * row..(i + 1) * row]);
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push_op(t, Op::Gather { x, index: index.to_vec(), row }, &[x]))
    }

    /// Column `col` of a `[M, C]` tensor as `[M]`.
    pub fn select_column(&mut self, x: Var, col: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || col >= s[1] {
            return shape_err(format!("cannot select column {col} of {:?}", s));
        }
        let flat = self.reshape(x, &[s[0] * s[1], 1])?;
        let index: Vec<usize> = (0..s[0]).map(|r| r * s[1] + col).collect();
        let picked = self.gather_rows(flat, &index, &[s[0], 1])?;
        self.reshape(picked, &[s[0]])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&c) = s.last() else { return shape_err("softmax on a scalar".into()) };
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        Ok(self.push_op(Tensor::new(s, out)?, Op::Softmax { x }, &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).unwrap();
        self.push_op(t, op, &[a, b])
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

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).unwrap();
        self.push_op(t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(x, Op::Scale { x, c }, |a| a * c)
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(x, Op::Offset { x }, |a| a + c)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log { x }, |a| a.ln())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.map(x, Op::Clamp { x, lo, hi }, |a| a.max(lo).min(hi))
    }

    /// Squared L2 norm over the last axis: `[..., D] → [...]`.
    pub fn sum_sq_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some((&d, lead)) = s.split_last() else { return shape_err("sum_sq_rows on a scalar".into()) };
        let out: Vec<T> =
            self.data(x).chunks(d.max(1)).map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v)).collect();
        Ok(self.push_op(Tensor::new(lead.to_vec(), out)?, Op::SumSqRows { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |a, &v| a + v);
        self.push_op(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptySet);
        }
        let s = self.data(x).iter().fold(T::zero(), |a, &v| a + v) / T::of(n as f64);
        Ok(self.push_op(Tensor::scalar(s), Op::Mean { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(t, Op::Reshape { x }, &[x]))
    }

    /// Mean softmax cross-entropy of `[M, C]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return shape_err(format!("cross-entropy logits {:?} vs {} labels", s, labels.len()));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} outside {c} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            loss -= row[l].max(T::min_positive_value()).ln();
        }
        loss /= T::of(labels.len() as f64);
        let op = Op::SoftmaxXent { logits, labels: labels.to_vec(), probs };
        Ok(self.push_op(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let params = self.param_vars.iter().filter_map(|&(p, v)| grads[v.0].take().map(|g| (p, g))).collect();
        Ok(Gradients { leaves: grads, params })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = len(v);
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let k = *self.shape(*w).last().unwrap();
                let n = self.shape(*w)[0];
                let m = len(*x) / k.max(1);
                if self.needs(*x) {
                    let wd = self.data(*w);
                    kernels::gemm_nn(m, n, k, g, wd, acc!(*x));
                }
                if self.needs(*w) {
                    let xd = self.data(*x);
                    kernels::gemm_tn(n, m, k, g, xd, acc!(*w));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = acc!(*b);
                        for row in g.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let k_out = self.shape(*w)[0];
                let bsz = self.shape(*x)[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                let mut buf = vec![T::zero(); rows * cols];
                if self.needs(*w) {
                    let xd = self.data(*x);
                    let mut dw = vec![T::zero(); k_out * rows];
                    for bi in 0..bsz {
                        kernels::im2col(geom, &xd[bi * in_len..(bi + 1) * in_len], &mut buf);
                        kernels::gemm_nt(k_out, cols, rows, &g[bi * k_out * cols..(bi + 1) * k_out * cols], &buf, &mut dw);
                    }
                    for (d, v) in acc!(*w).iter_mut().zip(dw) {
                        *d += v;
                    }
                }
                if self.needs(*x) {
                    let wd = self.data(*w);
                    let mut dx = vec![T::zero(); bsz * in_len];
                    for bi in 0..bsz {
                        buf.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn(rows, k_out, cols, wd, &g[bi * k_out * cols..(bi + 1) * k_out * cols], &mut buf);
                        kernels::col2im(geom, &buf, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                    for (d, v) in acc!(*x).iter_mut().zip(dx) {
                        *d += v;
                    }
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = acc!(*b);
                        for (p, plane) in g.chunks(cols).enumerate() {
                            db[p % k_out] += plane.iter().fold(T::zero(), |a, &v| a + v);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, dims, batch } => {
                let (outer, c, inner) = *dims;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (gr, hr) in g.chunks_exact(c * inner).zip(xhat.chunks_exact(c * inner)) {
                    for (ch, (gp, hp)) in gr.chunks_exact(inner).zip(hr.chunks_exact(inner)).enumerate() {
                        for (&gv, &hv) in gp.iter().zip(hp) {
                            sum_dy[ch] += gv;
                            sum_dy_xhat[ch] += gv * hv;
                        }
                    }
                }
                if self.needs(*gamma) {
                    for (d, &v) in acc!(*gamma).iter_mut().zip(&sum_dy_xhat) {
                        *d += v;
                    }
                }
                if self.needs(*beta) {
                    for (d, &v) in acc!(*beta).iter_mut().zip(&sum_dy) {
                        *d += v;
                    }
                }
                if self.needs(*x) {
                    let gm = self.data(*gamma).to_vec();
                    let dx = acc!(*x);
                    let nf = T::of((outer * inner) as f64);
                    let coef: Vec<(T, T, T)> = (0..c)
                        .map(|ch| {
                            let scale = gm[ch] * inv_std[ch];
                            if *batch {
                                (scale, sum_dy[ch] / nf, sum_dy_xhat[ch] / nf)
                            } else {
                                (scale, T::zero(), T::zero())
                            }
                        })
                        .collect();
                    let rows = dx.chunks_exact_mut(c * inner).zip(g.chunks_exact(c * inner)).zip(xhat.chunks_exact(c * inner));
                    for ((dr, gr), hr) in rows {
                        let planes = dr.chunks_exact_mut(inner).zip(gr.chunks_exact(inner)).zip(hr.chunks_exact(inner));
                        for (&(scale, mean_dy, mean_dyx), ((dp, gp), hp)) in coef.iter().zip(planes) {
                            for ((d, &gv), &hv) in dp.iter_mut().zip(gp).zip(hp) {
                                *d += scale * (gv - mean_dy - hv * mean_dyx);
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let out = node.value.data();
                for ((d, &gv), &o) in acc!(*x).iter_mut().zip(g).zip(out) {
                    if o > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.data(*x);
                for ((d, &gv), &xv) in acc!(*x).iter_mut().zip(g).zip(xd) {
                    *d += if xv > T::zero() { gv } else { gv * *slope };
                }
            }
            Op::MaxPool2 { x, argmax } | Op::MaxOverSet { x, argmax } => {
                let dx = acc!(*x);
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i] += gv;
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::of(1.0 / hw as f64);
                for (plane, &gv) in acc!(*x).chunks_mut(hw).zip(g) {
                    plane.iter_mut().for_each(|d| *d += gv * inv);
                }
            }
            Op::Concat { inputs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.needs(v) {
                        let dv = acc!(v);
                        for o in 0..*outer {
                            for (d, &gv) in dv[o * w..(o + 1) * w].iter_mut().zip(&g[o * row + offset..o * row + offset + w]) {
                                *d += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::PairwiseSqDist { x } => {
                let s = self.shape(*x);
                let (b, n, d) = (s[0], s[1], s[2]);
                let xd = self.data(*x);
                let dx = acc!(*x);
                for bi in 0..b {
                    for i in 0..n {
                        for j in 0..n {
                            let w = (g[(bi * n + i) * n + j] + g[(bi * n + j) * n + i]) * T::of(2.0);
                            if w == T::zero() {
                                continue;
                            }
                            for k in 0..d {
                                let diff = xd[(bi * n + i) * d + k] - xd[(bi * n + j) * d + k];
                                dx[(bi * n + i) * d + k] += w * diff;
                            }
                        }
                    }
                }
            }
            Op::Gather { x, index, row } => {
                let dx = acc!(*x);
                for (k, &i) in index.iter().enumerate() {
                    for (d, &gv) in dx[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                        *d += gv;
                    }
                }
            }
            Op::Softmax { x } => {
                let c = *self.shape(*x).last().unwrap();
                let y = node.value.data();
                let dx = acc!(*x);
                for ((drow, yrow), grow) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot = yrow.iter().zip(grow).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if self.needs(*a) {
                    for (d, &gv) in acc!(*a).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.needs(*b) {
                    for (d, &gv) in acc!(*b).iter_mut().zip(g) {
                        *d += sign * gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = self.data(*b);
                    for ((d, &gv), &bv) in acc!(*a).iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    for ((d, &gv), &av) in acc!(*b).iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale { x, c } => {
                for (d, &gv) in acc!(*x).iter_mut().zip(g) {
                    *d += gv * *c;
                }
            }
            Op::Offset { x } | Op::Reshape { x } => {
                for (d, &gv) in acc!(*x).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::SumSqRows { x } => {
                let d = *self.shape(*x).last().unwrap();
                let xd = self.data(*x);
                for ((drow, xrow), &gv) in acc!(*x).chunks_mut(d).zip(xd.chunks(d)).zip(g) {
                    for (dv, &xv) in drow.iter_mut().zip(xrow) {
                        *dv += T::of(2.0) * xv * gv;
                    }
                }
            }
            Op::Sum { x } => {
                acc!(*x).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { x } => {
                let gv = g[0] / T::of(len(*x) as f64);
                acc!(*x).iter_mut().for_each(|d| *d += gv);
            }
            Op::Log { x } => {
                let xd = self.data(*x);
                for ((d, &gv), &xv) in acc!(*x).iter_mut().zip(g).zip(xd) {
                    *d += gv / xv;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                for ((d, &gv), &xv) in acc!(*x).iter_mut().zip(g).zip(xd) {
                    if xv >= *lo && xv <= *hi {
                        *d += gv;
                    }
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let dl = acc!(*logits);
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == l { T::one() } else { T::zero() };
                        dl[r * c + j] += scale * (probs[r * c + j] - target);
                    }
                }
            }
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Exact `‖x_i − x_j‖²` for every pair within each batch element.
pub fn pairwise_sq_dist_values<T: Real>(x: &[T], b: usize, n: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * n * n];
    for bi in 0..b {
        let pts = &x[bi * n * d..(bi + 1) * n * d];
        for i in 0..n {
            let pi = &pts[i * d..(i + 1) * d];
            for j in (i + 1)..n {
                let pj = &pts[j * d..(j + 1) * d];
                let s = pi.iter().zip(pj).fold(T::zero(), |a, (&u, &v)| a + (u - v) * (u - v));
                out[(bi * n + i) * n + j] = s;
                out[(bi * n + j) * n + i] = s;
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a trainable parameter used in the graph.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}
