//! Reverse-mode tape.
//!
//! Every op evaluates eagerly and records what its backward pass needs.
//! Nodes are appended in topological order, so `backward` is a single
//! reverse sweep.

use rand::RngExt;

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::{as_5d, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    o: usize,
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    od: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.k[0] * self.k[1] * self.k[2]
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.c * self.d * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.o * self.od * self.plane()
    }
}

#[derive(Debug, Clone, Copy)]
struct PoolGeom {
    nc: usize,
    dims: [usize; 3],
    out: [usize; 3],
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, train: bool },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool { x: Var, geom: PoolGeom },
    Gather { x: Var, idx: Vec<usize> },
    Concat { parts: Vec<Var>, outer: usize, inner: Vec<usize> },
    MaxAxis0 { x: Var, argmax: Vec<usize> },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Dropout { x: Var, mask: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Batch statistics observed by a training-mode batch norm, used to update
/// running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(bv) {
            *x *= y;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `x·wᵀ + b` over the last axis of `x`; `w` is `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().ok_or_else(|| NnError::Shape("linear on scalar".into()))?;
        if ws.len() != 2 || ws[1] != k {
            return Err(NnError::Shape(format!("linear: input {xs:?} weight {ws:?}")));
        }
        let n = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(NnError::Shape(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let m = self.value(x).len() / k;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(m, k, n, T::one(), self.value(x).data(), k as isize, 1, self.value(w).data(), 1, k as isize, beta, &mut out, n as isize, 1);
        let out = Tensor::new(out_shape, out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    /// Batched `(B,M,K)·(B,K,N)`, or `(B,M,K)·(B,N,K)ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(NnError::Shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(NnError::Shape(format!("bmm inner dims: {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..],
                k as isize,
                1,
                &bv[i * k * n..],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..],
                n as isize,
                1,
            );
        }
        let out = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let f = *x.shape().last().unwrap();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(f) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let f = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(NnError::Shape(format!("layer_norm affine must be [{f}]")));
        }
        let eps = T::lit(eps);
        let xv = self.value(x);
        let rows = xv.len() / f;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let nf = T::lit(f as f64);
        for r in 0..rows {
            let row = &xv.data()[r * f..(r + 1) * f];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * f..(r + 1) * f].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| v * g[i % f] + b[i % f]).collect();
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Batch normalization over every axis but the channel axis (axis 1),
    /// using the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(x).to_vec();
        let (n, c, spatial) = channel_layout(&shape)?;
        let count = n * spatial;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let s = &xv[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
                mean[ch] += s.iter().copied().sum::<T>();
            }
        }
        let cnt = T::lit(count as f64);
        mean.iter_mut().for_each(|m| *m /= cnt);
        for b in 0..n {
            for ch in 0..c {
                let s = &xv[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
                var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        let unbiased_var: Vec<T> = var.iter().map(|&v| if count > 1 { v / T::lit((count - 1) as f64) } else { T::zero() }).collect();
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v / cnt + T::lit(eps)).sqrt()).collect();
        let out = self.channel_affine(x, gamma, beta, &mean, &rstd, &shape, true)?;
        Ok((out, BatchStats { mean, unbiased_var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[T], running_var: &[T], eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rstd: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        self.channel_affine(x, gamma, beta, running_mean, &rstd, &shape, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], rstd: &[T], shape: &[usize], train: bool) -> Result<Var> {
        let (n, c, spatial) = channel_layout(shape)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || mean.len() != c || rstd.len() != c {
            return Err(NnError::Shape(format!("batch_norm affine must be [{c}]")));
        }
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in base..base + spatial {
                    let h = (xv[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + bt[ch];
                }
            }
        }
        let out = Tensor::new(shape.to_vec(), out)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, rstd: rstd.to_vec(), train };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// 2-d or 3-d convolution. `x` is `(N,C,H,W)` or `(N,C,D,H,W)`, `w` is
    /// `(O,C,kh,kw)` or `(O,C,kd,kh,kw)`; `stride`/`pad` have one entry per
    /// spatial axis.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: &[usize], pad: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != ws.len() || stride.len() != xs.len() - 2 || pad.len() != xs.len() - 2 {
            return Err(NnError::Shape(format!("conv: input {xs:?}, weight {ws:?}, stride {stride:?}, pad {pad:?}")));
        }
        let [n, c, d, h, wd] = as_5d(&xs)?;
        let [o, wc, kd, kh, kw] = as_5d(&ws)?;
        let lift = |v: &[usize], fill: usize| -> [usize; 3] {
            if v.len() == 2 {
                [fill, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let (s, p) = (lift(stride, 1), lift(pad, 0));
        if wc != c || s.contains(&0) {
            return Err(NnError::Shape(format!("conv: input {xs:?} vs weight {ws:?}")));
        }
        let out_dim = |len: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            if len + 2 * p < k {
                return Err(NnError::Shape(format!("conv: spatial extent {len} (pad {p}) smaller than kernel {k}")));
            }
            Ok((len + 2 * p - k) / s + 1)
        };
        let geom = ConvGeom {
            n,
            c,
            d,
            h,
            w: wd,
            o,
            k: [kd, kh, kw],
            s,
            p,
            od: out_dim(d, kd, s[0], p[0])?,
            oh: out_dim(h, kh, s[1], p[1])?,
            ow: out_dim(wd, kw, s[2], p[2])?,
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(NnError::Shape(format!("conv bias {:?}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * geom.out_sample()];
        let mut cols = vec![T::zero(); geom.col_rows() * geom.plane()];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let (cr, pl) = (geom.col_rows(), geom.plane());
        for bi in 0..n {
            let xin = &xv[bi * geom.in_sample()..(bi + 1) * geom.in_sample()];
            for z in 0..geom.od {
                im2col(xin, &geom, z, &mut cols);
                let off = bi * geom.out_sample() + z * pl;
                T::gemm(
                    o,
                    cr,
                    pl,
                    T::one(),
                    wv,
                    cr as isize,
                    1,
                    &cols,
                    pl as isize,
                    1,
                    T::zero(),
                    &mut out[off..],
                    (geom.od * pl) as isize,
                    1,
                );
            }
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            let per = geom.od * pl;
            for (i, chunk) in out.chunks_mut(per).enumerate() {
                let bv = bias[i % o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = if xs.len() == 4 { vec![n, o, geom.oh, geom.ow] } else { vec![n, o, geom.od, geom.oh, geom.ow] };
        let out = Tensor::new(shape, out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &parents))
    }

    /// Max pooling without padding; `kernel`/`stride` have one entry per
    /// spatial axis.
    pub fn max_pool(&mut self, x: Var, kernel: &[usize], stride: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, c, d, h, w] = as_5d(&xs)?;
        if kernel.len() != xs.len() - 2 || stride.len() != kernel.len() {
            return Err(NnError::Shape(format!("max_pool: kernel {kernel:?} on {xs:?}")));
        }
        let lift = |v: &[usize]| -> [usize; 3] {
            if v.len() == 2 {
                [1, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let (k, s) = (lift(kernel), lift(stride));
        let dims = [d, h, w];
        let mut out_dims = [0; 3];
        for i in 0..3 {
            if dims[i] < k[i] {
                return Err(NnError::Shape(format!("max_pool: extent {} smaller than kernel {} on {xs:?}", dims[i], k[i])));
            }
            out_dims[i] = (dims[i] - k[i]) / s[i] + 1;
        }
        let [od, oh, ow] = out_dims;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut at = base + ((z * s[0]) * h + y * s[1]) * w + xx * s[2];
                        let mut best = xv[at];
                        for dz in 0..k[0] {
                            for dy in 0..k[1] {
                                let row = base + ((z * s[0] + dz) * h + y * s[1] + dy) * w + xx * s[2];
                                for dx in 0..k[2] {
                                    let v = xv[row + dx];
                                    if v > best {
                                        best = v;
                                        at = row + dx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at);
                    }
                }
            }
        }
        let shape = if xs.len() == 4 { vec![n, c, oh, ow] } else { vec![n, c, od, oh, ow] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Adaptive average pooling to the given spatial extent, with bins
    /// `[floor(i·L/n), ceil((i+1)·L/n))` along each axis.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_size: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, c, d, h, w] = as_5d(&xs)?;
        if out_size.len() != xs.len() - 2 || out_size.contains(&0) {
            return Err(NnError::Shape(format!("adaptive_avg_pool: {out_size:?} on {xs:?}")));
        }
        let out = if out_size.len() == 2 { [1, out_size[0], out_size[1]] } else { [out_size[0], out_size[1], out_size[2]] };
        let geom = PoolGeom { nc: n * c, dims: [d, h, w], out };
        let xv = self.value(x).data();
        let mut res = Vec::with_capacity(geom.nc * out.iter().product::<usize>());
        for nc in 0..geom.nc {
            let base = nc * d * h * w;
            for z in 0..out[0] {
                let (z0, z1) = bin(z, d, out[0]);
                for y in 0..out[1] {
                    let (y0, y1) = bin(y, h, out[1]);
                    for xx in 0..out[2] {
                        let (x0, x1) = bin(xx, w, out[2]);
                        let mut acc = T::zero();
                        for zz in z0..z1 {
                            for yy in y0..y1 {
                                let row = base + (zz * h + yy) * w;
                                acc += xv[row + x0..row + x1].iter().copied().sum::<T>();
                            }
                        }
                        let cnt = (z1 - z0) * (y1 - y0) * (x1 - x0);
                        res.push(acc / T::lit(cnt as f64));
                    }
                }
            }
        }
        let shape = if xs.len() == 4 { vec![n, c, out[1], out[2]] } else { vec![n, c, out[0], out[1], out[2]] };
        let res = Tensor::new(shape, res)?;
        Ok(self.push(res, Op::AdaptiveAvgPool { x, geom }, &[x]))
    }

    /// Non-overlapping average pooling with window `k` along every spatial
    /// axis of a rank-4 input (extents must be divisible by `k`).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k == 0 || !xs[2].is_multiple_of(k) || !xs[3].is_multiple_of(k) {
            return Err(NnError::Shape(format!("avg_pool2d({k}) on {xs:?}")));
        }
        self.adaptive_avg_pool(x, &[xs[2] / k, xs[3] / k])
    }

    /// `out[i] = x[idx[i]]` over the flattened input; repeated indices
    /// broadcast and accumulate on the way back.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(NnError::Shape(format!("gather index {bad} out of {}", xv.len())));
        }
        let out = Tensor::new(shape.to_vec(), idx.iter().map(|&i| xv[i]).collect())?;
        Ok(self.push(out, Op::Gather { x, idx }, &[x]))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(NnError::Shape(format!("concat axis {axis} on {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let mut inner = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(NnError::Shape(format!("concat {first:?} with {s:?}")));
            }
            total_axis += s[axis];
            inner.push(s[axis..].iter().product::<usize>());
        }
        let mut out = Vec::with_capacity(outer * inner.iter().sum::<usize>());
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&inner) {
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), outer, inner }, parts))
    }

    /// Elementwise maximum over axis 0.
    pub fn max_axis0(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[0] == 0 {
            return Err(NnError::Shape(format!("max_axis0 on {xs:?}")));
        }
        let f: usize = xs[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = xv[..f].to_vec();
        let mut argmax: Vec<usize> = (0..f).collect();
        for r in 1..xs[0] {
            for j in 0..f {
                let v = xv[r * f + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = r * f + j;
                }
            }
        }
        let out = Tensor::new(xs[1..].to_vec(), out)?;
        Ok(self.push(out, Op::MaxAxis0 { x, argmax }, &[x]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(NnError::Shape(format!("mean_axis({axis}) on {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let div = T::lit(len as f64);
        out.iter_mut().for_each(|v| *v /= div);
        let mut shape = xs.clone();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MeanAxis { x, outer, len, inner }, &[x]))
    }

    /// Inverted dropout. `p == 0` is the identity and records nothing.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let mut out = self.value(x).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse sweep from `root`, seeded with `seed` (same shape as `root`).
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(root) {
            return Err(NnError::Shape(format!("backward seed {:?} for root {:?}", seed.shape(), self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.shape(v).to_vec())
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for (x, &y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = g.clone();
                    for (x, &y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * *f)),
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (x, &v) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if v <= T::zero() {
                        *x = T::zero();
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                for (x, &v) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *x *= gelu_grad(v);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshaped(self.shape(*a).to_vec())?;
                self.accumulate(grads, *a, ga);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let k = wv.shape()[1];
                let n = wv.shape()[0];
                let m = xv.len() / k;
                if self.wants(*x) {
                    let mut gx = self.zeros_like(*x);
                    T::gemm(m, n, k, T::one(), gd, n as isize, 1, wv.data(), k as isize, 1, T::zero(), gx.data_mut(), k as isize, 1);
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = self.zeros_like(*w);
                    T::gemm(n, m, k, T::one(), gd, 1, n as isize, xv.data(), k as isize, 1, T::zero(), gw.data_mut(), k as isize, 1);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = self.zeros_like(*b);
                        for row in gd.chunks(n) {
                            for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut ga = self.zeros_like(*a);
                    // dA = dY · Bᵀ (or dY · B when B was transposed)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gd[i * m * n..],
                            n as isize,
                            1,
                            &bv[i * k * n..],
                            rsb,
                            csb,
                            T::zero(),
                            &mut ga.data_mut()[i * m * k..],
                            k as isize,
                            1,
                        );
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = self.zeros_like(*b);
                    for i in 0..batch {
                        if *trans_b {
                            // dB (N,K) = dYᵀ · A
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                &gd[i * m * n..],
                                1,
                                n as isize,
                                &av[i * m * k..],
                                k as isize,
                                1,
                                T::zero(),
                                &mut gb.data_mut()[i * n * k..],
                                k as isize,
                                1,
                            );
                        } else {
                            // dB (K,N) = Aᵀ · dY
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &av[i * m * k..],
                                1,
                                k as isize,
                                &gd[i * m * n..],
                                n as isize,
                                1,
                                T::zero(),
                                &mut gb.data_mut()[i * k * n..],
                                n as isize,
                                1,
                            );
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let f = *node.value.shape().last().unwrap();
                let mut ga = self.zeros_like(*a);
                for ((gr, yr), out) in gd.chunks(f).zip(y.chunks(f)).zip(ga.data_mut().chunks_mut(f)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for ((o, &g), &y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let f = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                let mut gg = vec![T::zero(); f];
                let mut gb = vec![T::zero(); f];
                let mut gx = self.zeros_like(*x);
                let nf = T::lit(f as f64);
                for (r, rs) in rstd.iter().enumerate() {
                    let grow = &gd[r * f..(r + 1) * f];
                    let hrow = &xhat[r * f..(r + 1) * f];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..f {
                        let dh = grow[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[j];
                        gg[j] += grow[j] * hrow[j];
                        gb[j] += grow[j];
                    }
                    mean_dh /= nf;
                    mean_dh_h /= nf;
                    for j in 0..f {
                        let dh = grow[j] * gv[j];
                        gx.data_mut()[r * f + j] = *rs * (dh - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, Tensor::new(vec![f], gg)?);
                self.accumulate(grads, *beta, Tensor::new(vec![f], gb)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let (n, c, spatial) = channel_layout(self.shape(*x))?;
                let gv = self.value(*gamma).data();
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for i in base..base + spatial {
                            gg[ch] += gd[i] * xhat[i];
                            gb[ch] += gd[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut gx = self.zeros_like(*x);
                    let cnt = T::lit((n * spatial) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * spatial;
                            let scale = gv[ch] * rstd[ch];
                            for i in base..base + spatial {
                                gx.data_mut()[i] = if *train {
                                    // batch statistics depend on x
                                    scale * (gd[i] - gb[ch] / cnt - xhat[i] * gg[ch] / cnt)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], gg)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], gb)?);
            }
            Op::Conv { x, w, b, geom } => {
                let geom = *geom;
                let (cr, pl) = (geom.col_rows(), geom.plane());
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = if want_x { Some(self.zeros_like(*x)) } else { None };
                let mut gw = if want_w { Some(self.zeros_like(*w)) } else { None };
                let mut cols = vec![T::zero(); cr * pl];
                let mut dcols = vec![T::zero(); cr * pl];
                for bi in 0..geom.n {
                    let xin = &xv[bi * geom.in_sample()..(bi + 1) * geom.in_sample()];
                    for z in 0..geom.od {
                        let goff = bi * geom.out_sample() + z * pl;
                        let rs_out = (geom.od * pl) as isize;
                        if let Some(gw) = gw.as_mut() {
                            im2col(xin, &geom, z, &mut cols);
                            T::gemm(
                                geom.o,
                                pl,
                                cr,
                                T::one(),
                                &gd[goff..],
                                rs_out,
                                1,
                                &cols,
                                1,
                                pl as isize,
                                T::one(),
                                gw.data_mut(),
                                cr as isize,
                                1,
                            );
                        }
                        if let Some(gx) = gx.as_mut() {
                            T::gemm(
                                cr,
                                geom.o,
                                pl,
                                T::one(),
                                wv,
                                1,
                                cr as isize,
                                &gd[goff..],
                                rs_out,
                                1,
                                T::zero(),
                                &mut dcols,
                                pl as isize,
                                1,
                            );
                            let gxs = &mut gx.data_mut()[bi * geom.in_sample()..(bi + 1) * geom.in_sample()];
                            col2im(&dcols, &geom, z, gxs);
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let per = geom.od * pl;
                        let mut gb = self.zeros_like(*b);
                        for (i, chunk) in gd.chunks(per).enumerate() {
                            gb.data_mut()[i % geom.o] += chunk.iter().copied().sum::<T>();
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::MaxPool { x, argmax } | Op::MaxAxis0 { x, argmax } => {
                let mut gx = self.zeros_like(*x);
                for (&at, &v) in argmax.iter().zip(gd) {
                    gx.data_mut()[at] += v;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AdaptiveAvgPool { x, geom } => {
                let [d, h, w] = geom.dims;
                let out = geom.out;
                let mut gx = self.zeros_like(*x);
                let mut gi = 0;
                for nc in 0..geom.nc {
                    let base = nc * d * h * w;
                    for z in 0..out[0] {
                        let (z0, z1) = bin(z, d, out[0]);
                        for y in 0..out[1] {
                            let (y0, y1) = bin(y, h, out[1]);
                            for xx in 0..out[2] {
                                let (x0, x1) = bin(xx, w, out[2]);
                                let cnt = (z1 - z0) * (y1 - y0) * (x1 - x0);
                                let share = gd[gi] / T::lit(cnt as f64);
                                gi += 1;
                                for zz in z0..z1 {
                                    for yy in y0..y1 {
                                        let row = base + (zz * h + yy) * w;
                                        gx.data_mut()[row + x0..row + x1].iter_mut().for_each(|v| *v += share);
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, idx } => {
                let mut gx = self.zeros_like(*x);
                for (&i, &v) in idx.iter().zip(gd) {
                    gx.data_mut()[i] += v;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = inner.iter().sum();
                let mut start = 0;
                for (&p, &len) in parts.iter().zip(inner) {
                    if self.wants(p) {
                        let mut gp = self.zeros_like(p);
                        for o in 0..*outer {
                            gp.data_mut()[o * len..(o + 1) * len].copy_from_slice(&gd[o * total + start..o * total + start + len]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    start += len;
                }
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let mut gx = self.zeros_like(*x);
                let div = T::lit(*len as f64);
                for o in 0..*outer {
                    for l in 0..*len {
                        let dst = &mut gx.data_mut()[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *d = v / div;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                for (v, &m) in gx.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(NnError::Shape(format!("expected (N,C,...) got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end.max(start + 1).min(len))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Unfold the receptive fields feeding output depth plane `z` into a
/// `(C·kd·kh·kw, OH·OW)` matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, z: usize, cols: &mut [T]) {
    let pl = g.plane();
    let [kd, kh, kw] = g.k;
    let mut row = 0;
    for c in 0..g.c {
        for dz in 0..kd {
            let iz = (z * g.s[0] + dz) as isize - g.p[0] as isize;
            for dy in 0..kh {
                for dx in 0..kw {
                    let dst = &mut cols[row * pl..(row + 1) * pl];
                    row += 1;
                    if iz < 0 || iz >= g.d as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let plane = &x[(c * g.d + iz as usize) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.s[1] + dy) as isize - g.p[1] as isize;
                        let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.s[2] + dx) as isize - g.p[2] as isize;
                            *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, z: usize, x: &mut [T]) {
    let pl = g.plane();
    let [kd, kh, kw] = g.k;
    let mut row = 0;
    for c in 0..g.c {
        for dz in 0..kd {
            let iz = (z * g.s[0] + dz) as isize - g.p[0] as isize;
            for dy in 0..kh {
                for dx in 0..kw {
                    let src = &cols[row * pl..(row + 1) * pl];
                    row += 1;
                    if iz < 0 || iz >= g.d as isize {
                        continue;
                    }
                    let plane = &mut x[(c * g.d + iz as usize) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.s[1] + dy) as isize - g.p[1] as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                            let ix = (ox * g.s[2] + dx) as isize - g.p[2] as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
