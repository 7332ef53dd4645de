//! Forward kernels for every primitive the engine supports.

use crate::error::{Error, Result};

use super::graph::Op;
use super::{Element, Graph, Tensor, Var};

/// Added under the square root when differentiating a Euclidean distance.
pub(crate) const DISTANCE_EPS: f64 = 1e-12;

/// Per-channel statistics of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of values each channel was averaged over.
    pub count: usize,
}

/// `(outer, channels, inner)` for a tensor whose axis 1 is the channel axis.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    pub(crate) fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if ph < w[2] || pw < w[3] {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(Self {
            batch: x[0],
            in_c: x[1],
            in_h: x[2],
            in_w: x[3],
            out_c: w[0],
            kh: w[2],
            kw: w[3],
            out_h: (ph - w[2]) / stride + 1,
            out_w: (pw - w[3]) / stride + 1,
            stride,
            pad,
        })
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.out_h, self.out_w]
    }

    /// Unrolls sample `n` into a `[C·kh·kw, out_h·out_w]` patch matrix.
    fn im2col<T: Element>(&self, x: &[T], n: usize, col: &mut [T]) {
        let in_plane = self.in_h * self.in_w;
        let out_plane = self.out_h * self.out_w;
        for c in 0..self.in_c {
            let src = &x[(n * self.in_c + c) * in_plane..][..in_plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * out_plane;
                    let dst = &mut col[row..row + out_plane];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.out_w + ox] = if iy >= 0
                                && (iy as usize) < self.in_h
                                && ix >= 0
                                && (ix as usize) < self.in_w
                            {
                                src[iy as usize * self.in_w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch-matrix gradient back onto sample `n` of `gx`.
    fn col2im<T: Element>(&self, col: &[T], n: usize, gx: &mut [T]) {
        let in_plane = self.in_h * self.in_w;
        let out_plane = self.out_h * self.out_w;
        for c in 0..self.in_c {
            let dst = &mut gx[(n * self.in_c + c) * in_plane..][..in_plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * out_plane;
                    let src = &col[row..row + out_plane];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dst[iy as usize * self.in_w + ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub(crate) fn forward<T: Element>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (k, p) = (self.patch_len(), self.out_h * self.out_w);
        let mut col = vec![T::zero(); k * p];
        let mut out = vec![T::zero(); self.batch * self.out_c * p];
        for n in 0..self.batch {
            self.im2col(x, n, &mut col);
            let dst = &mut out[n * self.out_c * p..][..self.out_c * p];
            // out_n[O, P] = W[O, K] · col[K, P]
            T::gemm(self.out_c, k, p, w, (k, 1), &col, (p, 1), dst, (p, 1), false);
        }
        out
    }

    pub(crate) fn backward_input<T: Element>(&self, g: &[T], w: &[T], gx: &mut [T]) {
        let (k, p) = (self.patch_len(), self.out_h * self.out_w);
        let mut col = vec![T::zero(); k * p];
        for n in 0..self.batch {
            let go = &g[n * self.out_c * p..][..self.out_c * p];
            // col[K, P] = Wᵀ[K, O] · g_n[O, P]
            T::gemm(k, self.out_c, p, w, (1, k), go, (p, 1), &mut col, (p, 1), false);
            self.col2im(&col, n, gx);
        }
    }

    pub(crate) fn backward_weight<T: Element>(&self, g: &[T], x: &[T], gw: &mut [T]) {
        let (k, p) = (self.patch_len(), self.out_h * self.out_w);
        let mut col = vec![T::zero(); k * p];
        for n in 0..self.batch {
            self.im2col(x, n, &mut col);
            let go = &g[n * self.out_c * p..][..self.out_c * p];
            // gW[O, K] += g_n[O, P] · colᵀ[P, K]
            T::gemm(self.out_c, p, k, go, (p, 1), &col, (1, p), gw, (k, 1), true);
        }
    }
}

fn same_shape<T: Element>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn zip_map<T: Element>(g: &Graph<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (x, y) = (g.value(a), g.value(b));
    Tensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
    }
}

impl<T: Element> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let v = zip_map(self, a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let v = zip_map(self, a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let v = zip_map(self, a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Adds a `[K]` bias to every row of an `[N, K]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let width = sb[0];
        let b = self.value(bias).data();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_exact_mut(width) {
            row.iter_mut().zip(b).for_each(|(d, &s)| *d += s);
        }
        self.push(v, Op::AddBias(x, bias), &[x, bias])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, x, (k, 1), y, (n, 1), &mut out, (n, 1), false);
        let v = Tensor::new(&[m, n], out)?;
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// 2-D convolution, input `[N, C, H, W]`, weight `[O, C, kh, kw]`, symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, pad)?;
        let data = geom.forward(self.value(input).data(), self.value(weight).data());
        let v = Tensor::new(&geom.out_shape(), data)?;
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
            &[input, weight],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    fn check_bn(&self, input: Var, gamma: Var, beta: Var) -> Result<usize> {
        let shape = self.shape(input);
        if shape.len() < 2 {
            return Err(Error::invalid(
                "batch_norm",
                format!("input needs a batch and a channel axis, got {shape:?}"),
            ));
        }
        let c = shape[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", shape, self.shape(p)));
            }
        }
        Ok(c)
    }

    /// Batch norm with batch statistics over every axis except axis 1.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let channels = self.check_bn(input, gamma, beta)?;
        let x = self.value(input);
        let (outer, _, inner) = channel_layout(x.shape());
        let count = outer * inner;
        let n = T::lit(count as f64);
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                mean[c] += x.data()[base..base + inner].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for &v in &x.data()[base..base + inner] {
                    var[c] += (v - mean[c]) * (v - mean[c]);
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.normalize(input, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch norm using fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let channels = self.check_bn(input, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::shape(
                "batch_norm",
                self.shape(input),
                &[running_mean.len(), running_var.len()],
            ));
        }
        let inv_std = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        self.normalize(input, gamma, beta, running_mean, inv_std, false)
    }

    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let (outer, channels, inner) = channel_layout(&shape);
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (x.data()[i] - mean[c]) * inv_std[c];
                    out[i] = gam[c] * xhat[i] + bet[c];
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        )
    }

    fn pool_layout(&self, op: &'static str, input: Var) -> Result<(Vec<usize>, usize)> {
        let shape = self.shape(input);
        if shape.len() < 3 {
            return Err(Error::invalid(
                op,
                format!("expects [.., C, H, W], got {shape:?}"),
            ));
        }
        let r = shape.len();
        Ok((shape[..r - 2].to_vec(), shape[r - 2] * shape[r - 1]))
    }

    /// Max over the two trailing (height, width) axes.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let (out_shape, plane) = self.pool_layout("global_max_pool", input)?;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len() / plane);
        let mut argmax = Vec::with_capacity(x.len() / plane);
        for (o, chunk) in x.chunks_exact(plane).enumerate() {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = i;
                }
            }
            out.push(chunk[best]);
            argmax.push(o * plane + best);
        }
        let v = Tensor::new(&out_shape, out)?;
        self.push(v, Op::MaxPool { input, argmax }, &[input])
    }

    /// Mean over the two trailing (height, width) axes.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (out_shape, plane) = self.pool_layout("global_avg_pool", input)?;
        let inv = T::one() / T::lit(plane as f64);
        let out = self
            .value(input)
            .data()
            .chunks_exact(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(&out_shape, out)?;
        self.push(v, Op::AvgPool(input), &[input])
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&x[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(&out_shape, out)?;
        self.push(v, Op::Narrow { input, axis, start }, &[input])
    }

    /// Rows `start..start+len` of the height axis (second to last).
    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let rank = self.shape(input).len();
        if rank < 2 {
            return Err(Error::invalid("slice_rows", "input has no height axis"));
        }
        self.narrow(input, rank - 2, start, len)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let size = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * size * inner..(o + 1) * size * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Mean softmax cross-entropy over the rows of `[N, K]` logits (or one `[K]` row).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, classes) = match shape.as_slice() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            _ => {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("logits must be [K] or [N, K], got {shape:?}"),
                ))
            }
        };
        if labels.len() != rows {
            return Err(Error::shape("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * classes + c] = e;
                z += e;
            }
            probs[r * classes..(r + 1) * classes]
                .iter_mut()
                .for_each(|p| *p /= z);
            total += z.ln() + max - row[label];
        }
        let v = Tensor::scalar(total / T::lit(rows as f64));
        self.push(
            v,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Distances between selected row pairs of an `[N, D]` matrix, as an `[M]` vector.
    pub fn pair_distances(
        &mut self,
        input: Var,
        pairs: &[(usize, usize)],
        squared: bool,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid(
                "pair_distances",
                format!("expects [N, D], got {shape:?}"),
            ));
        }
        if pairs.is_empty() {
            return Err(Error::invalid("pair_distances", "no pairs"));
        }
        let (n, dim) = (shape[0], shape[1]);
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(Error::invalid(
                "pair_distances",
                format!("pair ({i}, {j}) out of range for {n} rows"),
            ));
        }
        let x = self.value(input).data();
        let out = pairs
            .iter()
            .map(|&(i, j)| {
                let ss: T = x[i * dim..(i + 1) * dim]
                    .iter()
                    .zip(&x[j * dim..(j + 1) * dim])
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if squared {
                    ss
                } else {
                    ss.sqrt()
                }
            })
            .collect();
        let v = Tensor::new(&[pairs.len()], out)?;
        self.push(
            v,
            Op::PairDistance {
                input,
                pairs: pairs.to_vec(),
                squared,
            },
            &[input],
        )
    }

    /// `‖a − b‖₂` of two equally shaped tensors.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "euclidean_distance", a, b)?;
        let ss: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(ss.sqrt()), Op::Distance(a, b), &[a, b])
    }

    /// `‖a‖₂`.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let zero = self.constant(Tensor::zeros(self.shape(a)));
        self.euclidean_distance(a, zero)
    }

    /// `max(x, 0)`, elementwise.
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let m = x.data().iter().copied().sum::<T>() / T::lit(x.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }
}
