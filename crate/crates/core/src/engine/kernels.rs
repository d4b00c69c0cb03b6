//! Numeric kernels shared by forward evaluation and numeric backward.
//!
//! Every kernel validates its shapes and reports failures as
//! [`EngineError::Shape`] naming the primitive.

use super::tensor::{Real, Tensor};
use super::EngineError;

fn shape_err(op: &'static str, detail: String) -> EngineError {
    EngineError::Shape { op, detail }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, EngineError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out` rank; broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut pos = 0;
    loop {
        for j in 0..inner {
            f(pos + j, oa + j * ia, ob + j * ib);
        }
        pos += inner;
        if pos >= total {
            break;
        }
        // advance the outer odometer
        let mut axis = rank - 1;
        loop {
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            oa -= sa[axis] * out[axis];
            ob -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

pub fn binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, EngineError> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![T::zero(); n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// Reduces `x` by summation onto `shape`, which must broadcast to `x`'s shape.
pub fn sum_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>, EngineError> {
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let full = broadcast_shape("sum_to", shape, x.shape())?;
    if full != x.shape() {
        return Err(shape_err("sum_to", format!("{:?} does not reduce to {shape:?}", x.shape())));
    }
    let so = broadcast_strides(shape, &full);
    let sx = broadcast_strides(x.shape(), &full);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let xd = x.data();
    for_each_broadcast(&full, &sx, &so, |_, ix, io| od[io] = od[io] + xd[ix]);
    Ok(out)
}

pub fn broadcast_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>, EngineError> {
    let full = broadcast_shape("broadcast_to", x.shape(), shape)?;
    if full != shape {
        return Err(shape_err("broadcast_to", format!("{:?} cannot expand to {shape:?}", x.shape())));
    }
    let sx = broadcast_strides(x.shape(), shape);
    let n: usize = shape.iter().product();
    let mut data = vec![T::zero(); n];
    let xd = x.data();
    let zeros = vec![0; shape.len()];
    for_each_broadcast(shape, &sx, &zeros, |o, ix, _| data[o] = xd[ix]);
    Tensor::new(shape.to_vec(), data)
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = Tensor::zeros(&[m, n]);
    if m * n > 0 && k > 0 {
        T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), out.data_mut());
    }
    Ok(out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(shape_err("transpose", format!("{s:?} is not a matrix")));
    }
    let (r, c) = (s[0], s[1]);
    let d = a.data();
    Tensor::new(vec![c, r], (0..r * c).map(|i| d[(i % r) * c + i / r]).collect())
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        input: [usize; 4],
        kernel: [usize; 4],
        stride: usize,
        pad: usize,
    ) -> Result<Self, EngineError> {
        let [n, c, h, w] = input;
        let [o, kc, kh, kw] = kernel;
        if kc != c {
            return Err(shape_err(op, format!("input {input:?} vs kernel {kernel:?}: channel mismatch")));
        }
        if stride == 0 || kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                op,
                format!("input {input:?} vs kernel {kernel:?} (stride {stride}, pad {pad})"),
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }
}

fn dims4(op: &'static str, t: &[usize]) -> Result<[usize; 4], EngineError> {
    t.try_into()
        .map_err(|_| shape_err(op, format!("expected a 4-d tensor, got {t:?}")))
}

/// Unfolds one image into a `[C*KH*KW, HO*WO]` column matrix.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back into an image, accumulating overlaps.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = &mut img[base + ix as usize];
                            *d = *d + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>, EngineError> {
    let g = ConvGeom::new("conv2d", dims4("conv2d", x.shape())?, dims4("conv2d", w.shape())?, stride, pad)?;
    let (patch, ohw) = (g.patch(), g.out_hw());
    let mut out = Tensor::zeros(&[g.n, g.o, g.ho, g.wo]);
    let mut cols = vec![T::zero(); patch * ohw];
    let img_len = g.c * g.h * g.w;
    for n in 0..g.n {
        im2col(&g, &x.data()[n * img_len..(n + 1) * img_len], &mut cols);
        let dst = &mut out.data_mut()[n * g.o * ohw..(n + 1) * g.o * ohw];
        T::gemm(g.o, patch, ohw, w.data(), patch as isize, 1, &cols, ohw as isize, 1, T::zero(), dst);
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to its input: maps `[N,O,HO,WO]` back to `[N,C,H,W]`.
pub fn conv_transpose2d<T: Real>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Result<Tensor<T>, EngineError> {
    let [n, o, ho, wo] = dims4("conv_transpose2d", gy.shape())?;
    let ws = dims4("conv_transpose2d", w.shape())?;
    let g = ConvGeom::new("conv_transpose2d", [n, ws[1], in_hw.0, in_hw.1], ws, stride, pad)?;
    if g.o != o || g.ho != ho || g.wo != wo {
        return Err(shape_err(
            "conv_transpose2d",
            format!("grad {:?} inconsistent with kernel {ws:?} and input {in_hw:?}", gy.shape()),
        ));
    }
    let (patch, ohw) = (g.patch(), g.out_hw());
    let img_len = g.c * g.h * g.w;
    let mut out = Tensor::zeros(&[n, g.c, g.h, g.w]);
    let mut cols = vec![T::zero(); patch * ohw];
    for i in 0..n {
        let gi = &gy.data()[i * o * ohw..(i + 1) * o * ohw];
        // cols = W^T [patch, O] · gy_i [O, ohw]
        T::gemm(patch, o, ohw, w.data(), 1, patch as isize, gi, ohw as isize, 1, T::zero(), &mut cols);
        col2im(&g, &cols, &mut out.data_mut()[i * img_len..(i + 1) * img_len]);
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to its kernel: `Σ_n gy_n · cols(x_n)^T`.
pub fn conv2d_weight_grad<T: Real>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    kernel_hw: (usize, usize),
) -> Result<Tensor<T>, EngineError> {
    let xs = dims4("conv2d_weight_grad", x.shape())?;
    let [gn, o, ho, wo] = dims4("conv2d_weight_grad", gy.shape())?;
    let g = ConvGeom::new("conv2d_weight_grad", xs, [o, xs[1], kernel_hw.0, kernel_hw.1], stride, pad)?;
    if gn != g.n || g.ho != ho || g.wo != wo {
        return Err(shape_err(
            "conv2d_weight_grad",
            format!("input {xs:?} inconsistent with grad {:?}", gy.shape()),
        ));
    }
    let (patch, ohw) = (g.patch(), g.out_hw());
    let img_len = g.c * g.h * g.w;
    let mut out = Tensor::zeros(&[o, g.c, g.kh, g.kw]);
    let mut cols = vec![T::zero(); patch * ohw];
    for i in 0..g.n {
        im2col(&g, &x.data()[i * img_len..(i + 1) * img_len], &mut cols);
        let gi = &gy.data()[i * o * ohw..(i + 1) * o * ohw];
        // out[O, patch] += gy_i [O, ohw] · cols^T [ohw, patch]
        T::gemm(o, ohw, patch, gi, ohw as isize, 1, &cols, 1, ohw as isize, T::one(), out.data_mut());
    }
    Ok(out)
}

/// Max pooling; returns the output and, per output element, the flat input
/// index of the selected maximum. Ties resolve to the first index in scan order.
pub fn maxpool2d<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>), EngineError> {
    let [n, c, h, w] = dims4("maxpool2d", x.shape())?;
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(shape_err("maxpool2d", format!("input {:?} with window {k} stride {stride}", x.shape())));
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let xd = x.data();
    let mut vals = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let j = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[j] > xd[best] {
                            best = j;
                        }
                    }
                }
                idx.push(best);
                vals.push(xd[best]);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], vals)?, idx))
}

/// Maximum over the last axis (kept as size 1) plus the selected flat indices.
pub fn max_last<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), EngineError> {
    let s = x.shape();
    let d = *s.last().ok_or_else(|| shape_err("max_last", "scalar input".into()))?;
    if d == 0 {
        return Err(shape_err("max_last", format!("empty last axis in {s:?}")));
    }
    let rows = x.len() / d;
    let xd = x.data();
    let mut idx = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut best = r * d;
        for j in r * d..(r + 1) * d {
            if xd[j] > xd[best] {
                best = j;
            }
        }
        idx.push(best);
    }
    let mut shape = s.to_vec();
    *shape.last_mut().unwrap() = 1;
    let vals = idx.iter().map(|&i| xd[i]).collect();
    Ok((Tensor::new(shape, vals)?, idx))
}

pub fn gather<T: Real>(x: &Tensor<T>, index: &[usize], out_shape: &[usize]) -> Result<Tensor<T>, EngineError> {
    if index.iter().any(|&i| i >= x.len()) || out_shape.iter().product::<usize>() != index.len() {
        return Err(shape_err("gather", format!("index set incompatible with {:?} -> {out_shape:?}", x.shape())));
    }
    let xd = x.data();
    Tensor::new(out_shape.to_vec(), index.iter().map(|&i| xd[i]).collect())
}

pub fn scatter<T: Real>(g: &Tensor<T>, index: &[usize], in_shape: &[usize]) -> Result<Tensor<T>, EngineError> {
    let mut out = Tensor::zeros(in_shape);
    if g.len() != index.len() || index.iter().any(|&i| i >= out.len()) {
        return Err(shape_err("scatter", format!("{:?} into {in_shape:?}", g.shape())));
    }
    let od = out.data_mut();
    for (&i, &v) in index.iter().zip(g.data()) {
        od[i] = od[i] + v;
    }
    Ok(out)
}

/// Non-overlapping average pooling with window `k` (spatial dims must divide).
pub fn avgpool2d<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>, EngineError> {
    let [n, c, h, w] = dims4("avgpool2d", x.shape())?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err("avgpool2d", format!("input {:?} not divisible by window {k}", x.shape())));
    }
    let (ho, wo) = (h / k, w / k);
    let scale = T::one() / T::lit((k * k) as f64);
    let xd = x.data();
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let od = out.data_mut();
    for plane in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                let o = plane * ho * wo + (y / k) * wo + xx / k;
                od[o] = od[o] + xd[plane * h * w + y * w + xx] * scale;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>, EngineError> {
    let [n, c, h, w] = dims4("nearest_upsample", x.shape())?;
    if k == 0 {
        return Err(shape_err("nearest_upsample", "factor 0".into()));
    }
    let (ho, wo) = (h * k, w * k);
    let xd = x.data();
    let mut data = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                data.push(xd[plane * h * w + (y / k) * w + xx / k]);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], data)
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
    let [n, c, h, w] = dims4("global_avg_pool", x.shape())?;
    let hw = h * w;
    if hw == 0 {
        return Err(shape_err("global_avg_pool", format!("empty spatial extent {:?}", x.shape())));
    }
    let scale = T::one() / T::lit(hw as f64);
    let xd = x.data();
    Tensor::new(
        vec![n, c],
        (0..n * c)
            .map(|p| xd[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * scale)
            .collect(),
    )
}

/// Row-wise softmax over the last axis.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
    let d = *x.shape().last().ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of `[N,K]` logits against integer labels.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>, EngineError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 || labels.iter().any(|&l| l >= s[1]) {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("logits {s:?} vs {} labels", labels.len()),
        ));
    }
    let k = s[1];
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        total = total + lse - row[label];
    }
    Ok(Tensor::scalar(total / T::lit(labels.len() as f64)))
}

pub fn slice_axis<T: Real>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>, EngineError> {
    let s = x.shape();
    if axis >= s.len() || start > end || end > s[axis] {
        return Err(shape_err("slice", format!("{s:?} axis {axis} range {start}..{end}")));
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut shape = s.to_vec();
    shape[axis] = end - start;
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * s[axis] * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    Tensor::new(shape, data)
}

/// Zero-pads along `axis`; the adjoint of [`slice_axis`].
pub fn pad_axis<T: Real>(x: &Tensor<T>, axis: usize, before: usize, after: usize) -> Result<Tensor<T>, EngineError> {
    let s = x.shape();
    if axis >= s.len() {
        return Err(shape_err("pad", format!("{s:?} axis {axis}")));
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut shape = s.to_vec();
    shape[axis] += before + after;
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        data.extend(std::iter::repeat_n(T::zero(), before * inner));
        data.extend_from_slice(&x.data()[o * s[axis] * inner..(o + 1) * s[axis] * inner]);
        data.extend(std::iter::repeat_n(T::zero(), after * inner));
    }
    Tensor::new(shape, data)
}

pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, EngineError> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
    let s = first.shape();
    if axis >= s.len() {
        return Err(shape_err("concat", format!("{s:?} axis {axis}")));
    }
    for p in parts {
        let ps = p.shape();
        if ps.len() != s.len() || ps.iter().enumerate().any(|(i, &d)| i != axis && d != s[i]) {
            return Err(shape_err("concat", format!("{s:?} vs {ps:?} along axis {axis}")));
        }
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut shape = s.to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let span = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * span..(o + 1) * span]);
        }
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn broadcast_add_over_channels() {
        let x = t(&[1, 2, 1, 2], &[1., 2., 3., 4.]);
        let b = t(&[1, 2, 1, 1], &[10., 20.]);
        let y = binary("add", &x, &b, |a, b| a + b).unwrap();
        assert_eq!(y.data(), &[11., 12., 23., 24.]);
        let back = sum_to(&y, &[1, 2, 1, 1]).unwrap();
        assert_eq!(back.data(), &[23., 47.]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let a = t(&[2, 3], &[0.; 6]);
        let b = t(&[2], &[0.; 2]);
        assert!(binary("mul", &a, &b, |a, b| a * b).is_err());
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.0);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 5, 4], |i| ((i * 37 % 11) as f64) - 5.0);
        let w = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |i| ((i * 13 % 7) as f64) - 3.0);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let y = conv2d(&x, &w, stride, pad).unwrap();
            let [_, _, ho, wo] = dims4("t", y.shape()).unwrap();
            for n in 0..2 {
                for o in 0..3 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for c in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                            acc += x.data()[((n * 2 + c) * 5 + iy as usize) * 4 + ix as usize]
                                                * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                        }
                                    }
                                }
                            }
                            let got = y.data()[((n * 3 + o) * ho + oy) * wo + ox];
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 6, 5], |i| ((i * 31 % 17) as f64) / 7.0 - 1.0);
        let w = Tensor::<f64>::from_fn(&[4, 3, 3, 3], |i| ((i * 7 % 5) as f64) / 3.0 - 0.5);
        let y = conv2d(&x, &w, 2, 1).unwrap();
        let gy = Tensor::<f64>::from_fn(y.shape(), |i| ((i * 11 % 13) as f64) / 5.0 - 1.0);
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let gx = conv_transpose2d(&gy, &w, 2, 1, (6, 5)).unwrap();
        let via_x: f64 = gx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let gw = conv2d_weight_grad(&x, &gy, 2, 1, (3, 3)).unwrap();
        let via_w: f64 = gw.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - via_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn maxpool_first_index_wins_on_ties() {
        let x = t(&[1, 1, 2, 2], &[1., 1., 1., 1.]);
        let (y, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.item(), 1.0);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn softmax_ce_uniform() {
        let l = t(&[1, 2], &[0., 0.]);
        let v = softmax_cross_entropy(&l, &[0]).unwrap().item();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn slice_pad_concat() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let s = slice_axis(&x, 1, 1, 3).unwrap();
        assert_eq!(s.data(), &[2., 3., 5., 6.]);
        let p = pad_axis(&s, 1, 1, 0).unwrap();
        assert_eq!(p.data(), &[0., 2., 3., 0., 5., 6.]);
        let c = concat(&[&x, &s], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.data(), &[1., 2., 3., 2., 3., 4., 5., 6., 5., 6.]);
    }

    #[test]
    fn upsample_then_avgpool_is_identity() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let u = upsample_nearest(&x, 2).unwrap();
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert_eq!(&u.data()[..4], &[1., 1., 2., 2.]);
        assert_eq!(avgpool2d(&u, 2).unwrap(), x);
    }
}
