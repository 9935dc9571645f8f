//! Operation kernels. All take NCHW tensors and produce new ones; the
//! `_inplace` variants overwrite their argument.
//!
//! Reductions run in a fixed order so results do not depend on how callers
//! batch or schedule work.

use alloc::vec;
use alloc::vec::Vec;

use super::simd::dispatch;
use super::{Tensor, TensorError};
use crate::netgraph::{pool_out_extent, ConvSpec};

/// Variance epsilon used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, detail: alloc::string::String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// Grouped, strided, dilated 2-D convolution without bias. `weight` is laid
/// out `(c_out, c_in / groups, k, k)`. Each output sums its products in
/// `(c_in, ky, kx)` order.
pub fn conv2d(x: &Tensor, weight: &[f32], spec: &ConvSpec) -> Result<Tensor, TensorError> {
    let [n, c, h, w] = x.shape;
    if c != spec.c_in {
        return Err(shape_err("conv2d", alloc::format!("input has {c} channels, expected {}", spec.c_in)));
    }
    if spec.groups == 0 || c % spec.groups != 0 || !spec.c_out.is_multiple_of(spec.groups) {
        return Err(shape_err("conv2d", alloc::format!("groups {} do not divide channels", spec.groups)));
    }
    if weight.len() != spec.weight_len() {
        return Err(shape_err("conv2d", alloc::format!("weight has {} values, expected {}", weight.len(), spec.weight_len())));
    }
    if spec.stride == 0 || spec.dilation == 0 || spec.kernel == 0 {
        return Err(shape_err("conv2d", "kernel, stride and dilation must be positive".into()));
    }
    let (Some(ho), Some(wo)) = (spec.out_extent(h), spec.out_extent(w)) else {
        return Err(shape_err("conv2d", alloc::format!("{h}x{w} input smaller than kernel reach")));
    };
    let mut out = Tensor::zeros([n, spec.c_out, ho, wo]);
    let cin_g = c / spec.groups;
    let cout_g = spec.c_out / spec.groups;
    let kk = spec.kernel * spec.kernel;
    let p = spec.padding;
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut padded = if p > 0 { vec![0.0f32; c * hp * wp] } else { Vec::new() };
    let geometry = PlaneGeometry { kernel: spec.kernel, stride: spec.stride, dilation: spec.dilation, wp, ho, wo };
    let mut wide = if spec.stride == 1 { vec![0.0f32; ho * wp] } else { Vec::new() };
    for b in 0..n {
        let xb = &x.data[b * c * h * w..(b + 1) * c * h * w];
        let ob = &mut out.data[b * spec.c_out * ho * wo..(b + 1) * spec.c_out * ho * wo];
        if spec.kernel == 1 && spec.stride == 1 && p == 0 && spec.groups == 1 {
            pointwise_block(xb, weight, ob, c, spec.c_out, h * w);
            continue;
        }
        let src: &[f32] = if p > 0 {
            for ci in 0..c {
                for y in 0..h {
                    let dst = (ci * hp + y + p) * wp + p;
                    padded[dst..dst + w].copy_from_slice(&xb[(ci * h + y) * w..(ci * h + y + 1) * w]);
                }
            }
            &padded
        } else {
            xb
        };
        for (co, oplane) in ob.chunks_exact_mut(ho * wo).enumerate() {
            let g = co / cout_g;
            let planes = &src[g * cin_g * hp * wp..(g + 1) * cin_g * hp * wp];
            let wco = &weight[co * cin_g * kk..(co + 1) * cin_g * kk];
            if spec.stride == 1 {
                conv_plane_wide(planes, wco, oplane, &mut wide, cin_g, hp, &geometry);
            } else {
                conv_output_plane(planes, wco, oplane, cin_g, hp, &geometry);
            }
        }
    }
    Ok(out)
}

dispatch! {
    /// Stride-1 output plane computed over the padded row pitch, so every kernel
    /// tap is one contiguous multiply-add over the plane; the `wp - wo` columns of
    /// each row that wrap around are discarded.
    fn conv_plane_wide / conv_plane_wide_avx2 = conv_plane_wide_body(
        planes: &[f32], wco: &[f32], out: &mut [f32], wide: &mut [f32], cin: usize, hp: usize, g: &PlaneGeometry,
    )
}

#[inline(always)]
fn conv_plane_wide_body(planes: &[f32], wco: &[f32], out: &mut [f32], wide: &mut [f32], cin: usize, hp: usize, g: &PlaneGeometry) {
    let (k, d, wp) = (g.kernel, g.dilation, g.wp);
    let len = (g.ho - 1) * wp + g.wo;
    let wide = &mut wide[..len];
    wide.fill(0.0);
    for ci in 0..cin {
        let plane = &planes[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..k {
            for kx in 0..k {
                let wv = wco[(ci * k + ky) * k + kx];
                let off = ky * d * wp + kx * d;
                for (o, &v) in wide.iter_mut().zip(&plane[off..off + len]) {
                    *o += wv * v;
                }
            }
        }
    }
    for (oy, orow) in out.chunks_exact_mut(g.wo).enumerate() {
        orow.copy_from_slice(&wide[oy * wp..oy * wp + g.wo]);
    }
}

struct PlaneGeometry {
    kernel: usize,
    stride: usize,
    dilation: usize,
    wp: usize,
    ho: usize,
    wo: usize,
}

const BLOCK: usize = 8;

dispatch! {
    /// One output plane from `cin` zero-padded input planes, eight outputs of a
    /// row at a time held in registers.
    fn conv_output_plane / conv_output_plane_avx2 = conv_output_plane_body(
        planes: &[f32], wco: &[f32], out: &mut [f32], cin: usize, hp: usize, g: &PlaneGeometry,
    )
}

#[inline(always)]
fn conv_output_plane_body(planes: &[f32], wco: &[f32], out: &mut [f32], cin: usize, hp: usize, g: &PlaneGeometry) {
    let (k, s, d, wp) = (g.kernel, g.stride, g.dilation, g.wp);
    for oy in 0..g.ho {
        let orow = &mut out[oy * g.wo..(oy + 1) * g.wo];
        let mut ox0 = 0;
        while ox0 < g.wo {
            let width = BLOCK.min(g.wo - ox0);
            let mut acc = [0.0f32; BLOCK];
            for ci in 0..cin {
                let plane = &planes[ci * hp * wp..(ci + 1) * hp * wp];
                for ky in 0..k {
                    let iy = oy * s + ky * d;
                    let row = &plane[iy * wp..(iy + 1) * wp];
                    for kx in 0..k {
                        let wv = wco[(ci * k + ky) * k + kx];
                        let start = ox0 * s + kx * d;
                        if width == BLOCK && s == 1 {
                            let r: &[f32; BLOCK] = row[start..start + BLOCK].try_into().expect("block in range");
                            for j in 0..BLOCK {
                                acc[j] += wv * r[j];
                            }
                        } else if width == BLOCK && s == 2 {
                            let r: &[f32; 2 * BLOCK - 1] =
                                row[start..start + 2 * BLOCK - 1].try_into().expect("block in range");
                            for j in 0..BLOCK {
                                acc[j] += wv * r[2 * j];
                            }
                        } else {
                            for (j, a) in acc[..width].iter_mut().enumerate() {
                                *a += wv * row[start + j * s];
                            }
                        }
                    }
                }
            }
            orow[ox0..ox0 + width].copy_from_slice(&acc[..width]);
            ox0 += width;
        }
    }
}

dispatch! {
    /// `out[co] += sum_ci w[co, ci] * x[ci]` over whole planes, four output
    /// channels at a time, summed in `ci` order.
    fn pointwise_block / pointwise_block_avx2 = pointwise_block_body(
        x: &[f32], weight: &[f32], out: &mut [f32], c_in: usize, c_out: usize, plane: usize,
    )
}

#[inline(always)]
fn pointwise_block_body(x: &[f32], weight: &[f32], out: &mut [f32], c_in: usize, c_out: usize, plane: usize) {
    let mut co = 0;
    while co + 4 <= c_out {
        let (o0, rest) = out[co * plane..(co + 4) * plane].split_at_mut(plane);
        let (o1, rest) = rest.split_at_mut(plane);
        let (o2, o3) = rest.split_at_mut(plane);
        for ci in 0..c_in {
            let xi = &x[ci * plane..(ci + 1) * plane];
            let w0 = weight[co * c_in + ci];
            let w1 = weight[(co + 1) * c_in + ci];
            let w2 = weight[(co + 2) * c_in + ci];
            let w3 = weight[(co + 3) * c_in + ci];
            for p in 0..plane {
                let v = xi[p];
                o0[p] += w0 * v;
                o1[p] += w1 * v;
                o2[p] += w2 * v;
                o3[p] += w3 * v;
            }
        }
        co += 4;
    }
    for co in co..c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            let wv = weight[co * c_in + ci];
            for (o, &v) in o.iter_mut().zip(&x[ci * plane..(ci + 1) * plane]) {
                *o += wv * v;
            }
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    relu_inplace(&mut y);
    y
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        *v = v.max(0.0);
    }
}

fn check_pool(op: &'static str, x: &Tensor, stride: usize) -> Result<(usize, usize), TensorError> {
    let [_, _, h, w] = x.shape;
    if stride == 0 || h == 0 || w == 0 {
        return Err(shape_err(op, alloc::format!("bad stride {stride} or empty {h}x{w} input")));
    }
    Ok((pool_out_extent(h, stride), pool_out_extent(w, stride)))
}

/// 3x3 max pooling, padding 1; padded positions never win.
pub fn max_pool3x3(x: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
    pool3x3(x, stride, true)
}

/// 3x3 average pooling, padding 1, dividing by the number of in-bounds taps.
pub fn avg_pool3x3(x: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
    pool3x3(x, stride, false)
}

/// Separable 3x3 window: a horizontal pass over every input row, then a
/// vertical pass over the strided output rows. Averages divide by the number
/// of in-bounds taps.
fn pool3x3(x: &Tensor, stride: usize, max: bool) -> Result<Tensor, TensorError> {
    let (ho, wo) = check_pool(if max { "max_pool3x3" } else { "avg_pool3x3" }, x, stride)?;
    let [n, c, h, w] = x.shape;
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut rows = vec![0.0f32; h * wo];
    let span = |centre: usize, extent: usize| (centre.saturating_sub(1), (centre + 2).min(extent));
    for (plane, oplane) in x.data.chunks_exact(h * w).zip(out.data.chunks_exact_mut(ho * wo)) {
        for y in 0..h {
            let irow = &plane[y * w..(y + 1) * w];
            if stride == 1 && w >= 3 {
                let hrow = &mut rows[y * wo..(y + 1) * wo];
                let inner = hrow[1..w - 1].iter_mut().zip(irow.iter().zip(&irow[1..]).zip(&irow[2..]));
                if max {
                    inner.for_each(|(o, ((&a, &b), &c))| *o = a.max(b).max(c));
                    hrow[0] = irow[0].max(irow[1]);
                    hrow[w - 1] = irow[w - 2].max(irow[w - 1]);
                } else {
                    inner.for_each(|(o, ((&a, &b), &c))| *o = a + b + c);
                    hrow[0] = irow[0] + irow[1];
                    hrow[w - 1] = irow[w - 2] + irow[w - 1];
                }
                continue;
            }
            for ox in 0..wo {
                let (x0, x1) = span(ox * stride, w);
                let window = &irow[x0..x1];
                rows[y * wo + ox] = if max {
                    window.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v))
                } else {
                    window.iter().sum()
                };
            }
        }
        for oy in 0..ho {
            let (y0, y1) = span(oy * stride, h);
            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
            orow.copy_from_slice(&rows[y0 * wo..(y0 + 1) * wo]);
            for y in y0 + 1..y1 {
                for (o, &v) in orow.iter_mut().zip(&rows[y * wo..(y + 1) * wo]) {
                    *o = if max { o.max(v) } else { *o + v };
                }
            }
            if !max {
                for (ox, o) in orow.iter_mut().enumerate() {
                    let (x0, x1) = span(ox * stride, w);
                    *o /= ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Two stride-2 pointwise convolutions producing `c_out / 2` channels each;
/// the first samples even pixels, the second samples odd pixels (the input
/// shifted by one row and column). Outputs are concatenated along channels.
pub fn factorized_reduce(x: &Tensor, w_even: &[f32], w_odd: &[f32], c_out: usize) -> Result<Tensor, TensorError> {
    let [n, c, h, w] = x.shape;
    if !c_out.is_multiple_of(2) || h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("factorized_reduce", alloc::format!("needs even c_out and extent, got {c_out}, {h}x{w}")));
    }
    let half = c_out / 2;
    if w_even.len() != half * c || w_odd.len() != half * c {
        return Err(shape_err("factorized_reduce", alloc::format!("weights do not match {c}->{c_out}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c_out, ho, wo]);
    // gather the two subsampled grids, then reuse the pointwise kernel
    let mut grid = vec![0.0f32; c * ho * wo];
    for b in 0..n {
        let xb = &x.data[b * c * h * w..(b + 1) * c * h * w];
        let ob = &mut out.data[b * c_out * ho * wo..(b + 1) * c_out * ho * wo];
        for (offset, weight, dst) in [(0usize, w_even, 0usize), (1, w_odd, half)] {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        grid[(ci * ho + oy) * wo + ox] = xb[(ci * h + 2 * oy + offset) * w + 2 * ox + offset];
                    }
                }
            }
            pointwise_block(&grid, weight, &mut ob[dst * ho * wo..(dst + half) * ho * wo], c, half, ho * wo);
        }
    }
    Ok(out)
}

/// Elementwise sum of equally shaped tensors.
pub fn add(inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = inputs.first().ok_or_else(|| shape_err("add", "no inputs".into()))?;
    let mut out = (*first).clone();
    for t in &inputs[1..] {
        add_assign(&mut out, t)?;
    }
    Ok(out)
}

pub fn add_assign(acc: &mut Tensor, t: &Tensor) -> Result<(), TensorError> {
    if t.shape != acc.shape {
        return Err(shape_err("add", alloc::format!("{:?} vs {:?}", acc.shape, t.shape)));
    }
    for (a, &b) in acc.data.iter_mut().zip(&t.data) {
        *a += b;
    }
    Ok(())
}

/// Channel-wise concatenation.
pub fn concat(inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = inputs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
    let [n, _, h, w] = first.shape;
    if inputs.iter().any(|t| t.shape[0] != n || t.shape[2] != h || t.shape[3] != w) {
        return Err(shape_err("concat", "inputs differ in batch or resolution".into()));
    }
    let c: usize = inputs.iter().map(|t| t.shape[1]).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for t in inputs {
            let sample = t.shape[1] * h * w;
            data.extend_from_slice(&t.data[b * sample..(b + 1) * sample]);
        }
    }
    Ok(Tensor { shape: [n, c, h, w], data })
}

/// `sum(v - shift)` in `f64` with four interleaved accumulators.
fn sum_f64(values: &[f32], shift: f64) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = values.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().map(|&v| f64::from(v) - shift).sum();
    for q in chunks {
        for j in 0..4 {
            acc[j] += f64::from(q[j]) - shift;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `sum((v - mean)^2)` in `f64` with four interleaved accumulators.
fn sum_sq_f64(values: &[f32], mean: f64) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = values.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().map(|&v| (f64::from(v) - mean) * (f64::from(v) - mean)).sum();
    for q in chunks {
        for j in 0..4 {
            let d = f64::from(q[j]) - mean;
            acc[j] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Mean over each `(h, w)` plane, giving `(n, c, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape;
    let data = x
        .data
        .chunks_exact(h * w)
        .map(|plane| (sum_f64(plane, 0.0) / (h * w) as f64) as f32)
        .collect();
    Tensor { shape: [n, c, 1, 1], data }
}

/// Batch normalization with statistics of this batch (biased variance).
pub fn batch_norm(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<Tensor, TensorError> {
    let mut y = x.clone();
    batch_norm_inplace(&mut y, gamma, beta)?;
    Ok(y)
}

pub fn batch_norm_inplace(x: &mut Tensor, gamma: &[f32], beta: &[f32]) -> Result<(), TensorError> {
    let (scale, shift) = batch_norm_affine(x, gamma, beta)?;
    apply_channel_affine(x, &scale, &shift);
    Ok(())
}

/// Per-channel `(scale, shift)` that batch normalization of `x` applies:
/// `y = x * scale + shift`. Statistics are accumulated in `f64`, mean first.
pub fn batch_norm_affine(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<(Vec<f32>, Vec<f32>), TensorError> {
    batch_norm_affine_refs(&[x], gamma, beta)
}

/// As [`batch_norm_affine`] over the concatenation of `parts` along the batch
/// axis, without materializing it.
pub fn batch_norm_affine_refs(parts: &[&Tensor], gamma: &[f32], beta: &[f32]) -> Result<(Vec<f32>, Vec<f32>), TensorError> {
    let first = parts.first().ok_or_else(|| shape_err("batch_norm", "empty batch".into()))?;
    let [_, c, h, w] = first.shape;
    if parts.iter().any(|t| t.shape[1..] != first.shape[1..]) {
        return Err(shape_err("batch_norm", "batch parts differ in shape".into()));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err("batch_norm", alloc::format!("{} affine parameters for {c} channels", gamma.len())));
    }
    let plane = h * w;
    let n: usize = parts.iter().map(|t| t.shape[0]).sum();
    let count = (n * plane) as f64;
    let planes = |ch: usize| {
        parts.iter().flat_map(move |t| (0..t.shape[0]).map(move |b| &t.data[(b * c + ch) * plane..(b * c + ch + 1) * plane]))
    };
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for ch in 0..c {
        let mean = planes(ch).map(|p| sum_f64(p, 0.0)).sum::<f64>() / count;
        let sq: f64 = planes(ch).map(|p| sum_sq_f64(p, mean)).sum();
        let inv_std = 1.0 / libm::sqrt(sq / count + BN_EPS);
        scale.push((inv_std * f64::from(gamma[ch])) as f32);
        shift.push((f64::from(beta[ch]) - mean * inv_std * f64::from(gamma[ch])) as f32);
    }
    Ok((scale, shift))
}

/// `x[:, ch] = x[:, ch] * scale[ch] + shift[ch]`.
pub fn apply_channel_affine(x: &mut Tensor, scale: &[f32], shift: &[f32]) {
    let c = x.shape[1];
    let plane = x.plane();
    for (i, chunk) in x.data.chunks_exact_mut(plane.max(1)).enumerate() {
        let (a, b) = (scale[i % c], shift[i % c]);
        for v in chunk {
            *v = *v * a + b;
        }
    }
}

/// Zero tensor with the spatial extent reduced by `stride`.
pub fn zero_like(x: &Tensor, stride: usize) -> Tensor {
    let [n, c, h, w] = x.shape;
    Tensor::zeros([n, c, h.div_ceil(stride), w.div_ceil(stride)])
}
