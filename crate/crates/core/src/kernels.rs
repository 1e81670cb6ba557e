//! Forward and backward kernels for the layer types the networks use.
//!
//! Convolutions are "same" convolutions (stride 1, symmetric zero padding of
//! `dilation * (k - 1) / 2`), lowered to GEMM over row-chunked im2col buffers.
//! Work is split per batch item; partial weight gradients are reduced in item
//! order so parallel and sequential runs agree bit for bit.

use crate::exec;
use crate::tensor::Tensor;

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 20;

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched by the kernel is bounded by the asserts above,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

fn rows_per_chunk(kk: usize, c_in: usize, h: usize, w: usize) -> usize {
    (COL_BUDGET / (kk * c_in * w).max(1)).clamp(1, h)
}

/// Fill `col` (`[c_in*k*k, rows*w]`) with the receptive fields of output rows `y0..y0+rows`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    y0: usize,
    rows: usize,
    col: &mut [f64],
) {
    let pad = same_padding(k, dilation) as isize;
    let len = rows * w;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let row = ((c * k + i) * k + j) * len;
                let dst = &mut col[row..row + len];
                let dy = (i * dilation) as isize - pad;
                let dx = (j * dilation) as isize - pad;
                for r in 0..rows {
                    let sy = (y0 + r) as isize + dy;
                    let out = &mut dst[r * w..(r + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // valid x range: 0 <= x + dx < w
                    let lo = (-dx).clamp(0, w as isize) as usize;
                    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
                    out[..lo].fill(0.0);
                    if hi > lo {
                        let s0 = (lo as isize + dx) as usize;
                        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                    out[hi.max(lo)..].fill(0.0);
                }
            }
        }
    }
}

/// Same-padded dilated 2-D convolution. `weight` is `[c_out, c_in, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, dilation: usize) -> Tensor {
    let (n, c_in, h, w) = x.dims4();
    let (c_out, wc_in, k, k2) = weight.dims4();
    assert_eq!(c_in, wc_in, "conv2d: input has {c_in} channels, weight expects {wc_in}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    assert!(k % 2 == 1, "conv2d: odd kernels only");
    let plane = h * w;
    let kdim = c_in * k * k;
    let mut out = Tensor::zeros(&[n, c_out, h, w]);
    let xd = x.data();
    let wd = weight.data();
    exec::for_each_chunk_mut(out.data_mut(), c_out * plane, |b, y| {
        let xs = &xd[b * c_in * plane..(b + 1) * c_in * plane];
        if k == 1 {
            gemm(c_out, c_in, plane, wd, c_in, 1, xs, plane, 1, 0.0, y, plane, 1);
        } else {
            let rows = rows_per_chunk(k * k, c_in, h, w);
            let mut col = vec![0.0; kdim * rows * w];
            let mut y0 = 0;
            while y0 < h {
                let r = rows.min(h - y0);
                let len = r * w;
                im2col(xs, c_in, h, w, k, dilation, y0, r, &mut col[..kdim * len]);
                gemm(c_out, kdim, len, wd, kdim, 1, &col, len, 1, 0.0, &mut y[y0 * w..], plane, 1);
                y0 += r;
            }
        }
        if let Some(bias) = bias {
            for (o, &bo) in bias.data().iter().enumerate() {
                y[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bo);
            }
        }
    });
    out
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(dy: &Tensor, weight: &Tensor, dilation: usize) -> Tensor {
    let (c_out, c_in, k, _) = weight.dims4();
    // flip spatially and swap in/out channels
    let wd = weight.data();
    let mut flipped = Tensor::zeros(&[c_in, c_out, k, k]);
    let fd = flipped.data_mut();
    for o in 0..c_out {
        for c in 0..c_in {
            for i in 0..k {
                for j in 0..k {
                    fd[((c * c_out + o) * k + (k - 1 - i)) * k + (k - 1 - j)] =
                        wd[((o * c_in + c) * k + i) * k + j];
                }
            }
        }
    }
    conv2d(dy, &flipped, None, dilation)
}

/// Gradients of [`conv2d`] with respect to weight and bias.
pub fn conv2d_param_grads(
    x: &Tensor,
    dy: &Tensor,
    k: usize,
    dilation: usize,
) -> (Tensor, Tensor) {
    let (n, c_in, h, w) = x.dims4();
    let (_, c_out, _, _) = dy.dims4();
    let plane = h * w;
    let kdim = c_in * k * k;
    let xd = x.data();
    let dyd = dy.data();
    let partials = exec::map_range(n, |b| {
        let xs = &xd[b * c_in * plane..(b + 1) * c_in * plane];
        let gs = &dyd[b * c_out * plane..(b + 1) * c_out * plane];
        let mut dw = vec![0.0; c_out * kdim];
        if k == 1 {
            // dW[o, c] = sum_p dy[o, p] x[c, p]
            gemm(c_out, plane, c_in, gs, plane, 1, xs, 1, plane, 0.0, &mut dw, kdim, 1);
        } else {
            let rows = rows_per_chunk(k * k, c_in, h, w);
            let mut col = vec![0.0; kdim * rows * w];
            let mut y0 = 0;
            while y0 < h {
                let r = rows.min(h - y0);
                let len = r * w;
                im2col(xs, c_in, h, w, k, dilation, y0, r, &mut col[..kdim * len]);
                gemm(c_out, len, kdim, &gs[y0 * w..], plane, 1, &col, 1, len, 1.0, &mut dw, kdim, 1);
                y0 += r;
            }
        }
        let db: Vec<f64> =
            (0..c_out).map(|o| gs[o * plane..(o + 1) * plane].iter().sum()).collect();
        (dw, db)
    });
    let mut dw = vec![0.0; c_out * kdim];
    let mut db = vec![0.0; c_out];
    for (pw, pb) in partials {
        dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    (
        Tensor::from_vec(&[c_out, c_in, k, k], dw).expect("shape"),
        Tensor::from_vec(&[c_out], db).expect("shape"),
    )
}

/// Stride-2 transposed convolution with a 2x2 kernel. `weight` is `[c_in, c_out, 2, 2]`.
pub fn conv_transpose2x2(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (n, c_in, h, w) = x.dims4();
    let (wc_in, c_out, _, _) = weight.dims4();
    assert_eq!(c_in, wc_in, "conv_transpose: input has {c_in} channels, weight expects {wc_in}");
    let plane = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let m = c_out * 4;
    let xd = x.data();
    let wd = weight.data();
    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
    exec::for_each_chunk_mut(out.data_mut(), c_out * oh * ow, |b, y| {
        let xs = &xd[b * c_in * plane..(b + 1) * c_in * plane];
        let mut t = vec![0.0; m * plane];
        // t[(o,a,b), p] = sum_c w[c, (o,a,b)] x[c, p]
        gemm(m, c_in, plane, wd, 1, m, xs, plane, 1, 0.0, &mut t, plane, 1);
        for o in 0..c_out {
            let bo = bias.map_or(0.0, |bs| bs.data()[o]);
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &t[(o * 4 + a * 2 + bb) * plane..][..plane];
                    for i in 0..h {
                        let row = &mut y[(o * oh + 2 * i + a) * ow..][..ow];
                        for j in 0..w {
                            row[2 * j + bb] = src[i * w + j] + bo;
                        }
                    }
                }
            }
        }
    });
    out
}

fn gather_transpose_grad(dy: &[f64], c_out: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let ow = 2 * w;
    let mut t = vec![0.0; c_out * 4 * plane];
    for o in 0..c_out {
        for a in 0..2 {
            for bb in 0..2 {
                let dst = &mut t[(o * 4 + a * 2 + bb) * plane..][..plane];
                for i in 0..h {
                    let row = &dy[(o * 2 * h + 2 * i + a) * ow..][..ow];
                    for j in 0..w {
                        dst[i * w + j] = row[2 * j + bb];
                    }
                }
            }
        }
    }
    t
}

/// Gradients of [`conv_transpose2x2`]: `(dx, dweight, dbias)`.
pub fn conv_transpose2x2_grads(x: &Tensor, weight: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, c_in, h, w) = x.dims4();
    let (_, c_out, _, _) = weight.dims4();
    let plane = h * w;
    let m = c_out * 4;
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    let per_item = exec::map_range(n, |b| {
        let xs = &xd[b * c_in * plane..(b + 1) * c_in * plane];
        let t = gather_transpose_grad(&dyd[b * c_out * 4 * plane..(b + 1) * c_out * 4 * plane], c_out, h, w);
        let mut dx = vec![0.0; c_in * plane];
        gemm(c_in, m, plane, wd, m, 1, &t, plane, 1, 0.0, &mut dx, plane, 1);
        let mut dw = vec![0.0; c_in * m];
        gemm(c_in, plane, m, xs, plane, 1, &t, 1, plane, 0.0, &mut dw, m, 1);
        let db: Vec<f64> = (0..c_out).map(|o| t[o * 4 * plane..(o + 1) * 4 * plane].iter().sum()).collect();
        (dx, dw, db)
    });
    let mut dx = Vec::with_capacity(n * c_in * plane);
    let mut dw = vec![0.0; c_in * m];
    let mut db = vec![0.0; c_out];
    for (px, pw, pb) in per_item {
        dx.extend_from_slice(&px);
        dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    (
        Tensor::from_vec(&[n, c_in, h, w], dx).expect("shape"),
        Tensor::from_vec(&[c_in, c_out, 2, 2], dw).expect("shape"),
        Tensor::from_vec(&[c_out], db).expect("shape"),
    )
}

/// 2x2 average pooling, stride 2, ceil mode; partial windows average their valid cells.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    exec::for_each_chunk_mut(out.data_mut(), oh * ow, |p, y| {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let rows = if 2 * i + 1 < h { 2 } else { 1 };
            for j in 0..ow {
                let cols = if 2 * j + 1 < w { 2 } else { 1 };
                let mut s = 0.0;
                for a in 0..rows {
                    for b in 0..cols {
                        s += src[(2 * i + a) * w + 2 * j + b];
                    }
                }
                y[i * ow + j] = s / (rows * cols) as f64;
            }
        }
    });
    out
}

pub fn avg_pool2_grad(dy: &Tensor, input_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, oh, ow) = dy.dims4();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dyd = dy.data();
    exec::for_each_chunk_mut(dx.data_mut(), h * w, |p, g| {
        let src = &dyd[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let rows = if 2 * i + 1 < h { 2 } else { 1 };
            for j in 0..ow {
                let cols = if 2 * j + 1 < w { 2 } else { 1 };
                let v = src[i * ow + j] / (rows * cols) as f64;
                for a in 0..rows {
                    for b in 0..cols {
                        g[(2 * i + a) * w + 2 * j + b] = v;
                    }
                }
            }
        }
    });
    dx
}

/// Per-channel mean and biased variance over (N, H, W).
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = (n * plane) as f64;
    let xd = x.data();
    let stats = exec::map_range(c, |ch| {
        let mut s = 0.0;
        for b in 0..n {
            s += xd[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        let mean = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += xd[(b * c + ch) * plane..][..plane].iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
        }
        (mean, v / count)
    });
    stats.into_iter().unzip()
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel.
pub fn channel_affine(x: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> Tensor {
    let (_, c, h, w) = x.dims4();
    let plane = h * w;
    let mut y = x.clone();
    exec::for_each_chunk_mut(y.data_mut(), plane, |p, v| {
        let ch = p % c;
        let s = gamma[ch] * inv_std[ch];
        let t = beta[ch] - mean[ch] * s;
        v.iter_mut().for_each(|x| *x = *x * s + t);
    });
    y
}

/// Batch-statistics normalization backward: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_grads(
    x: &Tensor,
    dy: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let m = (n * plane) as f64;
    let xd = x.data();
    let gd = dy.data();
    let sums: Vec<(f64, f64)> = exec::map_range(c, |ch| {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for p in 0..plane {
                let g = gd[off + p];
                sg += g;
                sgx += g * (xd[off + p] - mean[ch]) * inv_std[ch];
            }
        }
        (sg, sgx)
    });
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    exec::for_each_chunk_mut(dx.data_mut(), plane, |p, out| {
        let ch = p % c;
        let (sg, sgx) = sums[ch];
        let k = gamma[ch] * inv_std[ch] / m;
        let off = p * plane;
        for q in 0..plane {
            let xhat = (xd[off + q] - mean[ch]) * inv_std[ch];
            out[q] = k * (m * gd[off + q] - sg - xhat * sgx);
        }
    });
    let dbeta = sums.iter().map(|s| s.0).collect();
    let dgamma = sums.iter().map(|s| s.1).collect();
    (dx, dgamma, dbeta)
}

/// Fixed-statistics normalization backward: `(dx, dgamma, dbeta)`.
pub fn batch_norm_eval_grads(
    x: &Tensor,
    dy: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let zeros = vec![0.0; c];
    let scale: Vec<f64> = (0..c).map(|ch| gamma[ch] * inv_std[ch]).collect();
    let dx = channel_affine(dy, &zeros, &vec![1.0; c], &scale, &zeros);
    let xd = x.data();
    let gd = dy.data();
    let sums: Vec<(f64, f64)> = exec::map_range(c, |ch| {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for p in 0..plane {
                sg += gd[off + p];
                sgx += gd[off + p] * (xd[off + p] - mean[ch]) * inv_std[ch];
            }
        }
        (sg, sgx)
    });
    (dx, sums.iter().map(|s| s.1).collect(), sums.iter().map(|s| s.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, d: usize) -> Tensor {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let pad = (d * (k - 1) / 2) as isize;
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        for bi in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = b.data()[o];
                        for c in 0..ci {
                            for i in 0..k {
                                for j in 0..k {
                                    let sy = y as isize - pad + (i * d) as isize;
                                    let sx = xx as isize - pad + (j * d) as isize;
                                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                        s += w.data()[((o * ci + c) * k + i) * k + j]
                                            * x.data()[((bi * ci + c) * h + sy as usize) * wd + sx as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * co + o) * h + y) * wd + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, d) in &[(1, 1), (3, 1), (3, 4), (5, 2), (7, 3)] {
            let x = random(&[2, 3, 9, 7], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let fast = conv2d(&x, &w, Some(&b), d);
            let slow = naive_conv(&x, &w, &b, d);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} d={d}");
        }
    }

    #[test]
    fn conv_grads_are_adjoint() {
        // <conv(x), g> == <x, conv_input_grad(g)> and == <w, dW(x, g)> + <b, db>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, d) in &[(1, 1), (3, 2), (5, 1)] {
            let x = random(&[2, 3, 6, 8], &mut rng);
            let w = random(&[2, 3, k, k], &mut rng);
            let b = random(&[2], &mut rng);
            let g = random(&[2, 2, 6, 8], &mut rng);
            let y = conv2d(&x, &w, None, d);
            let dx = conv2d_input_grad(&g, &w, d);
            assert!((y.dot(&g) - x.dot(&dx)).abs() < 1e-10);
            let (dw, db) = conv2d_param_grads(&x, &g, k, d);
            let yb = conv2d(&x, &w, Some(&b), d);
            let lhs = yb.dot(&g);
            let rhs = w.dot(&dw) + b.dot(&db);
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_transpose_doubles_and_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let w = random(&[3, 2, 2, 2], &mut rng);
        let y = conv_transpose2x2(&x, &w, None);
        assert_eq!(y.shape(), &[2, 2, 8, 10]);
        let g = random(&[2, 2, 8, 10], &mut rng);
        let (dx, dw, _) = conv_transpose2x2_grads(&x, &w, &g);
        assert!((y.dot(&g) - x.dot(&dx)).abs() < 1e-10);
        assert!((y.dot(&g) - w.dot(&dw)).abs() < 1e-10);
    }

    #[test]
    fn avg_pool_ceil_mode() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = avg_pool2(&x);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[3.0, 4.5, 7.5, 9.0]);
        let g = Tensor::full(&[1, 1, 2, 2], 1.0);
        let dx = avg_pool2_grad(&g, x.shape());
        assert!((x.dot(&dx) - y.dot(&g)).abs() < 1e-12);
    }
}
