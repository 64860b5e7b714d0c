//! Arithmetic kernels for the supported layer types, forward and backward.
//!
//! Convolution is lowered to a matrix product through an im2col buffer; the
//! result is the same cross-correlation the direct six-deep loop computes.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate operations issued by this thread since the last reset.
pub fn mac_counter() -> u64 {
    MACS.with(|c| c.get())
}

pub fn reset_mac_counter() {
    MACS.with(|c| c.set(0));
}

/// `C = alpha * A·B + beta * C` on row-major slices, with optional transposes
/// expressed through strides. `A` is `m×k`, `B` is `k×n`, `C` is `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    MACS.with(|cnt| cnt.set(cnt.get() + (m * k * n) as u64));
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths checked above bound every index the strides
    // can produce.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis. The window must tile the
/// padded input exactly.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Shape("kernel and stride must be positive".into()));
    }
    let padded = input + 2 * pad;
    if kernel > padded || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "kernel {kernel} with stride {stride} and pad {pad} does not tile extent {input}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of max pooling (floor mode, no padding).
pub fn pool_output_extent(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 || kernel > input {
        return Err(Error::Shape(format!(
            "pool window {kernel} (stride {stride}) does not fit extent {input}"
        )));
    }
    Ok((input - kernel) / stride + 1)
}

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Rearranges one `[C, H, W]` sample into a `[C·K·K, R·C']` matrix.
fn im2col(src: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let positions = g.positions();
    let mut row = 0;
    for ch in 0..g.channels {
        let plane = &src[ch * g.height * g.width..(ch + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for r in 0..g.out_h {
                    let y = (r * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[r * g.out_w..(r + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let line = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (c, v) in out_row.iter_mut().enumerate() {
                        let x = (c * g.stride + kj) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            line[x as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back onto a `[C, H, W]` gradient buffer.
fn col2im(cols: &[f32], g: &ConvGeometry, dst: &mut [f32]) {
    let positions = g.positions();
    let mut row = 0;
    for ch in 0..g.channels {
        let plane = &mut dst[ch * g.height * g.width..(ch + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let src = &cols[row * positions..(row + 1) * positions];
                for r in 0..g.out_h {
                    let y = (r * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for c in 0..g.out_w {
                        let x = (c * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            line[x as usize] += src[r * g.out_w + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv_geometry(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeometry)> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, kin, kh, kw) = kernels.dims4()?;
    if kin != cin || kh != kw {
        return Err(Error::Shape(format!(
            "kernels {:?} incompatible with input {:?}",
            kernels.shape(),
            input.shape()
        )));
    }
    let g = ConvGeometry {
        channels: cin,
        height: h,
        width: w,
        kernel: kh,
        stride,
        pad,
        out_h: conv_output_extent(h, kh, stride, pad)?,
        out_w: conv_output_extent(w, kw, stride, pad)?,
    };
    Ok((n, cout, g))
}

/// 2-d cross-correlation with zero padding.
///
/// `out[n,m,r,c] = bias[m] + Σ input[n,i,r·s−p+ki,c·s−p+kj] · kernels[m,i,ki,kj]`
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, cout, g) = conv_geometry(input, kernels, stride, pad)?;
    if bias.len() != cout {
        return Err(Error::Shape(format!(
            "bias has {} entries for {cout} output channels",
            bias.len()
        )));
    }
    let in_per = g.channels * g.height * g.width;
    let out_per = cout * g.positions();
    let mut out = vec![0.0f32; n * out_per];
    let mut cols = vec![0.0f32; g.patch() * g.positions()];
    for s in 0..n {
        im2col(&input.data()[s * in_per..(s + 1) * in_per], &g, &mut cols);
        let dst = &mut out[s * out_per..(s + 1) * out_per];
        for (m, plane) in dst.chunks_exact_mut(g.positions()).enumerate() {
            plane.fill(bias.data()[m]);
        }
        gemm(
            cout,
            g.patch(),
            g.positions(),
            kernels.data(),
            false,
            &cols,
            false,
            dst,
            1.0,
        );
    }
    Tensor::new(vec![n, cout, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] given the upstream gradient `dout`.
/// Returns `(d_input, d_kernels, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    dout: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, cout, g) = conv_geometry(input, kernels, stride, pad)?;
    if dout.shape() != [n, cout, g.out_h, g.out_w] {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match convolution output",
            dout.shape()
        )));
    }
    let in_per = g.channels * g.height * g.width;
    let out_per = cout * g.positions();
    let mut d_input = vec![0.0f32; input.len()];
    let mut d_kernels = vec![0.0f32; kernels.len()];
    let mut d_bias = vec![0.0f32; cout];
    let mut cols = vec![0.0f32; g.patch() * g.positions()];
    let mut d_cols = vec![0.0f32; g.patch() * g.positions()];
    for s in 0..n {
        let dy = &dout.data()[s * out_per..(s + 1) * out_per];
        for (m, plane) in dy.chunks_exact(g.positions()).enumerate() {
            d_bias[m] += plane.iter().sum::<f32>();
        }
        im2col(&input.data()[s * in_per..(s + 1) * in_per], &g, &mut cols);
        // dW += dY · colsᵀ
        gemm(
            cout,
            g.positions(),
            g.patch(),
            dy,
            false,
            &cols,
            true,
            &mut d_kernels,
            1.0,
        );
        // dcols = Wᵀ · dY
        gemm(
            g.patch(),
            cout,
            g.positions(),
            kernels.data(),
            true,
            dy,
            false,
            &mut d_cols,
            0.0,
        );
        col2im(&d_cols, &g, &mut d_input[s * in_per..(s + 1) * in_per]);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), d_input)?,
        Tensor::new(kernels.shape().to_vec(), d_kernels)?,
        Tensor::new(vec![cout], d_bias)?,
    ))
}

/// Flattens `[N, ...]` into `[N, D]`.
pub fn flatten(input: &Tensor) -> Result<Tensor> {
    let n = input.batch();
    let d = input.len() / n;
    input.clone().reshape(&[n, d])
}

/// `out[n,m] = bias[m] + Σ_d weights[m,d] · input[n,d]`. Inputs with more
/// than two dimensions are flattened per sample.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.batch();
    let d = input.len() / n;
    let (m, wd) = weights.dims2()?;
    if wd != d || bias.len() != m {
        return Err(Error::Shape(format!(
            "fully connected: input {:?}, weights {:?}, bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(n, d, m, input.data(), false, weights.data(), true, &mut out, 1.0);
    Tensor::new(vec![n, m], out)
}

/// Gradients of [`fully_connected`]: `(d_input, d_weights, d_bias)`.
/// `d_input` takes the original input's shape.
pub fn fully_connected_backward(
    input: &Tensor,
    weights: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = input.batch();
    let d = input.len() / n;
    let (m, wd) = weights.dims2()?;
    if wd != d || dout.shape() != [n, m] {
        return Err(Error::Shape(format!(
            "fully connected backward: input {:?}, weights {:?}, dout {:?}",
            input.shape(),
            weights.shape(),
            dout.shape()
        )));
    }
    let mut d_input = vec![0.0f32; n * d];
    gemm(n, m, d, dout.data(), false, weights.data(), false, &mut d_input, 0.0);
    let mut d_weights = vec![0.0f32; m * d];
    gemm(m, n, d, dout.data(), true, input.data(), false, &mut d_weights, 0.0);
    let mut d_bias = vec![0.0f32; m];
    for row in dout.data().chunks_exact(m) {
        d_bias.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), d_input)?,
        Tensor::new(vec![m, d], d_weights)?,
        Tensor::new(vec![m], d_bias)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the gradient where the forward input was positive.
pub fn relu_backward(input: &Tensor, dout: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

/// Max pooling over `k×k` windows; also returns the flat input index that
/// won each window (first maximum in scan order).
pub fn max_pool_with_indices(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let oh = pool_output_extent(h, k, stride)?;
    let ow = pool_output_extent(w, k, stride)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    let src = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base + r * stride * w + col * stride;
                for ki in 0..k {
                    let row = base + (r * stride + ki) * w + col * stride;
                    for kj in 0..k {
                        let v = src[row + kj];
                        if v > best {
                            best = v;
                            best_i = row + kj;
                        }
                    }
                }
                out.push(src[best_i]);
                idx.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, idx))
}

pub fn max_pool(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    max_pool_with_indices(input, k, stride).map(|(t, _)| t)
}

/// Routes each output gradient to the input element that won its window.
pub fn max_pool_backward(input_shape: &[usize], indices: &[usize], dout: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(input_shape);
    let dst = d.data_mut();
    for (&i, &g) in indices.iter().zip(dout.data()) {
        dst[i] += g;
    }
    d
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / N` with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; n * k];
    for (s, (row, &label)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_sum = sum.ln();
        loss += -(row[label] as f64 - max - log_sum);
        let g = &mut grad[s * k..(s + 1) * k];
        for (j, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v as f64 - max - log_sum).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            *gv = ((p - target) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Index of the largest logit of every sample.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct loop reference for conv2d.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (m, _, k, _) = w.dims4().unwrap();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[n, m, oh, ow]);
        for ni in 0..n {
            for mi in 0..m {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = b.data()[mi] as f64;
                        for i in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let y = (r * s + ki) as isize - p as isize;
                                    let xx = (c * s + kj) as isize - p as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((ni * cin + i) * h + y as usize) * wd + xx as usize];
                                    let wv = w.data()[((mi * cin + i) * k + ki) * k + kj];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out.data_mut()[((ni * m + mi) * oh + r) * ow + c] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor, b: &Tensor, rel: f32) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let tol = rel * x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_zero_input_gives_bias_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::zeros(&[2, 3, 6, 6]);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let out = conv2d(&x, &w, &b, 1, 1).unwrap();
        for (i, plane) in out.data().chunks_exact(36).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[i % 4]));
        }
    }

    #[test]
    fn conv_impulse_reads_kernel_in_loop_order() {
        let mut x = Tensor::zeros(&[1, 1, 3, 3]);
        x.data_mut()[4] = 1.0;
        let w = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let out = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        // out[r,c] = w[1-r+1, 1-c+1]: the impulse sees the kernel mirrored
        // about its center, exactly as the reference loop reads it.
        let expected = conv_naive(&x, &w, &Tensor::zeros(&[1]), 1, 1);
        assert_eq!(out, expected);
        assert_eq!(out.data(), &[9., 8., 7., 6., 5., 4., 3., 2., 1.]);
    }

    #[test]
    fn conv_matches_naive_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        assert_close(&conv2d(&x, &w, &b, 2, 0).unwrap(), &conv_naive(&x, &w, &b, 2, 0), 1e-6);
    }

    #[test]
    fn conv_matches_naive_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cases = 0;
        while cases < 100 {
            let k = rng.gen_range(1..=4);
            let s = rng.gen_range(1..=2);
            let p = rng.gen_range(0..=2);
            let h = rng.gen_range(k.max(1)..=9);
            if (h + 2 * p - k) % s != 0 {
                continue;
            }
            let n = rng.gen_range(1..=3);
            let cin = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=4);
            let x = random(&[n, cin, h, h], &mut rng);
            let w = random(&[m, cin, k, k], &mut rng);
            let b = random(&[m], &mut rng);
            assert_close(&conv2d(&x, &w, &b, s, p).unwrap(), &conv_naive(&x, &w, &b, s, p), 1e-6);
            cases += 1;
        }
    }

    #[test]
    fn conv_mac_count_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 8, 12, 12], &mut rng);
        let w = random(&[16, 8, 5, 5], &mut rng);
        reset_mac_counter();
        conv2d(&x, &w, &Tensor::zeros(&[16]), 1, 0).unwrap();
        assert_eq!(mac_counter(), 8 * 8 * 16 * 8 * 25);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1]), 3, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2]), 1, 0).is_err());
    }

    #[test]
    fn fc_examples() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(fully_connected(&x, &w, &b).unwrap().data(), &[3.0, 0.0]);

        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0.25, -4.]).unwrap();
        assert_eq!(fully_connected(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
    }

    #[test]
    fn fc_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (n, d, m) = (rng.gen_range(1..6), rng.gen_range(1..12), rng.gen_range(1..9));
            let x = random(&[n, d], &mut rng);
            let w = random(&[m, d], &mut rng);
            let b = random(&[m], &mut rng);
            let expected = Tensor::from_fn(&[n, m], |i| {
                let (ni, mi) = (i / m, i % m);
                let s: f64 = (0..d)
                    .map(|j| x.data()[ni * d + j] as f64 * w.data()[mi * d + j] as f64)
                    .sum();
                (s + b.data()[mi] as f64) as f32
            });
            assert_close(&fully_connected(&x, &w, &b).unwrap(), &expected, 1e-6);
        }
        let x = random(&[4, 10], &mut rng);
        assert!(fully_connected(&x, &random(&[7, 9], &mut rng), &Tensor::zeros(&[7])).is_err());
    }

    #[test]
    fn relu_examples() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random(&[50], &mut rng);
        assert_eq!(relu(&relu(&r)), relu(&r));
        let pos = r.map(f32::abs);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn max_pool_examples() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(max_pool(&t, 2, 2).unwrap().data(), &[4.0]);
        let c = Tensor::full(&[1, 2, 4, 4], 3.5);
        assert!(max_pool(&c, 2, 2).unwrap().data().iter().all(|&v| v == 3.5));
        assert!(max_pool(&t, 3, 1).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[1, 1, 6, 6], &mut rng);
        let out = max_pool(&x, 2, 2).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let mut m = f32::NEG_INFINITY;
                for i in 0..2 {
                    for j in 0..2 {
                        m = m.max(x.data()[(2 * r + i) * 6 + 2 * c + j]);
                    }
                }
                assert_eq!(out.data()[r * 3 + c], m);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_limit() {
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros(&[2, 7]), &[0, 3]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        let mut t = Tensor::zeros(&[1, 4]);
        t.data_mut()[2] = 60.0;
        let (loss, _) = softmax_cross_entropy(&t, &[2]).unwrap();
        assert!(loss < 1e-20);
        assert!(matches!(
            softmax_cross_entropy(&t, &[4]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = random(&[3, 5], &mut rng);
        let labels = [1, 4, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-3f32;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let fd = (softmax_cross_entropy(&plus, &labels).unwrap().0
                - softmax_cross_entropy(&minus, &labels).unwrap().0)
                / (2.0 * h as f64);
            let g = grad.data()[i] as f64;
            assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-2), "{fd} vs {g}");
        }
    }
}
