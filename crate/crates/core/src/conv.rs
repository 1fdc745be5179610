//! Convolution and pooling kernels over `[C, H, W]` tensors.
//!
//! conv2d is im2col + matmul; the backward pass recomputes the column matrix
//! instead of caching it (cheap next to the matmuls, halves peak memory).

use crate::error::{GlamError, Result};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride < 1 {
            return Err(GlamError::shape("conv2d: stride must be >= 1"));
        }
        if h + 2 * self.padding < self.kh || w + 2 * self.padding < self.kw {
            return Err(GlamError::shape(format!(
                "conv2d: padded input {}x{} smaller than kernel {}x{}",
                h + 2 * self.padding,
                w + 2 * self.padding,
                self.kh,
                self.kw
            )));
        }
        let oh = (h + 2 * self.padding - self.kh) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kw) / self.stride + 1;
        Ok((oh, ow))
    }
}

pub fn conv_spec(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<ConvSpec> {
    let (c_in, _, _) = input.dims3()?;
    let ks = kernel.shape();
    if ks.len() != 4 {
        return Err(GlamError::shape(format!(
            "conv2d: kernel must be [C_out, C_in, kH, kW], got {ks:?}"
        )));
    }
    if ks[1] != c_in {
        return Err(GlamError::shape(format!(
            "conv2d: input channels {} do not match kernel channels {}",
            c_in, ks[1]
        )));
    }
    Ok(ConvSpec {
        c_in,
        c_out: ks[0],
        kh: ks[2],
        kw: ks[3],
        stride,
        padding,
    })
}

/// Column matrix [C_in*kH*kW, oH*oW] with zero padding.
fn im2col(input: &[f64], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<f64> {
    let k_area = spec.kh * spec.kw;
    let cols = oh * ow;
    let mut out = vec![0.0; spec.c_in * k_area * cols];
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    for c in 0..spec.c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..spec.kh {
            for kj in 0..spec.kw {
                let row = (c * k_area + ki * spec.kw + kj) * cols;
                for oi in 0..oh {
                    let ii = oi as isize * s - p + ki as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = ii as usize * w;
                    let dst = row + oi * ow;
                    for oj in 0..ow {
                        let jj = oj as isize * s - p + kj as isize;
                        if jj >= 0 && jj < w as isize {
                            out[dst + oj] = plane[src + jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add of a column-matrix gradient back onto the input grid.
fn col2im(cols_grad: &[f64], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<f64> {
    let k_area = spec.kh * spec.kw;
    let cols = oh * ow;
    let mut out = vec![0.0; spec.c_in * h * w];
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    for c in 0..spec.c_in {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..spec.kh {
            for kj in 0..spec.kw {
                let row = (c * k_area + ki * spec.kw + kj) * cols;
                for oi in 0..oh {
                    let ii = oi as isize * s - p + ki as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = ii as usize * w;
                    let src = row + oi * ow;
                    for oj in 0..ow {
                        let jj = oj as isize * s - p + kj as isize;
                        if jj >= 0 && jj < w as isize {
                            plane[dst + jj as usize] += cols_grad[src + oj];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (_, h, w) = input.dims3()?;
    let (oh, ow) = spec.out_dims(h, w)?;
    let k_flat = spec.c_in * spec.kh * spec.kw;
    let out = if spec.kh == 1 && spec.kw == 1 && spec.stride == 1 && spec.padding == 0 {
        // 1x1: the input is already the column matrix.
        linalg::matmul(kernel.data(), input.data(), spec.c_out, k_flat, oh * ow)
    } else {
        let cols = im2col(input.data(), h, w, spec, oh, ow);
        linalg::matmul(kernel.data(), &cols, spec.c_out, k_flat, oh * ow)
    };
    Tensor::new(vec![spec.c_out, oh, ow], out)
}

/// Gradients (d_input, d_kernel) for conv2d.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = input.dims3()?;
    let (oh, ow) = spec.out_dims(h, w)?;
    let k_flat = spec.c_in * spec.kh * spec.kw;
    let n = oh * ow;

    if spec.kh == 1 && spec.kw == 1 && spec.stride == 1 && spec.padding == 0 {
        let d_kernel = linalg::matmul_bt(grad_out.data(), input.data(), spec.c_out, n, k_flat);
        let d_input = linalg::matmul_at(kernel.data(), grad_out.data(), spec.c_out, k_flat, n);
        return Ok((
            Tensor::new(input.shape().to_vec(), d_input)?,
            Tensor::new(kernel.shape().to_vec(), d_kernel)?,
        ));
    }

    let cols = im2col(input.data(), h, w, spec, oh, ow);
    let d_kernel = linalg::matmul_bt(grad_out.data(), &cols, spec.c_out, n, k_flat);
    drop(cols);
    let d_cols = linalg::matmul_at(kernel.data(), grad_out.data(), spec.c_out, k_flat, n);
    let d_input = col2im(&d_cols, h, w, spec, oh, ow);
    Ok((
        Tensor::new(input.shape().to_vec(), d_input)?,
        Tensor::new(kernel.shape().to_vec(), d_kernel)?,
    ))
}

/// Windowed max pool; returns output and per-output argmax (flat input index).
/// Ties take the first maximum in row-major window order. Padded cells are
/// treated as -inf and never win (every window contains a real cell).
pub fn max_pool2d_forward(
    input: &Tensor,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    if k < 1 || stride < 1 {
        return Err(GlamError::shape("max_pool2d: k and stride must be >= 1"));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(GlamError::shape("max_pool2d: window larger than padded input"));
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    let data = input.data();
    for ci in 0..c {
        let plane = &data[ci * h * w..(ci + 1) * h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..k {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let idx = ii as usize * w + jj as usize;
                        let v = plane[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                debug_assert!(best_idx != usize::MAX);
                let o = oi * ow + oj;
                out[ci * oh * ow + o] = best;
                argmax[ci * oh * ow + o] = ci * h * w + best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = t3(1, 3, 3, (1..=9).map(|v| v as f64).collect());
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = conv_spec(&x, &k, 1, 0).unwrap();
        let y = conv2d_forward(&x, &k, &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let x = t3(1, 3, 3, vec![1.0; 9]);
        let k = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let spec = conv_spec(&x, &k, 1, 0).unwrap();
        let y = conv2d_forward(&x, &k, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn stride_two_shape() {
        let x = t3(1, 4, 4, vec![0.5; 16]);
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let spec = conv_spec(&x, &k, 2, 0).unwrap();
        let y = conv2d_forward(&x, &k, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = t3(2, 3, 3, vec![0.0; 18]);
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        assert!(conv_spec(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn linearity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rnd = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let x = t3(2, 5, 5, rnd(50));
        let y = t3(2, 5, 5, rnd(50));
        let k = Tensor::new(vec![3, 2, 3, 3], rnd(54)).unwrap();
        let spec = conv_spec(&x, &k, 1, 1).unwrap();
        let (a, b) = (1.7, -0.3);
        let mixed = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(y.data())
                .map(|(xv, yv)| a * xv + b * yv)
                .collect(),
        )
        .unwrap();
        let lhs = conv2d_forward(&mixed, &k, &spec).unwrap();
        let cx = conv2d_forward(&x, &k, &spec).unwrap();
        let cy = conv2d_forward(&y, &k, &spec).unwrap();
        for i in 0..lhs.numel() {
            let want = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn max_pool_tie_takes_first_row_major() {
        let x = t3(1, 2, 2, vec![1.0, 4.0, 4.0, 2.0]);
        let (y, arg) = max_pool2d_forward(&x, 2, 2, 0).unwrap();
        assert_eq!(y.item(), 4.0);
        assert_eq!(arg, vec![1]); // position (0,1) beats (1,0)
    }
}
