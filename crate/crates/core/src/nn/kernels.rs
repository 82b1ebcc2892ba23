//! Low-level numeric kernels shared by the executor.

use super::graph::Activation;

/// Row-major `c[m×n] = a[m×k] · b[k×n] + beta · c`, where `a` and `b` are
/// addressed through explicit (row, column) strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!((m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    assert!((k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pt: usize,
    pub pl: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.pt == 0 && self.pl == 0
    }
}

pub fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                let dst = &mut col[row..row + p];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + i) as isize - g.pt as isize;
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * g.sw + j) as isize - g.pl as isize;
                        *o = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

pub fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                let src = &col[row..row + p];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + i) as isize - g.pt as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.sw + j) as isize - g.pl as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel convolution of one sample.
pub fn depthwise_forward(x: &[f32], w: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let (kh, kw) = (g.kh, g.kw);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let kern = &w[c * kh * kw..(c + 1) * kh * kw];
        let dst = &mut out[c * g.p()..(c + 1) * g.p()];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut acc = 0.0f32;
                for i in 0..kh {
                    let ih = (oh * g.sh + i) as isize - g.pt as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for j in 0..kw {
                        let iw = (ow * g.sw + j) as isize - g.pl as isize;
                        if iw >= 0 && iw < g.w as isize {
                            acc += row[iw as usize] * kern[i * kw + j];
                        }
                    }
                }
                dst[oh * g.wo + ow] = acc;
            }
        }
    }
}

/// Accumulates kernel and (optionally) input gradients for one sample.
pub fn depthwise_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    dw: Option<&mut [f32]>,
    dx: Option<&mut [f32]>,
) {
    let (kh, kw) = (g.kh, g.kw);
    let mut dw = dw;
    let mut dx = dx;
    for c in 0..g.c {
        let base = c * g.h * g.w;
        let kbase = c * kh * kw;
        let grad = &dy[c * g.p()..(c + 1) * g.p()];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let d = grad[oh * g.wo + ow];
                if d == 0.0 {
                    continue;
                }
                for i in 0..kh {
                    let ih = (oh * g.sh + i) as isize - g.pt as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let iw = (ow * g.sw + j) as isize - g.pl as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * g.w + iw as usize;
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[kbase + i * kw + j] += d * x[idx];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[idx] += d * w[kbase + i * kw + j];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn hard_sigmoid(x: f32) -> f32 {
    (x + 3.0).clamp(0.0, 6.0) / 6.0
}

/// Applies an elementwise activation in place. Softmax runs over channels of
/// each sample (`chan` channels of `plane` positions).
pub fn activate(a: Activation, data: &mut [f32], chan: usize, plane: usize) {
    match a {
        Activation::Linear => {}
        Activation::Relu => data.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Relu6 => data.iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0)),
        Activation::Sigmoid => data.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Swish => data.iter_mut().for_each(|v| *v *= sigmoid(*v)),
        Activation::HardSigmoid => data.iter_mut().for_each(|v| *v = hard_sigmoid(*v)),
        Activation::HardSwish => data.iter_mut().for_each(|v| *v *= hard_sigmoid(*v)),
        Activation::Tanh => data.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Softmax => {
            let sample = chan * plane;
            for s in data.chunks_mut(sample) {
                for p in 0..plane {
                    let max = (0..chan).map(|c| s[c * plane + p]).fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0;
                    for c in 0..chan {
                        let e = (s[c * plane + p] - max).exp();
                        s[c * plane + p] = e;
                        sum += e;
                    }
                    for c in 0..chan {
                        s[c * plane + p] /= sum;
                    }
                }
            }
        }
    }
}

/// Turns `grad` (w.r.t. the activation output) into the gradient w.r.t. its
/// input, given the pre-activation `x` and post-activation `y`.
pub fn activate_backward(a: Activation, x: &[f32], y: &[f32], grad: &mut [f32], chan: usize, plane: usize) {
    match a {
        Activation::Linear => {}
        Activation::Relu => {
            for (g, &v) in grad.iter_mut().zip(x) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Relu6 => {
            for (g, &v) in grad.iter_mut().zip(x) {
                if v <= 0.0 || v >= 6.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &s) in grad.iter_mut().zip(y) {
                *g *= s * (1.0 - s);
            }
        }
        Activation::Swish => {
            for (g, &v) in grad.iter_mut().zip(x) {
                let s = sigmoid(v);
                *g *= s + v * s * (1.0 - s);
            }
        }
        Activation::HardSigmoid => {
            for (g, &v) in grad.iter_mut().zip(x) {
                *g *= if v > -3.0 && v < 3.0 { 1.0 / 6.0 } else { 0.0 };
            }
        }
        Activation::HardSwish => {
            for (g, &v) in grad.iter_mut().zip(x) {
                let d = if v > -3.0 && v < 3.0 { 1.0 / 6.0 } else { 0.0 };
                *g *= hard_sigmoid(v) + v * d;
            }
        }
        Activation::Tanh => {
            for (g, &t) in grad.iter_mut().zip(y) {
                *g *= 1.0 - t * t;
            }
        }
        Activation::Softmax => {
            let sample = chan * plane;
            for (gs, ys) in grad.chunks_mut(sample).zip(y.chunks(sample)) {
                for p in 0..plane {
                    let dot: f32 = (0..chan).map(|c| gs[c * plane + p] * ys[c * plane + p]).sum();
                    for c in 0..chan {
                        gs[c * plane + p] = ys[c * plane + p] * (gs[c * plane + p] - dot);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_operand() {
        // a = [[1,2],[3,4]], b^T given as [[5,7],[6,8]] stored row-major.
        let a = [1.0, 2.0, 3.0, 4.0];
        let bt = [5.0, 7.0, 6.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &bt, (1, 2), 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeom {
            c: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 2,
            sh: 2,
            sw: 1,
            pt: 1,
            pl: 0,
            ho: 3,
            wo: 3,
        };
        let x: Vec<f32> = (0..40).map(|v| (v as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..g.k() * g.p()).map(|v| (v as f32 * 0.11).cos()).collect();
        let mut col = vec![0.0; g.k() * g.p()];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back);
        let lhs: f32 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut v = vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0];
        activate(Activation::Softmax, &mut v, 3, 1);
        assert!((v[..3].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((v[3..].iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
