use std::ops::Range;

use super::{gemm, NnError, Real, Tensor};

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// d/dx of `x·σ(x)`.
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// 2-D convolution with square kernels, lowered to a matrix product over an
/// im2col buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Conv2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn im2col<T: Real>(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        let k = self.kernel;
        let plane = oh * ow;
        let mut cols = vec![T::zero(); self.in_c * k * k * plane];
        for ci in 0..self.in_c {
            let src = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Tensor<T> {
        let k = self.kernel;
        let plane = oh * ow;
        let mut out = Tensor::zeros(self.in_c, h, w);
        for ci in 0..self.in_c {
            let dst = &mut out.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let cols = self.im2col(x, oh, ow);
        let plane = oh * ow;
        let mut out = vec![T::zero(); self.out_c * plane];
        for (o, b) in params[self.bias.clone()].iter().enumerate() {
            out[o * plane..(o + 1) * plane].fill(*b);
        }
        let kdim = self.in_c * self.kernel * self.kernel;
        gemm(
            false,
            false,
            self.out_c,
            plane,
            kdim,
            T::one(),
            &params[self.weight.clone()],
            &cols,
            T::one(),
            &mut out,
        );
        (
            Tensor {
                c: self.out_c,
                h: oh,
                w: ow,
                data: out,
            },
            cols,
        )
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cols: &[T],
        in_h: usize,
        in_w: usize,
        grad_out: &Tensor<T>,
        grads: &mut [T],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let plane = grad_out.plane();
        let kdim = self.in_c * self.kernel * self.kernel;
        gemm(
            false,
            true,
            self.out_c,
            kdim,
            plane,
            T::one(),
            &grad_out.data,
            cols,
            T::one(),
            &mut grads[self.weight.clone()],
        );
        for (o, gb) in grads[self.bias.clone()].iter_mut().enumerate() {
            let s: T = grad_out.data[o * plane..(o + 1) * plane].iter().copied().sum();
            *gb = *gb + s;
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![T::zero(); kdim * plane];
        gemm(
            true,
            false,
            kdim,
            plane,
            self.out_c,
            T::one(),
            &params[self.weight.clone()],
            &grad_out.data,
            T::zero(),
            &mut dcols,
        );
        Some(self.col2im(&dcols, in_h, in_w, grad_out.h, grad_out.w))
    }
}

/// Fully connected layer on row-major batches (`rows × in_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Linear {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], rows: usize) -> Vec<T> {
        assert_eq!(x.len(), rows * self.in_dim, "linear input width");
        let bias = &params[self.bias.clone()];
        let mut y = Vec::with_capacity(rows * self.out_dim);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        gemm(
            false,
            true,
            rows,
            self.out_dim,
            self.in_dim,
            T::one(),
            x,
            &params[self.weight.clone()],
            T::one(),
            &mut y,
        );
        y
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        grad_y: &[T],
        rows: usize,
        grads: &mut [T],
        need_input: bool,
    ) -> Option<Vec<T>> {
        gemm(
            true,
            false,
            self.out_dim,
            self.in_dim,
            rows,
            T::one(),
            grad_y,
            x,
            T::one(),
            &mut grads[self.weight.clone()],
        );
        let gb = &mut grads[self.bias.clone()];
        for row in grad_y.chunks_exact(self.out_dim) {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        if !need_input {
            return None;
        }
        let mut dx = vec![T::zero(); rows * self.in_dim];
        gemm(
            false,
            false,
            rows,
            self.in_dim,
            self.out_dim,
            T::one(),
            grad_y,
            &params[self.weight.clone()],
            T::zero(),
            &mut dx,
        );
        Some(dx)
    }
}

/// 2×2 max pooling with stride 2. Ties resolve to the first element scanned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaxPool2;

impl MaxPool2 {
    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.c, oh, ow);
        let mut arg = vec![0u32; x.c * oh * ow];
        for c in 0..x.c {
            let base = c * x.h * x.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * x.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * x.w + 2 * ox + dx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    let o = (c * oh + oy) * ow + ox;
                    out.data[o] = x.data[best];
                    arg[o] = best as u32;
                }
            }
        }
        (out, arg)
    }

    /// Pools by a routing recorded from an earlier [`MaxPool2::forward`]
    /// instead of comparing values.
    pub fn forward_routed<T: Real>(&self, x: &Tensor<T>, arg: &[u32]) -> Tensor<T> {
        let mut out = Tensor::zeros(x.c, x.h / 2, x.w / 2);
        for (o, &a) in out.data.iter_mut().zip(arg) {
            *o = x.data[a as usize];
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        argmax: &[u32],
        in_shape: (usize, usize, usize),
        grad_out: &Tensor<T>,
    ) -> Tensor<T> {
        let mut dx = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
        for (&i, &g) in argmax.iter().zip(&grad_out.data) {
            dx.data[i as usize] = dx.data[i as usize] + g;
        }
        dx
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = &x.data[c * x.h * x.w..(c + 1) * x.h * x.w];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad_out.h / 2, grad_out.w / 2);
    let mut dx = Tensor::zeros(grad_out.c, h, w);
    for c in 0..grad_out.c {
        let src = &grad_out.data[c * grad_out.h * grad_out.w..(c + 1) * grad_out.h * grad_out.w];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for y in 0..grad_out.h {
            for x in 0..grad_out.w {
                let d = &mut dst[(y / 2) * w + x / 2];
                *d = *d + src[y * grad_out.w + x];
            }
        }
    }
    dx
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let n = T::of(x.plane() as f64);
    x.data
        .chunks_exact(x.plane())
        .map(|p| p.iter().copied().sum::<T>() / n)
        .collect()
}

pub fn global_avg_pool_backward<T: Real>(grad: &[T], shape: (usize, usize, usize)) -> Tensor<T> {
    let (c, h, w) = shape;
    let n = T::of((h * w) as f64);
    let mut dx = Tensor::zeros(c, h, w);
    for (ch, &g) in grad.iter().enumerate() {
        dx.data[ch * h * w..(ch + 1) * h * w].fill(g / n);
    }
    dx
}

/// Appends one constant plane per label entry, plane `k` filled with `label[k]`.
pub fn concat_label_maps<T: Real>(x: &Tensor<T>, label: &[T]) -> Tensor<T> {
    let plane = x.plane();
    let mut data = Vec::with_capacity(x.data.len() + label.len() * plane);
    data.extend_from_slice(&x.data);
    for &l in label {
        data.extend(std::iter::repeat(l).take(plane));
    }
    Tensor {
        c: x.c + label.len(),
        h: x.h,
        w: x.w,
        data,
    }
}

/// The first `c` channels of a tensor (drops appended label planes).
pub fn take_channels<T: Real>(x: &Tensor<T>, c: usize) -> Result<Tensor<T>, NnError> {
    if c > x.c {
        return Err(NnError::ShapeMismatch(format!(
            "cannot take {c} channels from {}",
            x.c
        )));
    }
    Ok(Tensor {
        c,
        h: x.h,
        w: x.w,
        data: x.data[..c * x.plane()].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::ParamLayout;
    use super::*;

    /// Direct nested-loop convolution, independent of im2col and gemm.
    fn conv_reference(conv: &Conv2d, p: &[f64], x: &Tensor<f64>) -> Tensor<f64> {
        let (oh, ow) = conv.out_hw(x.h, x.w);
        let k = conv.kernel;
        let mut out = Tensor::zeros(conv.out_c, oh, ow);
        for o in 0..conv.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = p[conv.bias.start + o];
                    for ci in 0..conv.in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wi = conv.weight.start + ((o * conv.in_c + ci) * k + ky) * k + kx;
                                s += p[wi]
                                    * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                            }
                        }
                    }
                    out.data[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    fn test_input(c: usize, h: usize, w: usize) -> Tensor<f64> {
        let data = (0..c * h * w).map(|i| ((i * 37 % 17) as f64 - 8.0) / 7.0).collect();
        Tensor::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let mut layout = ParamLayout::new();
            let conv = layout.conv(3, 4, k, s, p, true);
            let params: Vec<f64> = layout.initialize(1);
            let x = test_input(3, 7, 6);
            let (y, _) = conv.forward(&params, &x);
            let reference = conv_reference(&conv, &params, &x);
            assert_eq!(y.shape(), reference.shape());
            for (a, b) in y.data.iter().zip(&reference.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut layout = ParamLayout::new();
        let conv = layout.conv(2, 3, 3, 2, 1, true);
        let params: Vec<f64> = layout.initialize(5);
        let x = test_input(2, 6, 5);
        // loss = Σ y ⊙ m for a fixed probe m
        let (y, cols) = conv.forward(&params, &x);
        let probe: Vec<f64> = (0..y.len()).map(|i| ((i % 5) as f64 - 2.0) * 0.3).collect();
        let loss = |p: &[f64], x: &Tensor<f64>| -> f64 {
            conv.forward(p, x).0.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let g = Tensor::from_vec(y.c, y.h, y.w, probe.clone()).unwrap();
        let mut grads = vec![0.0; params.len()];
        let dx = conv
            .backward(&params, &cols, x.h, x.w, &g, &mut grads, true)
            .unwrap();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut pp = params.clone();
            pp[i] += h;
            let mut pm = params.clone();
            pm[i] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grads[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut layout = ParamLayout::new();
        let lin = layout.linear(4, 3, false);
        let params: Vec<f64> = layout.initialize(2);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
        let probe: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let loss = |p: &[f64], x: &[f64]| -> f64 {
            lin.forward(p, x, 2).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; params.len()];
        let dx = lin.backward(&params, &x, &probe, 2, &mut grads, true).unwrap();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut pp = params.clone();
            pp[i] += h;
            let mut pm = params.clone();
            pm[i] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_and_upsampling_adjoint() {
        let x = test_input(2, 4, 4);
        let (y, arg) = MaxPool2.forward(&x);
        assert_eq!(y.shape(), (2, 2, 2));
        let dx = MaxPool2.backward(&arg, x.shape(), &y.map(|_| 1.0));
        assert_eq!(dx.data.iter().sum::<f64>(), 8.0);

        let up = upsample2(&y);
        assert_eq!(up.shape(), (2, 4, 4));
        // <up(y), x> == <y, upᵀ(x)>
        let lhs: f64 = up.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = y
            .data
            .iter()
            .zip(&upsample2_backward(&x).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative() {
        for x in [-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
