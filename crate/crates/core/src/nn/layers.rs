//! Layers with hand-written forward and backward passes.
//!
//! Every layer is immutable during `forward`; `backward` takes the cached
//! input and accumulates parameter gradients into a zero-initialised twin of
//! the layer (`zeros_like`), so a whole model's gradient has the model's own
//! type and the optimizer can zip the two parameter lists.

use rand::Rng;

use super::tensor::{Scalar, Tensor};

/// Output extent of a strided convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Geometry of a 2-D sliding window over a `[channels, height, width]` image
/// producing an `out_h × out_w` grid of patches.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate hit by output index `o` at kernel offset `k`, if any.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Unfold `src` into a `[C·k·k, out_h·out_w]` patch matrix.
    fn im2col<T: Scalar>(&self, src: &[T], cols: &mut [T]) {
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &src[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ki, self.height) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src_row = &plane[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kj, self.width) {
                                        Some(ix) => src_row[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-add patch columns back into `dst`.
    fn col2im<T: Scalar>(&self, cols: &[T], dst: &mut [T]) {
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &mut dst[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ki, self.height) else {
                            continue;
                        };
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst_row = &mut plane[iy * self.width..(iy + 1) * self.width];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(ix) = self.source(ox, kj, self.width) {
                                dst_row[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

/// 2-D convolution, weight `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self {
            weight: uniform_tensor(&[out_channels, in_channels, kernel, kernel], (6.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn window(&self, height: usize, width: usize) -> Window {
        let k = self.kernel();
        Window {
            channels: self.in_channels(),
            height,
            width,
            kernel: k,
            stride: self.stride,
            padding: self.padding,
            out_h: conv_out_size(height, k, self.stride, self.padding),
            out_w: conv_out_size(width, k, self.stride, self.padding),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let &[n, c, h, w] = x.shape() else {
            panic!("conv2d expects NCHW input, got {:?}", x.shape());
        };
        assert_eq!(c, self.in_channels(), "conv2d channel mismatch");
        let win = self.window(h, w);
        let out_c = self.out_channels();
        let mut y = Tensor::zeros(&[n, out_c, win.out_h, win.out_w]);
        let mut cols = vec![T::zero(); win.rows() * win.cols()];
        for i in 0..n {
            win.im2col(x.item(i), &mut cols);
            let yi = y.item_mut(i);
            T::gemm(
                false,
                false,
                out_c,
                win.rows(),
                win.cols(),
                self.weight.data(),
                &cols,
                T::zero(),
                yi,
            );
            for (o, &b) in self.bias.data().iter().enumerate() {
                yi[o * win.cols()..(o + 1) * win.cols()]
                    .iter_mut()
                    .for_each(|v| *v += b);
            }
        }
        y
    }

    /// Accumulates ∂L/∂weight and ∂L/∂bias into `grad`; returns ∂L/∂x when
    /// `input_grad` is set.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self, input_grad: bool) -> Option<Tensor<T>> {
        let &[n, _, h, w] = x.shape() else {
            panic!("conv2d expects NCHW input");
        };
        let win = self.window(h, w);
        let out_c = self.out_channels();
        let mut dx = input_grad.then(|| Tensor::zeros(x.shape()));
        let mut cols = vec![T::zero(); win.rows() * win.cols()];
        for i in 0..n {
            let dyi = dy.item(i);
            win.im2col(x.item(i), &mut cols);
            T::gemm(
                false,
                true,
                out_c,
                win.cols(),
                win.rows(),
                dyi,
                &cols,
                T::one(),
                grad.weight.data_mut(),
            );
            for (o, gb) in grad.bias.data_mut().iter_mut().enumerate() {
                *gb += dyi[o * win.cols()..(o + 1) * win.cols()].iter().copied().sum();
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    true,
                    false,
                    win.rows(),
                    out_c,
                    win.cols(),
                    self.weight.data(),
                    dyi,
                    T::zero(),
                    &mut cols,
                );
                win.col2im(&cols, dx.item_mut(i));
            }
        }
        dx
    }
}

/// Transposed 2-D convolution, weight `[in, out, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut R,
    ) -> Self {
        // Each output pixel receives roughly in·k²/stride² contributions.
        let fan_in = (in_channels * kernel * kernel) as f64 / (stride * stride) as f64;
        Self {
            weight: uniform_tensor(
                &[in_channels, out_channels, kernel, kernel],
                (6.0 / fan_in.max(1.0)).sqrt(),
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            stride: self.stride,
            padding: self.padding,
            output_padding: self.output_padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel() + self.output_padding - 2 * self.padding
    }

    /// The forward convolution whose adjoint this layer computes, viewed
    /// from the (larger) output side.
    fn window(&self, in_h: usize, in_w: usize) -> Window {
        Window {
            channels: self.out_channels(),
            height: self.out_size(in_h),
            width: self.out_size(in_w),
            kernel: self.kernel(),
            stride: self.stride,
            padding: self.padding,
            out_h: in_h,
            out_w: in_w,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let &[n, c, h, w] = x.shape() else {
            panic!("conv_transpose2d expects NCHW input, got {:?}", x.shape());
        };
        assert_eq!(c, self.in_channels(), "conv_transpose2d channel mismatch");
        let win = self.window(h, w);
        let out_c = self.out_channels();
        let mut y = Tensor::zeros(&[n, out_c, win.height, win.width]);
        let mut cols = vec![T::zero(); win.rows() * win.cols()];
        let plane = win.height * win.width;
        for i in 0..n {
            T::gemm(
                true,
                false,
                win.rows(),
                c,
                win.cols(),
                self.weight.data(),
                x.item(i),
                T::zero(),
                &mut cols,
            );
            let yi = y.item_mut(i);
            win.col2im(&cols, yi);
            for (o, &b) in self.bias.data().iter().enumerate() {
                yi[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self, input_grad: bool) -> Option<Tensor<T>> {
        let &[n, c, h, w] = x.shape() else {
            panic!("conv_transpose2d expects NCHW input");
        };
        let win = self.window(h, w);
        let plane = win.height * win.width;
        let mut dx = input_grad.then(|| Tensor::zeros(x.shape()));
        let mut cols = vec![T::zero(); win.rows() * win.cols()];
        for i in 0..n {
            let dyi = dy.item(i);
            win.im2col(dyi, &mut cols);
            T::gemm(
                false,
                true,
                c,
                win.cols(),
                win.rows(),
                x.item(i),
                &cols,
                T::one(),
                grad.weight.data_mut(),
            );
            for (o, gb) in grad.bias.data_mut().iter_mut().enumerate() {
                *gb += dyi[o * plane..(o + 1) * plane].iter().copied().sum();
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    false,
                    false,
                    c,
                    win.rows(),
                    win.cols(),
                    self.weight.data(),
                    &cols,
                    T::zero(),
                    dx.item_mut(i),
                );
            }
        }
        dx
    }
}

/// Fully connected layer, weight `[out, in]`, acting on `[N, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_tensor(&[outputs, inputs], (3.0 / inputs as f64).sqrt(), rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.item_len(), self.inputs(), "linear input width mismatch");
        let mut y = Tensor::zeros(&[n, self.outputs()]);
        T::gemm(
            false,
            true,
            n,
            self.inputs(),
            self.outputs(),
            x.data(),
            self.weight.data(),
            T::zero(),
            y.data_mut(),
        );
        for i in 0..n {
            for (v, &b) in y.item_mut(i).iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let n = x.batch();
        let (inp, out) = (self.inputs(), self.outputs());
        T::gemm(
            true,
            false,
            out,
            n,
            inp,
            dy.data(),
            x.data(),
            T::one(),
            grad.weight.data_mut(),
        );
        for i in 0..n {
            for (g, &d) in grad.bias.data_mut().iter_mut().zip(dy.item(i)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[n, inp]);
        T::gemm(
            false,
            false,
            n,
            out,
            inp,
            dy.data(),
            self.weight.data(),
            T::zero(),
            dx.data_mut(),
        );
        dx.reshaped(x.shape()).expect("same element count")
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(dy, |y, d| if y > T::zero() { d } else { T::zero() })
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient through the logistic function given its output.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(dy, |y, d| d * y * (T::one() - y))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct-loop convolution used as an oracle for the im2col path.
    fn direct_conv(x: &Tensor<f64>, layer: &Conv2d<f64>) -> Tensor<f64> {
        let &[n, c, h, w] = x.shape() else { unreachable!() };
        let (o, k, s, p) = (layer.out_channels(), layer.kernel(), layer.stride, layer.padding);
        let (oh, ow) = (conv_out_size(h, k, s, p), conv_out_size(w, k, s, p));
        let mut y = Tensor::zeros(&[n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = layer.bias.data()[oc];
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                    let wv = layer.weight.data()[((oc * c + ic) * k + ki) * k + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y.data_mut()[((b * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        uniform_tensor(shape, 1.0, rng)
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng);
        layer.bias = random(&[3], &mut rng);
        let x = random(&[2, 2, 7, 6], &mut rng);
        let fast = layer.forward(&x);
        let slow = direct_conv(&x, &layer);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// ⟨conv(x), y⟩ = ⟨x, convᵀ(y)⟩ when both share a weight and have no bias.
    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::<f64>::new(2, 3, 4, 2, 1, &mut rng);
        let tconv = ConvTranspose2d {
            weight: conv.weight.clone().reshaped(&[3, 2, 4, 4]).unwrap(),
            bias: Tensor::zeros(&[2]),
            stride: 2,
            padding: 1,
            output_padding: 0,
        };
        // Weight [out=3, in=2, k, k] of the conv is [in=3, out=2, k, k] for the transpose.
        let x = random(&[1, 2, 8, 8], &mut rng);
        let y = random(&[1, 3, 4, 4], &mut rng);
        let cx = conv.forward(&x);
        let ty = tconv.forward(&y);
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn output_padding_recovers_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = ConvTranspose2d::<f32>::new(4, 2, 4, 2, 1, 1, &mut rng);
        assert_eq!(t.out_size(10), 21);
        let y = t.forward(&Tensor::zeros(&[1, 4, 10, 10]));
        assert_eq!(y.shape(), &[1, 2, 21, 21]);
        assert_eq!(conv_out_size(21, 4, 2, 1), 10);
        assert_eq!(conv_out_size(84, 3, 2, 1), 42);
        assert_eq!(conv_out_size(21, 3, 2, 1), 11);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!(sigmoid_scalar(-1000.0f64) >= 0.0);
        assert!(sigmoid_scalar(1000.0f64) <= 1.0);
        assert!(sigmoid_scalar(-1000.0f64).is_finite());
    }
}
