//! Strided 2-D convolution and transposed convolution over NHWC tensors.
//!
//! Both are lowered to one matrix product over the whole batch. A convolution
//! gathers patches (`im2col`) and multiplies by the weight; a transposed
//! convolution multiplies first and scatters the patches back (`col2im`).
//! The two are exact adjoints, so each one's backward pass reuses the other's
//! data movement.

use rand::Rng;

use super::param::{init_normal, ParamId, ParamStore};
use super::GradFlags;
use crate::tensor::{dims4, Scalar, Tensor};

/// Geometry shared by the gather and the scatter.
///
/// The "big" side is the convolution input (or the transposed convolution
/// output); the "small" side is the other one.
#[derive(Clone, Copy, Debug)]
struct Window {
    n: usize,
    big_h: usize,
    big_w: usize,
    small_h: usize,
    small_w: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.n * self.small_h * self.small_w
    }

    fn cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Visits every (patch row, patch column offset, big-side offset) triple
    /// whose source pixel lies inside the image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p, c) = (self.kernel, self.stride, self.pad as isize, self.channels);
        let row_len = self.cols();
        for b in 0..self.n {
            for oy in 0..self.small_h {
                for ox in 0..self.small_w {
                    let row = (b * self.small_h + oy) * self.small_w + ox;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.big_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p;
                            if ix < 0 || ix >= self.big_w as isize {
                                continue;
                            }
                            let col = row * row_len + (ky * k + kx) * c;
                            let big = ((b * self.big_h + iy as usize) * self.big_w + ix as usize) * c;
                            f(col, big);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, big: &[T]) -> Vec<T> {
        let c = self.channels;
        let mut cols = vec![T::zero(); self.rows() * self.cols()];
        self.for_each_tap(|col, src| {
            cols[col..col + c].copy_from_slice(&big[src..src + c]);
        });
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], big: &mut [T]) {
        let c = self.channels;
        self.for_each_tap(|col, dst| {
            for (d, &v) in big[dst..dst + c].iter_mut().zip(&cols[col..col + c]) {
                *d = *d + v;
            }
        });
    }
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

fn accumulate_bias_grad<T: Scalar>(dy: &[T], grad: &mut [T]) {
    for row in dy.chunks_exact(grad.len()) {
        for (g, &v) in grad.iter_mut().zip(row) {
            *g = *g + v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    window: Window,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_param(
            format!("{name}.weight"),
            init_normal(&[out_ch, kernel, kernel, in_ch], 0.02, rng),
        );
        let bias =
            with_bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn window(&self, x: &Tensor<impl Scalar>) -> Window {
        let [n, h, w, c] = dims4(x);
        assert_eq!(c, self.in_ch, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        Window {
            n,
            big_h: h,
            big_w: w,
            small_h: oh,
            small_w: ow,
            channels: c,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let window = self.window(x);
        let cols = window.im2col(x.data());
        let mut y = vec![T::zero(); window.rows() * self.out_ch];
        T::gemm(
            window.rows(),
            window.cols(),
            self.out_ch,
            &cols,
            false,
            store.value(self.weight).data(),
            true,
            &mut y,
            false,
        );
        if let Some(b) = self.bias {
            add_bias(&mut y, store.value(b).data());
        }
        let shape = [window.n, window.small_h, window.small_w, self.out_ch];
        (
            Tensor::from_vec(&shape, y).expect("conv output shape"),
            ConvCache { cols, window },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        flags: GradFlags,
    ) -> Option<Tensor<T>> {
        let w = cache.window;
        let (m, k, n) = (w.rows(), w.cols(), self.out_ch);
        if flags.params {
            let grad = store.grad_mut(self.weight);
            T::gemm(n, m, k, dy.data(), true, &cache.cols, false, grad.data_mut(), true);
            if let Some(b) = self.bias {
                accumulate_bias_grad(dy.data(), store.grad_mut(b).data_mut());
            }
        }
        flags.input.then(|| {
            let mut dcols = vec![T::zero(); m * k];
            T::gemm(m, n, k, dy.data(), false, store.value(self.weight).data(), false, &mut dcols, false);
            let mut dx = Tensor::zeros(&[w.n, w.big_h, w.big_w, w.channels]);
            w.col2im(&dcols, dx.data_mut());
            dx
        })
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTCache<T> {
    input: Tensor<T>,
    window: Window,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_param(
            format!("{name}.weight"),
            init_normal(&[in_ch, kernel, kernel, out_ch], 0.02, rng),
        );
        let bias =
            with_bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel - 2 * self.pad,
            (w - 1) * self.stride + self.kernel - 2 * self.pad,
        )
    }

    fn window(&self, x: &Tensor<impl Scalar>) -> Window {
        let [n, h, w, c] = dims4(x);
        assert_eq!(c, self.in_ch, "transposed conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        Window {
            n,
            big_h: oh,
            big_w: ow,
            small_h: h,
            small_w: w,
            channels: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, ConvTCache<T>) {
        let window = self.window(x);
        let (m, k) = (window.rows(), window.cols());
        let mut cols = vec![T::zero(); m * k];
        T::gemm(m, self.in_ch, k, x.data(), false, store.value(self.weight).data(), false, &mut cols, false);
        let mut y = Tensor::zeros(&[window.n, window.big_h, window.big_w, self.out_ch]);
        window.col2im(&cols, y.data_mut());
        if let Some(b) = self.bias {
            add_bias(y.data_mut(), store.value(b).data());
        }
        (
            y,
            ConvTCache {
                input: x.clone(),
                window,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ConvTCache<T>,
        dy: &Tensor<T>,
        flags: GradFlags,
    ) -> Option<Tensor<T>> {
        let w = cache.window;
        let (m, k) = (w.rows(), w.cols());
        let dcols = w.im2col(dy.data());
        if flags.params {
            let grad = store.grad_mut(self.weight);
            T::gemm(self.in_ch, m, k, cache.input.data(), true, &dcols, false, grad.data_mut(), true);
            if let Some(b) = self.bias {
                accumulate_bias_grad(dy.data(), store.grad_mut(b).data_mut());
            }
        }
        flags.input.then(|| {
            let mut dx = vec![T::zero(); m * self.in_ch];
            T::gemm(m, k, self.in_ch, &dcols, false, store.value(self.weight).data(), true, &mut dx, false);
            Tensor::from_vec(cache.input.shape(), dx).expect("input shape")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-loop convolution, independent of the im2col lowering.
    fn direct_conv(x: &Tensor<f64>, wt: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, h, w, cin] = dims4(x);
        let [cout, k, _, _] = dims4(wt);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut y = Tensor::zeros(&[n, oh, ow, cout]);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.data()[((b * h + iy as usize) * w + ix as usize) * cin + ci]
                                        * wt.data()[((co * k + ky) * k + kx) * cin + ci];
                                }
                            }
                        }
                        y.data_mut()[((b * oh + oy) * ow + ox) * cout + co] = acc;
                    }
                }
            }
        }
        y
    }

    /// Direct-loop transposed convolution: every input pixel stamps the kernel.
    fn direct_conv_t(x: &Tensor<f64>, wt: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, h, w, cin] = dims4(x);
        let [_, k, _, cout] = dims4(wt);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (w - 1) * stride + k - 2 * pad;
        let mut y = Tensor::zeros(&[n, oh, ow, cout]);
        for b in 0..n {
            for iy in 0..h {
                for ix in 0..w {
                    for ky in 0..k {
                        for kx in 0..k {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[((b * h + iy) * w + ix) * cin + ci];
                                for co in 0..cout {
                                    y.data_mut()[((b * oh + oy as usize) * ow + ox as usize) * cout + co] +=
                                        xv * wt.data()[((ci * k + ky) * k + kx) * cout + co];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        init_normal(shape, 1.0, rng)
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 5, 4, 2, 1, false, &mut rng);
        *store.value_mut(conv.weight) = random(&[5, 4, 4, 3], &mut rng);
        let x = random(&[2, 8, 6, 3], &mut rng);
        let (y, _) = conv.forward(&store, &x);
        let want = direct_conv(&x, store.value(conv.weight), 2, 1);
        assert_eq!(y.shape(), &[2, 4, 3, 5]);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let conv = ConvTranspose2d::new(&mut store, "t", 4, 3, 4, 2, 1, false, &mut rng);
        *store.value_mut(conv.weight) = random(&[4, 4, 4, 3], &mut rng);
        let x = random(&[2, 3, 2, 4], &mut rng);
        let (y, _) = conv.forward(&store, &x);
        let want = direct_conv_t(&x, store.value(conv.weight), 2, 1);
        assert_eq!(y.shape(), &[2, 6, 4, 3]);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_two_halves_and_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let down = Conv2d::new(&mut store, "d", 1, 1, 4, 2, 1, false, &mut rng);
        let up = ConvTranspose2d::new(&mut store, "u", 1, 1, 4, 2, 1, false, &mut rng);
        for size in [1usize, 2, 4, 32, 64] {
            assert_eq!(up.output_hw(size, size), (2 * size, 2 * size));
            if size >= 2 {
                assert_eq!(down.output_hw(size, size), (size / 2, size / 2));
            }
        }
    }
}
