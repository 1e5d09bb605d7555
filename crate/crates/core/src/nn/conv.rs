use ndarray::{Array2, Array4, ArrayView2, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{join, Inspector, Layer, Mode, Param, Visitor};

/// Square-kernel 2-D convolution without bias, lowered to one GEMM per sample.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    input: Option<Array4<f64>>,
}

impl Conv2d {
    /// He-normal initialisation, `std = sqrt(2 / fan_in)`.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Conv2d {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let w = Array2::from_shape_simple_fn((out_channels, fan_in), || normal.sample(rng));
        Conv2d {
            weight: Param::new(w.into_dyn()),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn weight2(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("conv weight is 2-D")
    }

    /// Unfolds one `C x H x W` sample into `(C*k*k) x (Ho*Wo)` columns.
    fn im2col(&self, sample: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Array2<f64> {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut cols = Array2::<f64>::zeros((self.in_channels * k * k, ho * wo));
        let out = cols.as_slice_mut().expect("fresh array is contiguous");
        for c in 0..self.in_channels {
            let plane = &sample[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds columns back onto a `C x H x W` gradient buffer.
    fn col2im(
        &self,
        cols: &Array2<f64>,
        grad: &mut [f64],
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
    ) {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let src = cols.as_slice().expect("gemm output is contiguous");
        for c in 0..self.in_channels {
            let plane = &mut grad[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let col = &src[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += col[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let x = x.as_standard_layout();
        let data = x.as_slice().expect("standard layout");
        let mut out = Array4::<f64>::zeros((n, self.out_channels, ho, wo));
        let weight = self.weight2();
        for i in 0..n {
            let cols = self.im2col(&data[i * c * h * w..(i + 1) * c * h * w], h, w, ho, wo);
            let y = weight.dot(&cols);
            out.index_axis_mut(ndarray::Axis(0), i)
                .as_slice_mut()
                .expect("contiguous output")
                .copy_from_slice(y.as_slice().expect("contiguous gemm"));
        }
        if mode == Mode::Train {
            self.input = Some(x.into_owned());
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x = self
            .input
            .take()
            .expect("conv backward without a training forward");
        let (n, c, h, w) = x.dim();
        let (_, o, ho, wo) = dy.dim();
        let dy = dy.as_standard_layout();
        let dy_data = dy.as_slice().expect("standard layout");
        let x_data = x.as_slice().expect("cached input is contiguous");
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let mut dw = Array2::<f64>::zeros((o, c * self.kernel * self.kernel));
        {
            let weight = self.weight2();
            let dx_data = dx.as_slice_mut().expect("fresh array");
            for i in 0..n {
                let cols = self.im2col(&x_data[i * c * h * w..(i + 1) * c * h * w], h, w, ho, wo);
                let g = ArrayView2::from_shape(
                    (o, ho * wo),
                    &dy_data[i * o * ho * wo..(i + 1) * o * ho * wo],
                )
                .expect("dy slice shape");
                dw += &g.dot(&cols.t());
                let dcols = weight.t().dot(&g);
                let dcols = dcols.as_standard_layout().into_owned();
                self.col2im(
                    &dcols,
                    &mut dx_data[i * c * h * w..(i + 1) * c * h * w],
                    h,
                    w,
                    ho,
                    wo,
                );
            }
        }
        self.weight.grad += &dw.into_dyn();
        dx
    }
}

impl Layer for Conv2d {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "weight"), &mut self.weight);
    }

    fn inspect(&self, prefix: &str, v: &mut dyn Inspector) {
        v.param(&join(prefix, "weight"), &self.weight);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution.
    fn naive(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        let wt = conv.weight2();
        Array4::from_shape_fn((n, conv.out_channels, ho, wo), |(b, o, oy, ox)| {
            let mut acc = 0.0;
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                        let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[[o, (ci * k + ki) * k + kj]]
                                * x[[b, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, h, w) in [(1, 5, 6), (2, 7, 4), (2, 8, 8)] {
            let mut conv = Conv2d::new(3, 4, 3, stride, 1, &mut rng);
            let x = Array4::from_shape_fn((2, 3, h, w), |_| rng.random_range(-1.0..1.0));
            let fast = conv.forward(&x, Mode::Eval);
            let slow = naive(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |_| rng.random_range(-1.0..1.0));
        let y = conv.forward(&x, Mode::Train);
        let r = Array4::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
        let dx = conv.backward(&r);
        let dw = conv.weight.grad.clone();
        let eps = 1e-6;
        let objective =
            |conv: &mut Conv2d, x: &Array4<f64>| (conv.forward(x, Mode::Eval) * &r).sum();
        for idx in [[0, 0, 0, 0], [1, 1, 2, 3], [0, 1, 4, 4], [1, 0, 3, 1]] {
            let mut p = x.clone();
            p[idx] += eps;
            let mut m = x.clone();
            m[idx] -= eps;
            let numeric = (objective(&mut conv, &p) - objective(&mut conv, &m)) / (2.0 * eps);
            assert!((dx[idx] - numeric).abs() < 1e-6 * numeric.abs().max(1.0));
        }
        for flat in [0usize, 5, 17, 53] {
            let orig = conv.weight.value.as_slice().unwrap()[flat];
            conv.weight.value.as_slice_mut().unwrap()[flat] = orig + eps;
            let fp = objective(&mut conv, &x);
            conv.weight.value.as_slice_mut().unwrap()[flat] = orig - eps;
            let fm = objective(&mut conv, &x);
            conv.weight.value.as_slice_mut().unwrap()[flat] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = dw.as_slice().unwrap()[flat];
            assert!((a - numeric).abs() < 1e-6 * numeric.abs().max(1.0));
        }
    }
}
