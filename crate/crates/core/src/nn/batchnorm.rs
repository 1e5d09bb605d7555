use ndarray::{Array1, Array4, ArrayD, Axis, Ix1};

use super::{join, Inspector, Layer, Mode, Param, Visitor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation with running statistics for evaluation.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Param,
    beta: Param,
    running_mean: ArrayD<f64>,
    running_var: ArrayD<f64>,
    cache: Option<(Array4<f64>, Array1<f64>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(vec![channels])),
            beta: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::ones(vec![channels]),
            cache: None,
        }
    }

    fn vec1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
        a.view().into_dimensionality::<Ix1>().expect("1-D")
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let gamma = Self::vec1(&self.gamma.value).to_owned();
        let beta = Self::vec1(&self.beta.value).to_owned();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::<f64>::zeros(c);
                let mut var = Array1::<f64>::zeros(c);
                for ch in 0..c {
                    let plane = x.index_axis(Axis(1), ch);
                    let mu = plane.sum() / count;
                    let v = plane.fold(0.0, |acc, &x| acc + (x - mu) * (x - mu)) / count;
                    mean[ch] = mu;
                    var[ch] = v;
                }
                let unbiased = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                for ch in 0..c {
                    self.running_mean[ch] =
                        (1.0 - MOMENTUM) * self.running_mean[ch] + MOMENTUM * mean[ch];
                    self.running_var[ch] =
                        (1.0 - MOMENTUM) * self.running_var[ch] + MOMENTUM * var[ch] * unbiased;
                }
                (mean, var)
            }
            Mode::Eval => (
                Self::vec1(&self.running_mean).to_owned(),
                Self::vec1(&self.running_var).to_owned(),
            ),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let mut xhat = x.to_owned();
        for ch in 0..c {
            let (mu, s) = (mean[ch], inv_std[ch]);
            xhat.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mu) * s);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let (g, b) = (gamma[ch], beta[ch]);
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * g + b);
        }
        if mode == Mode::Train {
            self.cache = Some((xhat, inv_std));
        }
        debug_assert_eq!(y.dim(), (n, c, h, w));
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (xhat, inv_std) = self
            .cache
            .take()
            .expect("batchnorm backward without a training forward");
        let (n, c, h, w) = dy.dim();
        let count = (n * h * w) as f64;
        let gamma = Self::vec1(&self.gamma.value).to_owned();
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        for ch in 0..c {
            let g = dy.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let sum_dy = g.sum();
            let sum_dy_xhat = ndarray::Zip::from(&g)
                .and(&xh)
                .fold(0.0, |acc, &a, &b| acc + a * b);
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            // dxhat = dy * gamma; dx = inv_std / M * (M dxhat - sum dxhat - xhat sum(dxhat xhat))
            let k = gamma[ch] * inv_std[ch] / count;
            ndarray::Zip::from(dx.index_axis_mut(Axis(1), ch))
                .and(&g)
                .and(&xh)
                .for_each(|d, &gy, &x| *d = k * (count * gy - sum_dy - x * sum_dy_xhat));
        }
        dx
    }
}

impl Layer for BatchNorm2d {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "gamma"), &mut self.gamma);
        v.param(&join(prefix, "beta"), &mut self.beta);
        v.buffer(&join(prefix, "running_mean"), &mut self.running_mean);
        v.buffer(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn inspect(&self, prefix: &str, v: &mut dyn Inspector) {
        v.param(&join(prefix, "gamma"), &self.gamma);
        v.param(&join(prefix, "beta"), &self.beta);
        v.buffer(&join(prefix, "running_mean"), self.running_mean.view());
        v.buffer(&join(prefix, "running_var"), self.running_var.view());
    }
}
