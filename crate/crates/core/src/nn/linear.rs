use ndarray::{Array1, Array2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, Inspector, Layer, Mode, Param, Visitor};

/// `y = x W^T + b` on `[batch x features]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Param,
    bias: Param,
    input: Option<Array2<f64>>,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for both weight and bias.
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Linear {
        let bound = 1.0 / (in_features as f64).sqrt();
        let w = Array2::from_shape_simple_fn((out_features, in_features), || {
            rng.random_range(-bound..bound)
        });
        let b = Array1::from_shape_simple_fn(out_features, || rng.random_range(-bound..bound));
        Linear {
            weight: Param::new(w.into_dyn()),
            bias: Param::new(b.into_dyn()),
            input: None,
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Array2<f64> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-D");
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-D");
        let y = x.dot(&w.t()) + b;
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self
            .input
            .take()
            .expect("linear backward without a training forward");
        let dw = dy.t().dot(&x);
        let db = dy.sum_axis(Axis(0));
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-D");
        dy.dot(&w)
    }
}

impl Layer for Linear {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        v.param(&join(prefix, "bias"), &mut self.bias);
    }

    fn inspect(&self, prefix: &str, v: &mut dyn Inspector) {
        v.param(&join(prefix, "weight"), &self.weight);
        v.param(&join(prefix, "bias"), &self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let r = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        lin.forward(&x, Mode::Train);
        let dx = lin.backward(&r);
        let eps = 1e-6;
        for (i, j) in [(0, 0), (1, 3), (0, 2)] {
            let mut p = x.clone();
            p[[i, j]] += eps;
            let mut m = x.clone();
            m[[i, j]] -= eps;
            let numeric = ((lin.forward(&p, Mode::Eval) - lin.forward(&m, Mode::Eval)) * &r).sum()
                / (2.0 * eps);
            assert!((dx[[i, j]] - numeric).abs() < 1e-8);
        }
        let db = lin.bias.grad.clone();
        assert!((db[0] - r.column(0).sum()).abs() < 1e-12);
    }
}
