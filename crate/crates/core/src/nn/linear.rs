use ndarray::{Array2, Axis};

use super::{gemm, Param};
use crate::rng::Rng;

/// Fully connected layer, `y = x Wᵀ + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::fan_in_uniform(&[out_features, in_features], in_features, rng),
            bias: Param::fan_in_uniform(&[out_features], in_features, rng),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_features, "linear input features");
        let mut y = Array2::zeros((x.nrows(), self.out_features));
        gemm(
            1.0,
            &x.view(),
            &self.weight.matrix(self.out_features, self.in_features).t(),
            0.0,
            &mut y.view_mut(),
        );
        for mut row in y.axis_iter_mut(Axis(0)) {
            row.iter_mut().zip(&self.bias.value).for_each(|(v, b)| *v += b);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("backward without forward_train");
        let (o, i) = (self.out_features, self.in_features);
        gemm(1.0, &dy.t(), &x.view(), 1.0, &mut self.weight.grad_matrix(o, i));
        for row in dy.axis_iter(Axis(0)) {
            self.bias.grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        let mut dx = Array2::zeros((dy.nrows(), i));
        gemm(1.0, &dy.view(), &self.weight.matrix(o, i), 0.0, &mut dx.view_mut());
        dx
    }
}
