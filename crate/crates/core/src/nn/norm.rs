use ndarray::{Array4, Axis};

use super::{Buffer, NamedArrays, Param, Trainable};

/// Per-channel batch normalization over `(N, H, W)`.
///
/// Training uses batch statistics and updates exponential running estimates
/// (unbiased variance); inference uses the running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Array4<f64>, Vec<f64>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Buffer { shape: vec![channels], value: vec![0.0; channels] },
            running_var: Buffer { shape: vec![channels], value: vec![1.0; channels] },
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = x.clone();
        for (c, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
            let inv = 1.0 / (self.running_var.value[c] + self.eps).sqrt();
            let (m, g, b) = (self.running_mean.value[c], self.gamma.value[c], self.beta.value[c]);
            ch.mapv_inplace(|v| g * (v - m) * inv + b);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.channels);
        for (c, mut ch) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let mean = ch.sum() / count;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let inv = 1.0 / (var + self.eps).sqrt();
            ch.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean.value[c] = (1.0 - m) * self.running_mean.value[c] + m * mean;
            self.running_var.value[c] = (1.0 - m) * self.running_var.value[c] + m * unbiased;
        }
        let mut y = xhat.clone();
        for (c, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            ch.mapv_inplace(|v| g * v + b);
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (xhat, inv_std) = self.cache.take().expect("backward without forward_train");
        let (n, _, h, w) = dy.dim();
        let count = (n * h * w) as f64;
        let mut dx = Array4::zeros(dy.dim());
        for c in 0..self.channels {
            let dyc = dy.index_axis(Axis(1), c);
            let xc = xhat.index_axis(Axis(1), c);
            let sum_dy = dyc.sum();
            let sum_dy_x: f64 = dyc.iter().zip(xc.iter()).map(|(a, b)| a * b).sum();
            self.beta.grad[c] += sum_dy;
            self.gamma.grad[c] += sum_dy_x;
            let k = self.gamma.value[c] * inv_std[c] / count;
            let mut dxc = dx.index_axis_mut(Axis(1), c);
            ndarray::Zip::from(&mut dxc).and(&dyc).and(&xc).for_each(|d, &g, &xh| {
                *d = k * (count * g - sum_dy - xh * sum_dy_x);
            });
        }
        dx
    }
}

impl Trainable for BatchNorm2d {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

impl NamedArrays for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(format!("{prefix}.gamma"), &self.gamma.shape, &self.gamma.value);
        f(format!("{prefix}.beta"), &self.beta.shape, &self.beta.value);
        f(format!("{prefix}.running_mean"), &self.running_mean.shape, &self.running_mean.value);
        f(format!("{prefix}.running_var"), &self.running_var.shape, &self.running_var.value);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut Vec<f64>)) {
        f(format!("{prefix}.gamma"), &self.gamma.shape, &mut self.gamma.value);
        f(format!("{prefix}.beta"), &self.beta.shape, &mut self.beta.value);
        f(format!("{prefix}.running_mean"), &self.running_mean.shape, &mut self.running_mean.value);
        f(format!("{prefix}.running_var"), &self.running_var.shape, &mut self.running_var.value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn train_output_is_normalized_per_channel() {
        let mut r = crate::rng::seeded(1);
        let x = Array4::from_shape_fn((4, 2, 3, 3), |(_, c, _, _)| r.random_range(0.0..1.0) * (c + 1) as f64 + c as f64);
        let mut bn = BatchNorm2d::new(2);
        let y = bn.forward_train(&x);
        for ch in y.axis_iter(Axis(1)) {
            let n = ch.len() as f64;
            let m = ch.sum() / n;
            let v = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value[1] > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = crate::rng::seeded(2);
        let x = Array4::from_shape_fn((3, 2, 2, 2), |_| r.random_range(-1.0..1.0));
        let probe = Array4::from_shape_fn((3, 2, 2, 2), |_| r.random_range(-1.0..1.0));
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        bn.forward_train(&x);
        let dx = bn.backward(&probe);
        let loss = |bn: &BatchNorm2d, x: &Array4<f64>| {
            let mut b = bn.clone();
            (b.forward_train(x) * &probe).sum()
        };
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let num = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "dx[{idx}] {num} vs {ana}");
        }
        for c in 0..2 {
            let ana = bn.gamma.grad[c];
            let mut b = bn.clone();
            b.gamma.value[c] += eps;
            let lp = loss(&b, &x);
            b.gamma.value[c] -= 2.0 * eps;
            let lm = loss(&b, &x);
            assert!(((lp - lm) / (2.0 * eps) - ana).abs() < 1e-6);
        }
    }
}
