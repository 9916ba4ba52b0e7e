use ndarray::{Array2, Array4, Axis};

use super::{from_channel_major, gemm, to_channel_major, NamedArrays, Param, Trainable};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn conv_out(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn deconv_out(&self, side: usize) -> usize {
        (side - 1) * self.stride + self.kernel - 2 * self.padding
    }
}

/// Unfolds `[N, C, H, W]` into `[C·k·k, N·OH·OW]` patches (zero padding).
fn im2col(x: &Array4<f64>, g: Geometry, oh: usize, ow: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let k = g.kernel;
    let cols_per = oh * ow;
    let mut cols = Array2::zeros((c * k * k, n * cols_per));
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    let width = n * cols_per;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out_row = &mut dst[row * width..(row + 1) * width];
                for ni in 0..n {
                    let plane = &src[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ni * cols_per + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                out_row[base + ox] = plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto a `[N, C, H, W]` grid.
fn col2im(cols: &Array2<f64>, dims: (usize, usize, usize, usize), g: Geometry, oh: usize, ow: usize) -> Array4<f64> {
    let (n, c, h, w) = dims;
    let k = g.kernel;
    let cols_per = oh * ow;
    let width = n * cols_per;
    let src = cols.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let in_row = &src[row * width..(row + 1) * width];
                for ni in 0..n {
                    let plane = &mut dst[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ni * cols_per + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += in_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_channel_bias(y: &mut Array4<f64>, bias: &[f64]) {
    for (mut ch, b) in y.axis_iter_mut(Axis(1)).zip(bias) {
        ch += *b;
    }
}

fn accumulate_channel_bias_grad(dy: &Array4<f64>, grad: &mut [f64]) {
    for (ch, g) in dy.axis_iter(Axis(1)).zip(grad.iter_mut()) {
        *g += ch.sum();
    }
}

/// 2-D convolution. Weight layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub(crate) geometry: Geometry,
    pub weight: Param,
    pub bias: Param,
    cache: Option<(Array2<f64>, (usize, usize, usize, usize))>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            geometry: Geometry { kernel, stride, padding },
            weight: Param::fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::fan_in_uniform(&[out_channels], fan_in, rng),
            cache: None,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.geometry.kernel * self.geometry.kernel
    }

    fn run(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = (self.geometry.conv_out(h), self.geometry.conv_out(w));
        let cols = im2col(x, self.geometry, oh, ow);
        let mut y2 = Array2::zeros((self.out_channels, n * oh * ow));
        gemm(
            1.0,
            &self.weight.matrix(self.out_channels, self.patch_len()),
            &cols.view(),
            0.0,
            &mut y2.view_mut(),
        );
        let mut y = from_channel_major(&y2, n, oh, ow);
        add_channel_bias(&mut y, &self.bias.value);
        (y, cols)
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.run(x).0
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (y, cols) = self.run(x);
        self.cache = Some((cols, x.dim()));
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (cols, dims) = self.cache.take().expect("backward without forward_train");
        let (_, _, oh, ow) = dy.dim();
        let dy2 = to_channel_major(dy);
        accumulate_channel_bias_grad(dy, &mut self.bias.grad);
        let (oc, pl) = (self.out_channels, self.patch_len());
        gemm(1.0, &dy2.view(), &cols.t(), 1.0, &mut self.weight.grad_matrix(oc, pl));
        let mut dcols = Array2::zeros((pl, dy2.ncols()));
        gemm(1.0, &self.weight.matrix(oc, pl).t(), &dy2.view(), 0.0, &mut dcols.view_mut());
        col2im(&dcols, dims, self.geometry, oh, ow)
    }
}

/// Transposed 2-D convolution. Weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub(crate) geometry: Geometry,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Array2<f64>>,
}

impl ConvTranspose2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = out_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            geometry: Geometry { kernel, stride, padding },
            weight: Param::fan_in_uniform(&[in_channels, out_channels, kernel, kernel], fan_in, rng),
            bias: Param::fan_in_uniform(&[out_channels], fan_in, rng),
            cache: None,
        }
    }

    fn patch_len(&self) -> usize {
        self.out_channels * self.geometry.kernel * self.geometry.kernel
    }

    fn run(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "deconv input channels");
        let (oh, ow) = (self.geometry.deconv_out(h), self.geometry.deconv_out(w));
        let x2 = to_channel_major(x);
        let mut cols = Array2::zeros((self.patch_len(), n * h * w));
        gemm(
            1.0,
            &self.weight.matrix(self.in_channels, self.patch_len()).t(),
            &x2.view(),
            0.0,
            &mut cols.view_mut(),
        );
        let mut y = col2im(&cols, (n, self.out_channels, oh, ow), self.geometry, h, w);
        add_channel_bias(&mut y, &self.bias.value);
        (y, x2)
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.run(x).0
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (y, x2) = self.run(x);
        self.cache = Some(x2);
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x2 = self.cache.take().expect("backward without forward_train");
        let (n, _, oh, ow) = dy.dim();
        let (h, w) = (self.geometry.conv_out(oh), self.geometry.conv_out(ow));
        accumulate_channel_bias_grad(dy, &mut self.bias.grad);
        let dcols = im2col(dy, self.geometry, h, w);
        let (ic, pl) = (self.in_channels, self.patch_len());
        gemm(1.0, &x2.view(), &dcols.t(), 1.0, &mut self.weight.grad_matrix(ic, pl));
        let mut dx2 = Array2::zeros((ic, n * h * w));
        gemm(1.0, &self.weight.matrix(ic, pl), &dcols.view(), 0.0, &mut dx2.view_mut());
        from_channel_major(&dx2, n, h, w)
    }
}

macro_rules! impl_param_layer {
    ($t:ty) => {
        impl Trainable for $t {
            fn params_mut(&mut self) -> Vec<&mut Param> {
                vec![&mut self.weight, &mut self.bias]
            }
        }

        impl NamedArrays for $t {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
                f(format!("{prefix}.weight"), &self.weight.shape, &self.weight.value);
                f(format!("{prefix}.bias"), &self.bias.shape, &self.bias.value);
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut Vec<f64>)) {
                f(format!("{prefix}.weight"), &self.weight.shape, &mut self.weight.value);
                f(format!("{prefix}.bias"), &self.bias.shape, &mut self.bias.value);
            }
        }
    };
}

impl_param_layer!(Conv2d);
impl_param_layer!(ConvTranspose2d);
impl_param_layer!(super::Linear);
