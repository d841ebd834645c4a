use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Param, Tensor};

#[derive(Default)]
pub struct Relu {
    mask: Option<Tensor>,
}

impl Layer for Relu {
    fn forward(&self, x: &Tensor) -> Tensor {
        x.mapv(|v| v.max(0.0))
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("forward_train before backward");
        grad * &mask
    }
}

/// Batch normalisation over (N, H, W) per channel.
pub struct BatchNorm2d {
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    momentum: f32,
    eps: f32,
    cache: Option<(Tensor, Array1<f32>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels]))),
            running_var: Param::buffer(ndarray::ArrayD::ones(ndarray::IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn vec(p: &Param) -> ndarray::ArrayView1<'_, f32> {
        p.value.view().into_dimensionality::<Ix1>().unwrap()
    }
}

impl Layer for BatchNorm2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mean = Self::vec(&self.running_mean);
        let var = Self::vec(&self.running_var);
        let gamma = Self::vec(&self.gamma);
        let beta = Self::vec(&self.beta);
        let mut y = x.clone();
        for mut sample in y.outer_iter_mut() {
            for (c, mut plane) in sample.outer_iter_mut().enumerate() {
                let scale = gamma[c] / (var[c] + self.eps).sqrt();
                let shift = beta[c] - mean[c] * scale;
                plane.mapv_inplace(|v| v * scale + shift);
            }
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let m = (n * hw) as f32;
        let mut xhat = x.as_standard_layout().into_owned();
        let data = xhat.as_slice_mut().unwrap();
        let mut inv_std = Array1::<f32>::zeros(c);
        let gamma = Self::vec(&self.gamma).to_owned();
        let beta = Self::vec(&self.beta).to_owned();
        let mut y = Array4::<f32>::zeros((n, c, h, w));
        let out = y.as_slice_mut().unwrap();
        for ch in 0..c {
            let planes = |i: usize| (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let mut sum = 0.0f32;
            for i in 0..n {
                sum += data[planes(i)].iter().sum::<f32>();
            }
            let mean = sum / m;
            let mut sq = 0.0f32;
            for i in 0..n {
                sq += data[planes(i)].iter().map(|v| (v - mean) * (v - mean)).sum::<f32>();
            }
            let var = sq / m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (gamma[ch], beta[ch]);
            for i in 0..n {
                let r = planes(i);
                for (xv, yv) in data[r.clone()].iter_mut().zip(&mut out[r]) {
                    *xv = (*xv - mean) * istd;
                    *yv = *xv * g + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let rm = &mut self.running_mean.value[[ch]];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean;
            let rv = &mut self.running_var.value[[ch]];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased;
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("forward_train before backward");
        let (n, c, h, w) = grad.dim();
        let hw = h * w;
        let m = (n * hw) as f32;
        let gdata = grad.as_standard_layout();
        let g = gdata.as_slice().unwrap();
        let xh = xhat.as_slice().unwrap();
        let mut dx = Array4::<f32>::zeros(grad.raw_dim());
        let d = dx.as_slice_mut().unwrap();
        for ch in 0..c {
            let planes = |i: usize| (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let (mut sum_g, mut sum_gx) = (0.0f32, 0.0f32);
            for i in 0..n {
                let r = planes(i);
                for (gv, xv) in g[r.clone()].iter().zip(&xh[r]) {
                    sum_g += gv;
                    sum_gx += gv * xv;
                }
            }
            self.gamma.grad[[ch]] += sum_gx;
            self.beta.grad[[ch]] += sum_g;
            let k = self.gamma.value[[ch]] * inv_std[ch] / m;
            for i in 0..n {
                let r = planes(i);
                for ((dv, gv), xv) in d[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                    *dv = k * (m * gv - sum_g - xv * sum_gx);
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

#[derive(Default)]
pub struct GlobalAvgPool {
    shape: Option<(usize, usize, usize, usize)>,
}

impl Layer for GlobalAvgPool {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        let area = (h * w) as f32;
        Array4::from_shape_fn((n, c, 1, 1), |(i, ch, _, _)| {
            x.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum() / area
        })
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.shape = Some(x.dim());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (n, c, h, w) = self.shape.take().expect("forward_train before backward");
        let area = (h * w) as f32;
        Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| grad[[i, ch, 0, 0]] / area)
    }
}

/// Fully connected layer; flattens `(N, C, H, W)` input to `(N, C*H*W)`.
pub struct Linear {
    weight: Param,
    bias: Param,
    out: usize,
    cache: Option<(Array2<f32>, (usize, usize, usize, usize))>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::he(&[outputs, inputs], inputs, rng),
            bias: Param::zeros(&[outputs]),
            out: outputs,
            cache: None,
        }
    }

    fn flat(x: &Tensor) -> Array2<f32> {
        let (n, c, h, w) = x.dim();
        x.as_standard_layout()
            .to_owned()
            .into_shape_with_order((n, c * h * w))
            .expect("flatten")
    }
}

impl Layer for Linear {
    fn forward(&self, x: &Tensor) -> Tensor {
        let flat = Self::flat(x);
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = flat.dot(&weight.t());
        y += &self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let n = y.nrows();
        y.into_shape_with_order((n, self.out, 1, 1)).unwrap()
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.cache = Some((Self::flat(x), x.dim()));
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (flat, shape) = self.cache.take().expect("forward_train before backward");
        let n = grad.dim().0;
        let g = grad
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((n, self.out))
            .unwrap();
        let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        general_mat_mul(1.0, &g.t(), &flat, 1.0, &mut dw);
        for (b, col) in self.bias.grad.iter_mut().zip(g.columns()) {
            *b += col.sum();
        }
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        g.dot(&weight).into_shape_with_order(shape).unwrap()
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
