//! A small CPU neural-network engine.
//!
//! Layers own their parameters and, while training, the activations they need
//! for the backward pass. `forward` is a pure inference path that takes `&self`,
//! so trained networks can be shared across threads behind an `Arc`.
//! Tensors are NCHW `Array4<f32>`; fully connected layers use `(N, F, 1, 1)`.

mod checkpoint;
mod conv;
mod layers;
mod resnet;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use conv::{Conv2d, ConvTranspose2d};
pub use layers::{BatchNorm2d, GlobalAvgPool, Linear, Relu};
pub use resnet::{build_backbone, Backbone, BackboneDepth, Residual};

use ndarray::{Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LookError, Result};

pub type Tensor = Array4<f32>;

/// A learnable (or buffered) array with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub trainable: bool,
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Param {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            trainable: true,
        }
    }

    /// Running statistics and similar state saved with the model but never optimized.
    pub fn buffer(value: ArrayD<f32>) -> Self {
        let mut p = Param::new(value);
        p.trainable = false;
        p
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Param::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// He-normal initialisation with the given fan-in.
    pub fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| normal.sample(rng)).collect();
        Param::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

pub trait Layer: Send + Sync {
    /// Inference pass; never touches cached state.
    fn forward(&self, x: &Tensor) -> Tensor;
    /// Training pass; caches what `backward` needs.
    fn forward_train(&mut self, x: &Tensor) -> Tensor;
    /// Accumulates parameter gradients and returns the gradient w.r.t. the input
    /// of the most recent `forward_train`.
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
}

#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn with(mut self, layer: impl Layer + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn extend(&mut self, other: Sequential) {
        self.layers.extend(other.layers);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_weights(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Flattened copy of every parameter and buffer, in visiting order.
    pub fn export_weights(&self) -> (Vec<Vec<usize>>, Vec<f32>) {
        let mut shapes = Vec::new();
        let mut data = Vec::new();
        for p in self.params() {
            shapes.push(p.value.shape().to_vec());
            data.extend(p.value.iter().copied());
        }
        (shapes, data)
    }

    pub fn import_weights(&mut self, shapes: &[Vec<usize>], data: &[f32]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != shapes.len() {
            return Err(LookError::Checkpoint(format!(
                "expected {} tensors, checkpoint has {}",
                params.len(),
                shapes.len()
            )));
        }
        let mut offset = 0;
        for (p, shape) in params.iter_mut().zip(shapes) {
            if p.value.shape() != shape.as_slice() {
                return Err(LookError::Checkpoint(format!(
                    "tensor shape {:?} does not match architecture {:?}",
                    shape,
                    p.value.shape()
                )));
            }
            let n = p.value.len();
            let chunk = data
                .get(offset..offset + n)
                .ok_or_else(|| LookError::Checkpoint("weight data truncated".into()))?;
            for (dst, src) in p.value.iter_mut().zip(chunk) {
                *dst = *src;
            }
            offset += n;
        }
        if offset != data.len() {
            return Err(LookError::Checkpoint("trailing weight data".into()));
        }
        Ok(())
    }
}

impl Layer for Sequential {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for layer in &self.layers {
            out = layer.forward(&out);
        }
        out
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for layer in &mut self.layers {
            out = layer.forward_train(&out);
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for p in params {
            if !p.trainable {
                continue;
            }
            let Param {
                value, grad, m, v, ..
            } = p;
            ndarray::Zip::from(value)
                .and(&*grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stack equally shaped CHW samples into one NCHW batch.
pub fn stack(samples: &[ndarray::Array3<f32>]) -> Tensor {
    let views: Vec<_> = samples.iter().map(|s| s.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).expect("samples share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite-difference check of a layer's input gradient under L = Σ w·y.
    pub(crate) fn check_input_grad(layer: &mut dyn Layer, x: &Tensor, tol: f32) {
        let y = layer.forward_train(x);
        let mut rng = seeded_rng(7);
        let w: Tensor = Array4::from_shape_fn(y.raw_dim(), |_| {
            Normal::new(0.0f32, 1.0).unwrap().sample(&mut rng)
        });
        let gx = layer.backward(&w);
        let h = 1e-2f32;
        for idx in [0usize, x.len() / 3, x.len() / 2, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let lp = (&layer.forward_train(&xp) * &w).sum();
            let lm = (&layer.forward_train(&xm) * &w).sum();
            let fd = (lp - lm) / (2.0 * h);
            let an = gx.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs()),
                "idx {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn random_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let n = Normal::new(0.0f32, 1.0).unwrap();
        Array4::from_shape_fn(shape, |_| n.sample(&mut rng))
    }

    #[test]
    fn sequential_gradients_match_finite_differences() {
        let mut rng = seeded_rng(1);
        let mut net = Sequential::new()
            .with(Conv2d::new(2, 3, 3, 2, 1, true, &mut rng))
            .with(Relu::default())
            .with(ConvTranspose2d::new(3, 2, 4, 2, 1, &mut rng))
            .with(GlobalAvgPool::default())
            .with(Linear::new(2, 3, &mut rng));
        let x = random_tensor((2, 2, 6, 4), 3);
        check_input_grad(&mut net, &x, 2e-2);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = seeded_rng(12);
        let mut net = Sequential::new()
            .with(Conv2d::new(2, 3, 3, 2, 1, false, &mut rng))
            .with(BatchNorm2d::new(3))
            .with(Relu::default())
            .with(Residual::basic(3, 4, 1, &mut rng))
            .with(ConvTranspose2d::new(4, 2, 4, 2, 1, &mut rng))
            .with(BatchNorm2d::new(2))
            .with(Conv2d::new(2, 3, 1, 1, 0, true, &mut rng));
        let x = random_tensor((3, 2, 6, 4), 5);
        let y = net.forward_train(&x);
        let w = random_tensor(y.dim(), 6);
        net.zero_grad();
        net.backward(&w);
        let grads: Vec<Vec<f32>> = net.params().iter().map(|p| p.grad.iter().copied().collect()).collect();
        let trainable: Vec<bool> = net.params().iter().map(|p| p.trainable).collect();
        // Small step: a coarse one crosses ReLU kinks when shifting a whole channel.
        let h = 1e-3f32;
        for (pi, g) in grads.iter().enumerate() {
            if !trainable[pi] {
                continue;
            }
            for idx in [0, g.len() / 2, g.len() - 1] {
                let mut eval = |delta: f32| {
                    net.params_mut()[pi].value.as_slice_mut().unwrap()[idx] += delta;
                    let l = (&net.forward_train(&x) * &w).sum();
                    net.params_mut()[pi].value.as_slice_mut().unwrap()[idx] -= delta;
                    l
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - g[idx]).abs() <= 3e-2 * (1.0 + fd.abs()), "param {pi}[{idx}]: fd {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = Param::filled(&[3], 5.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.grad = p.value.mapv(|w| 2.0 * (w - 1.0));
            opt.step(vec![&mut p]);
        }
        for w in p.value.iter() {
            assert!((w - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn weights_round_trip_through_export() {
        let mut rng = seeded_rng(2);
        let a = Sequential::new()
            .with(Conv2d::new(1, 2, 3, 1, 1, false, &mut rng))
            .with(BatchNorm2d::new(2));
        let mut b = Sequential::new()
            .with(Conv2d::new(1, 2, 3, 1, 1, false, &mut seeded_rng(9)))
            .with(BatchNorm2d::new(2));
        let (shapes, data) = a.export_weights();
        b.import_weights(&shapes, &data).unwrap();
        let x = random_tensor((1, 1, 4, 4), 5);
        assert_eq!(a.forward(&x), b.forward(&x));
        assert!(b.import_weights(&shapes, &data[1..]).is_err());
    }
}
