use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Ix2};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Param, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Output columns `[lo, hi)` whose kernel tap `kj` lands inside the input row.
fn valid_columns(kj: usize, g: Geometry) -> (usize, usize) {
    let lo = if kj >= g.pad { 0 } else { (g.pad - kj).div_ceil(g.stride) };
    let hi = if g.width + g.pad > kj {
        ((g.width + g.pad - kj - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo, hi)
}

/// Unfold a CHW image into a `(C*k*k, out_h*out_w)` column matrix.
fn im2col(x: &[f32], g: Geometry) -> Vec<f32> {
    let plane = g.out_h * g.out_w;
    let mut cols = vec![0.0f32; g.channels * g.kernel * g.kernel * plane];
    im2col_into(x, g, &mut cols, plane);
    cols
}

/// Like [`im2col`], writing into a wider matrix whose rows are `ld` apart.
/// `cols` must start at this image's first column and be zeroed.
fn im2col_into(x: &[f32], g: Geometry, cols: &mut [f32], ld: usize) {
    let Geometry {
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
        out_h,
        out_w,
    } = g;
    let plane = out_h * out_w;
    for c in 0..channels {
        let src = &x[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let dst = &mut cols[row * ld..row * ld + plane];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * width..(iy as usize + 1) * width];
                    let (lo, hi) = valid_columns(kj, g);
                    if lo >= hi {
                        continue;
                    }
                    let dst_row = &mut dst[oy * out_w + lo..oy * out_w + hi];
                    let first = lo * stride + kj - pad;
                    if stride == 1 {
                        dst_row.copy_from_slice(&src_row[first..first + (hi - lo)]);
                    } else {
                        for (d, s) in dst_row.iter_mut().zip(src_row[first..].iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatter-add columns back into a CHW image.
fn col2im(cols: &[f32], g: Geometry, ld: usize, out: &mut [f32]) {
    let Geometry {
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
        out_h,
        out_w,
    } = g;
    let plane = out_h * out_w;
    for c in 0..channels {
        let dst = &mut out[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let src = &cols[row * ld..row * ld + plane];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * width..(iy as usize + 1) * width];
                    let (lo, hi) = valid_columns(kj, g);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * stride + kj - pad;
                    let src_row = &src[oy * out_w + lo..oy * out_w + hi];
                    for (d, s) in dst_row[first..].iter_mut().step_by(stride).zip(src_row) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Transposes `(a, b, plane)` blocks into `(b, a, plane)`.
fn swap_outer(src: &[f32], dst: &mut [f32], a: usize, b: usize, plane: usize) {
    for i in 0..a {
        for j in 0..b {
            let from = (i * b + j) * plane;
            let to = (j * a + i) * plane;
            dst[to..to + plane].copy_from_slice(&src[from..from + plane]);
        }
    }
}

fn contiguous(x: &Tensor) -> std::borrow::Cow<'_, [f32]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// 2-D convolution with square kernels.
pub struct Conv2d {
    weight: Param,
    bias: Option<Param>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<f32>, [usize; 4])>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Param::he(&[out_ch, fan_in], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[out_ch])),
            in_ch,
            out_ch,
            kernel,
            stride: stride.max(1),
            pad,
            cache: None,
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let out_h = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let out_w = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        Geometry {
            channels: self.in_ch,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            out_h,
            out_w,
        }
    }

    /// One GEMM for the whole batch: columns of every image side by side.
    fn run(&self, x: &Tensor, keep: Option<&mut Vec<f32>>) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let g = self.geometry(h, w);
        let plane = g.out_h * g.out_w;
        let ld = n * plane;
        let data = contiguous(x);
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let ckk = c * self.kernel * self.kernel;
        let mut cols = vec![0.0f32; ckk * ld];
        for i in 0..n {
            im2col_into(&data[i * c * h * w..(i + 1) * c * h * w], g, &mut cols[i * plane..], ld);
        }
        let cols_view = ArrayView2::from_shape((ckk, ld), &cols).unwrap();
        let mut y = Array2::<f32>::zeros((self.out_ch, ld));
        general_mat_mul(1.0, &weight, &cols_view, 0.0, &mut y);
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y.rows_mut().into_iter().zip(b.value.iter()) {
                row += bv;
            }
        }
        if let Some(k) = keep {
            *k = cols;
        }
        let mut out = Array4::<f32>::zeros((n, self.out_ch, g.out_h, g.out_w));
        swap_outer(y.as_slice().unwrap(), out.as_slice_mut().unwrap(), self.out_ch, n, plane);
        out
    }
}

impl Layer for Conv2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x, None)
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut cols = Vec::new();
        let y = self.run(x, Some(&mut cols));
        let (n, c, h, w) = x.dim();
        self.cache = Some((cols, [n, c, h, w]));
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (cols, [n, c, h, w]) = self.cache.take().expect("forward_train before backward");
        let g = self.geometry(h, w);
        let plane = g.out_h * g.out_w;
        let ld = n * plane;
        let ckk = c * self.kernel * self.kernel;
        let mut gy = Array2::<f32>::zeros((self.out_ch, ld));
        swap_outer(&contiguous(grad), gy.as_slice_mut().unwrap(), n, self.out_ch, plane);
        let cols_view = ArrayView2::from_shape((ckk, ld), &cols).unwrap();
        let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        general_mat_mul(1.0, &gy, &cols_view.t(), 1.0, &mut dw);
        if let Some(b) = &mut self.bias {
            for (gb, row) in b.grad.iter_mut().zip(gy.rows()) {
                *gb += row.sum();
            }
        }
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut dcols = Array2::<f32>::zeros((ckk, ld));
        general_mat_mul(1.0, &weight.t(), &gy, 0.0, &mut dcols);
        let dcols = dcols.as_slice().unwrap();
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let dx_slice = dx.as_slice_mut().unwrap();
        for i in 0..n {
            col2im(&dcols[i * plane..], g, ld, &mut dx_slice[i * c * h * w..(i + 1) * c * h * w]);
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

/// Transposed ("deconvolution") layer; output size is `(H-1)*stride - 2*pad + kernel`.
pub struct ConvTranspose2d {
    weight: Param,
    bias: Param,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel / (stride * stride).max(1);
        ConvTranspose2d {
            weight: Param::he(&[in_ch, out_ch * kernel * kernel], fan_in, rng),
            bias: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride: stride.max(1),
            pad,
            cache: None,
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let out_h = (h - 1) * self.stride + self.kernel - 2 * self.pad;
        let out_w = (w - 1) * self.stride + self.kernel - 2 * self.pad;
        // Seen from the output side, this is a convolution producing h x w positions.
        Geometry {
            channels: self.out_ch,
            height: out_h,
            width: out_w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            out_h: h,
            out_w: w,
        }
    }
}

impl Layer for ConvTranspose2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "deconv input channels");
        let g = self.geometry(h, w);
        let data = contiguous(x);
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let kk = self.out_ch * self.kernel * self.kernel;
        let mut out = Array4::<f32>::zeros((n, self.out_ch, g.height, g.width));
        let mut cols = Array2::<f32>::zeros((kk, h * w));
        for i in 0..n {
            let xi = ArrayView2::from_shape((c, h * w), &data[i * c * h * w..(i + 1) * c * h * w])
                .unwrap();
            general_mat_mul(1.0, &weight.t(), &xi, 0.0, &mut cols);
            let mut yi = out.index_axis_mut(ndarray::Axis(0), i);
            col2im(cols.as_slice().unwrap(), g, h * w, yi.as_slice_mut().unwrap());
            for (mut plane, &b) in yi.outer_iter_mut().zip(self.bias.value.iter()) {
                plane += b;
            }
        }
        out
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("forward_train before backward");
        let (n, c, h, w) = x.dim();
        let g = self.geometry(h, w);
        let kk = self.out_ch * self.kernel * self.kernel;
        let xdata = contiguous(&x);
        let gdata = contiguous(grad);
        let out_len = self.out_ch * g.height * g.width;
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        for i in 0..n {
            let gi = &gdata[i * out_len..(i + 1) * out_len];
            for (b, plane) in self
                .bias
                .grad
                .iter_mut()
                .zip(gi.chunks(g.height * g.width))
            {
                *b += plane.iter().sum::<f32>();
            }
            let gcols = im2col(gi, g);
            let gcols = ArrayView2::from_shape((kk, h * w), &gcols).unwrap();
            let xi = ArrayView2::from_shape((c, h * w), &xdata[i * c * h * w..(i + 1) * c * h * w])
                .unwrap();
            general_mat_mul(1.0, &xi, &gcols.t(), 1.0, &mut dw);
            let mut dxi = dx
                .index_axis_mut(ndarray::Axis(0), i)
                .into_shape_with_order((c, h * w))
                .unwrap();
            general_mat_mul(1.0, &weight, &gcols, 0.0, &mut dxi);
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
