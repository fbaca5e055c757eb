//! Layer implementations. Forward caches whatever backward needs; backward
//! returns the input gradient and accumulates parameter gradients.

use super::{InitRng, ParamId, ParamSet, Tensor};
use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis};

/// 2-D convolution, stride 1, same padding, via im2col and matrix multiply.
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    cache_x: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut InitRng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = ArrayD::from_shape_fn(
            ndarray::IxDyn(&[out_channels, in_channels, kernel, kernel]),
            |_| rng.normal(std),
        );
        let weight = params.register(&format!("{name}.weight"), w, true);
        let bias = bias.then(|| {
            params.register(
                &format!("{name}.bias"),
                ArrayD::zeros(ndarray::IxDyn(&[out_channels])),
                true,
            )
        });
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            cache_x: None,
        }
    }

    fn im2col(&self, x: &Tensor, n: usize) -> Array2<f32> {
        let (_, c, h, w) = x.dim();
        let k = self.kernel;
        let pad = k / 2;
        let mut col = Array2::<f32>::zeros((c * k * k, h * w));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * k * k + ky * k + kx;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            col[[row, y * w + xx]] = x[[n, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, gcol: &Array2<f32>, gx: &mut Tensor, n: usize) {
        let (_, c, h, w) = gx.dim();
        let k = self.kernel;
        let pad = k / 2;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * k * k + ky * k + kx;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            gx[[n, ci, sy as usize, sx as usize]] += gcol[[row, y * w + xx]];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, params: &ParamSet, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels);
        let k = self.kernel;
        let wmat = params
            .value(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, c * k * k))
            .unwrap()
            .to_owned();
        let mut y = Array4::<f32>::zeros((n, self.out_channels, h, w));
        for ni in 0..n {
            let col = self.im2col(x, ni);
            let out = wmat.dot(&col); // (Cout, H*W)
            let mut dst = y.slice_mut(s![ni, .., .., ..]);
            dst.assign(
                &out.into_shape_with_order((self.out_channels, h, w))
                    .unwrap(),
            );
        }
        if let Some(bid) = self.bias {
            let b = params.value(bid).view().into_shape_with_order(self.out_channels).unwrap().to_owned();
            for co in 0..self.out_channels {
                y.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + b[co]);
            }
        }
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, params: &mut ParamSet, gy: &Tensor) -> Tensor {
        let x = self.cache_x.take().expect("forward before backward");
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        let wmat = params
            .value(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, c * k * k))
            .unwrap()
            .to_owned();
        let mut gw = Array2::<f32>::zeros((self.out_channels, c * k * k));
        let mut gx = Array4::<f32>::zeros((n, c, h, w));
        for ni in 0..n {
            let col = self.im2col(&x, ni);
            let gy_mat = gy
                .slice(s![ni, .., .., ..])
                .into_shape_with_order((self.out_channels, h * w))
                .unwrap()
                .to_owned();
            gw += &gy_mat.dot(&col.t());
            let gcol = wmat.t().dot(&gy_mat);
            self.col2im(&gcol, &mut gx, ni);
        }
        {
            let g = params.grad_mut(self.weight);
            let gw = gw
                .into_shape_with_order(ndarray::IxDyn(&[self.out_channels, c, k, k]))
                .unwrap();
            *g += &gw;
        }
        if let Some(bid) = self.bias {
            let gb: Array1<f32> = (0..self.out_channels)
                .map(|co| gy.slice(s![.., co, .., ..]).sum())
                .collect();
            let g = params.grad_mut(bid);
            *g += &gb.into_shape_with_order(ndarray::IxDyn(&[self.out_channels])).unwrap();
        }
        gx
    }
}

/// Batch normalization over (N, H, W) per channel.
///
/// Running statistics live in the parameter store as non-trainable entries so
/// they serialize and transfer with the weights. When `frozen` (or in eval
/// mode) the running statistics are used and never updated.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub frozen: bool,
    channels: usize,
    momentum: f32,
    eps: f32,
    cache: Option<BnCache>,
}

struct BnCache {
    x_hat: Tensor,
    inv_std: Array1<f32>,
    used_batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let ones = ArrayD::from_elem(ndarray::IxDyn(&[channels]), 1.0f32);
        let zeros = ArrayD::zeros(ndarray::IxDyn(&[channels]));
        Self {
            gamma: params.register(&format!("{name}.gamma"), ones.clone(), true),
            beta: params.register(&format!("{name}.beta"), zeros.clone(), true),
            running_mean: params.register(&format!("{name}.running_mean"), zeros, false),
            running_var: params.register(&format!("{name}.running_var"), ones, false),
            frozen: false,
            channels,
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, params: &mut ParamSet, x: &Tensor, training: bool) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let use_batch = training && !self.frozen;
        let count = (n * h * w) as f32;
        let (mean, var): (Array1<f32>, Array1<f32>) = if use_batch {
            let mean: Array1<f32> = (0..c)
                .map(|ci| x.slice(s![.., ci, .., ..]).sum() / count)
                .collect();
            let var: Array1<f32> = (0..c)
                .map(|ci| {
                    let m = mean[ci];
                    x.slice(s![.., ci, .., ..])
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<f32>()
                        / count
                })
                .collect();
            // Update running statistics.
            let momentum = self.momentum;
            {
                let rm = params.value_mut(self.running_mean);
                for ci in 0..c {
                    rm[ci] = (1.0 - momentum) * rm[ci] + momentum * mean[ci];
                }
            }
            {
                let rv = params.value_mut(self.running_var);
                for ci in 0..c {
                    rv[ci] = (1.0 - momentum) * rv[ci] + momentum * var[ci];
                }
            }
            (mean, var)
        } else {
            let rm = params.value(self.running_mean);
            let rv = params.value(self.running_var);
            (
                (0..c).map(|ci| rm[ci]).collect(),
                (0..c).map(|ci| rv[ci]).collect(),
            )
        };
        let inv_std: Array1<f32> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = params.value(self.gamma).clone();
        let beta = params.value(self.beta).clone();
        let mut x_hat = x.clone();
        for ci in 0..c {
            let (m, is) = (mean[ci], inv_std[ci]);
            x_hat
                .slice_mut(s![.., ci, .., ..])
                .mapv_inplace(|v| (v - m) * is);
        }
        let mut y = x_hat.clone();
        for ci in 0..c {
            let (g, b) = (gamma[ci], beta[ci]);
            y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| g * v + b);
        }
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            used_batch_stats: use_batch,
        });
        y
    }

    pub fn backward(&mut self, params: &mut ParamSet, gy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("forward before backward");
        let (n, c, h, w) = gy.dim();
        let count = (n * h * w) as f32;
        let gamma = params.value(self.gamma).clone();
        let mut gx = Array4::<f32>::zeros(gy.dim());
        let mut ggamma = Array1::<f32>::zeros(c);
        let mut gbeta = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let xh = cache.x_hat.slice(s![.., ci, .., ..]);
            let g = gy.slice(s![.., ci, .., ..]);
            let sum_g: f32 = g.sum();
            let sum_gx: f32 = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            ggamma[ci] = sum_gx;
            gbeta[ci] = sum_g;
            let scale = gamma[ci] * cache.inv_std[ci];
            let mut dst = gx.slice_mut(s![.., ci, .., ..]);
            if cache.used_batch_stats {
                ndarray::Zip::from(&mut dst).and(&g).and(&xh).for_each(|d, &gv, &xv| {
                    *d = scale * (gv - sum_g / count - xv * sum_gx / count);
                });
            } else {
                ndarray::Zip::from(&mut dst).and(&g).for_each(|d, &gv| {
                    *d = scale * gv;
                });
            }
        }
        {
            let g = params.grad_mut(self.gamma);
            *g += &ggamma.into_shape_with_order(ndarray::IxDyn(&[c])).unwrap();
        }
        {
            let g = params.grad_mut(self.beta);
            *g += &gbeta.into_shape_with_order(ndarray::IxDyn(&[c])).unwrap();
        }
        gx
    }
}

pub struct ReLU {
    mask: Option<Tensor>,
}

impl ReLU {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.mapv(|v| v.max(0.0));
        self.mask = Some(x.mapv(|v| (v > 0.0) as u8 as f32));
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("forward before backward");
        gy * &mask
    }
}

impl Default for ReLU {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Sigmoid {
    out: Option<Tensor>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Self { out: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let y = self.out.take().expect("forward before backward");
        gy * &y.mapv(|v| v * (1.0 - v))
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

/// Clamp to [0,1]; the gradient passes only where the input was interior.
pub struct ClampUnit {
    mask: Option<Tensor>,
}

impl ClampUnit {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.mapv(|v| (v > 0.0 && v < 1.0) as u8 as f32));
        x.mapv(|v| v.clamp(0.0, 1.0))
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("forward before backward");
        gy * &mask
    }
}

impl Default for ClampUnit {
    fn default() -> Self {
        Self::new()
    }
}

/// 2x2 average pooling, stride 2.
pub struct AvgPool2 {
    in_shape: Option<(usize, usize, usize, usize)>,
}

impl AvgPool2 {
    pub fn new() -> Self {
        Self { in_shape: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dims");
        self.in_shape = Some((n, c, h, w));
        let mut y = Array4::<f32>::zeros((n, c, h / 2, w / 2));
        for ni in 0..n {
            for ci in 0..c {
                for yy in 0..h / 2 {
                    for xx in 0..w / 2 {
                        y[[ni, ci, yy, xx]] = 0.25
                            * (x[[ni, ci, 2 * yy, 2 * xx]]
                                + x[[ni, ci, 2 * yy, 2 * xx + 1]]
                                + x[[ni, ci, 2 * yy + 1, 2 * xx]]
                                + x[[ni, ci, 2 * yy + 1, 2 * xx + 1]]);
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (n, c, h, w) = self.in_shape.take().expect("forward before backward");
        let mut gx = Array4::<f32>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for yy in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let g = 0.25 * gy[[ni, ci, yy, xx]];
                        gx[[ni, ci, 2 * yy, 2 * xx]] = g;
                        gx[[ni, ci, 2 * yy, 2 * xx + 1]] = g;
                        gx[[ni, ci, 2 * yy + 1, 2 * xx]] = g;
                        gx[[ni, ci, 2 * yy + 1, 2 * xx + 1]] = g;
                    }
                }
            }
        }
        gx
    }
}

impl Default for AvgPool2 {
    fn default() -> Self {
        Self::new()
    }
}

/// 2x nearest-neighbor upsampling.
pub struct UpsampleNearest2;

impl UpsampleNearest2 {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        let mut y = Array4::<f32>::zeros((n, c, h * 2, w * 2));
        for ni in 0..n {
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        let v = x[[ni, ci, yy, xx]];
                        y[[ni, ci, 2 * yy, 2 * xx]] = v;
                        y[[ni, ci, 2 * yy, 2 * xx + 1]] = v;
                        y[[ni, ci, 2 * yy + 1, 2 * xx]] = v;
                        y[[ni, ci, 2 * yy + 1, 2 * xx + 1]] = v;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (n, c, h2, w2) = gy.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut gx = Array4::<f32>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        gx[[ni, ci, yy, xx]] = gy[[ni, ci, 2 * yy, 2 * xx]]
                            + gy[[ni, ci, 2 * yy, 2 * xx + 1]]
                            + gy[[ni, ci, 2 * yy + 1, 2 * xx]]
                            + gy[[ni, ci, 2 * yy + 1, 2 * xx + 1]];
                    }
                }
            }
        }
        gx
    }
}

/// Channel concatenation of two tensors of equal spatial size.
pub struct Concat2 {
    split: Option<usize>,
}

impl Concat2 {
    pub fn new() -> Self {
        Self { split: None }
    }

    pub fn forward(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.split = Some(a.dim().1);
        ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap()
    }

    pub fn backward(&mut self, gy: &Tensor) -> (Tensor, Tensor) {
        let split = self.split.take().expect("forward before backward");
        let ga = gy.slice(s![.., ..split, .., ..]).to_owned();
        let gb = gy.slice(s![.., split.., .., ..]).to_owned();
        (ga, gb)
    }
}

impl Default for Concat2 {
    fn default() -> Self {
        Self::new()
    }
}
