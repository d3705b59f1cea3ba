use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::{fan_in_uniform, scoped, Mode, Module, NamedParams, Param};
use crate::{Error, Result};

/// Stride-1 square convolution with zero "same" padding (`kernel / 2`).
///
/// Weights are stored `[out, in, k, k]`. The forward pass lowers each sample
/// to a column matrix and runs one GEMM per sample.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    input: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "only odd kernels keep spatial size");
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(fan_in_uniform(
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        ));
        let bias = bias.then(|| Param::new(fan_in_uniform(&[out_channels], fan_in, rng)));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let k2 = self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * k2))
            .expect("conv weight is contiguous")
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let x = x.as_standard_layout();
        let mut out = Array4::<f64>::zeros((b, self.out_channels, h, w));
        let wm = self.weight_matrix();
        let mut col = Array2::<f64>::zeros((c * self.kernel * self.kernel, h * w));
        for bi in 0..b {
            let sample = x.index_axis(Axis(0), bi);
            let mut out_b = out.index_axis_mut(Axis(0), bi);
            let mut out_m = out_b
                .view_mut()
                .into_shape_with_order((self.out_channels, h * w))
                .expect("fresh output is contiguous");
            if self.kernel == 1 {
                let xm = sample
                    .into_shape_with_order((c, h * w))
                    .expect("standard layout");
                general_mat_mul(1.0, &wm, &xm, 0.0, &mut out_m);
            } else {
                im2col(&sample.view(), self.kernel, &mut col.view_mut());
                general_mat_mul(1.0, &wm, &col, 0.0, &mut out_m);
            }
            if let Some(bias) = &self.bias {
                for (mut row, &bv) in out_m.outer_iter_mut().zip(bias.value.iter()) {
                    row += bv;
                }
            }
        }
        if mode == Mode::Train {
            self.input = Some(x.into_owned());
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let x = self
            .input
            .as_ref()
            .expect("conv backward without a training forward pass");
        let (b, c, h, w) = x.dim();
        let k2 = self.kernel * self.kernel;
        let grad = grad.as_standard_layout();
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        let mut dw = Array2::<f64>::zeros((self.out_channels, c * k2));
        let mut col = Array2::<f64>::zeros((c * k2, h * w));
        let mut dcol = Array2::<f64>::zeros((c * k2, h * w));
        let wm = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, c * k2))
            .expect("conv weight is contiguous");
        for bi in 0..b {
            let gm = grad
                .index_axis(Axis(0), bi)
                .into_shape_with_order((self.out_channels, h * w))
                .expect("standard layout");
            let sample = x.index_axis(Axis(0), bi);
            let mut dx_b = dx.index_axis_mut(Axis(0), bi);
            if self.kernel == 1 {
                let xm = sample
                    .into_shape_with_order((c, h * w))
                    .expect("standard layout");
                general_mat_mul(1.0, &gm, &xm.t(), 1.0, &mut dw);
                let mut dxm = dx_b
                    .view_mut()
                    .into_shape_with_order((c, h * w))
                    .expect("fresh gradient is contiguous");
                general_mat_mul(1.0, &wm.t(), &gm, 0.0, &mut dxm);
            } else {
                im2col(&sample.view(), self.kernel, &mut col.view_mut());
                general_mat_mul(1.0, &gm, &col.t(), 1.0, &mut dw);
                general_mat_mul(1.0, &wm.t(), &gm, 0.0, &mut dcol);
                col2im(&dcol.view(), self.kernel, &mut dx_b);
            }
            if let Some(bias) = &mut self.bias {
                for (g, row) in bias.grad.iter_mut().zip(gm.outer_iter()) {
                    *g += row.sum();
                }
            }
        }
        let dw = dw
            .into_shape_with_order(self.weight.value.raw_dim())
            .expect("same element count");
        self.weight.grad += &dw;
        dx
    }
}

impl Module for Conv2d {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>) {
        out.push((scoped(scope, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((scoped(scope, "bias"), b));
        }
    }
}

/// Writes the `[c·k·k, h·w]` patch matrix of one `[c, h, w]` sample.
fn im2col(x: &ndarray::ArrayView3<f64>, k: usize, col: &mut ArrayViewMut2<f64>) {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (ci * k + ky) * k + kx;
                let mut row = col.row_mut(row_idx);
                let row = row.as_slice_mut().expect("column matrix rows are contiguous");
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = plane.row(sy as usize);
                    dst[..x_lo].fill(0.0);
                    dst[x_hi..].fill(0.0);
                    for xi in x_lo..x_hi {
                        dst[xi] = src[(xi as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im(col: &ArrayView2<f64>, k: usize, dx: &mut ndarray::ArrayViewMut3<f64>) {
    let (c, h, w) = dx.dim();
    let pad = (k / 2) as isize;
    for ci in 0..c {
        let mut plane = dx.index_axis_mut(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (ci * k + ky) * k + kx;
                let row = col.row(row_idx);
                let dxo = kx as isize - pad;
                let x_lo = (-dxo).max(0) as usize;
                let x_hi = ((w as isize - dxo).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let mut dst = plane.row_mut(sy as usize);
                    for xi in x_lo..x_hi {
                        dst[(xi as isize + dxo) as usize] += row[y * w + xi];
                    }
                }
            }
        }
    }
}

/// 2×2 transposed convolution with stride 2 (exact 2× upsampling).
///
/// Weights are stored `[in, out, 2, 2]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    input: Option<Array4<f64>>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = out_channels * 4;
        Self {
            weight: Param::new(fan_in_uniform(&[in_channels, out_channels, 2, 2], fan_in, rng)),
            bias: Param::new(fan_in_uniform(&[out_channels], fan_in, rng)),
            in_channels,
            out_channels,
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let x = x.as_standard_layout();
        let co = self.out_channels;
        let wm = self
            .weight
            .value
            .view()
            .into_shape_with_order((c, co * 4))
            .expect("weight is contiguous");
        let mut out = Array4::<f64>::zeros((b, co, 2 * h, 2 * w));
        let mut y = Array2::<f64>::zeros((co * 4, h * w));
        for bi in 0..b {
            let xm = x
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c, h * w))
                .expect("standard layout");
            general_mat_mul(1.0, &wm.t(), &xm, 0.0, &mut y);
            for o in 0..co {
                let bias = self.bias.value[o];
                for d in 0..4 {
                    let (di, dj) = (d / 2, d % 2);
                    let src = y.row(o * 4 + d);
                    let mut dst = out.slice_mut(s![bi, o, di..;2, dj..;2]);
                    for ((i, j), v) in dst.indexed_iter_mut() {
                        *v = src[i * w + j] + bias;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.input = Some(x.into_owned());
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let x = self
            .input
            .as_ref()
            .expect("transposed conv backward without a training forward pass");
        let (b, c, h, w) = x.dim();
        let co = self.out_channels;
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        let mut dw = Array2::<f64>::zeros((c, co * 4));
        let mut g = Array2::<f64>::zeros((co * 4, h * w));
        let wm = self
            .weight
            .value
            .view()
            .into_shape_with_order((c, co * 4))
            .expect("weight is contiguous");
        for bi in 0..b {
            for o in 0..co {
                let mut bias_acc = 0.0;
                for d in 0..4 {
                    let (di, dj) = (d / 2, d % 2);
                    let src = grad.slice(s![bi, o, di..;2, dj..;2]);
                    let mut dst = g.row_mut(o * 4 + d);
                    for ((i, j), &v) in src.indexed_iter() {
                        dst[i * w + j] = v;
                        bias_acc += v;
                    }
                }
                self.bias.grad[o] += bias_acc;
            }
            let xm = x
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c, h * w))
                .expect("standard layout");
            general_mat_mul(1.0, &xm, &g.t(), 1.0, &mut dw);
            let mut dxm = dx
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((c, h * w))
                .expect("fresh gradient is contiguous");
            general_mat_mul(1.0, &wm, &g, 0.0, &mut dxm);
        }
        let dw = dw
            .into_shape_with_order(self.weight.value.raw_dim())
            .expect("same element count");
        self.weight.grad += &dw;
        dx
    }
}

impl Module for ConvTranspose2d {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>) {
        out.push((scoped(scope, "weight"), &mut self.weight));
        out.push((scoped(scope, "bias"), &mut self.bias));
    }
}

/// Reads a parameter back as a rank-4 view.
#[cfg(test)]
pub(crate) fn as4(p: &Param) -> ndarray::ArrayView4<'_, f64> {
    p.value
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank-4 parameter")
}
