use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};

use super::{scoped, Mode, Module, NamedBuffers, NamedParams, Param};
use crate::{Error, Result};

/// Per-channel batch normalization over `(batch, height, width)`.
///
/// Training normalizes with biased batch statistics and folds the unbiased
/// variance into the running estimate; evaluation uses the running estimate.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
    cache: Option<NormCache>,
}

#[derive(Clone, Debug)]
struct NormCache {
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
            channels,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let n = (b * h * w) as f64;
        let mut out = x.to_owned();
        match mode {
            Mode::Train => {
                let mut inv_std = Array1::zeros(c);
                for ci in 0..c {
                    let mut lane = out.index_axis_mut(Axis(1), ci);
                    let mean = lane.sum() / n;
                    let var = lane.fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / n;
                    let istd = 1.0 / (var + self.eps).sqrt();
                    lane.mapv_inplace(|v| (v - mean) * istd);
                    inv_std[ci] = istd;
                    let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
                    self.running_mean[ci] =
                        (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                    self.running_var[ci] =
                        (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased;
                }
                self.cache = Some(NormCache {
                    x_hat: out.clone(),
                    inv_std,
                });
            }
            Mode::Eval => {
                for ci in 0..c {
                    let mean = self.running_mean[ci];
                    let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                    out.index_axis_mut(Axis(1), ci)
                        .mapv_inplace(|v| (v - mean) * istd);
                }
            }
        }
        for ci in 0..c {
            let (g, bt) = (self.gamma.value[ci], self.beta.value[ci]);
            out.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| g * v + bt);
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let cache = self
            .cache
            .as_ref()
            .expect("batch norm backward without a training forward pass");
        let (b, c, h, w) = grad.dim();
        let n = (b * h * w) as f64;
        let mut dx = Array4::zeros((b, c, h, w));
        for ci in 0..c {
            let g = grad.index_axis(Axis(1), ci);
            let xh = cache.x_hat.index_axis(Axis(1), ci);
            let sum_g: f64 = g.sum();
            let sum_gx: f64 = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            self.beta.grad[ci] += sum_g;
            self.gamma.grad[ci] += sum_gx;
            let scale = self.gamma.value[ci] * cache.inv_std[ci] / n;
            let mut d = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut d)
                .and(&g)
                .and(&xh)
                .for_each(|d, &gv, &xv| *d = scale * (n * gv - sum_g - xv * sum_gx));
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>) {
        out.push((scoped(scope, "gamma"), &mut self.gamma));
        out.push((scoped(scope, "beta"), &mut self.beta));
    }

    fn buffers<'a>(&'a mut self, scope: &str, out: &mut NamedBuffers<'a>) {
        out.push((scoped(scope, "running_mean"), &mut self.running_mean));
        out.push((scoped(scope, "running_var"), &mut self.running_var));
    }
}
