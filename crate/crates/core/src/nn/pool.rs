use ndarray::Array4;

use super::Mode;
use crate::{Error, Result};

/// 2×2 max pooling with stride 2.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    // Flat in-plane offset of the winning element per output cell.
    argmax: Option<Array4<u8>>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "2x max pooling needs even spatial dims, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::zeros((b, c, ho, wo));
        let mut arg = Array4::<u8>::zeros((b, c, ho, wo));
        for bi in 0..b {
            for ci in 0..c {
                let plane = x.slice(ndarray::s![bi, ci, .., ..]);
                for i in 0..ho {
                    for j in 0..wo {
                        let cand = [
                            plane[[2 * i, 2 * j]],
                            plane[[2 * i, 2 * j + 1]],
                            plane[[2 * i + 1, 2 * j]],
                            plane[[2 * i + 1, 2 * j + 1]],
                        ];
                        let mut best = 0;
                        for k in 1..4 {
                            if cand[k] > cand[best] {
                                best = k;
                            }
                        }
                        out[[bi, ci, i, j]] = cand[best];
                        arg[[bi, ci, i, j]] = best as u8;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.argmax = Some(arg);
            self.input_dim = (b, c, h, w);
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let arg = self
            .argmax
            .as_ref()
            .expect("max-pool backward without a training forward pass");
        let mut dx = Array4::zeros(self.input_dim);
        for ((bi, ci, i, j), &k) in arg.indexed_iter() {
            let (di, dj) = ((k / 2) as usize, (k % 2) as usize);
            dx[[bi, ci, 2 * i + di, 2 * j + dj]] = grad[[bi, ci, i, j]];
        }
        dx
    }
}
