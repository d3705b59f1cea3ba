use ndarray::{Array4, Zip};

use super::Mode;

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Array4<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        if mode == Mode::Train {
            self.mask = Some(x.mapv(|v| v > 0.0));
        }
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let mask = self
            .mask
            .as_ref()
            .expect("relu backward without a training forward pass");
        let mut out = grad.clone();
        Zip::from(&mut out).and(mask).for_each(|g, &m| {
            if !m {
                *g = 0.0;
            }
        });
        out
    }
}
