//! Central finite-difference check of every parameter tensor's gradient.

use ndarray::Array3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::losses::{combo_loss_with_grad, total_loss, softmax, LossConfig};
use crate::model::{ModelConfig, SegmentationModel};
use crate::nn::{Mode, Module, Param};
use crate::{Error, FeatureMap, Result, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    pub seed: u64,
    pub batch: usize,
    /// Entries sampled per parameter tensor.
    pub samples_per_tensor: usize,
    /// Largest central-difference step. An entry whose error exceeds a tenth
    /// of the tolerance is retried with steps shrunk tenfold, `refinements`
    /// times, keeping the smallest error.
    pub step: f64,
    pub refinements: usize,
    pub tolerance: f64,
    /// Gradients below this magnitude on both sides are compared absolutely.
    pub abs_floor: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 2,
            samples_per_tensor: 3,
            step: 1e-3,
            refinements: 3,
            tolerance: 1e-2,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub name: String,
    pub samples: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub layers: Vec<LayerAudit>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &LayerAudit> {
        self.layers
            .iter()
            .filter(move |l| l.max_rel_error > self.tolerance)
    }

    /// Fails naming the worst layer if any exceeds the tolerance.
    pub fn check(&self) -> Result<()> {
        match self
            .failures()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        {
            None => Ok(()),
            Some(l) => Err(Error::Audit {
                layer: l.name.clone(),
                rel_error: l.max_rel_error,
                tolerance: self.tolerance,
            }),
        }
    }
}

/// `|a − n| / max(|a|, |n|)`, or the plain difference when both are tiny.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < abs_floor {
        (analytic - numeric).abs() / abs_floor
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn loss_at(model: &mut SegmentationModel, x: &FeatureMap, y: &Array3<u8>, cfg: &LossConfig) -> Result<f64> {
    let logits = model.forward(x, Mode::Train)?;
    Ok(total_loss(y, &softmax(&logits), cfg)?.total)
}

/// Checks analytic gradients of the combo loss against central differences.
/// `corrupt` may tamper with the analytic gradients before comparison.
pub fn audit_gradients_with(
    model_cfg: &ModelConfig,
    opts: &AuditOptions,
    corrupt: &dyn Fn(&str, &mut Param),
) -> Result<AuditReport> {
    let mut model = SegmentationModel::from_seed(model_cfg.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    let (h, w) = model_cfg.input_size;
    let x = FeatureMap::from_shape_simple_fn((opts.batch, 1, h, w), || rng.sample(StandardNormal));
    let classes = model_cfg.num_classes.min(NUM_CLASSES) as u8;
    let y = Array3::from_shape_simple_fn((opts.batch, h, w), || rng.random_range(0..classes));
    let loss_cfg = LossConfig::default();

    model.zero_grad();
    let logits = model.forward(&x, Mode::Train)?;
    let (_, grad) = combo_loss_with_grad(&logits, &y, &loss_cfg)?;
    model.backward(&grad);

    // (name, flat index, analytic gradient) for every sampled entry.
    let mut picks: Vec<(String, usize, f64)> = Vec::new();
    {
        let mut params = Vec::new();
        model.params("", &mut params);
        for (name, p) in params {
            corrupt(&name, p);
            let n = p.len();
            let k = opts.samples_per_tensor.min(n);
            let mut chosen: Vec<usize> = Vec::with_capacity(k);
            while chosen.len() < k {
                let i = rng.random_range(0..n);
                if !chosen.contains(&i) {
                    chosen.push(i);
                }
            }
            for i in chosen {
                let g = p.grad.as_slice().expect("contiguous gradient")[i];
                picks.push((name.clone(), i, g));
            }
        }
    }

    let mut layers: Vec<LayerAudit> = Vec::new();
    for (name, idx, analytic) in picks {
        let perturb = |model: &mut SegmentationModel, delta: f64| {
            let mut params = Vec::new();
            model.params("", &mut params);
            let (_, p) = params
                .into_iter()
                .find(|(n, _)| *n == name)
                .expect("sampled name exists");
            p.value.as_slice_mut().expect("contiguous weights")[idx] += delta;
        };
        // A ReLU or max-pool switch inside the stencil corrupts large steps
        // only; a wrong analytic gradient disagrees at every step.
        let mut err = f64::INFINITY;
        let mut step = opts.step;
        for _ in 0..=opts.refinements {
            perturb(&mut model, step);
            let plus = loss_at(&mut model, &x, &y, &loss_cfg)?;
            perturb(&mut model, -2.0 * step);
            let minus = loss_at(&mut model, &x, &y, &loss_cfg)?;
            perturb(&mut model, step);
            let numeric = (plus - minus) / (2.0 * step);
            err = err.min(relative_error(analytic, numeric, opts.abs_floor));
            if err <= 0.1 * opts.tolerance {
                break;
            }
            step /= 10.0;
        }
        match layers.last_mut() {
            Some(l) if l.name == name => {
                l.samples += 1;
                l.max_rel_error = l.max_rel_error.max(err);
            }
            _ => layers.push(LayerAudit {
                name,
                samples: 1,
                max_rel_error: err,
            }),
        }
    }

    let max_rel_error = layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    Ok(AuditReport {
        layers,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

pub fn audit_gradients(model_cfg: &ModelConfig, opts: &AuditOptions) -> Result<AuditReport> {
    audit_gradients_with(model_cfg, opts, &|_, _| {})
}

/// Runs the audit and fails with [`Error::Audit`] naming the worst layer.
pub fn gradient_audit(model_cfg: &ModelConfig, opts: &AuditOptions) -> Result<AuditReport> {
    let report = audit_gradients(model_cfg, opts)?;
    report.check()?;
    Ok(report)
}
