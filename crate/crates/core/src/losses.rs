//! Soft dice + cross-entropy combo loss with its logit gradient, and the hard
//! per-class dice / IoU evaluation metrics.

use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::TensorSet;
use crate::tensor::FeatureMap;
use crate::{Error, Result, CLASS_NAMES};

/// Probabilities are clamped here before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_dice: f64,
    pub lambda_ce: f64,
    /// Dice smoothing term.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dice: 1.0,
            lambda_ce: 1.0,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dice >= 0.0 && self.lambda_ce >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got dice={} ce={}",
                self.lambda_dice, self.lambda_ce
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Channel-wise softmax of `[B, K, H, W]` logits.
pub fn softmax(logits: &FeatureMap) -> FeatureMap {
    let mut p = logits.clone();
    for mut sample in p.outer_iter_mut() {
        let (k, h, w) = sample.dim();
        for i in 0..h {
            for j in 0..w {
                let mut max = f64::NEG_INFINITY;
                for c in 0..k {
                    max = max.max(sample[[c, i, j]]);
                }
                let mut sum = 0.0;
                for c in 0..k {
                    let e = (sample[[c, i, j]] - max).exp();
                    sample[[c, i, j]] = e;
                    sum += e;
                }
                for c in 0..k {
                    sample[[c, i, j]] /= sum;
                }
            }
        }
    }
    p
}

/// One-hot encoding of `[B, H, W]` labels into `[B, classes, H, W]`.
pub fn one_hot(labels: &Array3<u8>, classes: usize) -> Result<FeatureMap> {
    let (b, h, w) = labels.dim();
    let mut y = FeatureMap::zeros((b, classes, h, w));
    for ((bi, i, j), &l) in labels.indexed_iter() {
        if l as usize >= classes {
            return Err(Error::InvalidInput(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        y[[bi, l as usize, i, j]] = 1.0;
    }
    Ok(y)
}

fn check_same(y: &FeatureMap, y_hat: &FeatureMap) -> Result<()> {
    if y.dim() != y_hat.dim() {
        return Err(Error::Dimension(format!(
            "labels {:?} and predictions {:?} differ",
            y.dim(),
            y_hat.dim()
        )));
    }
    Ok(())
}

fn check_labels(labels: &Array3<u8>, y_hat: &FeatureMap) -> Result<()> {
    let (b, _, h, w) = y_hat.dim();
    if labels.dim() != (b, h, w) {
        return Err(Error::Dimension(format!(
            "labels {:?} do not match predictions {:?}",
            labels.dim(),
            y_hat.dim()
        )));
    }
    Ok(())
}

/// Per-(sample, class) sums `(Σ y·ŷ, Σ y + Σ ŷ)`.
fn dice_terms(y: &FeatureMap, y_hat: &FeatureMap) -> Vec<(f64, f64)> {
    let (b, k, _, _) = y.dim();
    let mut out = Vec::with_capacity(b * k);
    for bi in 0..b {
        for c in 0..k {
            let yc = y.index_axis(Axis(0), bi).index_axis_move(Axis(0), c);
            let pc = y_hat.index_axis(Axis(0), bi).index_axis_move(Axis(0), c);
            let mut inter = 0.0;
            let mut total = 0.0;
            for (a, p) in yc.iter().zip(pc.iter()) {
                inter += a * p;
                total += a + p;
            }
            out.push((inter, total));
        }
    }
    out
}

/// `1 − (2Σyŷ + ε)/(Σy + Σŷ + ε)` per sample and class, averaged over classes
/// (background included) and then over the batch.
pub fn dice_loss(y: &FeatureMap, y_hat: &FeatureMap, eps: f64) -> Result<f64> {
    check_same(y, y_hat)?;
    let terms = dice_terms(y, y_hat);
    let mean_dice =
        terms.iter().map(|&(i, t)| (2.0 * i + eps) / (t + eps)).sum::<f64>() / terms.len() as f64;
    Ok(1.0 - mean_dice)
}

/// Mean negative log-probability of the true class over all pixels.
pub fn ce_loss(labels: &Array3<u8>, y_hat: &FeatureMap) -> Result<f64> {
    check_labels(labels, y_hat)?;
    let k = y_hat.dim().1;
    let mut sum = 0.0;
    for ((bi, i, j), &l) in labels.indexed_iter() {
        if l as usize >= k {
            return Err(Error::InvalidInput(format!("label {l} out of range for {k} classes")));
        }
        sum -= y_hat[[bi, l as usize, i, j]].max(LOG_CLAMP).ln();
    }
    Ok(sum / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

/// `λ_dice · dice_loss + λ_ce · ce_loss` on probabilities.
pub fn total_loss(labels: &Array3<u8>, y_hat: &FeatureMap, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    check_labels(labels, y_hat)?;
    let y = one_hot(labels, y_hat.dim().1)?;
    let dice = dice_loss(&y, y_hat, cfg.epsilon)?;
    let ce = ce_loss(labels, y_hat)?;
    Ok(LossBreakdown {
        total: cfg.lambda_dice * dice + cfg.lambda_ce * ce,
        dice,
        ce,
    })
}

/// Combo loss of `logits` against `labels` and its gradient w.r.t. the logits.
pub fn combo_loss_with_grad(
    logits: &FeatureMap,
    labels: &Array3<u8>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, FeatureMap)> {
    let p = softmax(logits);
    let loss = total_loss(labels, &p, cfg)?;
    let y = one_hot(labels, p.dim().1)?;
    let (b, k, h, w) = p.dim();
    let n_pix = (b * h * w) as f64;
    let eps = cfg.epsilon;

    // d(loss)/d(p) for the dice term.
    let terms = dice_terms(&y, &p);
    let mut dp = FeatureMap::zeros(p.dim());
    let scale = -cfg.lambda_dice / (b * k) as f64;
    for bi in 0..b {
        for c in 0..k {
            let (inter, total) = terms[bi * k + c];
            let s = total + eps;
            let num = 2.0 * inter + eps;
            let mut lane = dp.index_axis_mut(Axis(0), bi).index_axis_move(Axis(0), c);
            let yc = y.index_axis(Axis(0), bi).index_axis_move(Axis(0), c);
            ndarray::Zip::from(&mut lane).and(&yc).for_each(|d, &t| {
                *d = scale * (2.0 * t * s - num) / (s * s);
            });
        }
    }

    // Softmax backward: dz = p ⊙ (dp − Σ_c p·dp).
    let mut grad = FeatureMap::zeros(p.dim());
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut dot = 0.0;
                for c in 0..k {
                    dot += p[[bi, c, i, j]] * dp[[bi, c, i, j]];
                }
                for c in 0..k {
                    let pc = p[[bi, c, i, j]];
                    // Cross-entropy contributes (p − y)/N directly in logit space.
                    grad[[bi, c, i, j]] = pc * (dp[[bi, c, i, j]] - dot)
                        + cfg.lambda_ce * (pc - y[[bi, c, i, j]]) / n_pix;
                }
            }
        }
    }
    Ok((loss, grad))
}

fn class_counts(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, class: u8) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut np = 0;
    let mut ng = 0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (a, b) = (p == class, g == class);
        np += a as usize;
        ng += b as usize;
        inter += (a && b) as usize;
    }
    (inter, np, ng)
}

fn check_masks(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Hard dice for one class; `None` when the class is in neither mask.
pub fn dice_score(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, class: u8) -> Result<Option<f64>> {
    check_masks(pred, gt)?;
    let (inter, np, ng) = class_counts(pred, gt, class);
    Ok((np + ng > 0).then(|| 2.0 * inter as f64 / (np + ng) as f64))
}

/// Hard IoU for one class; `None` when the class is in neither mask.
pub fn miou(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, class: u8) -> Result<Option<f64>> {
    check_masks(pred, gt)?;
    let (inter, np, ng) = class_counts(pred, gt, class);
    let union = np + ng - inter;
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    /// Mean over scans where the class is present in prediction or ground
    /// truth; `None` if it never is.
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    /// Number of scans contributing to the averages.
    pub scans: usize,
}

/// Per-class scores in table column order (ILM … Fluid).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassScore>,
    /// Mean of the defined per-class dice values (background excluded).
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub num_scans: usize,
}

impl EvalReport {
    pub fn dice(&self, name: &str) -> Option<f64> {
        self.classes.iter().find(|c| c.name == name).and_then(|c| c.dice)
    }

    pub fn iou(&self, name: &str) -> Option<f64> {
        self.classes.iter().find(|c| c.name == name).and_then(|c| c.iou)
    }

    pub fn fluid_dice(&self) -> Option<f64> {
        self.dice("Fluid")
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores `[N, H, W]` predictions against ground truth, per scan then averaged.
pub fn evaluate_predictions(pred: &Array3<u8>, gt: &Array3<u8>) -> Result<EvalReport> {
    if pred.dim() != gt.dim() {
        return Err(Error::Dimension(format!(
            "predictions {:?} and ground truth {:?} differ",
            pred.dim(),
            gt.dim()
        )));
    }
    let n = gt.dim().0;
    if n == 0 {
        return Err(Error::InvalidInput("cannot evaluate an empty set".into()));
    }
    let mut classes = Vec::with_capacity(CLASS_NAMES.len());
    for (idx, name) in CLASS_NAMES.iter().enumerate() {
        let class = idx as u8 + 1;
        let (mut dsum, mut isum, mut count) = (0.0, 0.0, 0);
        for s in 0..n {
            let (p, g) = (pred.index_axis(Axis(0), s), gt.index_axis(Axis(0), s));
            if let (Some(d), Some(i)) = (dice_score(p, g, class)?, miou(p, g, class)?) {
                dsum += d;
                isum += i;
                count += 1;
            }
        }
        let avg = |sum: f64| (count > 0).then(|| sum / count as f64);
        classes.push(ClassScore {
            name: name.to_string(),
            dice: avg(dsum),
            iou: avg(isum),
            scans: count,
        });
    }
    Ok(EvalReport {
        mean_dice: mean_defined(classes.iter().map(|c| c.dice)),
        mean_iou: mean_defined(classes.iter().map(|c| c.iou)),
        classes,
        num_scans: n,
    })
}

/// Anything that maps a batch of images `[B, 1, H, W]` to label maps `[B, H, W]`.
pub trait Segmenter {
    fn segment(&mut self, images: &FeatureMap) -> Result<Array3<u8>>;
}

impl Segmenter for crate::model::SegmentationModel {
    fn segment(&mut self, images: &FeatureMap) -> Result<Array3<u8>> {
        self.predict(images)
    }
}

/// Runs `model` over `set` in fixed order, `batch` scans at a time.
pub fn evaluate_dataset<S: Segmenter + ?Sized>(
    model: &mut S,
    set: &TensorSet,
    batch: usize,
) -> Result<EvalReport> {
    let n = set.len();
    if n == 0 {
        return Err(Error::InvalidInput("test set is empty".into()));
    }
    let batch = batch.max(1);
    let (_, h, w) = set.masks.dim();
    let mut pred = Array3::<u8>::zeros((n, h, w));
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let x = set.images.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let p = model.segment(&x)?;
        if p.dim() != (end - start, h, w) {
            return Err(Error::Dimension(format!(
                "segmenter returned {:?} for a batch of {}",
                p.dim(),
                end - start
            )));
        }
        pred.slice_mut(ndarray::s![start..end, .., ..]).assign(&p);
        start = end;
    }
    evaluate_predictions(&pred, &set.masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = FeatureMap::from_shape_fn((2, 3, 2, 2), |(b, c, i, j)| {
            (b + 2 * c) as f64 - (i * j) as f64 * 300.0
        });
        let p = softmax(&z);
        for b in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let s: f64 = (0..3).map(|c| p[[b, c, i, j]]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ce_examples() {
        let labels = Array3::<u8>::zeros((1, 3, 3));
        let uniform = FeatureMap::from_elem((1, 9, 3, 3), 1.0 / 9.0);
        assert!((ce_loss(&labels, &uniform).unwrap() - 9f64.ln()).abs() < 1e-12);
        let mut zero = FeatureMap::zeros((1, 2, 3, 3));
        zero.index_axis_mut(Axis(1), 1).fill(1.0);
        let ce = ce_loss(&labels, &zero).unwrap();
        assert!(ce.is_finite());
        assert!((ce + LOG_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn dice_score_absence_and_overlap() {
        let a = Array2::<u8>::zeros((4, 4));
        assert_eq!(dice_score(a.view(), a.view(), 3).unwrap(), None);
        assert_eq!(miou(a.view(), a.view(), 3).unwrap(), None);
        let mut b = a.clone();
        b[[0, 0]] = 3;
        assert_eq!(dice_score(a.view(), b.view(), 3).unwrap(), Some(0.0));
        assert_eq!(dice_score(b.view(), b.view(), 3).unwrap(), Some(1.0));
        assert!(dice_score(a.view(), Array2::zeros((3, 4)).view(), 1).is_err());
    }

    #[test]
    fn empty_set_is_rejected() {
        let e = Array3::<u8>::zeros((0, 4, 4));
        assert!(evaluate_predictions(&e, &e).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { epsilon: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { lambda_ce: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
