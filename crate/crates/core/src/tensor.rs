//! Rank-4 feature maps and the channel bookkeeping shared by every block.

use ndarray::{concatenate, s, Array4, Axis};

use crate::{Error, Result};

/// Activations laid out as `[batch, channels, height, width]`.
pub type FeatureMap = Array4<f64>;

/// Fails with [`Error::InvalidInput`] if any entry is NaN or infinite.
pub fn ensure_finite(x: &FeatureMap, what: &str) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::InvalidInput(format!(
            "{what} has a non-finite entry at flat index {i}"
        ))),
    }
}

/// Channel-wise concatenation. Either side may have zero channels.
pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    let (ba, _, ha, wa) = a.dim();
    let (bb, _, hb, wb) = b.dim();
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::Dimension(format!(
            "cannot concatenate {:?} and {:?} along channels",
            a.dim(),
            b.dim()
        )));
    }
    Ok(concatenate(Axis(1), &[a.view(), b.view()]).expect("shapes checked above"))
}

/// Splits off the first `leading` channels. `leading` may equal 0 or the channel count.
pub fn split_channels(x: &FeatureMap, leading: usize) -> (FeatureMap, FeatureMap) {
    let c = x.dim().1;
    assert!(leading <= c, "split point {leading} beyond {c} channels");
    (
        x.slice(s![.., ..leading, .., ..]).to_owned(),
        x.slice(s![.., leading.., .., ..]).to_owned(),
    )
}

/// Empty-channel map used where a branch carries no features yet.
pub fn empty_like_spatial(x: &FeatureMap) -> FeatureMap {
    let (b, _, h, w) = x.dim();
    FeatureMap::zeros((b, 0, h, w))
}

pub fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
