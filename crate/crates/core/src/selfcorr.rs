//! Coarse similarity: all-pairs self-correlation over feature cells,
//! percentile pooling of each sorted correlation row, and a learned 1x1
//! re-projection back to the backbone channel width so downstream mining
//! sees channel-compatible maps.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{GradTape, ValueId};

/// Coarse similarity feature: (B, H, W, C) map plus the pooling width it was
/// built from.
#[derive(Clone, Copy)]
pub struct CoarseFeature {
    pub map: ValueId,
    pub percentiles: usize,
}

/// features (B,H,W,C) -> correlation (B,L,L,1) -> pooled (B,H,W,K) ->
/// ReLU(conv1x1 K->C).
pub fn coarse_feature<T: Scalar>(
    tape: &mut GradTape<T>,
    features: ValueId,
    percentiles: usize,
    project_w: ValueId,
    project_b: ValueId,
) -> Result<CoarseFeature> {
    let s = tape.shape(features);
    let corr = tape.self_correlation(features)?;
    let pooled = tape.percentile_pool(corr, s.height, s.width, percentiles)?;
    let projected = tape.conv2d(pooled, project_w, Some(project_b), 1, 0)?;
    let map = tape.relu(projected)?;
    Ok(CoarseFeature {
        map,
        percentiles,
    })
}
