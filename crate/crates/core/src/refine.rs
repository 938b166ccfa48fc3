//! Doubtful-pixel extraction, adaptive fusion, and the decoder head that
//! brings the refined feature back to input resolution as 3-class logits.

use crate::error::{Error, Result};
use crate::inconsistency::{mine, MineParams};
use crate::scalar::Scalar;
use crate::selfcorr::CoarseFeature;
use crate::tape::{softmax_in_place, GradTape, ValueId};
use crate::tensor::Tensor4;

/// Decoded detection: per-pixel class labels (0 background, 1 source,
/// 2 tampered) and the probabilities they were read from.
#[derive(Clone, Debug)]
pub struct DetectionMask<T: Scalar> {
    /// Row-major over (batch, y, x).
    pub labels: Vec<u8>,
    /// (B, S, S, 3), rows sum to one.
    pub probabilities: Tensor4<T>,
}

impl<T: Scalar> DetectionMask<T> {
    /// Argmax with ties broken toward the lower class index.
    pub fn from_probabilities(probabilities: Tensor4<T>) -> Self {
        let s = probabilities.shape();
        let data = probabilities.data();
        let mut labels = Vec::with_capacity(s.cells());
        for cell in 0..s.cells() {
            let row = &data[cell * s.channels..(cell + 1) * s.channels];
            let mut best = 0usize;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
        DetectionMask {
            labels,
            probabilities,
        }
    }

    pub fn batch(&self) -> usize {
        self.probabilities.shape().batch
    }

    pub fn side(&self) -> usize {
        self.probabilities.shape().height
    }

    /// Labels of one batch item.
    pub fn item_labels(&self, b: usize) -> &[u8] {
        let pixels = self.side() * self.side();
        &self.labels[b * pixels..(b + 1) * pixels]
    }
}

/// mine(coarse, fused): the representation of where the coarse feature and
/// the fused prototypes disagree.
pub fn doubtful_regions<T: Scalar>(
    tape: &mut GradTape<T>,
    coarse: &CoarseFeature,
    fused: ValueId,
    params: &MineParams,
) -> Result<ValueId> {
    mine(tape, coarse.map, fused, params)
}

/// Gated convex combination: g = sigmoid(conv1x1(concat(coarse, doubtful))),
/// out = g*coarse + (1-g)*doubtful. Every output element lies between its
/// two inputs.
pub fn adaptive_fuse<T: Scalar>(
    tape: &mut GradTape<T>,
    coarse: &CoarseFeature,
    doubtful: ValueId,
    gate_w: ValueId,
    gate_b: ValueId,
) -> Result<ValueId> {
    let cat = tape.concat_channels(&[coarse.map, doubtful])?;
    let pre = tape.conv2d(cat, gate_w, Some(gate_b), 1, 0)?;
    let g = tape.sigmoid(pre)?;
    let keep = tape.mul(g, coarse.map)?;
    let inv = tape.one_minus(g)?;
    let add_in = tape.mul(inv, doubtful)?;
    tape.add(keep, add_in)
}

/// Decoder parameters: one 3x3 conv per upsampling block plus the final 1x1
/// logit conv.
pub struct DecoderParams {
    pub blocks: Vec<(ValueId, ValueId)>,
    pub out: (ValueId, ValueId),
}

/// Per block: nearest-neighbor 2x upsample -> conv3x3 -> ReLU; then 1x1 conv
/// to 3 logits at full input resolution.
pub fn decode_logits<T: Scalar>(
    tape: &mut GradTape<T>,
    refined: ValueId,
    params: &DecoderParams,
) -> Result<ValueId> {
    let mut cur = refined;
    for &(w, b) in &params.blocks {
        cur = tape.upsample2(cur)?;
        cur = tape.conv2d(cur, w, Some(b), 1, 1)?;
        cur = tape.relu(cur)?;
    }
    let (w, b) = params.out;
    tape.conv2d(cur, w, Some(b), 1, 0)
}

/// Softmax the logits off-tape and wrap them as a mask.
pub fn mask_from_logits<T: Scalar>(logits: &Tensor4<T>) -> Result<DetectionMask<T>> {
    let s = logits.shape();
    if s.channels < 2 {
        return Err(Error::InvalidArgument {
            op: "mask_from_logits",
            reason: format!("need class channels, got {}", s),
        });
    }
    let mut probs = logits.clone();
    probs.requires_grad = false;
    for cell in 0..s.cells() {
        softmax_in_place(&mut probs.data_mut()[cell * s.channels..(cell + 1) * s.channels]);
    }
    Ok(DetectionMask::from_probabilities(probs))
}

/// Weighted pixel-mean cross-entropy of logits against labels.
pub fn loss<T: Scalar>(
    tape: &mut GradTape<T>,
    logits: ValueId,
    labels: &[u8],
    class_weights: [T; 3],
) -> Result<ValueId> {
    tape.weighted_cross_entropy(logits, labels, &class_weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn argmax_ties_break_low() {
        let probs = Tensor4::from_vec(
            Shape4::new(1, 1, 2, 3),
            vec![0.4, 0.4, 0.2, 0.2, 0.4, 0.4],
        )
        .unwrap();
        let mask = DetectionMask::<f64>::from_probabilities(probs);
        assert_eq!(mask.labels, vec![0, 1]);
    }

    #[test]
    fn mask_from_logits_rows_sum_to_one() {
        let logits =
            Tensor4::from_vec(Shape4::new(1, 1, 2, 3), vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0])
                .unwrap();
        let mask = mask_from_logits::<f64>(&logits).unwrap();
        let d = mask.probabilities.data();
        for cell in 0..2 {
            let sum: f64 = d[cell * 3..(cell + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert_eq!(mask.labels, vec![2, 2]);
    }
}
