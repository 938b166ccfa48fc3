//! Convolutional feature extractor: per block, two 3x3 conv + ReLU layers
//! followed by 2x2 max pooling. Halves the spatial side per block; channel
//! counts come from the config.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradTape, ValueId};

/// Tape handles for one backbone's parameters: per block, two (weight, bias)
/// pairs.
pub struct BackboneParams {
    pub blocks: Vec<[(ValueId, ValueId); 2]>,
}

/// Run the backbone over an image value already on the tape. The image must
/// be (B, S, S, 3) with S divisible by 2^blocks; the caller validated the
/// config, this re-checks the tensor actually passed in.
pub fn extract_features<T: Scalar>(
    tape: &mut GradTape<T>,
    image: ValueId,
    params: &BackboneParams,
) -> Result<ValueId> {
    let shape = tape.shape(image);
    let divisor = 1usize << params.blocks.len();
    if shape.height != shape.width || !shape.height.is_multiple_of(divisor) {
        return Err(Error::InvalidArgument {
            op: "extract_features",
            reason: format!(
                "image {} not square or not divisible by 2^{}",
                shape,
                params.blocks.len()
            ),
        });
    }
    let mut cur = image;
    for block in &params.blocks {
        for &(w, b) in block {
            cur = tape.conv2d(cur, w, Some(b), 1, 1)?;
            cur = tape.relu(cur)?;
        }
        cur = tape.max_pool2(cur)?;
    }
    Ok(cur)
}
