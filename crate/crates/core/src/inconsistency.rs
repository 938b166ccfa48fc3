//! Inconsistency mining: LCCD, its channel re-projection, and the reverse
//! gate.
//!
//! LCCD builds C per-channel product planes plus one whole-vector
//! inner-product plane. The inner-product plane is produced by summing the
//! product planes channel-by-channel, so plane C equals the sum of planes
//! 0..C-1 bit-exactly. The declared output of the original construction
//! (HW x (C+1) reshaped to H x W x C) does not typecheck; a learned 1x1
//! projection bridges the channel counts instead.

use crate::config::PlaneMode;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{GradTape, ValueId};

/// Parameters of one mining site. Each call site (the two prototype updates
/// and the doubtful-pixel extractor) owns its own projection.
#[derive(Clone, Copy)]
pub struct MineParams {
    pub project_w: ValueId,
    pub project_b: ValueId,
    pub plane_mode: PlaneMode,
}

/// Position-aligned correlation: per-channel products concatenated with the
/// whole-vector inner product, (B,H,W,C) x2 -> (B,H,W,C+1).
pub fn lccd<T: Scalar>(tape: &mut GradTape<T>, fx: ValueId, fy: ValueId) -> Result<ValueId> {
    let products = tape.mul(fx, fy)?;
    let whole = tape.reduce_channels_sum(products)?;
    tape.concat_channels(&[products, whole])
}

/// Only the whole-vector inner-product plane, (B,H,W,1).
pub fn lccd_whole_plane<T: Scalar>(
    tape: &mut GradTape<T>,
    fx: ValueId,
    fy: ValueId,
) -> Result<ValueId> {
    let products = tape.mul(fx, fy)?;
    tape.reduce_channels_sum(products)
}

/// Learned 1x1 projection of the LCCD planes back to C channels.
pub fn lccd_project<T: Scalar>(
    tape: &mut GradTape<T>,
    raw: ValueId,
    project_w: ValueId,
    project_b: ValueId,
) -> Result<ValueId> {
    tape.conv2d(raw, project_w, Some(project_b), 1, 0)
}

/// Reverse gate: x * (1 - sigmoid(x)). Suppresses confidently positive
/// activations so the complementary signal remains.
pub fn rgm<T: Scalar>(tape: &mut GradTape<T>, fz: ValueId) -> Result<ValueId> {
    tape.rgm(fz)
}

/// Composite miner: rgm(project(lccd(fa, fb))), with the plane selection the
/// ablation mode dictates.
pub fn mine<T: Scalar>(
    tape: &mut GradTape<T>,
    fa: ValueId,
    fb: ValueId,
    params: &MineParams,
) -> Result<ValueId> {
    let raw = match params.plane_mode {
        PlaneMode::All => lccd(tape, fa, fb)?,
        PlaneMode::WholeVectorOnly => lccd_whole_plane(tape, fa, fb)?,
    };
    let projected = lccd_project(tape, raw, params.project_w, params.project_b)?;
    rgm(tape, projected)
}
