//! Source and tampered region prototypes: full-resolution feature maps that
//! start as independent projections of the coarse similarity feature and are
//! refined by residual updates driven by inconsistency mining. Within one
//! round the source prototype updates first and the fresh value feeds the
//! tampered update.

use crate::error::{Error, Result};
use crate::inconsistency::{mine, MineParams};
use crate::scalar::Scalar;
use crate::selfcorr::CoarseFeature;
use crate::tape::{GradTape, ValueId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeKind {
    Source,
    Tampered,
}

/// One prototype: a (B,H,W,C) map on the tape plus its update round.
#[derive(Clone, Copy)]
pub struct Prototype {
    pub kind: PrototypeKind,
    pub map: ValueId,
    pub round: usize,
}

/// Parameters of the prototype path.
pub struct ProtoParams {
    pub init_source: (ValueId, ValueId),
    pub init_tampered: (ValueId, ValueId),
    /// Present when updates are enabled.
    pub update: Option<ProtoUpdateParams>,
    pub fuse: (ValueId, ValueId),
}

pub struct ProtoUpdateParams {
    pub srp_mine: MineParams,
    pub srp_conv: (ValueId, ValueId),
    pub trp_mine: MineParams,
    pub trp_conv: (ValueId, ValueId),
}

/// SRP(0) and TRP(0): independent ReLU(conv1x1) projections of the coarse
/// feature.
pub fn init_prototypes<T: Scalar>(
    tape: &mut GradTape<T>,
    coarse: &CoarseFeature,
    params: &ProtoParams,
) -> Result<(Prototype, Prototype)> {
    let mut make = |kind, (w, b): (ValueId, ValueId)| -> Result<Prototype> {
        let projected = tape.conv2d(coarse.map, w, Some(b), 1, 0)?;
        let map = tape.relu(projected)?;
        Ok(Prototype {
            kind,
            map,
            round: 0,
        })
    };
    let srp = make(PrototypeKind::Source, params.init_source)?;
    let trp = make(PrototypeKind::Tampered, params.init_tampered)?;
    Ok((srp, trp))
}

/// One update round:
/// SRP(s+1) = SRP(s) + conv1x1(mine(TRP(t), coarse));
/// TRP(t+1) = TRP(t) + conv1x1(mine(SRP(s+1), coarse)).
pub fn update_round<T: Scalar>(
    tape: &mut GradTape<T>,
    srp: Prototype,
    trp: Prototype,
    coarse: &CoarseFeature,
    params: &ProtoUpdateParams,
) -> Result<(Prototype, Prototype)> {
    if srp.round != trp.round {
        return Err(Error::InvalidArgument {
            op: "update_round",
            reason: format!("round mismatch: srp {} vs trp {}", srp.round, trp.round),
        });
    }
    let srp_delta = {
        let mined = mine(tape, trp.map, coarse.map, &params.srp_mine)?;
        let (w, b) = params.srp_conv;
        tape.conv2d(mined, w, Some(b), 1, 0)?
    };
    let new_srp = Prototype {
        kind: srp.kind,
        map: tape.add(srp.map, srp_delta)?,
        round: srp.round + 1,
    };
    let trp_delta = {
        let mined = mine(tape, new_srp.map, coarse.map, &params.trp_mine)?;
        let (w, b) = params.trp_conv;
        tape.conv2d(mined, w, Some(b), 1, 0)?
    };
    let new_trp = Prototype {
        kind: trp.kind,
        map: tape.add(trp.map, trp_delta)?,
        round: trp.round + 1,
    };
    Ok((new_srp, new_trp))
}

/// ReLU(conv1x1(concat(srp, trp))), 2C -> C.
pub fn fuse_pair<T: Scalar>(
    tape: &mut GradTape<T>,
    srp: &Prototype,
    trp: &Prototype,
    params: &ProtoParams,
) -> Result<ValueId> {
    if srp.round != trp.round {
        return Err(Error::InvalidArgument {
            op: "fuse_pair",
            reason: format!("round mismatch: srp {} vs trp {}", srp.round, trp.round),
        });
    }
    let cat = tape.concat_channels(&[srp.map, trp.map])?;
    let (w, b) = params.fuse;
    let projected = tape.conv2d(cat, w, Some(b), 1, 0)?;
    tape.relu(projected)
}

/// Initialize, run the configured rounds, and fuse.
pub fn run_prototype_path<T: Scalar>(
    tape: &mut GradTape<T>,
    coarse: &CoarseFeature,
    params: &ProtoParams,
    rounds: usize,
) -> Result<ValueId> {
    let (mut srp, mut trp) = init_prototypes(tape, coarse, params)?;
    if rounds > 0 {
        let update = params.update.as_ref().ok_or_else(|| Error::InvalidArgument {
            op: "run_prototype_path",
            reason: "update rounds requested without update parameters".into(),
        })?;
        for _ in 0..rounds {
            let (s, t) = update_round(tape, srp, trp, coarse, update)?;
            srp = s;
            trp = t;
        }
    }
    fuse_pair(tape, &srp, &trp, params)
}
