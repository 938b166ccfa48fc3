//! Full-pipeline assembly: parameter layout, initialization, and the
//! mode-dependent forward pass.
//!
//! Parameter declaration order is the contract shared by checkpoints and
//! optimizer state. `param_layout` is the single source of truth; the wiring
//! consumes ids positionally and re-checks names so layout and forward can
//! never drift apart silently.
//!
//! Ablation wiring, cumulative like the ablation table rows:
//! - baseline:          decode(coarse)
//! - prototype(+update): decode(coarse + fused)
//! - spatial/channel:   decode(coarse + doubtful), plain sum
//! - full:              decode(adaptive_fuse(coarse, doubtful))

use crate::backbone::{extract_features, BackboneParams};
use crate::config::{AblationMode, RunConfig};
use crate::error::{Error, Result};
use crate::inconsistency::MineParams;
use crate::params::{he_conv_init, ParamSet};
use crate::prototypes::{run_prototype_path, ProtoParams, ProtoUpdateParams};
use crate::refine::{
    adaptive_fuse, decode_logits, doubtful_regions, mask_from_logits, DecoderParams,
    DetectionMask,
};
use crate::scalar::Scalar;
use crate::selfcorr::{coarse_feature, CoarseFeature};
use crate::tape::{GradTape, ValueId};
use crate::tensor::{Shape4, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape4,
}

/// Decoder channel schedule: halve per block, floor at 4.
fn decoder_channels(feature_channels: usize, blocks: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(blocks);
    let mut cur = feature_channels;
    for _ in 0..blocks {
        cur = (cur / 2).max(4);
        out.push(cur);
    }
    out
}

/// Every parameter the config implies, in declaration order.
pub fn param_layout(config: &RunConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut push = |name: String, shape: Shape4| {
        specs.push(ParamSpec { name, shape });
    };
    let conv = |name: &str, cout: usize, k: usize, cin: usize, push: &mut dyn FnMut(String, Shape4)| {
        push(format!("{}.weight", name), Shape4::new(cout, k, k, cin));
        push(format!("{}.bias", name), Shape4::new(1, 1, 1, cout));
    };

    let mut cin = 3;
    for (i, &cout) in config.backbone.channels_per_block.iter().enumerate() {
        conv(&format!("backbone.block{}.conv1", i + 1), cout, 3, cin, &mut push);
        conv(&format!("backbone.block{}.conv2", i + 1), cout, 3, cout, &mut push);
        cin = cout;
    }

    let c = config.backbone.feature_channels();
    conv("selfcorr.project", c, 1, config.percentiles, &mut push);

    let mode = config.ablation_mode;
    let planes = mode.plane_mode().planes(c);
    if mode.prototypes_enabled() {
        conv("proto.init.source", c, 1, c, &mut push);
        conv("proto.init.tampered", c, 1, c, &mut push);
        if mode.updates_enabled() {
            conv("proto.update.srp.mine", c, 1, planes, &mut push);
            conv("proto.update.srp.conv", c, 1, c, &mut push);
            conv("proto.update.trp.mine", c, 1, planes, &mut push);
            conv("proto.update.trp.conv", c, 1, c, &mut push);
        }
        conv("proto.fuse", c, 1, 2 * c, &mut push);
    }
    if mode.mines_doubtful() {
        conv("refine.doubt.mine", c, 1, planes, &mut push);
    }
    if mode.adaptive_fusion() {
        conv("refine.gate", c, 1, 2 * c, &mut push);
    }

    let mut dc = c;
    for (i, &out) in decoder_channels(c, config.backbone.blocks).iter().enumerate() {
        conv(&format!("decoder.block{}", i + 1), out, 3, dc, &mut push);
        dc = out;
    }
    conv("decoder.out", 3, 1, dc, &mut push);
    Ok(specs)
}

/// A forward pass: the logit value plus the tape ids of every parameter, in
/// declaration order, for gradient readout.
pub struct Forward {
    pub logits: ValueId,
    pub param_ids: Vec<ValueId>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: RunConfig,
    pub params: ParamSet<T>,
}

/// Projections whose output feeds a residual or additive branch. These
/// start at zero so every refinement is an identity map at initialization:
/// the LCCD whole-vector plane grows with channel count and each prototype
/// round compounds it, so He init there puts initial logits hundreds of
/// softmax units wide. Their inputs are nonzero, so the weights receive
/// gradient and leave zero on the first step.
fn zero_init_delta(name: &str) -> bool {
    matches!(
        name,
        "proto.update.srp.conv.weight"
            | "proto.update.trp.conv.weight"
            | "refine.doubt.mine.weight"
    )
}

impl<T: Scalar> Model<T> {
    /// Fresh model drawn from the config seed in declaration order:
    /// He-initialized weights, zero biases, zero residual-delta projections.
    pub fn new(config: RunConfig) -> Result<Self> {
        let specs = param_layout(&config)?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        for spec in &specs {
            let tensor = if spec.name.ends_with(".bias") || zero_init_delta(&spec.name) {
                Tensor4::zeros(spec.shape)
            } else {
                he_conv_init(&mut rng, spec.shape)
            };
            params.push(spec.name.clone(), tensor)?;
        }
        Ok(Model { config, params })
    }

    /// Wrap existing parameters (checkpoint load); names and shapes must
    /// match the config-implied layout exactly, in order.
    pub fn from_params(config: RunConfig, params: ParamSet<T>) -> Result<Self> {
        let specs = param_layout(&config)?;
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match config layout {}",
                params.len(),
                specs.len()
            )));
        }
        for (spec, (name, tensor)) in specs.iter().zip(params.iter()) {
            if spec.name != name {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' where layout expects '{}'",
                    name, spec.name
                )));
            }
            if spec.shape != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {} but config implies {}",
                    name,
                    tensor.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Record all parameters as leaves, in declaration order.
    pub fn leaf_params(&self, tape: &mut GradTape<T>, train: bool) -> Vec<ValueId> {
        self.params
            .iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.requires_grad = train;
                tape.leaf(t)
            })
            .collect()
    }

    /// Forward from an image tensor; records parameters itself.
    pub fn forward(
        &self,
        tape: &mut GradTape<T>,
        images: &Tensor4<T>,
        train: bool,
    ) -> Result<Forward> {
        let param_ids = self.leaf_params(tape, train);
        let logits = self.forward_with_param_ids(tape, &param_ids, images)?;
        Ok(Forward { logits, param_ids })
    }

    /// Forward with caller-provided parameter ids (gradient checking swaps
    /// individual groups for checked leaves).
    pub fn forward_with_param_ids(
        &self,
        tape: &mut GradTape<T>,
        param_ids: &[ValueId],
        images: &Tensor4<T>,
    ) -> Result<ValueId> {
        if param_ids.len() != self.params.len() {
            return Err(Error::InvalidArgument {
                op: "forward",
                reason: format!(
                    "{} param ids for {} parameters",
                    param_ids.len(),
                    self.params.len()
                ),
            });
        }
        let s = images.shape();
        let size = self.config.backbone.input_size;
        if s.height != size || s.width != size || s.channels != 3 {
            return Err(Error::InvalidArgument {
                op: "forward",
                reason: format!("image {} does not match configured {}x{}x3", s, size, size),
            });
        }
        images.ensure_finite("forward")?;
        let image_id = tape.leaf(images.clone());

        let mut cursor = Cursor {
            specs: self.params.iter().map(|(n, _)| n.to_string()).collect(),
            ids: param_ids,
            next: 0,
        };
        let wired = wire(&self.config, &mut cursor)?;
        cursor.finish()?;

        self.run_wired(tape, &wired, image_id)
    }

    fn run_wired(
        &self,
        tape: &mut GradTape<T>,
        wired: &Wired,
        image_id: ValueId,
    ) -> Result<ValueId> {
        let mode = self.config.ablation_mode;
        let features = extract_features(tape, image_id, &wired.backbone)?;
        let (pw, pb) = wired.selfcorr_project;
        let coarse = coarse_feature(tape, features, self.config.percentiles, pw, pb)?;

        let refined = match mode {
            AblationMode::Baseline => coarse.map,
            AblationMode::Prototype | AblationMode::PrototypeUpdate => {
                let fused = self.fused(tape, &coarse, wired)?;
                tape.add(coarse.map, fused)?
            }
            AblationMode::Spatial | AblationMode::Channel => {
                let doubtful = self.doubtful(tape, &coarse, wired)?;
                tape.add(coarse.map, doubtful)?
            }
            AblationMode::Full => {
                let doubtful = self.doubtful(tape, &coarse, wired)?;
                let (gw, gb) = wired.gate.expect("full mode wires the gate");
                adaptive_fuse(tape, &coarse, doubtful, gw, gb)?
            }
        };

        decode_logits(tape, refined, wired.decoder.as_ref().expect("decoder always wired"))
    }

    fn fused(
        &self,
        tape: &mut GradTape<T>,
        coarse: &CoarseFeature,
        wired: &Wired,
    ) -> Result<ValueId> {
        let proto = wired.proto.as_ref().expect("prototype modes wire the path");
        run_prototype_path(tape, coarse, proto, self.config.prototype.update_rounds)
    }

    fn doubtful(
        &self,
        tape: &mut GradTape<T>,
        coarse: &CoarseFeature,
        wired: &Wired,
    ) -> Result<ValueId> {
        let fused = self.fused(tape, coarse, wired)?;
        let mine = wired.doubt_mine.as_ref().expect("mining modes wire doubt");
        doubtful_regions(tape, coarse, fused, mine)
    }

    /// Forward + loss over a labeled batch.
    pub fn loss_on_batch(
        &self,
        tape: &mut GradTape<T>,
        images: &Tensor4<T>,
        labels: &[u8],
    ) -> Result<(Forward, ValueId)> {
        let fwd = self.forward(tape, images, true)?;
        let w = self.config.loss_weights;
        let weights = [T::from_f64(w[0]), T::from_f64(w[1]), T::from_f64(w[2])];
        let loss = tape.weighted_cross_entropy(fwd.logits, labels, &weights)?;
        Ok((fwd, loss))
    }

    /// Inference: probabilities and argmax labels for a batch of images.
    pub fn predict(&self, images: &Tensor4<T>) -> Result<DetectionMask<T>> {
        let mut tape = GradTape::new();
        let fwd = self.forward(&mut tape, images, false)?;
        mask_from_logits(tape.value(fwd.logits))
    }

    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        Model::from_params(self.config.clone(), self.params.cast::<U>())
    }
}

/// Positional parameter reader that re-checks names against the layout.
struct Cursor<'a> {
    specs: Vec<String>,
    ids: &'a [ValueId],
    next: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, name: &str) -> Result<ValueId> {
        let idx = self.next;
        if idx >= self.specs.len() || self.specs[idx] != name {
            return Err(Error::InvalidArgument {
                op: "wire",
                reason: format!(
                    "layout drift: expected '{}' at position {}, found '{}'",
                    name,
                    idx,
                    self.specs.get(idx).map(String::as_str).unwrap_or("<end>")
                ),
            });
        }
        self.next += 1;
        Ok(self.ids[idx])
    }

    fn take_conv(&mut self, base: &str) -> Result<(ValueId, ValueId)> {
        let w = self.take(&format!("{}.weight", base))?;
        let b = self.take(&format!("{}.bias", base))?;
        Ok((w, b))
    }

    fn finish(&self) -> Result<()> {
        if self.next != self.specs.len() {
            return Err(Error::InvalidArgument {
                op: "wire",
                reason: format!(
                    "layout drift: {} of {} parameters consumed",
                    self.next,
                    self.specs.len()
                ),
            });
        }
        Ok(())
    }
}

struct Wired {
    backbone: BackboneParams,
    selfcorr_project: (ValueId, ValueId),
    proto: Option<ProtoParams>,
    doubt_mine: Option<MineParams>,
    gate: Option<(ValueId, ValueId)>,
    decoder: Option<DecoderParams>,
}

fn wire(config: &RunConfig, cursor: &mut Cursor) -> Result<Wired> {
    let mode = config.ablation_mode;
    let plane_mode = mode.plane_mode();

    let mut blocks = Vec::with_capacity(config.backbone.blocks);
    for i in 1..=config.backbone.blocks {
        let c1 = cursor.take_conv(&format!("backbone.block{}.conv1", i))?;
        let c2 = cursor.take_conv(&format!("backbone.block{}.conv2", i))?;
        blocks.push([c1, c2]);
    }
    let backbone = BackboneParams { blocks };

    let selfcorr_project = cursor.take_conv("selfcorr.project")?;

    let proto = if mode.prototypes_enabled() {
        let init_source = cursor.take_conv("proto.init.source")?;
        let init_tampered = cursor.take_conv("proto.init.tampered")?;
        let update = if mode.updates_enabled() {
            let srp_mine = cursor.take_conv("proto.update.srp.mine")?;
            let srp_conv = cursor.take_conv("proto.update.srp.conv")?;
            let trp_mine = cursor.take_conv("proto.update.trp.mine")?;
            let trp_conv = cursor.take_conv("proto.update.trp.conv")?;
            Some(ProtoUpdateParams {
                srp_mine: MineParams {
                    project_w: srp_mine.0,
                    project_b: srp_mine.1,
                    plane_mode,
                },
                srp_conv,
                trp_mine: MineParams {
                    project_w: trp_mine.0,
                    project_b: trp_mine.1,
                    plane_mode,
                },
                trp_conv,
            })
        } else {
            None
        };
        let fuse = cursor.take_conv("proto.fuse")?;
        Some(ProtoParams {
            init_source,
            init_tampered,
            update,
            fuse,
        })
    } else {
        None
    };

    let doubt_mine = if mode.mines_doubtful() {
        let (w, b) = cursor.take_conv("refine.doubt.mine")?;
        Some(MineParams {
            project_w: w,
            project_b: b,
            plane_mode,
        })
    } else {
        None
    };

    let gate = if mode.adaptive_fusion() {
        Some(cursor.take_conv("refine.gate")?)
    } else {
        None
    };

    let mut dec_blocks = Vec::with_capacity(config.backbone.blocks);
    for i in 1..=config.backbone.blocks {
        dec_blocks.push(cursor.take_conv(&format!("decoder.block{}", i))?);
    }
    let out = cursor.take_conv("decoder.out")?;
    let decoder = Some(DecoderParams {
        blocks: dec_blocks,
        out,
    });

    Ok(Wired {
        backbone,
        selfcorr_project,
        proto,
        doubt_mine,
        gate,
        decoder,
    })
}
