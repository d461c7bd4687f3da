//! Three-stage coarse-to-fine parser.
//!
//! Stage 1 is a supervised foreground/background parser. Stage 2 is a one-shot
//! meta learner over the four parent areas and stage 3 over fine classes. Each
//! stage has its own encoder shared by query and support; knowledge infusion
//! concatenates the previous stage's features with the current encoder output
//! and maps them through two 3×3 convolutions:
//! `h2 = ζ2([g1; g2])`, `h3 = ζ3([h2; g3])`.
//!
//! Every encoder downsamples by 4, so all stages share one feature resolution.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dml::{
    agm_forward, distance_maps, effective_prototypes, ncm_forward_scaled, ChannelMap, HeadVars, PrototypeBank,
    PrototypeSource,
};
use crate::error::{config_err, contract_err, shape_err, Error, Result};
use crate::taxonomy::{ClassId, Granularity, LabelMask};
use crate::tensor::{resize_bilinear, Tensor};

pub const DOWNSAMPLE: usize = 4;

/// How the two head losses are weighted during training. Any mix that trains
/// the NCM also predicts with it; only a pure AGM run predicts with the AGM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "beta")]
pub enum HeadMix {
    /// β ≡ 1.
    Agm,
    /// β ≡ 0.
    Ncm,
    /// Constant β.
    Fixed(f64),
    /// β = 1 − epoch / max_epoch.
    Shifted,
}

impl HeadMix {
    /// Weight of the AGM head when predicting after training.
    pub fn inference_beta(self) -> f64 {
        match self {
            HeadMix::Agm => 1.0,
            HeadMix::Fixed(b) if b >= 1.0 => 1.0,
            HeadMix::Ncm | HeadMix::Shifted | HeadMix::Fixed(_) => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels produced by every stage.
    pub channels: usize,
    /// Infuse stage-1/2 features into stage 3 (otherwise stage 3 stands alone).
    pub use_kim: bool,
    /// Also concatenate the stage-1 foreground probability before fusion.
    pub fg_prior: bool,
    /// Smooth base prototypes across episodes and reuse them at test time.
    pub dynamic_prototypes: bool,
    pub alpha: f64,
    /// At test time take base-class prototypes from the bank rather than the test support.
    pub base_from_bank: bool,
    pub head: HeadMix,
    /// Rectify the last encoder and fusion layers. Off by default: rectified
    /// outputs let the cosine head zero out every background pixel, and the
    /// regions it zeroes include the held-out classes.
    pub feature_relu: bool,
    /// Multiplier on the nearest-centroid logits (see [`ncm_forward_scaled`]).
    pub ncm_scale: f64,
    /// Filled from the run seed.
    #[serde(skip)]
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            use_kim: true,
            fg_prior: false,
            dynamic_prototypes: true,
            alpha: 0.001,
            base_from_bank: true,
            head: HeadMix::Shifted,
            feature_relu: false,
            ncm_scale: 20.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(config_err!("model.channels must be positive"));
        }
        if !(self.ncm_scale > 0.0 && self.ncm_scale.is_finite()) {
            return Err(config_err!("model.ncm_scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("model.alpha must lie in [0, 1]"));
        }
        if let HeadMix::Fixed(b) = self.head {
            if !(0.0..=1.0).contains(&b) {
                return Err(config_err!("model.head beta must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// He-normal weights, zero bias.
    pub fn new(k: usize, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        ConvLayer {
            kernel: Tensor::randn(&[k, k, cin, cout], std, rng),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding: k / 2,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundConv {
        BoundConv {
            kernel: g.leaf(self.kernel.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
            stride: self.stride,
            padding: self.padding,
        }
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.kernel, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl BoundConv {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv2d(x, self.kernel, self.bias, self.stride, self.padding)
    }

    pub fn apply_relu(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.apply(g, x)?;
        Ok(g.relu(y))
    }
}

/// Three 3×3 conv blocks, stride 2 in the first two. The first two are
/// rectified; the last one only when `feature_relu` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct StageEncoder {
    pub blocks: [ConvLayer; 3],
}

impl StageEncoder {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        StageEncoder {
            blocks: [
                ConvLayer::new(3, 3, 16, 2, rng),
                ConvLayer::new(3, 16, 32, 2, rng),
                ConvLayer::new(3, 32, channels, 1, rng),
            ],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks[2].kernel.shape()[3]
    }
}

/// Two 3×3 convolutions over concatenated features, ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct KimFuser {
    pub convs: [ConvLayer; 2],
}

impl KimFuser {
    pub fn new(prev_channels: usize, cur_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        KimFuser {
            convs: [
                ConvLayer::new(3, prev_channels + cur_channels, cur_channels, 1, rng),
                ConvLayer::new(3, cur_channels, cur_channels, 1, rng),
            ],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].kernel.shape()[2]
    }
}

/// φ and ω: class-shared 1×1 convolutions from K channels to one logit.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub phi: ConvLayer,
    pub omega: ConvLayer,
}

impl HeadParams {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        HeadParams { phi: ConvLayer::new(1, channels, 1, 1, rng), omega: ConvLayer::new(1, channels, 1, 1, rng) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundStage {
    pub encoder: StageEncoder,
    pub classifier: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaStage {
    pub encoder: StageEncoder,
    pub fuser: Option<KimFuser>,
    pub head: HeadParams,
    pub bank: PrototypeBank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineState {
    pub config: ModelConfig,
    pub stage1: ForegroundStage,
    pub stage2: MetaStage,
    pub stage3: MetaStage,
    /// Stages 1..=3 that finished training.
    pub trained: [bool; 3],
}

/// Stage a forward pass should treat as trainable; all others are constants.
pub type Trainable = Option<u8>;

impl PipelineState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let k = config.channels;
        let prior = usize::from(config.fg_prior);
        let stage1 = ForegroundStage { encoder: StageEncoder::new(k, &mut rng), classifier: ConvLayer::new(1, k, 2, 1, &mut rng) };
        let stage2 = MetaStage {
            encoder: StageEncoder::new(k, &mut rng),
            fuser: Some(KimFuser::new(k + prior, k, &mut rng)),
            head: HeadParams::new(k, &mut rng),
            bank: PrototypeBank::new(config.alpha),
        };
        let stage3 = MetaStage {
            encoder: StageEncoder::new(k, &mut rng),
            fuser: config.use_kim.then(|| KimFuser::new(k, k, &mut rng)),
            head: HeadParams::new(k, &mut rng),
            bank: PrototypeBank::new(config.alpha),
        };
        Ok(PipelineState { config, stage1, stage2, stage3, trained: [false; 3] })
    }

    pub fn meta_stage(&self, stage: u8) -> Result<&MetaStage> {
        match stage {
            2 => Ok(&self.stage2),
            3 => Ok(&self.stage3),
            _ => Err(contract_err!("stage {stage} is not a meta-learning stage")),
        }
    }

    pub fn meta_stage_mut(&mut self, stage: u8) -> Result<&mut MetaStage> {
        match stage {
            2 => Ok(&mut self.stage2),
            3 => Ok(&mut self.stage3),
            _ => Err(contract_err!("stage {stage} is not a meta-learning stage")),
        }
    }

    /// Stages that must already be trained before `stage` can train.
    pub fn prerequisites(&self, stage: u8) -> Vec<u8> {
        match stage {
            2 => vec![1],
            3 if self.config.use_kim => vec![1, 2],
            _ => vec![],
        }
    }

    /// Stages that take part in a stage-3 prediction.
    pub fn required_stages(&self) -> Vec<u8> {
        if self.config.use_kim {
            vec![1, 2, 3]
        } else {
            vec![3]
        }
    }

    /// Mutable parameter tensors of one stage, in binding order.
    pub fn stage_params_mut(&mut self, stage: u8) -> Result<Vec<&mut Tensor>> {
        match stage {
            1 => Ok(foreground_params_mut(&mut self.stage1)),
            2 => Ok(meta_params_mut(&mut self.stage2)),
            3 => Ok(meta_params_mut(&mut self.stage3)),
            _ => Err(contract_err!("no stage {stage}")),
        }
    }

    /// Named parameters of every stage (checkpoint order is by name).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        named_encoder("s1", &self.stage1.encoder, &mut out);
        out.push(("s1.cls.kernel".into(), &self.stage1.classifier.kernel));
        out.push(("s1.cls.bias".into(), &self.stage1.classifier.bias));
        for (prefix, s) in [("s2", &self.stage2), ("s3", &self.stage3)] {
            named_encoder(prefix, &s.encoder, &mut out);
            if let Some(f) = &s.fuser {
                for (i, c) in f.convs.iter().enumerate() {
                    out.push((format!("{prefix}.kim.{i}.kernel"), &c.kernel));
                    out.push((format!("{prefix}.kim.{i}.bias"), &c.bias));
                }
            }
            out.push((format!("{prefix}.phi.kernel"), &s.head.phi.kernel));
            out.push((format!("{prefix}.phi.bias"), &s.head.phi.bias));
            out.push((format!("{prefix}.omega.kernel"), &s.head.omega.kernel));
            out.push((format!("{prefix}.omega.bias"), &s.head.omega.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let mut tensors = foreground_params_mut(&mut self.stage1);
        tensors.extend(meta_params_mut(&mut self.stage2));
        tensors.extend(meta_params_mut(&mut self.stage3));
        // the per-stage lists lists the same tensors in the same order as named_params
        names.into_iter().zip(tensors).collect()
    }
}

fn encoder_params_mut<'a>(enc: &'a mut StageEncoder, out: &mut Vec<&'a mut Tensor>) {
    for b in enc.blocks.iter_mut() {
        out.extend(b.tensors_mut());
    }
}

fn foreground_params_mut(s: &mut ForegroundStage) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    encoder_params_mut(&mut s.encoder, &mut out);
    out.extend(s.classifier.tensors_mut());
    out
}

fn meta_params_mut(s: &mut MetaStage) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    encoder_params_mut(&mut s.encoder, &mut out);
    if let Some(f) = s.fuser.as_mut() {
        for c in f.convs.iter_mut() {
            out.extend(c.tensors_mut());
        }
    }
    out.extend(s.head.phi.tensors_mut());
    out.extend(s.head.omega.tensors_mut());
    out
}

fn named_encoder<'a>(prefix: &str, e: &'a StageEncoder, out: &mut Vec<(String, &'a Tensor)>) {
    for (i, b) in e.blocks.iter().enumerate() {
        out.push((format!("{prefix}.enc.{i}.kernel"), &b.kernel));
        out.push((format!("{prefix}.enc.{i}.bias"), &b.bias));
    }
}

fn check_divisible(image: &Tensor) -> Result<(usize, usize)> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(shape_err!("encoder expects 3-channel images, got {c}"));
    }
    if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(shape_err!("image {h}x{w} is not divisible by {DOWNSAMPLE}"));
    }
    Ok((h / DOWNSAMPLE, w / DOWNSAMPLE))
}

/// Encoder weights placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    blocks: [BoundConv; 3],
    relu_out: bool,
}

impl StageEncoder {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        BoundEncoder { blocks: [0, 1, 2].map(|i| self.blocks[i].bind(g, trainable)), relu_out: false }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundFuser {
    convs: [BoundConv; 2],
    in_channels: usize,
    relu_out: bool,
}

impl KimFuser {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundFuser {
        BoundFuser { convs: [0, 1].map(|i| self.convs[i].bind(g, trainable)), in_channels: self.in_channels(), relu_out: false }
    }
}

impl BoundFuser {
    /// Fuser over existing `(kernel, bias)` nodes with stride 1 and same padding.
    pub fn from_vars(g: &Graph, layers: [(Var, Var); 2], relu_out: bool) -> Result<Self> {
        let conv = |(kernel, bias): (Var, Var)| -> Result<BoundConv> {
            match *g.value(kernel).shape() {
                [k, _, _, _] => Ok(BoundConv { kernel, bias, stride: 1, padding: k / 2 }),
                ref s => Err(shape_err!("fuser kernel must be 4-d, got {s:?}")),
            }
        };
        let in_channels = g.value(layers[0].0).shape()[2];
        Ok(BoundFuser { convs: [conv(layers[0])?, conv(layers[1])?], in_channels, relu_out })
    }
}

impl HeadParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        HeadVars {
            phi_kernel: g.leaf(self.phi.kernel.clone(), trainable),
            phi_bias: g.leaf(self.phi.bias.clone(), trainable),
            omega_kernel: g.leaf(self.omega.kernel.clone(), trainable),
            omega_bias: g.leaf(self.omega.bias.clone(), trainable),
        }
    }
}

/// `g^{S_i}` for an image node. Pixel values are shifted by −0.5 first.
pub fn encode(g: &mut Graph, encoder: &BoundEncoder, image: Var) -> Result<Var> {
    check_divisible(g.value(image))?;
    let mut x = g.affine(image, 1.0, -0.5);
    for block in &encoder.blocks[..2] {
        x = block.apply_relu(g, x)?;
    }
    if encoder.relu_out {
        encoder.blocks[2].apply_relu(g, x)
    } else {
        encoder.blocks[2].apply(g, x)
    }
}

/// `ζ([prev; cur])`.
pub fn kim_fuse(g: &mut Graph, prev: Var, cur: Var, fuser: &BoundFuser) -> Result<Var> {
    let joined = g.concat_channels(prev, cur)?;
    let (_, _, c) = g.value(joined).dims3()?;
    if c != fuser.in_channels {
        return Err(shape_err!("fuser expects {} channels, got {c}", fuser.in_channels));
    }
    let a = fuser.convs[0].apply_relu(g, joined)?;
    if fuser.relu_out {
        fuser.convs[1].apply_relu(g, a)
    } else {
        fuser.convs[1].apply(g, a)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMeta {
    pub encoder: BoundEncoder,
    pub fuser: Option<BoundFuser>,
    pub head: HeadVars,
}

/// Every pipeline parameter bound once onto a graph, so query and support
/// share the same leaves. Only the `trainable` stage gets gradient-tracking leaves.
#[derive(Clone, Copy, Debug)]
pub struct BoundPipeline {
    trainable: Trainable,
    fg_prior: bool,
    ncm_scale: f64,
    use_kim: bool,
    s1_encoder: BoundEncoder,
    s1_classifier: BoundConv,
    s2: BoundMeta,
    s3: BoundMeta,
}

impl BoundPipeline {
    pub fn bind(g: &mut Graph, state: &PipelineState, trainable: Trainable) -> Self {
        let t = |s: u8| trainable == Some(s);
        let relu_out = state.config.feature_relu;
        let meta = |g: &mut Graph, m: &MetaStage, tr: bool| BoundMeta {
            encoder: BoundEncoder { relu_out, ..m.encoder.bind(g, tr) },
            fuser: m.fuser.as_ref().map(|f| BoundFuser { relu_out, ..f.bind(g, tr) }),
            head: m.head.bind(g, tr),
        };
        BoundPipeline {
            trainable,
            fg_prior: state.config.fg_prior,
            ncm_scale: state.config.ncm_scale,
            use_kim: state.config.use_kim,
            s1_encoder: BoundEncoder { relu_out, ..state.stage1.encoder.bind(g, t(1)) },
            s1_classifier: state.stage1.classifier.bind(g, t(1)),
            s2: meta(g, &state.stage2, t(2)),
            s3: meta(g, &state.stage3, t(3)),
        }
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    pub fn meta(&self, stage: u8) -> Result<&BoundMeta> {
        match stage {
            2 => Ok(&self.s2),
            3 => Ok(&self.s3),
            _ => Err(contract_err!("stage {stage} is not a meta-learning stage")),
        }
    }

    /// Leaves of one stage in the order of [`PipelineState::stage_params_mut`].
    pub fn stage_vars(&self, stage: u8) -> Result<Vec<Var>> {
        let enc = |e: &BoundEncoder, out: &mut Vec<Var>| {
            for b in &e.blocks {
                out.extend([b.kernel, b.bias]);
            }
        };
        let mut out = Vec::new();
        match stage {
            1 => {
                enc(&self.s1_encoder, &mut out);
                out.extend([self.s1_classifier.kernel, self.s1_classifier.bias]);
            }
            2 | 3 => {
                let m = self.meta(stage)?;
                enc(&m.encoder, &mut out);
                if let Some(f) = &m.fuser {
                    for c in &f.convs {
                        out.extend([c.kernel, c.bias]);
                    }
                }
                let h = &m.head;
                out.extend([h.phi_kernel, h.phi_bias, h.omega_kernel, h.omega_bias]);
            }
            _ => return Err(contract_err!("no stage {stage}")),
        }
        Ok(out)
    }

    /// Foreground/background probabilities at feature resolution (background
    /// channel first), plus `g^{S_1}`.
    pub fn stage1(&self, g: &mut Graph, image: Var) -> Result<(Var, Var)> {
        let feats = encode(g, &self.s1_encoder, image)?;
        let logits = self.s1_classifier.apply(g, feats)?;
        Ok((g.softmax_channels(logits)?, feats))
    }

    /// Features a meta stage compares with prototypes: `h^{S_2}`, `h^{S_3}`, or
    /// the bare stage-3 encoder output when infusion is disabled.
    pub fn features(&self, g: &mut Graph, stage: u8, image: Var) -> Result<Var> {
        match stage {
            2 => {
                let (probs, g1) = self.stage1(g, image)?;
                let prev = if self.fg_prior {
                    let fg = g.slice_channels(probs, 1, 1)?;
                    g.concat_channels(g1, fg)?
                } else {
                    g1
                };
                let g2 = encode(g, &self.s2.encoder, image)?;
                let fuser = self.s2.fuser.as_ref().ok_or_else(|| Error::State("stage 2 has no fuser".into()))?;
                kim_fuse(g, prev, g2, fuser)
            }
            3 => {
                let g3 = encode(g, &self.s3.encoder, image)?;
                match &self.s3.fuser {
                    Some(fuser) if self.use_kim => {
                        let h2 = self.features(g, 2, image)?;
                        kim_fuse(g, h2, g3, fuser)
                    }
                    _ => Ok(g3),
                }
            }
            _ => Err(contract_err!("stage {stage} has no meta features")),
        }
    }
}

/// Forward-only feature extraction, used to cache features at evaluation time.
pub fn features_tensor(state: &PipelineState, stage: u8, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = BoundPipeline::bind(&mut g, state, None);
    let x = g.constant(image.clone());
    let f = bound.features(&mut g, stage, x)?;
    Ok(g.value(f).clone())
}

/// Which heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadsNeeded {
    pub agm: bool,
    pub ncm: bool,
}

impl HeadsNeeded {
    pub const BOTH: HeadsNeeded = HeadsNeeded { agm: true, ncm: true };

    pub fn for_beta(beta: f64) -> Self {
        HeadsNeeded { agm: beta > 0.0, ncm: beta < 1.0 }
    }
}

pub struct MetaOutput {
    pub agm: Option<Var>,
    pub ncm: Option<Var>,
    pub channels: ChannelMap,
}

/// Prototypes, distance maps and the requested heads for one support/query pair
/// of feature nodes. `support_mask` must already be at feature resolution.
/// `None` when no support class yields a usable prototype.
#[allow(clippy::too_many_arguments)]
pub fn meta_heads(
    g: &mut Graph,
    head: &HeadVars,
    support_features: Var,
    support_mask: &LabelMask,
    query_features: Var,
    source: PrototypeSource<'_>,
    base: &BTreeSet<ClassId>,
    heads: HeadsNeeded,
    ncm_scale: f64,
) -> Result<Option<MetaOutput>> {
    let protos = effective_prototypes(g, support_features, support_mask, source, base)?;
    if protos.is_empty() {
        return Ok(None);
    }
    let classes: Vec<ClassId> = protos.iter().map(|p| p.class).collect();
    let maps = distance_maps(g, query_features, &protos)?;
    let agm = if heads.agm { Some(agm_forward(g, query_features, &maps, head)?) } else { None };
    let ncm = if heads.ncm { Some(ncm_forward_scaled(g, &maps, ncm_scale)?) } else { None };
    Ok(Some(MetaOutput { agm, ncm, channels: ChannelMap::new(&classes) }))
}

/// Training/testing phase that decides prototype provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    TrainEarly,
    TrainLate,
    Test,
}

/// Full meta-stage forward on raw images. The support mask is given at image
/// resolution in the label space of `stage` and is downsampled here. `bank` is
/// updated in [`Phase::TrainLate`]; at test time it is only read.
#[allow(clippy::too_many_arguments)]
pub fn stage_meta_forward(
    g: &mut Graph,
    bound: &BoundPipeline,
    bank: &mut PrototypeBank,
    dynamic: bool,
    stage: u8,
    support_image: &Tensor,
    support_mask: &LabelMask,
    query_image: &Tensor,
    phase: Phase,
    base: &BTreeSet<ClassId>,
    heads: HeadsNeeded,
) -> Result<Option<MetaOutput>> {
    let meta = bound.meta(stage)?;
    let s_img = g.constant(support_image.clone());
    let q_img = g.constant(query_image.clone());
    let sf = bound.features(g, stage, s_img)?;
    let qf = bound.features(g, stage, q_img)?;
    let (fh, fw, _) = g.value(sf).dims3()?;
    let low_mask = support_mask.resize_nearest(fh, fw);
    let source = match phase {
        Phase::TrainLate if dynamic => PrototypeSource::Dynamic(bank),
        Phase::Test if dynamic => PrototypeSource::Frozen(bank),
        _ => PrototypeSource::Static,
    };
    meta_heads(g, &meta.head, sf, &low_mask, qf, source, base, heads, bound.ncm_scale)
}

/// Mix the available heads with AGM weight `beta`.
pub fn mix_heads(g: &Graph, out: &MetaOutput, beta: f64) -> Result<Tensor> {
    match (out.agm, out.ncm) {
        (Some(a), Some(n)) => {
            let (ta, tn) = (g.value(a), g.value(n));
            let data = ta.data().iter().zip(tn.data()).map(|(x, y)| beta * x + (1.0 - beta) * y).collect();
            Tensor::new(ta.shape(), data)
        }
        (Some(a), None) => Ok(g.value(a).clone()),
        (None, Some(n)) => Ok(g.value(n).clone()),
        (None, None) => Err(contract_err!("no head was evaluated")),
    }
}

/// Arg-max labels of an (h, w, C) probability map after bilinear upsampling.
/// Ties go to the lowest channel.
pub fn decode_prediction(
    probs: &Tensor,
    channels: &ChannelMap,
    height: usize,
    width: usize,
    granularity: Granularity,
) -> Result<LabelMask> {
    let up = resize_bilinear(probs, height, width)?;
    let (_, _, c) = up.dims3()?;
    let labels = up
        .data()
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = i;
                }
            }
            channels.class_of(best)
        })
        .collect();
    LabelMask::new(height, width, labels, granularity)
}
