//! Network descriptors, parameter bundles and forward passes.
//!
//! Three families share this module: mapping U-Nets (domain adaptation),
//! the joint-pair discriminator, and dual-modelling networks whose shared
//! feature extractor feeds a local convolutional branch and a global
//! self-attention branch over feature patches.

pub mod archive;
mod discriminator;
mod dual;
mod unet;

pub use discriminator::forward_discriminator;
pub use dual::{forward_dual, sinusoidal_position_encoding, DualOutput};
pub use unet::forward_mapping;

use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Channel ladder cap keeps parameter counts CPU-friendly.
const MAX_CHANNELS: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingNetDescriptor {
    /// Encoder/decoder depth; input sides must be divisible by 2^levels.
    pub levels: usize,
    pub base_channels: usize,
    pub use_skip_connections: bool,
}

impl Default for MappingNetDescriptor {
    fn default() -> Self {
        MappingNetDescriptor { levels: 4, base_channels: 16, use_skip_connections: true }
    }
}

impl MappingNetDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::invalid("mapping net needs at least 2 levels"));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be positive"));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(MAX_CHANNELS)
    }
}

/// The fixed six-layer pair discriminator of the adversarial stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DiscriminatorDescriptor {}

impl DiscriminatorDescriptor {
    pub const FILTERS: [usize; 6] = [32, 64, 128, 256, 256, 1];
    pub const STRIDES: [usize; 6] = [2, 2, 2, 2, 2, 1];
    pub const KERNELS: [usize; 6] = [3, 3, 3, 3, 3, 1];
    pub const IN_CHANNELS: usize = 2;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualNetDescriptor {
    pub feature_extractor: MappingNetDescriptor,
    /// Channels of the shared feature maps.
    pub feature_channels: usize,
    pub patch_size: usize,
    pub attention_blocks: usize,
    pub heads: usize,
}

impl Default for DualNetDescriptor {
    fn default() -> Self {
        DualNetDescriptor {
            feature_extractor: MappingNetDescriptor::default(),
            feature_channels: 16,
            patch_size: 8,
            attention_blocks: 2,
            heads: 4,
        }
    }
}

impl DualNetDescriptor {
    pub fn model_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.feature_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_extractor.validate()?;
        if self.feature_channels == 0 {
            return Err(Error::invalid("feature_channels must be positive"));
        }
        if self.patch_size < 2 {
            return Err(Error::invalid("patch_size must be at least 2"));
        }
        if self.attention_blocks == 0 || self.heads == 0 {
            return Err(Error::invalid("attention_blocks and heads must be positive"));
        }
        if self.model_dim() % self.heads != 0 {
            return Err(Error::invalid("model dim must be divisible by heads"));
        }
        if self.model_dim() % 2 != 0 {
            return Err(Error::invalid("model dim must be even for sinusoidal encoding"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetDescriptor {
    /// U-Net from `in_channels` to `out_channels` with the given head.
    Mapping {
        desc: MappingNetDescriptor,
        in_channels: usize,
        out_channels: usize,
        head: HeadActivation,
    },
    Discriminator { desc: DiscriminatorDescriptor },
    Dual { desc: DualNetDescriptor },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    Sigmoid,
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Feature,
    Local,
    Global,
    Whole,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Parameter store for one network plus its architecture descriptor.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub descriptor: NetDescriptor,
    pub params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ModelBundle {
    pub(crate) fn from_params(descriptor: NetDescriptor, params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        ModelBundle { descriptor, params, index }
    }

    pub fn param(&self, name: &str) -> &Param {
        &self.params[self.index[name]]
    }

    pub fn param_index(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Names of the feature-extractor conv layers, outermost first, along
    /// with their filter counts. Used by the orthogonality penalty and the
    /// feature-correlation report.
    pub fn feature_conv_layers(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.group == ParamGroup::Feature && p.name.ends_with(".w") && p.value.shape.len() == 4)
            .map(|p| p.name.clone())
            .collect()
    }
}

/// Forward-pass options.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx {
    /// Replace batch statistics with (0, 1) in every batch-norm layer.
    /// Training and inference both use current-batch statistics; this
    /// flag exists for per-sample independence checks only.
    pub frozen_bn: bool,
    /// Add sinusoidal positional encodings in the global branch.
    pub use_positional_encoding: bool,
}

impl Default for ForwardCtx {
    fn default() -> Self {
        ForwardCtx { frozen_bn: false, use_positional_encoding: true }
    }
}

/// Bundle parameters registered on a tape for one forward/backward pass.
pub struct BoundParams {
    pub vars: Vec<Var>,
    names: BTreeMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .names
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

pub fn register(tape: &mut Tape, bundle: &ModelBundle) -> BoundParams {
    let vars: Vec<Var> = bundle.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let names = bundle.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    BoundParams { vars, names }
}

// ---------------------------------------------------------------------
// Parameter initialization: fan-in-scaled uniform for conv/linear
// weights, zeros for biases, ones/zeros for norm scale/shift.
// ---------------------------------------------------------------------

struct ParamBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    group: ParamGroup,
    params: Vec<Param>,
}

impl<'a> ParamBuilder<'a> {
    fn new(rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { rng, group: ParamGroup::Whole, params: Vec::new() }
    }

    fn group(&mut self, group: ParamGroup) -> &mut Self {
        self.group = group;
        self
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, bias: bool) -> &mut Self {
        let fan_in = (in_c * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = out_c * in_c * k * k;
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.params.push(Param {
            name: format!("{name}.w"),
            group: self.group,
            value: Tensor::from_vec(&[out_c, in_c, k, k], data),
        });
        if bias {
            self.params.push(Param {
                name: format!("{name}.b"),
                group: self.group,
                value: Tensor::zeros(&[out_c]),
            });
        }
        self
    }

    fn linear(&mut self, name: &str, in_d: usize, out_d: usize) -> &mut Self {
        let bound = 1.0 / (in_d as f64).sqrt();
        let data: Vec<f64> = (0..in_d * out_d).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.params.push(Param {
            name: format!("{name}.w"),
            group: self.group,
            value: Tensor::from_vec(&[in_d, out_d], data),
        });
        self.params.push(Param {
            name: format!("{name}.b"),
            group: self.group,
            value: Tensor::zeros(&[out_d]),
        });
        self
    }

    fn norm(&mut self, name: &str, c: usize) -> &mut Self {
        self.params.push(Param {
            name: format!("{name}.g"),
            group: self.group,
            value: Tensor::full(&[c], 1.0),
        });
        self.params.push(Param {
            name: format!("{name}.b"),
            group: self.group,
            value: Tensor::zeros(&[c]),
        });
        self
    }
}

fn unet_params(
    b: &mut ParamBuilder,
    prefix: &str,
    desc: &MappingNetDescriptor,
    in_channels: usize,
    out_channels: usize,
) {
    let mut prev = in_channels;
    for l in 0..desc.levels {
        let c = desc.level_channels(l);
        b.conv(&format!("{prefix}enc{l}.conv1"), c, prev, 3, false)
            .norm(&format!("{prefix}enc{l}.bn1"), c)
            .conv(&format!("{prefix}enc{l}.conv2"), c, c, 3, false)
            .norm(&format!("{prefix}enc{l}.bn2"), c);
        prev = c;
    }
    let cb = desc.level_channels(desc.levels);
    b.conv(&format!("{prefix}bott.conv1"), cb, prev, 3, false)
        .norm(&format!("{prefix}bott.bn1"), cb)
        .conv(&format!("{prefix}bott.conv2"), cb, cb, 3, false)
        .norm(&format!("{prefix}bott.bn2"), cb);
    let mut above = cb;
    for l in (0..desc.levels).rev() {
        let c = desc.level_channels(l);
        let in_c = if desc.use_skip_connections { above + c } else { above };
        b.conv(&format!("{prefix}dec{l}.conv1"), c, in_c, 3, false)
            .norm(&format!("{prefix}dec{l}.bn1"), c)
            .conv(&format!("{prefix}dec{l}.conv2"), c, c, 3, false)
            .norm(&format!("{prefix}dec{l}.bn2"), c);
        above = c;
    }
    b.conv(&format!("{prefix}head.conv"), out_channels, above, 1, true);
}

/// Build a mapping network (image -> image U-Net).
pub fn build_mapping(
    desc: &MappingNetDescriptor,
    in_channels: usize,
    out_channels: usize,
    head: HeadActivation,
    rng: &mut ChaCha8Rng,
) -> Result<ModelBundle> {
    desc.validate()?;
    let mut b = ParamBuilder::new(rng);
    b.group(ParamGroup::Whole);
    unet_params(&mut b, "", desc, in_channels, out_channels);
    Ok(ModelBundle::from_params(
        NetDescriptor::Mapping { desc: desc.clone(), in_channels, out_channels, head },
        b.params,
    ))
}

pub fn build_discriminator(rng: &mut ChaCha8Rng) -> ModelBundle {
    let mut b = ParamBuilder::new(rng);
    b.group(ParamGroup::Whole);
    let mut prev = DiscriminatorDescriptor::IN_CHANNELS;
    for (i, (&f, &k)) in DiscriminatorDescriptor::FILTERS
        .iter()
        .zip(DiscriminatorDescriptor::KERNELS.iter())
        .enumerate()
    {
        let last = i == DiscriminatorDescriptor::FILTERS.len() - 1;
        b.conv(&format!("layer{i}.conv"), f, prev, k, last);
        if !last {
            b.norm(&format!("layer{i}.bn"), f);
        }
        prev = f;
    }
    ModelBundle::from_params(
        NetDescriptor::Discriminator { desc: DiscriminatorDescriptor::default() },
        b.params,
    )
}

/// Build a dual-modelling network: shared feature extractor, local conv
/// branch, global attention branch.
pub fn build_dual(desc: &DualNetDescriptor, rng: &mut ChaCha8Rng) -> Result<ModelBundle> {
    desc.validate()?;
    let f = desc.feature_channels;
    let d = desc.model_dim();
    let mut b = ParamBuilder::new(rng);

    b.group(ParamGroup::Feature);
    unet_params(&mut b, "feat.", &desc.feature_extractor, 1, f);

    b.group(ParamGroup::Local);
    for i in 0..3 {
        b.conv(&format!("local.conv{i}"), f, f, 3, false).norm(&format!("local.bn{i}"), f);
    }
    b.conv("local.head", 1, f, 1, true);

    b.group(ParamGroup::Global);
    for i in 0..desc.attention_blocks {
        b.norm(&format!("global.blk{i}.ln1"), d)
            .linear(&format!("global.blk{i}.q"), d, d)
            .linear(&format!("global.blk{i}.k"), d, d)
            .linear(&format!("global.blk{i}.v"), d, d)
            .linear(&format!("global.blk{i}.o"), d, d)
            .norm(&format!("global.blk{i}.ln2"), d)
            .linear(&format!("global.blk{i}.ff1"), d, 2 * d)
            .linear(&format!("global.blk{i}.ff2"), 2 * d, d);
    }
    b.conv("global.head", 1, f, 1, true);

    Ok(ModelBundle::from_params(NetDescriptor::Dual { desc: desc.clone() }, b.params))
}

/// Rebuild the parameter skeleton (names, groups, shapes) for a
/// descriptor; used to validate checkpoints.
pub fn build_skeleton(descriptor: &NetDescriptor) -> Result<ModelBundle> {
    let mut rng = crate::rng::stream(0, "skeleton");
    match descriptor {
        NetDescriptor::Mapping { desc, in_channels, out_channels, head } => {
            build_mapping(desc, *in_channels, *out_channels, *head, &mut rng)
        }
        NetDescriptor::Discriminator { .. } => Ok(build_discriminator(&mut rng)),
        NetDescriptor::Dual { desc } => build_dual(desc, &mut rng),
    }
}
