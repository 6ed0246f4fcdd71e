//! Named architectures: the VGG-11 family with its low-rank variants, and
//! two small CIFAR-10 networks for desk-scale training.

use crate::arch::{ArchSpec, LayerSpec};
use crate::composite::{CompositeConvSpec, FilterGroup};
use crate::error::{Error, Result};

/// VGG-family names, in table order.
pub const VGG_MODELS: [&str; 8] = [
    "vgg11",
    "vgg-gmp",
    "vgg-gmp-sf",
    "vgg-gmp-lr",
    "vgg-gmp-lr-2x",
    "vgg-gmp-lr-join",
    "vgg-gmp-lr-lde",
    "vgg-gmp-lr-join-wfull",
];

pub const DESK_MODELS: [&str; 2] = ["desk-full", "desk-lr"];

/// Input used for the VGG family.
pub const VGG_INPUT: (usize, usize, usize) = (3, 224, 224);
pub const CIFAR_INPUT: (usize, usize, usize) = (3, 32, 32);

/// Filter counts of the eight VGG-11 conv layers, and the layers each
/// 2x2 pool follows.
const VGG_WIDTHS: [usize; 8] = [64, 128, 256, 256, 512, 512, 512, 512];
const VGG_POOL_AFTER: [usize; 5] = [0, 1, 3, 5, 7];

/// Desk-scale channel widths of the three conv blocks.
pub const DESK_WIDTHS: [usize; 3] = [32, 64, 128];

/// All known model names, sorted.
pub fn model_names() -> Vec<&'static str> {
    let mut names: Vec<&str> = VGG_MODELS.iter().chain(&DESK_MODELS).copied().collect();
    names.sort_unstable();
    names
}

fn unknown(name: &str) -> Error {
    Error::UnknownModel {
        name: name.to_string(),
        available: model_names().iter().map(ToString::to_string).collect(),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Variant {
    Full,
    Separable,
    LowRank,
    LowRank2x,
    Join,
    Lde,
    JoinWithFull,
}

fn cross(d_each: usize) -> Vec<FilterGroup> {
    vec![FilterGroup::new(3, 1, d_each), FilterGroup::new(1, 3, d_each)]
}

/// Layers replacing one 3x3 conv of `d` filters on `c` input channels;
/// returns the layers and the resulting channel count.
fn conv_block(variant: Variant, c: usize, d: usize, stride: (usize, usize)) -> (Vec<LayerSpec>, usize) {
    let conv = |c, d, kh, kw, stride| LayerSpec::Conv {
        in_channels: c,
        out_channels: d,
        kh,
        kw,
        stride,
    };
    let comp = |groups, join: Option<usize>| {
        let mut spec = CompositeConvSpec::new(groups).with_stride(stride);
        spec.join = join;
        LayerSpec::composite(c, spec)
    };
    let (mut layers, out) = match variant {
        Variant::Full => (vec![conv(c, d, 3, 3, stride)], d),
        // 1x3 (vertical) then 3x1 (horizontal), no nonlinearity between.
        Variant::Separable => (vec![conv(c, d, 3, 1, stride), conv(d, d, 1, 3, (1, 1))], d),
        Variant::LowRank => (vec![comp(cross(d / 2), None)], d),
        Variant::LowRank2x => (vec![comp(cross(d), None)], 2 * d),
        Variant::Join => (vec![comp(cross(d / 2), Some(d))], d),
        Variant::Lde => (vec![comp(cross(d / 2), Some(d / 2))], d / 2),
        Variant::JoinWithFull => {
            let mut groups = cross(3 * d / 8);
            groups.push(FilterGroup::new(3, 3, d / 4));
            (vec![comp(groups, Some(d))], d)
        }
    };
    layers.push(LayerSpec::Relu);
    (layers, out)
}

fn vgg(name: &str, variant: Variant, global_pool: bool) -> ArchSpec {
    let (mut c, mut hw) = (VGG_INPUT.0, VGG_INPUT.1);
    let mut layers = Vec::new();
    for (i, &d) in VGG_WIDTHS.iter().enumerate() {
        let stride = if i == 0 && variant == Variant::Lde { (2, 2) } else { (1, 1) };
        let (block, out) = conv_block(variant, c, d, stride);
        layers.extend(block);
        c = out;
        hw = (hw - 1) / stride.0 + 1;
        if VGG_POOL_AFTER.contains(&i) {
            if i == VGG_WIDTHS.len() - 1 && global_pool {
                layers.push(LayerSpec::GlobalMaxPool);
                hw = 1;
            } else {
                layers.push(LayerSpec::maxpool());
                hw /= 2;
            }
        }
    }
    layers.extend([
        LayerSpec::dense(c * hw * hw, 4096),
        LayerSpec::Relu,
        LayerSpec::dense(4096, 4096),
        LayerSpec::Relu,
        LayerSpec::dense(4096, 1000),
        LayerSpec::Softmax,
    ]);
    ArchSpec::new(name, VGG_INPUT, layers)
}

/// A VGG-family architecture by name.
pub fn build(name: &str) -> Result<ArchSpec> {
    let arch = match name {
        "vgg11" | "vgg-11" => vgg("vgg11", Variant::Full, false),
        "vgg-gmp" => vgg(name, Variant::Full, true),
        "vgg-gmp-sf" => vgg(name, Variant::Separable, true),
        "vgg-gmp-lr" => vgg(name, Variant::LowRank, true),
        "vgg-gmp-lr-2x" => vgg(name, Variant::LowRank2x, true),
        "vgg-gmp-lr-join" => vgg(name, Variant::Join, true),
        "vgg-gmp-lr-lde" => vgg(name, Variant::Lde, true),
        "vgg-gmp-lr-join-wfull" => vgg(name, Variant::JoinWithFull, true),
        _ if DESK_MODELS.contains(&name) => return build_desk(name),
        _ => return Err(unknown(name)),
    };
    Ok(arch)
}

/// Desk-scale CIFAR-10 networks: three conv blocks with a global max-pool
/// head. `desk-lr` swaps every 3x3 conv for a join-free `3x1 | 1x3` pair.
pub fn build_desk(name: &str) -> Result<ArchSpec> {
    let variant = match name {
        "desk-full" => Variant::Full,
        "desk-lr" => Variant::LowRank,
        _ => return Err(unknown(name)),
    };
    let mut c = CIFAR_INPUT.0;
    let mut layers = Vec::new();
    for (i, &d) in DESK_WIDTHS.iter().enumerate() {
        let (block, out) = conv_block(variant, c, d, (1, 1));
        layers.extend(block);
        c = out;
        layers.push(if i + 1 == DESK_WIDTHS.len() {
            LayerSpec::GlobalMaxPool
        } else {
            LayerSpec::maxpool()
        });
    }
    layers.extend([LayerSpec::dense(c, 10), LayerSpec::Softmax]);
    Ok(ArchSpec::new(name, CIFAR_INPUT, layers))
}

/// `depth` join-free `3x1 | 1x3` composite layers (each `channels/2 + channels/2`
/// filters) with ReLUs, on a `channels x size x size` input. Used to probe
/// gradient-variance propagation.
pub fn composite_stack(depth: usize, channels: usize, size: usize) -> ArchSpec {
    let layers = (0..depth)
        .flat_map(|_| {
            [
                LayerSpec::composite(channels, CompositeConvSpec::new(cross(channels / 2))),
                LayerSpec::Relu,
            ]
        })
        .collect();
    ArchSpec::new(format!("composite-stack-{depth}x{channels}"), (channels, size, size), layers)
}
