use std::fmt;
use std::str::FromStr;

use super::spec::{LayerKind, LayerSpec, NetworkSpec};
use crate::error::{invalid, Error, Result};

/// Filter counts of the classic encoder-decoder.
pub const UNET_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
/// Filter counts of the multiscale-block network.
pub const MU_NET_WIDTHS: [usize; 5] = [16, 32, 64, 128, 256];
/// Half-width schedule used for desk-scale runs.
pub const MU_NET_HALF_WIDTHS: [usize; 5] = [8, 16, 32, 64, 128];

/// Encoder levels before the bottleneck.
pub const ENCODER_DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockVariant {
    /// Parallel 1x1, 3x3, 5x5 and 7x7 branches.
    BlockI,
    /// Three chained 3x3 units whose outputs are concatenated.
    BlockII,
    /// `BlockII` with every 3x3 unit factorized into 3x1 then 1x3.
    BlockIII,
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b1" | "block1" | "blocki" | "i" => Ok(BlockVariant::BlockI),
            "b2" | "block2" | "blockii" | "ii" => Ok(BlockVariant::BlockII),
            "b3" | "block3" | "blockiii" | "iii" => Ok(BlockVariant::BlockIII),
            other => Err(invalid(format!("unknown block variant `{other}`"))),
        }
    }
}

/// Which pixel-level network to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    UNet,
    MuNet(BlockVariant),
}

impl Architecture {
    pub fn default_widths(self) -> [usize; 5] {
        match self {
            Architecture::UNet => UNET_WIDTHS,
            Architecture::MuNet(_) => MU_NET_WIDTHS,
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("unet") || s.eq_ignore_ascii_case("u-net") {
            return Ok(Architecture::UNet);
        }
        let block = s.trim_start_matches("mu-net-").trim_start_matches("munet-");
        block
            .parse()
            .map(Architecture::MuNet)
            .map_err(|_| invalid(format!("unknown architecture `{s}` (expected unet, b1, b2, b3)")))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::UNet => "unet",
            Architecture::MuNet(BlockVariant::BlockI) => "b1",
            Architecture::MuNet(BlockVariant::BlockII) => "b2",
            Architecture::MuNet(BlockVariant::BlockIII) => "b3",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn gray(size: usize) -> Self {
        Self {
            channels: 1,
            height: size,
            width: size,
        }
    }
}

/// Layers of one block plus the name of the layer carrying its output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockGraph {
    pub layers: Vec<LayerSpec>,
    pub output: String,
}

struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn new() -> Self {
        Self { layers: Vec::new() }
    }

    fn push(&mut self, layer: LayerSpec) -> String {
        let name = layer.name.clone();
        self.layers.push(layer);
        name
    }

    /// conv -> bn -> relu; returns the relu name.
    fn conv_unit(&mut self, name: &str, input: &str, kernel: (usize, usize), filters: usize) -> String {
        let conv = self.push(LayerSpec::conv(format!("{name}_conv"), input, kernel, filters));
        let bn = self.push(LayerSpec::new(format!("{name}_bn"), LayerKind::Bn, &[&conv]));
        self.push(LayerSpec::new(format!("{name}_relu"), LayerKind::Relu, &[&bn]))
    }

    fn concat(&mut self, name: String, inputs: &[&str]) -> String {
        self.push(LayerSpec::new(name, LayerKind::Concat, inputs))
    }

    fn input(&mut self, shape: InputShape) -> String {
        self.push(LayerSpec {
            kernel: Some((shape.height, shape.width)),
            filters: shape.channels,
            ..LayerSpec::new("input", LayerKind::Input, &[])
        })
    }
}

fn check_input(shape: InputShape, depth: usize) -> Result<()> {
    let factor = 1 << depth;
    if shape.channels == 0 {
        return Err(invalid("input needs at least one channel"));
    }
    for (dim, v) in [("height", shape.height), ("width", shape.width)] {
        if v == 0 || v % factor != 0 {
            return Err(invalid(format!("input {dim} {v} is not divisible by {factor}")));
        }
    }
    Ok(())
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() != ENCODER_DEPTH + 1 {
        return Err(invalid(format!(
            "width schedule needs {} entries, got {}",
            ENCODER_DEPTH + 1,
            widths.len()
        )));
    }
    if widths.contains(&0) {
        return Err(invalid("width schedule entries must be positive"));
    }
    Ok(())
}

fn build_block_into(b: &mut Builder, variant: BlockVariant, prefix: &str, input: &str, filters: usize) -> String {
    let branches: Vec<String> = match variant {
        BlockVariant::BlockI => [1, 3, 5, 7]
            .iter()
            .map(|&k| b.conv_unit(&format!("{prefix}_k{k}"), input, (k, k), filters))
            .collect(),
        BlockVariant::BlockII => {
            let mut outs = Vec::new();
            let mut prev = input.to_string();
            for u in 1..=3 {
                prev = b.conv_unit(&format!("{prefix}_u{u}"), &prev, (3, 3), filters);
                outs.push(prev.clone());
            }
            outs
        }
        BlockVariant::BlockIII => {
            let mut outs = Vec::new();
            let mut prev = input.to_string();
            for u in 1..=3 {
                let vertical = b.conv_unit(&format!("{prefix}_u{u}a"), &prev, (3, 1), filters);
                prev = b.conv_unit(&format!("{prefix}_u{u}b"), &vertical, (1, 3), filters);
                outs.push(prev.clone());
            }
            outs
        }
    };
    let refs: Vec<&str> = branches.iter().map(String::as_str).collect();
    let cat = b.concat(format!("{prefix}_cat"), &refs);
    b.conv_unit(&format!("{prefix}_proj"), &cat, (1, 1), filters)
}

/// One multiscale block reading from `input`, ending in a 1x1 projection to
/// exactly `filters` channels.
pub fn build_block(
    variant: BlockVariant,
    prefix: &str,
    input: &str,
    in_channels: usize,
    filters: usize,
) -> Result<BlockGraph> {
    if in_channels == 0 || filters == 0 {
        return Err(invalid("block needs positive input channels and filters"));
    }
    let mut b = Builder::new();
    let output = build_block_into(&mut b, variant, prefix, input, filters);
    Ok(BlockGraph {
        layers: b.layers,
        output,
    })
}

/// Shared encoder-decoder skeleton. `level` emits the feature extractor for
/// one level and returns its output name.
fn encoder_decoder(
    widths: &[usize],
    input: InputShape,
    mut level: impl FnMut(&mut Builder, usize, &str, usize) -> String,
) -> Result<NetworkSpec> {
    check_widths(widths)?;
    check_input(input, ENCODER_DEPTH)?;
    let mut b = Builder::new();
    let mut x = b.input(input);
    let mut skips = Vec::new();
    for (i, &w) in widths[..ENCODER_DEPTH].iter().enumerate() {
        let out = level(&mut b, i + 1, &x, w);
        skips.push(out.clone());
        x = b.push(LayerSpec::new(format!("pool{}", i + 1), LayerKind::MaxPool, &[&out]));
    }
    x = level(&mut b, ENCODER_DEPTH + 1, &x, widths[ENCODER_DEPTH]);
    let mut skip_pairs = Vec::new();
    for lvl in (1..=ENCODER_DEPTH).rev() {
        let w = widths[lvl - 1];
        let up = b.push(LayerSpec::upconv(format!("up{lvl}"), &x, w));
        let bn = b.push(LayerSpec::new(format!("up{lvl}_bn"), LayerKind::Bn, &[&up]));
        let relu = b.push(LayerSpec::new(format!("up{lvl}_relu"), LayerKind::Relu, &[&bn]));
        let skip = &skips[lvl - 1];
        let cat = b.concat(format!("cat{lvl}"), &[skip, &relu]);
        skip_pairs.push((skip.clone(), cat.clone()));
        // decoder levels are numbered after the bottleneck, mirroring the encoder
        x = level(&mut b, 2 * (ENCODER_DEPTH + 1) - lvl, &cat, w);
    }
    let head = b.push(LayerSpec::conv("head_conv", &x, (1, 1), 1));
    let head_bn = b.push(LayerSpec::new("head_bn", LayerKind::Bn, &[&head]));
    b.push(LayerSpec::new("prob", LayerKind::Sigmoid, &[&head_bn]));
    Ok(NetworkSpec {
        layers: b.layers,
        width_schedule: widths.to_vec(),
        depth: ENCODER_DEPTH,
        skip_pairs,
    })
}

/// Classic encoder-decoder: two 3x3 conv units per level.
pub fn build_unet(widths: &[usize], input: InputShape) -> Result<NetworkSpec> {
    encoder_decoder(widths, input, |b, lvl, x, w| {
        let first = b.conv_unit(&format!("level{lvl}_c1"), x, (3, 3), w);
        b.conv_unit(&format!("level{lvl}_c2"), &first, (3, 3), w)
    })
}

/// Encoder-decoder with one multiscale block per level. Blocks 1-4 encode,
/// block 5 is the bottleneck and blocks 6-9 decode, so block `k` and block
/// `10 - k` share a width.
pub fn build_mu_net(variant: BlockVariant, widths: &[usize], input: InputShape) -> Result<NetworkSpec> {
    encoder_decoder(widths, input, |b, lvl, x, w| {
        build_block_into(b, variant, &format!("block{lvl}"), x, w)
    })
}

pub fn build_network(arch: Architecture, widths: &[usize], input: InputShape) -> Result<NetworkSpec> {
    match arch {
        Architecture::UNet => build_unet(widths, input),
        Architecture::MuNet(v) => build_mu_net(v, widths, input),
    }
}

/// Compact two-stage classifier for square grayscale patches ending in a
/// two-way softmax.
pub fn build_patch_classifier(patch_size: usize) -> Result<NetworkSpec> {
    if patch_size < 4 {
        return Err(invalid(format!("patch size {patch_size} is below the minimum of 4")));
    }
    if !patch_size.is_multiple_of(2) {
        return Err(invalid(format!("patch size {patch_size} must be even for pooling")));
    }
    let mut b = Builder::new();
    let x = b.input(InputShape::gray(patch_size));
    let s1 = b.conv_unit("stage1", &x, (3, 3), 8);
    let s2 = b.conv_unit("stage2", &s1, (3, 3), 16);
    let pool = b.push(LayerSpec::new("pool", LayerKind::MaxPool, &[&s2]));
    let logits = b.push(LayerSpec::dense("logits", &pool, 2));
    b.push(LayerSpec::new("prob", LayerKind::Softmax, &[&logits]));
    Ok(NetworkSpec {
        layers: b.layers,
        width_schedule: vec![8, 16],
        depth: 0,
        skip_pairs: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernels(layers: &[LayerSpec]) -> Vec<(usize, usize)> {
        let mut ks: Vec<_> = layers
            .iter()
            .filter(|l| l.kind == LayerKind::Conv)
            .filter_map(|l| l.kernel)
            .collect();
        ks.sort();
        ks.dedup();
        ks
    }

    #[test]
    fn block_kernel_sets() {
        let b1 = build_block(BlockVariant::BlockI, "b", "x", 1, 16).unwrap();
        assert_eq!(kernels(&b1.layers), vec![(1, 1), (3, 3), (5, 5), (7, 7)]);
        let b2 = build_block(BlockVariant::BlockII, "b", "x", 1, 16).unwrap();
        assert_eq!(kernels(&b2.layers), vec![(1, 1), (3, 3)]);
        let b3 = build_block(BlockVariant::BlockIII, "b", "x", 1, 16).unwrap();
        assert_eq!(kernels(&b3.layers), vec![(1, 1), (1, 3), (3, 1)]);
        for g in [&b1, &b2, &b3] {
            let last_conv = g.layers.iter().rev().find(|l| l.kind == LayerKind::Conv).unwrap();
            assert_eq!((last_conv.kernel, last_conv.filters), (Some((1, 1)), 16));
            assert_eq!(g.output, "b_proj_relu");
        }
    }

    #[test]
    fn block_two_concatenates_every_unit() {
        let g = build_block(BlockVariant::BlockII, "b", "x", 4, 8).unwrap();
        let cat = g.layers.iter().find(|l| l.kind == LayerKind::Concat).unwrap();
        assert_eq!(cat.inputs, vec!["b_u1_relu", "b_u2_relu", "b_u3_relu"]);
        let u2 = g.layers.iter().find(|l| l.name == "b_u2_conv").unwrap();
        assert_eq!(u2.inputs, vec!["b_u1_relu"]);
    }

    #[test]
    fn architecture_names() {
        assert_eq!("unet".parse::<Architecture>().unwrap(), Architecture::UNet);
        assert_eq!("b3".parse::<Architecture>().unwrap(), Architecture::MuNet(BlockVariant::BlockIII));
        assert!("b4".parse::<Architecture>().is_err());
        assert!("block4".parse::<BlockVariant>().is_err());
        for a in ["unet", "b1", "b2", "b3"] {
            assert_eq!(a.parse::<Architecture>().unwrap().to_string(), a);
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        assert!(build_unet(&UNET_WIDTHS, InputShape::gray(250)).is_err());
        assert!(build_mu_net(BlockVariant::BlockIII, &MU_NET_WIDTHS, InputShape::gray(72)).is_err());
        assert!(build_unet(&[8, 16], InputShape::gray(64)).is_err());
    }

    #[test]
    fn unet_bottleneck_and_concat_widths() {
        let spec = build_unet(&UNET_WIDTHS, InputShape::gray(256)).unwrap();
        let shapes = spec.infer_shapes().unwrap();
        let at = |name: &str| shapes[spec.layers.iter().position(|l| l.name == name).unwrap()];
        let bott = at("level5_c2_relu");
        assert_eq!((bott.channels, bott.height, bott.width), (1024, 16, 16));
        for (lvl, &w) in UNET_WIDTHS[..4].iter().enumerate() {
            assert_eq!(at(&format!("cat{}", lvl + 1)).channels, 2 * w);
        }
        let out = *shapes.last().unwrap();
        assert_eq!((out.channels, out.height, out.width), (1, 256, 256));
    }

    #[test]
    fn mu_net_bottleneck() {
        let spec = build_mu_net(BlockVariant::BlockIII, &MU_NET_WIDTHS, InputShape::gray(256)).unwrap();
        let shapes = spec.infer_shapes().unwrap();
        let i = spec.layers.iter().position(|l| l.name == "block5_proj_relu").unwrap();
        assert_eq!((shapes[i].channels, shapes[i].height), (256, 16));
        // blocks 1 and 9 share the first width
        let b9 = spec.layers.iter().position(|l| l.name == "block9_proj_conv").unwrap();
        assert_eq!(spec.layers[b9].filters, 16);
        assert_eq!(spec.skip_pairs.len(), 4);
    }

    #[test]
    fn patch_classifier_shape() {
        let spec = build_patch_classifier(8).unwrap();
        let out = *spec.infer_shapes().unwrap().last().unwrap();
        assert_eq!(out.channels, 2);
        assert_eq!(spec, build_patch_classifier(8).unwrap());
        assert!(build_patch_classifier(3).is_err());
        assert!(build_patch_classifier(2).is_err());
    }
}
