//! Bundled reference spaces and hand-written reference networks: the
//! standard ResNets and the DenseNAS-R architectures re-expressed as paths
//! through the ResNet-based spaces.

use serde::Deserialize;

use crate::cost::{NetworkDescription, OpSignature};
use crate::derive::{DerivedArchitecture, DerivedBlock, DerivedLayer, Provenance, ARCH_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::space::{build_super_network, OperationKind, SpaceConfig, SuperNetworkSpec};

pub const MBV2_SPACE: &str = include_str!("../configs/mbv2_space.json");
pub const RESNET_BASIC_SPACE: &str = include_str!("../configs/resnet_basic_space.json");
pub const RESNET_BOTTLENECK_SPACE: &str = include_str!("../configs/resnet_bottleneck_space.json");

#[derive(Deserialize)]
struct SpaceOnly {
    #[serde(flatten)]
    space: SpaceConfig,
}

fn parse_space(name: &str, text: &str) -> Result<SpaceConfig> {
    serde_json::from_str::<SpaceOnly>(text)
        .map(|s| s.space)
        .map_err(|e| Error::json(name, e))
}

pub fn mbv2_space_config() -> Result<SpaceConfig> {
    parse_space("mbv2_space.json", MBV2_SPACE)
}

pub fn resnet_basic_space_config() -> Result<SpaceConfig> {
    parse_space("resnet_basic_space.json", RESNET_BASIC_SPACE)
}

pub fn resnet_bottleneck_space_config() -> Result<SpaceConfig> {
    parse_space("resnet_bottleneck_space.json", RESNET_BOTTLENECK_SPACE)
}

pub fn mbv2_space() -> Result<SuperNetworkSpec> {
    build_super_network(&mbv2_space_config()?)
}

pub fn resnet_basic_space() -> Result<SuperNetworkSpec> {
    build_super_network(&resnet_basic_space_config()?)
}

pub fn resnet_bottleneck_space() -> Result<SuperNetworkSpec> {
    build_super_network(&resnet_bottleneck_space_config()?)
}

/// Standard ImageNet ResNet: 7x7 stem, max pool, four stages, linear classifier.
fn resnet(name: &str, depths: [usize; 4], bottleneck: bool) -> NetworkDescription {
    let mut layers = vec![OpSignature::conv(7, 3, 64, 224, 2)];
    let (mut c_in, mut res) = (64u32, 56u32);
    for (stage, (&depth, base)) in depths.iter().zip([64u32, 128, 256, 512]).enumerate() {
        for i in 0..depth {
            let stride = if i == 0 && stage > 0 { 2 } else { 1 };
            let (op, c_out) = if bottleneck {
                (OperationKind::bottleneck(), base * 4)
            } else {
                (OperationKind::ResnetBasic, base)
            };
            layers.push(OpSignature::candidate(op, c_in, c_out, res, stride));
            c_in = c_out;
            res /= stride;
        }
    }
    layers.push(OpSignature::linear(c_in, 1000));
    NetworkDescription {
        name: name.to_string(),
        layers,
    }
}

pub fn resnet18() -> NetworkDescription {
    resnet("resnet18", [2, 2, 2, 2], false)
}

pub fn resnet34() -> NetworkDescription {
    resnet("resnet34", [3, 4, 6, 3], false)
}

/// ResNet-50 with the stride on the 3x3 convolution of each bottleneck.
pub fn resnet50b() -> NetworkDescription {
    resnet("resnet50b", [3, 4, 6, 3], true)
}

/// Builds the architecture that follows `path` through `spec`, using the
/// first non-skip candidate everywhere. Each entry is a block index and the
/// number of basic layers kept after its alignment layer.
pub fn path_architecture(spec: &SuperNetworkSpec, path: &[(usize, usize)]) -> Result<DerivedArchitecture> {
    let op = *spec
        .basic_layer
        .candidates
        .iter()
        .find(|c| !c.is_skip())
        .ok_or_else(|| Error::InvalidOperation("basic layer has no non-skip candidate".into()))?;
    let mut blocks = Vec::with_capacity(path.len());
    let mut prev = 0usize;
    for &(index, n_layers) in path {
        if index == 0 || index > spec.n_blocks() {
            return Err(Error::IndexOutOfRange {
                index,
                len: spec.n_blocks(),
            });
        }
        let e = spec
            .edge_index(prev, index)
            .ok_or_else(|| Error::Unbound(format!("no connection {prev}->{index}")))?;
        let conn = &spec.connections[e];
        let block = spec.block(index);
        if n_layers > block.num_basic_layers {
            return Err(Error::Config(format!(
                "block {index} has {} basic layers, {n_layers} requested",
                block.num_basic_layers
            )));
        }
        blocks.push(DerivedBlock {
            index,
            from: prev,
            width: block.width,
            resolution: block.resolution,
            in_width: spec.node_width(prev).unwrap_or(0),
            stride_in: conn.stride,
            alignment: conn.alignment.as_ref().map_or(op, |l| l.candidates[0]),
            layers: (0..n_layers).map(|slot| DerivedLayer { slot, op }).collect(),
        });
        prev = index;
    }
    let arch = DerivedArchitecture {
        schema_version: ARCH_SCHEMA_VERSION,
        input_resolution: spec.input_resolution,
        stem: spec.stem,
        head: spec.head,
        blocks,
        ending_block: spec.end_node(),
        provenance: Provenance {
            spec_hash: spec.content_hash()?,
            params_hash: String::new(),
        },
    };
    crate::derive::validate_architecture(spec, &arch)?;
    Ok(arch)
}

// Block indices refer to the bundled ResNet spaces:
//   56: 1..=3, 28: 4..=6, 14: 7..=10, 7: 11..=13.
// Layer counts exclude the alignment layer, which is the first layer of each block.
const R1_PATH: [(usize, usize); 6] = [(3, 0), (4, 1), (7, 5), (8, 2), (11, 0), (13, 0)];
const R2_PATH: [(usize, usize); 6] = [(1, 0), (4, 3), (7, 15), (9, 3), (11, 1), (13, 0)];

pub fn densenas_r1() -> Result<DerivedArchitecture> {
    path_architecture(&resnet_basic_space()?, &R1_PATH)
}

pub fn densenas_r2() -> Result<DerivedArchitecture> {
    path_architecture(&resnet_basic_space()?, &R2_PATH)
}

/// Same block/layer layout as R2, with bottleneck blocks four times as wide.
pub fn densenas_r3() -> Result<DerivedArchitecture> {
    path_architecture(&resnet_bottleneck_space()?, &R2_PATH)
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 6] = ["resnet18", "resnet34", "resnet50b", "densenas-r1", "densenas-r2", "densenas-r3"];

/// A reference network by name, either as a flat layer list or as a path architecture.
pub enum Preset {
    Network(NetworkDescription),
    Architecture(DerivedArchitecture),
}

pub fn preset(name: &str) -> Result<Preset> {
    Ok(match name {
        "resnet18" => Preset::Network(resnet18()),
        "resnet34" => Preset::Network(resnet34()),
        "resnet50b" => Preset::Network(resnet50b()),
        "densenas-r1" => Preset::Architecture(densenas_r1()?),
        "densenas-r2" => Preset::Architecture(densenas_r2()?),
        "densenas-r3" => Preset::Architecture(densenas_r3()?),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{architecture_flops, architecture_params};
    use crate::space::validate;

    #[test]
    fn bundled_spaces_are_valid() {
        for spec in [mbv2_space(), resnet_basic_space(), resnet_bottleneck_space()] {
            let spec = spec.unwrap();
            assert!(validate(&spec).is_valid());
        }
        assert_eq!(mbv2_space().unwrap().n_blocks(), 16);
        assert_eq!(resnet_basic_space().unwrap().n_blocks(), 13);
    }

    // Values from an independent Python count of the same layer lists.
    #[test]
    fn resnet_counts_match_oracle() {
        assert_eq!(resnet18().flops().unwrap(), 1_814_073_344.0);
        assert_eq!(resnet18().params().unwrap(), 11_679_912);
        assert_eq!(resnet34().flops().unwrap(), 3_663_761_408.0);
        assert_eq!(resnet34().params().unwrap(), 21_780_648);
        assert_eq!(resnet50b().flops().unwrap(), 4_089_184_256.0);
        assert_eq!(resnet50b().params().unwrap(), 25_503_912);
    }

    #[test]
    fn densenas_counts_match_oracle() {
        let expect = [
            (densenas_r1(), 1_605_842_944.0, 11_080_712),
            (densenas_r2(), 3_059_341_312.0, 19_444_232),
            (densenas_r3(), 3_412_310_016.0, 24_587_848),
        ];
        for (arch, flops, params) in expect {
            let arch = arch.unwrap();
            assert_eq!(architecture_flops(&arch).unwrap(), flops);
            assert_eq!(architecture_params(&arch).unwrap(), params);
        }
    }

    #[test]
    fn densenas_layer_counts() {
        let r1 = densenas_r1().unwrap();
        assert_eq!(r1.block_indices(), vec![3, 4, 7, 8, 11, 13]);
        assert_eq!(r1.depth(), 1 + 2 + 6 + 3 + 1 + 1);
        let r2 = densenas_r2().unwrap();
        assert_eq!(r2.depth(), 1 + 4 + 16 + 4 + 2 + 1);
        let r3 = densenas_r3().unwrap();
        assert_eq!(r3.blocks.last().unwrap().width, 2048);
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(matches!(preset("vgg16"), Err(Error::Config(_))));
    }
}
