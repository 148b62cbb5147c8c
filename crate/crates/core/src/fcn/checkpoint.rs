//! `KFCN` checkpoints: magic, u32 layer count, then per layer four u32
//! dimensions (out, in, kh, kw), f32 filter data and f32 biases. Stride,
//! padding and activation are not part of the file; they come from the
//! architecture the caller supplies.

use std::path::Path;

use super::{FcnArch, FcnLayer, FcnParams};
use crate::binio::{self, read_blocks, u32_len, write_blocks, ParamBlock};
use crate::error::{Error, FormatError, Result};
use crate::nn::Conv2d;

pub const KFCN_MAGIC: &[u8; 4] = b"KFCN";

impl FcnParams<f32> {
    pub fn to_blocks(&self) -> Vec<ParamBlock> {
        self.layers
            .iter()
            .map(|l| ParamBlock {
                dims: [l.conv.out_c as u32, l.conv.in_c as u32, l.conv.kh as u32, l.conv.kw as u32],
                weight: l.conv.weight.clone(),
                bias: l.conv.bias.clone(),
            })
            .collect()
    }

    pub fn to_kfcn_bytes(&self) -> Vec<u8> {
        write_blocks(KFCN_MAGIC, &[], &self.to_blocks())
    }

    /// Decodes the raw block list without attaching an architecture.
    pub fn blocks_from_kfcn_bytes(bytes: &[u8]) -> Result<Vec<ParamBlock>, FormatError> {
        Ok(read_blocks(bytes, KFCN_MAGIC, "KFCN checkpoint", 0)?.1)
    }

    /// Rebuilds the network from stored blocks and the layer layout in `arch`.
    pub fn from_blocks(blocks: Vec<ParamBlock>, arch: &FcnArch) -> Result<Self> {
        if blocks.len() != arch.layers.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} layers, architecture {}",
                blocks.len(),
                arch.layers.len()
            )));
        }
        let mut in_c = 1u32;
        let mut layers = Vec::with_capacity(blocks.len());
        for (i, (b, spec)) in blocks.into_iter().zip(&arch.layers).enumerate() {
            let want = [spec.out_channels as u32, in_c, spec.kernel as u32, spec.kernel as u32];
            if b.dims != want {
                return Err(Error::contract(format!(
                    "layer {i} dims {:?} do not match the architecture {want:?}",
                    b.dims
                )));
            }
            in_c = b.dims[0];
            layers.push(FcnLayer {
                conv: Conv2d {
                    in_c: b.dims[1] as usize,
                    out_c: b.dims[0] as usize,
                    kh: b.dims[2] as usize,
                    kw: b.dims[3] as usize,
                    stride: spec.stride,
                    pad: spec.pad,
                    weight: b.weight,
                    bias: b.bias,
                },
                relu: spec.relu,
            });
        }
        let p = FcnParams { layers };
        p.validate()?;
        Ok(p)
    }

    pub fn from_kfcn_bytes(bytes: &[u8], arch: &FcnArch) -> Result<Self> {
        Self::from_blocks(Self::blocks_from_kfcn_bytes(bytes)?, arch)
    }
}

pub fn write_kfcn(params: &FcnParams<f32>, path: &Path) -> Result<()> {
    u32_len(params.layers.len(), "layer count")?;
    binio::write_file(path, &params.to_kfcn_bytes())
}

pub fn read_kfcn(path: &Path, arch: &FcnArch) -> Result<FcnParams<f32>> {
    let blocks = binio::decode_file(path, FcnParams::blocks_from_kfcn_bytes)?;
    FcnParams::from_blocks(blocks, arch)
}
