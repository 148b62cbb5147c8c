//! `KMAT` matcher checkpoints: magic, u32 K, u32 tower count, u32 block
//! count, then blocks laid out as in `KFCN` (towers first, then per-part
//! heads).

use std::path::Path;

use super::net::{Head, MatcherParams, Tower};
use crate::binio::{self, read_blocks, write_blocks, ParamBlock};
use crate::error::{Error, FormatError, Result};
use crate::nn::{Conv2d, Dense};

pub const KMAT_MAGIC: &[u8; 4] = b"KMAT";

fn conv_block(c: &Conv2d<f32>) -> ParamBlock {
    ParamBlock {
        dims: [c.out_c as u32, c.in_c as u32, c.kh as u32, c.kw as u32],
        weight: c.weight.clone(),
        bias: c.bias.clone(),
    }
}

fn dense_block(d: &Dense<f32>) -> ParamBlock {
    ParamBlock {
        dims: [d.output as u32, d.input as u32, 1, 1],
        weight: d.weight.clone(),
        bias: d.bias.clone(),
    }
}

fn conv_from(b: ParamBlock) -> Result<Conv2d<f32>> {
    if b.dims[2] != 3 || b.dims[3] != 3 {
        return Err(Error::contract("matcher convolutions must be 3x3"));
    }
    Ok(Conv2d {
        in_c: b.dims[1] as usize,
        out_c: b.dims[0] as usize,
        kh: 3,
        kw: 3,
        stride: 1,
        pad: 0,
        weight: b.weight,
        bias: b.bias,
    })
}

fn dense_from(b: ParamBlock) -> Result<Dense<f32>> {
    if b.dims[2] != 1 || b.dims[3] != 1 {
        return Err(Error::contract("fully connected blocks must be Nx1x1"));
    }
    Ok(Dense {
        input: b.dims[1] as usize,
        output: b.dims[0] as usize,
        weight: b.weight,
        bias: b.bias,
    })
}

impl MatcherParams<f32> {
    pub fn to_kmat_bytes(&self) -> Vec<u8> {
        let mut blocks = Vec::new();
        for t in &self.towers {
            blocks.push(conv_block(&t.conv1));
            blocks.push(conv_block(&t.conv2));
        }
        for h in &self.heads {
            blocks.push(dense_block(&h.fc1));
            blocks.push(dense_block(&h.fc2));
        }
        write_blocks(KMAT_MAGIC, &[self.heads.len() as u32, self.towers.len() as u32], &blocks)
    }

    pub fn from_kmat_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, blocks) = read_blocks(bytes, KMAT_MAGIC, "KMAT checkpoint", 2)?;
        let (k, n_towers) = (header[0] as usize, header[1] as usize);
        if k == 0 || n_towers == 0 {
            return Err(FormatError::ZeroDimension("matcher header").into());
        }
        if blocks.len() != 2 * (k + n_towers) {
            return Err(FormatError::invalid(
                "block count",
                format!("{} blocks for {k} heads and {n_towers} towers", blocks.len()),
            )
            .into());
        }
        let mut it = blocks.into_iter();
        let mut towers = Vec::with_capacity(n_towers);
        for _ in 0..n_towers {
            let conv1 = conv_from(it.next().expect("counted"))?;
            let conv2 = conv_from(it.next().expect("counted"))?;
            towers.push(Tower { conv1, conv2 });
        }
        let mut heads = Vec::with_capacity(k);
        for _ in 0..k {
            let fc1 = dense_from(it.next().expect("counted"))?;
            let fc2 = dense_from(it.next().expect("counted"))?;
            heads.push(Head { fc1, fc2 });
        }
        let p = MatcherParams { towers, heads };
        p.validate()?;
        Ok(p)
    }
}

pub fn write_kmat(p: &MatcherParams<f32>, path: &Path) -> Result<()> {
    binio::write_file(path, &p.to_kmat_bytes())
}

pub fn read_kmat(path: &Path) -> Result<MatcherParams<f32>> {
    let bytes = binio::read_file(path)?;
    MatcherParams::from_kmat_bytes(&bytes).map_err(|e| match e {
        Error::Format(f) => Error::parse(path, f),
        other => other,
    })
}
