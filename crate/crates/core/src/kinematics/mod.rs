//! Kinematic tree, pairwise 3D deformation features and the configuration
//! score `F = sum_k w_k u_k + sum_edges G_e . psi_e`.

mod tree;

pub use tree::{KinematicTree, TreeJson};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::proposals::{PartProposal, ProposalSet};

pub const KSTR_MAGIC: &[u8; 4] = b"KSTR";

/// `[dx, dx², dy, dy², dz, dz²]`, child minus parent, with `dz` in
/// pixel equivalents.
pub type DeformFeature = [f64; 6];

/// Positions of the squared components of a deformation feature.
pub const SQUARED_TERMS: [usize; 3] = [1, 3, 5];

pub fn deform_feature(parent: &PartProposal, child: &PartProposal, mm_per_pixel: f64) -> DeformFeature {
    displacement_feature(
        child.x as f64 - parent.x as f64,
        child.y as f64 - parent.y as f64,
        (child.z - parent.z) / mm_per_pixel,
    )
}

pub fn displacement_feature(dx: f64, dy: f64, dz: f64) -> DeformFeature {
    [dx, dx * dx, dy, dy * dy, dz, dz * dz]
}

pub fn dot6(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inference weights: one unary weight per part and one 6-vector per edge,
/// in the tree's edge order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructParams {
    pub omega: Vec<f64>,
    pub gamma: Vec<[f64; 6]>,
}

impl StructParams {
    pub fn zeros(k: usize, edges: usize) -> Self {
        StructParams {
            omega: vec![0.0; k],
            gamma: vec![[0.0; 6]; edges],
        }
    }

    /// Unit unary weights and no pairwise preference.
    pub fn unit(tree: &KinematicTree) -> Self {
        StructParams {
            omega: vec![1.0; tree.k()],
            gamma: vec![[0.0; 6]; tree.edges().len()],
        }
    }

    pub fn dim(&self) -> usize {
        self.omega.len() + 6 * self.gamma.len()
    }

    /// Flat `[omega..., gamma_0..., gamma_1..., ...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.omega.clone();
        for g in &self.gamma {
            v.extend_from_slice(g);
        }
        v
    }

    pub fn from_vec(v: &[f64], k: usize) -> Result<Self> {
        if v.len() < k || !(v.len() - k).is_multiple_of(6) {
            return Err(Error::contract("flat weight vector has the wrong length"));
        }
        Ok(StructParams {
            omega: v[..k].to_vec(),
            gamma: v[k..].chunks_exact(6).map(|c| c.try_into().expect("chunk of 6")).collect(),
        })
    }

    pub fn scaled(&self, a: f64) -> Self {
        StructParams {
            omega: self.omega.iter().map(|w| a * w).collect(),
            gamma: self.gamma.iter().map(|g| g.map(|v| a * v)).collect(),
        }
    }

    /// Clamps the squared-term weights to be non-positive.
    pub fn project(&mut self) {
        for g in &mut self.gamma {
            for i in SQUARED_TERMS {
                g[i] = g[i].min(0.0);
            }
        }
    }

    pub fn is_projected(&self) -> bool {
        self.gamma.iter().all(|g| SQUARED_TERMS.iter().all(|&i| g[i] <= 0.0))
    }

    pub fn validate(&self, tree: &KinematicTree) -> Result<()> {
        if self.omega.len() != tree.k() || self.gamma.len() != tree.edges().len() {
            return Err(Error::contract(format!(
                "weights for {} parts and {} edges, tree has {} and {}",
                self.omega.len(),
                self.gamma.len(),
                tree.k(),
                tree.edges().len()
            )));
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("structural weights".into()));
        }
        Ok(())
    }

    /// `KSTR`: magic, u32 K, u32 edge count, f32 omega, then per edge six
    /// f32 values.
    pub fn to_kstr_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(KSTR_MAGIC);
        w.u32(self.omega.len() as u32);
        w.u32(self.gamma.len() as u32);
        w.f32s(self.omega.iter().map(|&v| v as f32));
        w.f32s(self.gamma.iter().flatten().map(|&v| v as f32));
        w.buf
    }

    pub fn from_kstr_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes, "KSTR weights");
        r.magic(KSTR_MAGIC)?;
        let k = r.u32()? as usize;
        let e = r.u32()? as usize;
        if k == 0 {
            return Err(FormatError::ZeroDimension("KSTR part count"));
        }
        let omega = r.f32_vec(k)?;
        let gamma = r.f32_vec(e.checked_mul(6).ok_or_else(|| FormatError::invalid("edges", "overflow"))?)?;
        r.finish()?;
        if omega.iter().chain(&gamma).any(|v| !v.is_finite()) {
            return Err(FormatError::invalid("weights", "non-finite value"));
        }
        Ok(StructParams {
            omega: omega.into_iter().map(f64::from).collect(),
            gamma: gamma
                .chunks_exact(6)
                .map(|c| std::array::from_fn(|i| c[i] as f64))
                .collect(),
        })
    }
}

pub fn write_kstr(w: &StructParams, path: &Path) -> Result<()> {
    binio::write_file(path, &w.to_kstr_bytes())
}

pub fn read_kstr(path: &Path) -> Result<StructParams> {
    binio::decode_file(path, StructParams::from_kstr_bytes)
}

/// `Γ_km · ψ` for an edge given in either direction; the stored
/// parent-to-child direction is always used for the feature.
pub fn pairwise_term(
    tree: &KinematicTree,
    w: &StructParams,
    a: &PartProposal,
    b: &PartProposal,
    mm_per_pixel: f64,
) -> Result<f64> {
    let (e, reversed) = tree.edge_between(a.k, b.k)?;
    let (p, c) = if reversed { (b, a) } else { (a, b) };
    Ok(dot6(&w.gamma[e], &deform_feature(p, c, mm_per_pixel)))
}

/// Everything needed to score configurations of one image.
#[derive(Debug, Clone, Copy)]
pub struct ScoreInputs<'a> {
    pub proposals: &'a ProposalSet,
    /// Per part, per proposal: summed template match probability.
    pub unaries: &'a [Vec<f64>],
    pub mm_per_pixel: f64,
}

impl ScoreInputs<'_> {
    pub fn validate(&self, tree: &KinematicTree) -> Result<()> {
        if self.proposals.k() != tree.k() || self.unaries.len() != tree.k() {
            return Err(Error::contract("proposals, unaries and tree disagree on K"));
        }
        for k in 0..tree.k() {
            if self.proposals.parts[k].is_empty() {
                return Err(Error::contract(format!("part {k} has no proposals")));
            }
            if self.unaries[k].len() != self.proposals.parts[k].len() {
                return Err(Error::contract(format!("unary table of part {k} does not cover its proposals")));
            }
        }
        if !(self.mm_per_pixel > 0.0) {
            return Err(Error::contract("mm_per_pixel must be > 0"));
        }
        Ok(())
    }

    fn check_config(&self, cfg: &[usize]) -> Result<()> {
        if cfg.len() != self.proposals.k() {
            return Err(Error::contract("configuration length differs from K"));
        }
        for (k, &i) in cfg.iter().enumerate() {
            if i >= self.proposals.parts[k].len() {
                return Err(Error::contract(format!("proposal index {i} out of range for part {k}")));
            }
        }
        Ok(())
    }
}

/// Joint feature vector `Φ(cfg)` with `F = w · Φ`, laid out like
/// [`StructParams::to_vec`].
pub fn joint_feature(cfg: &[usize], inputs: &ScoreInputs, tree: &KinematicTree) -> Result<Vec<f64>> {
    inputs.validate(tree)?;
    inputs.check_config(cfg)?;
    let k = tree.k();
    let mut phi = Vec::with_capacity(k + 6 * tree.edges().len());
    phi.extend((0..k).map(|p| inputs.unaries[p][cfg[p]]));
    for &(p, c) in tree.edges() {
        let f = deform_feature(inputs.proposals.get(p, cfg[p]), inputs.proposals.get(c, cfg[c]), inputs.mm_per_pixel);
        phi.extend_from_slice(&f);
    }
    Ok(phi)
}

/// Configuration score; every edge counted once in its stored direction.
pub fn config_score(cfg: &[usize], inputs: &ScoreInputs, w: &StructParams, tree: &KinematicTree) -> Result<f64> {
    inputs.validate(tree)?;
    inputs.check_config(cfg)?;
    w.validate(tree)?;
    let mut f = 0.0;
    for k in 0..tree.k() {
        f += w.omega[k] * inputs.unaries[k][cfg[k]];
    }
    for (e, &(p, c)) in tree.edges().iter().enumerate() {
        let psi = deform_feature(inputs.proposals.get(p, cfg[p]), inputs.proposals.get(c, cfg[c]), inputs.mm_per_pixel);
        f += dot6(&w.gamma[e], &psi);
    }
    Ok(f)
}
