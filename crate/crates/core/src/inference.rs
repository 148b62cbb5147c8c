//! Exact max-sum dynamic programming over the kinematic tree, a
//! loss-augmented variant for learning, and an exhaustive oracle.

use serde::{Deserialize, Serialize};

use crate::dataio::{joint_name, Joint, PoseConfig};
use crate::error::{Error, Result};
use crate::kinematics::{config_score, KinematicTree, ScoreInputs, StructParams};
use crate::proposals::ProposalSet;

/// Largest configuration space the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InferStats {
    /// Inner-loop evaluations of a pairwise term, summed over edges.
    pub pair_evals: u64,
}

/// Upward-pass state: per node the partial maxima over its subtree and,
/// for each non-root node, the best own index for every parent index.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageTable {
    pub mu: Vec<Vec<f64>>,
    pub backtrack: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Chosen proposal index per part.
    pub config: Vec<usize>,
    /// Objective value of `config`: the score, plus the loss term for
    /// loss-augmented inference.
    pub score: f64,
    pub stats: InferStats,
}

/// Upward pass. `extra`, when given, is added to the weighted unaries.
pub fn dp_messages(
    inputs: &ScoreInputs,
    w: &StructParams,
    tree: &KinematicTree,
    extra: Option<&[Vec<f64>]>,
) -> Result<(MessageTable, InferStats)> {
    inputs.validate(tree)?;
    w.validate(tree)?;
    if let Some(x) = extra {
        if x.len() != tree.k() || x.iter().zip(inputs.unaries).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::contract("loss table does not cover the proposals"));
        }
    }
    let k = tree.k();
    let mut mu: Vec<Vec<f64>> = (0..k)
        .map(|v| {
            inputs.unaries[v]
                .iter()
                .enumerate()
                .map(|(i, u)| w.omega[v] * u + extra.map_or(0.0, |x| x[v][i]))
                .collect()
        })
        .collect();
    let mut backtrack = vec![Vec::new(); k];
    let mut stats = InferStats::default();
    let inv_mm = 1.0 / inputs.mm_per_pixel;
    for &c in tree.order().iter().rev() {
        let Some(p) = tree.parent(c) else { continue };
        let g = w.gamma[tree.parent_edge(c).expect("non-root")];
        let pp = &inputs.proposals.parts[p];
        let cp = &inputs.proposals.parts[c];
        let mut msg = Vec::with_capacity(pp.len());
        let mut back = Vec::with_capacity(pp.len());
        for a in pp {
            let (ax, ay) = (a.x as f64, a.y as f64);
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, b) in cp.iter().enumerate() {
                let dx = b.x as f64 - ax;
                let dy = b.y as f64 - ay;
                let dz = (b.z - a.z) * inv_mm;
                let v = g[0] * dx + g[1] * dx * dx + g[2] * dy + g[3] * dy * dy + g[4] * dz + g[5] * dz * dz + mu[c][j];
                if v > best.1 {
                    best = (j, v);
                }
            }
            msg.push(best.1);
            back.push(best.0);
        }
        stats.pair_evals += (pp.len() * cp.len()) as u64;
        for (m, v) in mu[p].iter_mut().zip(&msg) {
            *m += v;
        }
        backtrack[c] = back;
    }
    if mu.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("dynamic programming messages".into()));
    }
    Ok((MessageTable { mu, backtrack }, stats))
}

fn decode(table: &MessageTable, tree: &KinematicTree) -> Vec<usize> {
    let root = tree.root();
    let mut cfg = vec![0usize; tree.k()];
    let mut best = f64::NEG_INFINITY;
    for (i, &v) in table.mu[root].iter().enumerate() {
        if v > best {
            best = v;
            cfg[root] = i;
        }
    }
    for &v in tree.order() {
        for &c in tree.children(v) {
            cfg[c] = table.backtrack[c][cfg[v]];
        }
    }
    cfg
}

/// Highest-scoring configuration. Ties go to the smaller proposal index at
/// each node, which is the lexicographically smallest maximiser whenever
/// every parent has a smaller part index than its children.
pub fn dp_infer(inputs: &ScoreInputs, w: &StructParams, tree: &KinematicTree) -> Result<Inference> {
    let (table, stats) = dp_messages(inputs, w, tree, None)?;
    let config = decode(&table, tree);
    let score = config_score(&config, inputs, w, tree)?;
    Ok(Inference { config, score, stats })
}

fn loss_of(config: &[usize], losses: &[Vec<f64>]) -> f64 {
    config.iter().enumerate().map(|(k, &i)| losses[k][i]).sum()
}

/// Maximises score plus the per-part losses in `losses[k][i]`.
pub fn dp_infer_loss_augmented(
    inputs: &ScoreInputs,
    w: &StructParams,
    tree: &KinematicTree,
    losses: &[Vec<f64>],
) -> Result<Inference> {
    let (table, stats) = dp_messages(inputs, w, tree, Some(losses))?;
    let config = decode(&table, tree);
    let score = config_score(&config, inputs, w, tree)? + loss_of(&config, losses);
    Ok(Inference { config, score, stats })
}

/// Per-part 0/1 loss scaled by `weights[k]`: a proposal loses when its
/// centre is farther than `tau * torso` from the true joint.
pub fn part_losses(proposals: &ProposalSet, truth: &PoseConfig, tau: f64, torso: f64, weights: &[f64]) -> Result<Vec<Vec<f64>>> {
    if truth.k() != proposals.k() || weights.len() != proposals.k() {
        return Err(Error::contract("truth, proposals and loss weights disagree on K"));
    }
    let radius = tau * torso;
    Ok(proposals
        .parts
        .iter()
        .enumerate()
        .map(|(k, list)| {
            let j = &truth.joints[k];
            list.iter()
                .map(|p| {
                    let d = (p.x as f64 - j.x).hypot(p.y as f64 - j.y);
                    if d > radius {
                        weights[k]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

/// Exhaustive search returning the lexicographically smallest maximiser.
pub fn brute_force_infer(inputs: &ScoreInputs, w: &StructParams, tree: &KinematicTree) -> Result<Inference> {
    brute_force_impl(inputs, w, tree, None)
}

pub fn brute_force_infer_loss_augmented(
    inputs: &ScoreInputs,
    w: &StructParams,
    tree: &KinematicTree,
    losses: &[Vec<f64>],
) -> Result<Inference> {
    brute_force_impl(inputs, w, tree, Some(losses))
}

fn brute_force_impl(
    inputs: &ScoreInputs,
    w: &StructParams,
    tree: &KinematicTree,
    losses: Option<&[Vec<f64>]>,
) -> Result<Inference> {
    inputs.validate(tree)?;
    w.validate(tree)?;
    let sizes: Vec<usize> = inputs.proposals.parts.iter().map(Vec::len).collect();
    let size = sizes.iter().try_fold(1u128, |acc, &n| acc.checked_mul(n as u128)).unwrap_or(u128::MAX);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchTooLarge {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let objective = |cfg: &[usize]| -> Result<f64> {
        Ok(config_score(cfg, inputs, w, tree)? + losses.map_or(0.0, |l| loss_of(cfg, l)))
    };
    let mut cfg = vec![0usize; sizes.len()];
    let mut best = (cfg.clone(), objective(&cfg)?);
    // Odometer with the last part fastest, i.e. lexicographic order.
    loop {
        let mut pos = cfg.len();
        loop {
            if pos == 0 {
                return Ok(Inference {
                    config: best.0,
                    score: best.1,
                    stats: InferStats::default(),
                });
            }
            pos -= 1;
            cfg[pos] += 1;
            if cfg[pos] < sizes[pos] {
                break;
            }
            cfg[pos] = 0;
        }
        let v = objective(&cfg)?;
        if v > best.1 {
            best = (cfg.clone(), v);
        }
    }
}

/// Joint positions implied by a configuration.
pub fn config_pose(config: &[usize], proposals: &ProposalSet) -> PoseConfig {
    PoseConfig::new(
        config
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let p = proposals.get(k, i);
                Joint::new(p.x as f64, p.y as f64, p.z)
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenJoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub proposal: usize,
}

/// Inference result as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceJson {
    pub k: usize,
    pub joints: Vec<ChosenJoint>,
    pub score: f64,
}

impl InferenceJson {
    pub fn new(inf: &Inference, proposals: &ProposalSet) -> Self {
        let k = inf.config.len();
        let pose = config_pose(&inf.config, proposals);
        InferenceJson {
            k,
            joints: pose
                .joints
                .iter()
                .zip(&inf.config)
                .enumerate()
                .map(|(i, (j, &p))| ChosenJoint {
                    name: joint_name(i, k),
                    x: j.x,
                    y: j.y,
                    z: j.z,
                    proposal: p,
                })
                .collect(),
            score: inf.score,
        }
    }

    pub fn pose(&self) -> PoseConfig {
        PoseConfig::new(self.joints.iter().map(|j| Joint::new(j.x, j.y, j.z)).collect())
    }
}
