use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::PoseConfig;
use crate::error::{Error, Result};
use crate::eval::torso_diameter;
use crate::inference::{dp_infer_loss_augmented, part_losses};
use crate::kinematics::{joint_feature, KinematicTree, StructParams, SQUARED_TERMS};
use crate::pipeline::Evidence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructTrainConfig {
    /// Weight of the data term against `½‖w‖²`.
    pub c: f64,
    /// Loss threshold as a fraction of the torso diameter.
    pub tau: f64,
    pub outer_iterations: usize,
    /// Passes over the training images per outer iteration.
    pub inner_epochs: usize,
    pub step_size: f64,
    /// Step at global epoch `e` is `step_size / (1 + step_decay * e)`.
    pub step_decay: f64,
    /// Relative objective improvement below which training stops.
    pub tol: f64,
    pub seed: u64,
}

impl Default for StructTrainConfig {
    fn default() -> Self {
        StructTrainConfig {
            c: 0.001,
            tau: 0.2,
            outer_iterations: 10,
            inner_epochs: 2,
            step_size: 0.1,
            step_decay: 0.1,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl StructTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::config(format!("C must be > 0, got {}", self.c)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.outer_iterations == 0 || self.inner_epochs == 0 {
            return Err(Error::config("iteration caps must be >= 1"));
        }
        if !(self.step_size >= 0.0) || !(self.step_decay >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::config("step size, decay and tolerance must be >= 0"));
        }
        Ok(())
    }
}

/// One training image: proposals with unaries and the annotated pose.
#[derive(Debug, Clone, PartialEq)]
pub struct StructExample {
    pub evidence: Evidence,
    pub truth: PoseConfig,
}

/// 0 when the mean squared joint error, in units of the squared torso
/// diameter, is at most `tau²`, else 1.
pub fn config_loss_h(pred: &PoseConfig, truth: &PoseConfig, tau: f64) -> Result<u8> {
    if pred.k() != truth.k() || truth.k() == 0 {
        return Err(Error::contract("prediction and truth disagree on K"));
    }
    let d = torso_diameter(truth)?;
    let mse = pred
        .joints
        .iter()
        .zip(&truth.joints)
        .map(|(p, g)| p.dist2d(g).powi(2))
        .sum::<f64>()
        / truth.k() as f64;
    Ok(u8::from(mse / (d * d) > tau * tau))
}

/// Per part, the proposal closest to the annotated joint (smallest index
/// on ties). Independent of `w`.
pub fn complete_latent(ex: &StructExample) -> Vec<usize> {
    ex.evidence
        .proposals
        .parts
        .iter()
        .zip(&ex.truth.joints)
        .map(|(list, j)| {
            let mut best = (0, f64::INFINITY);
            for (i, p) in list.iter().enumerate() {
                let d = (p.x as f64 - j.x).hypot(p.y as f64 - j.y);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect()
}

/// Fixed per-image quantities for one pass of the convex step.
struct Prepared {
    losses: Vec<Vec<f64>>,
    truth_feature: Vec<f64>,
}

fn prepare(ex: &StructExample, tree: &KinematicTree, tau: f64) -> Result<Prepared> {
    let torso = torso_diameter(&ex.truth)?;
    let ones = vec![1.0; tree.k()];
    let losses = part_losses(&ex.evidence.proposals, &ex.truth, tau, torso, &ones)?;
    let latent = complete_latent(ex);
    let truth_feature = joint_feature(&latent, &ex.evidence.inputs(), tree)?;
    Ok(Prepared { losses, truth_feature })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hinge of one image and the feature difference that is its subgradient.
fn hinge(ex: &StructExample, prep: &Prepared, w: &StructParams, wv: &[f64], tree: &KinematicTree) -> Result<(f64, Vec<f64>)> {
    let inputs = ex.evidence.inputs();
    let aug = dp_infer_loss_augmented(&inputs, w, tree, &prep.losses)?;
    let phi = joint_feature(&aug.config, &inputs, tree)?;
    let value = aug.score - dot(wv, &prep.truth_feature);
    let diff = phi.iter().zip(&prep.truth_feature).map(|(a, b)| a - b).collect();
    Ok((value, diff))
}

/// Root mean square of each feature over the latent truth configurations.
fn feature_scale(prep: &[Prepared]) -> Vec<f64> {
    let dim = prep[0].truth_feature.len();
    let mut s = vec![0.0; dim];
    for p in prep {
        for (a, v) in s.iter_mut().zip(&p.truth_feature) {
            *a += v * v;
        }
    }
    s.iter()
        .map(|&v| {
            let r = (v / prep.len() as f64).sqrt();
            if r > 1e-12 {
                r
            } else {
                1.0
            }
        })
        .collect()
}

fn prepare_all(examples: &[StructExample], tree: &KinematicTree, tau: f64) -> Result<Vec<Prepared>> {
    examples.par_iter().map(|ex| prepare(ex, tree, tau)).collect()
}

fn objective_with(examples: &[StructExample], prep: &[Prepared], w: &StructParams, tree: &KinematicTree, c: f64) -> Result<f64> {
    let wv = w.to_vec();
    let hinges: Vec<f64> = examples
        .par_iter()
        .zip(prep)
        .map(|(ex, p)| hinge(ex, p, w, &wv, tree).map(|h| h.0))
        .collect::<Result<_>>()?;
    let data: f64 = hinges.iter().sum();
    Ok(0.5 * dot(&wv, &wv) + c * data)
}

/// `½‖w‖² + C Σ [max_g (w·Φ(g) + L(g)) − w·Φ(g*)]` with `g*` the latent
/// completion and `L` the per-part 0/1 loss.
pub fn struct_objective(w: &StructParams, examples: &[StructExample], tree: &KinematicTree, c: f64, tau: f64) -> Result<f64> {
    let prep = prepare_all(examples, tree, tau)?;
    objective_with(examples, &prep, w, tree, c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CccpOutcome {
    pub params: StructParams,
    /// Objective at the start and after every outer iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// Latent structural SVM by CCCP. Each outer iteration completes the
/// latent truth configurations, then runs projected AdaGrad subgradient
/// passes on the resulting convex objective. A pass that does not lower the
/// objective is discarded, so the logged sequence never increases.
pub fn cccp_train(examples: &[StructExample], tree: &KinematicTree, init: StructParams, cfg: &StructTrainConfig) -> Result<CccpOutcome> {
    cfg.validate()?;
    init.validate(tree)?;
    if examples.is_empty() {
        return Err(Error::contract("no training images"));
    }
    let mut w = init;
    w.project();
    let n = examples.len();
    let k = tree.k();
    let mut accum = vec![0.0; w.dim()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch = 0usize;
    let mut prep = prepare_all(examples, tree, cfg.tau)?;
    let mut current = objective_with(examples, &prep, &w, tree, cfg.c)?;
    let mut log = vec![current];
    let mut converged = false;
    for iter in 0..cfg.outer_iterations {
        if iter > 0 {
            prep = prepare_all(examples, tree, cfg.tau)?;
            let again = objective_with(examples, &prep, &w, tree, cfg.c)?;
            if again > current + 1e-9 * current.abs().max(1.0) {
                return Err(Error::ObjectiveIncrease {
                    iteration: iter,
                    before: current,
                    after: again,
                });
            }
            current = again;
        }
        let scale = feature_scale(&prep);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(iter as u64));
        let mut cand = w.to_vec();
        for _ in 0..cfg.inner_epochs {
            let eta = cfg.step_size / (1.0 + cfg.step_decay * epoch as f64);
            epoch += 1;
            order.shuffle(&mut rng);
            for &l in &order {
                let wp = StructParams::from_vec(&cand, k)?;
                let (_, diff) = hinge(&examples[l], &prep[l], &wp, &cand, tree)?;
                let cn = cfg.c * n as f64;
                // AdaGrad on v = w * scale, where features are O(1).
                for (j, v) in cand.iter_mut().enumerate() {
                    let g = (*v + cn * diff[j]) / scale[j];
                    accum[j] += g * g;
                    if accum[j] > 0.0 {
                        *v -= eta * g / accum[j].sqrt() / scale[j];
                    }
                }
                let mut p = StructParams::from_vec(&cand, k)?;
                p.project();
                cand = p.to_vec();
            }
        }
        let cand = StructParams::from_vec(&cand, k)?;
        if cand.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("structural parameters".into()));
        }
        let value = objective_with(examples, &prep, &cand, tree, cfg.c)?;
        log::debug!("cccp iteration {iter}: objective {current} -> {value}");
        if value <= current {
            let improvement = current - value;
            w = cand;
            let before = current;
            current = value;
            log.push(current);
            if improvement <= cfg.tol * before.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        } else {
            log.push(current);
        }
    }
    debug_assert!(w.is_projected());
    debug_assert!(SQUARED_TERMS.iter().all(|&i| w.gamma.iter().all(|g| g[i] <= 0.0)));
    Ok(CccpOutcome {
        params: w,
        objective: log,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Joint, DOWN_SPINE, NUM_JOINTS, UPPER_SPINE};
    use crate::inference::dp_infer;
    use crate::proposals::{PartProposal, ProposalSet};
    use rand::Rng;

    fn pose_from(points: &[(f64, f64)]) -> PoseConfig {
        PoseConfig::new(points.iter().map(|&(x, y)| Joint::new(x, y, 2000.0)).collect())
    }

    /// Random image of `k >= 5` parts: proposal 0 of each part sits on the truth,
    /// the others are scattered. `signal` raises the truth unary.
    pub(crate) fn toy_example(rng: &mut ChaCha8Rng, k: usize, n: usize, signal: f64) -> StructExample {
        let mut pts: Vec<(f64, f64)> = (0..k).map(|_| (rng.random_range(10.0..90.0), rng.random_range(10.0..90.0))).collect();
        pts[UPPER_SPINE] = (50.0, 30.0);
        pts[DOWN_SPINE] = (50.0, 60.0);
        let truth = pose_from(&pts);
        let parts: Vec<Vec<PartProposal>> = pts
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| {
                (0..n)
                    .map(|i| {
                        let (px, py) = if i == 0 {
                            (x, y)
                        } else {
                            (x + rng.random_range(-20.0..20.0), y + rng.random_range(-20.0..20.0))
                        };
                        PartProposal {
                            x: px.max(0.0).round() as u32,
                            y: py.max(0.0).round() as u32,
                            w: 10,
                            h: 10,
                            k,
                            z: 2000.0 + rng.random_range(-50.0..50.0),
                            score: 0.0,
                        }
                    })
                    .collect()
            })
            .collect();
        let unaries = (0..k)
            .map(|_| (0..n).map(|i| rng.random_range(0.0..1.0) + if i == 0 { signal } else { 0.0 }).collect())
            .collect();
        StructExample {
            evidence: Evidence {
                proposals: ProposalSet { parts },
                unaries,
                mm_per_pixel: 16.0,
            },
            truth,
        }
    }

    fn toy_set(seed: u64, count: usize, n: usize, signal: f64) -> Vec<StructExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| toy_example(&mut rng, NUM_JOINTS, n, signal)).collect()
    }

    #[test]
    fn loss_h_arithmetic() {
        let truth = pose_from(&[(0.0, 0.0), (10.0, 0.0), (0.0, 0.0), (5.0, 5.0), (0.0, 100.0)]);
        assert_eq!(torso_diameter(&truth).unwrap(), 100.0);
        assert_eq!(config_loss_h(&truth, &truth, 0.2).unwrap(), 0);
        let off = |d: f64| truth.translated(d, 0.0);
        assert_eq!(config_loss_h(&off(30.0), &truth, 0.2).unwrap(), 1);
        assert_eq!(config_loss_h(&off(10.0), &truth, 0.2).unwrap(), 0);
    }

    #[test]
    fn degenerate_torso_is_rejected() {
        let truth = pose_from(&[(0.0, 0.0); 5]);
        assert!(matches!(config_loss_h(&truth, &truth, 0.2), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weights_with_perfect_proposals_give_zero_objective() {
        let tree = KinematicTree::default19();
        let mut set = toy_set(1, 3, 4, 0.0);
        for ex in &mut set {
            // Every proposal on the truth: all losses vanish.
            for (k, list) in ex.evidence.proposals.parts.iter_mut().enumerate() {
                let j = ex.truth.joints[k];
                for p in list.iter_mut() {
                    p.x = j.x.round() as u32;
                    p.y = j.y.round() as u32;
                }
            }
        }
        let w = StructParams::zeros(19, 18);
        assert_eq!(struct_objective(&w, &set, &tree, 0.001, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn data_term_is_linear_in_c() {
        let tree = KinematicTree::default19();
        let set = toy_set(2, 4, 5, 0.5);
        let w = StructParams::unit(&tree).scaled(0.01);
        let reg = 0.5 * dot(&w.to_vec(), &w.to_vec());
        let a = struct_objective(&w, &set, &tree, 0.5, 0.2).unwrap() - reg;
        let b = struct_objective(&w, &set, &tree, 1.0, 0.2).unwrap() - reg;
        assert!((b - 2.0 * a).abs() <= 1e-9 * b.abs().max(1.0));
    }

    #[test]
    fn objective_matches_naive_summation() {
        let tree = KinematicTree::chain(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set: Vec<_> = (0..4).map(|_| toy_example(&mut rng, 5, 3, 0.2)).collect();
        let mut w = StructParams::unit(&tree).scaled(0.05);
        w.gamma[0] = [0.01, -0.002, 0.0, -0.001, 0.0, -0.01];
        let (c, tau) = (0.3, 0.2);
        let wv = w.to_vec();
        let mut naive = 0.5 * dot(&wv, &wv);
        for ex in &set {
            let inputs = ex.evidence.inputs();
            let torso = ex.truth.joints[UPPER_SPINE].dist2d(&ex.truth.joints[DOWN_SPINE]);
            let latent = complete_latent(ex);
            let truth_score = crate::kinematics::config_score(&latent, &inputs, &w, &tree).unwrap();
            let mut best = f64::NEG_INFINITY;
            for code in 0..243usize {
                let cfg: Vec<usize> = (0..5).map(|p| (code / 3usize.pow(4 - p as u32)) % 3).collect();
                let mut v = crate::kinematics::config_score(&cfg, &inputs, &w, &tree).unwrap();
                for (k, &i) in cfg.iter().enumerate() {
                    let p = ex.evidence.proposals.get(k, i);
                    let j = ex.truth.joints[k];
                    if (p.x as f64 - j.x).hypot(p.y as f64 - j.y) > tau * torso {
                        v += 1.0;
                    }
                }
                best = best.max(v);
            }
            naive += c * (best - truth_score);
        }
        let got = struct_objective(&w, &set, &tree, c, tau).unwrap();
        assert!((got - naive).abs() <= 1e-9, "{got} vs {naive}");
    }

    #[test]
    fn latent_completion_ignores_weights() {
        let set = toy_set(4, 2, 6, 0.0);
        for ex in &set {
            assert_eq!(complete_latent(ex), vec![0; 19]);
        }
    }

    #[test]
    fn objective_never_increases_and_projection_holds() {
        let tree = KinematicTree::default19();
        for seed in 0..3 {
            let set = toy_set(10 + seed, 6, 5, 0.3);
            let cfg = StructTrainConfig {
                c: 0.05,
                outer_iterations: 4,
                seed,
                ..Default::default()
            };
            let out = cccp_train(&set, &tree, StructParams::unit(&tree), &cfg).unwrap();
            assert!(out.objective.windows(2).all(|p| p[1] <= p[0] + 1e-9));
            assert!(out.params.is_projected());
        }
    }

    #[test]
    fn tiny_c_drives_weights_to_zero() {
        let tree = KinematicTree::default19();
        let set = toy_set(5, 4, 4, 0.5);
        let cfg = StructTrainConfig {
            c: 1e-9,
            outer_iterations: 20,
            inner_epochs: 5,
            step_size: 0.5,
            step_decay: 0.0,
            tol: 0.0,
            ..Default::default()
        };
        let out = cccp_train(&set, &tree, StructParams::unit(&tree), &cfg).unwrap();
        let norm = dot(&out.params.to_vec(), &out.params.to_vec()).sqrt();
        assert!(norm < 1e-3, "norm {norm}");
    }

    #[test]
    fn infinite_tau_reduces_to_zero_loss_fit() {
        let tree = KinematicTree::default19();
        let set = toy_set(6, 4, 4, 0.5);
        let cfg = StructTrainConfig {
            tau: 1e12,
            c: 0.01,
            outer_iterations: 20,
            inner_epochs: 5,
            step_size: 0.5,
            step_decay: 0.0,
            tol: 0.0,
            ..Default::default()
        };
        let prep = prepare_all(&set, &tree, cfg.tau).unwrap();
        assert!(prep.iter().all(|p| p.losses.iter().flatten().all(|&l| l == 0.0)));
        let out = cccp_train(&set, &tree, StructParams::unit(&tree), &cfg).unwrap();
        // With no loss the minimiser is w = 0, where the objective is 0.
        assert!(*out.objective.last().unwrap() < 0.01 * out.objective[0]);
    }

    #[test]
    fn separable_set_reaches_zero_training_loss() {
        let tree = KinematicTree::default19();
        let set = toy_set(7, 8, 4, 3.0);
        let cfg = StructTrainConfig {
            c: 10.0,
            outer_iterations: 10,
            inner_epochs: 5,
            step_size: 1.0,
            step_decay: 0.0,
            ..Default::default()
        };
        let out = cccp_train(&set, &tree, StructParams::zeros(19, 18), &cfg).unwrap();
        let prep = prepare_all(&set, &tree, cfg.tau).unwrap();
        for (ex, p) in set.iter().zip(&prep) {
            let inputs = ex.evidence.inputs();
            let aug = dp_infer_loss_augmented(&inputs, &out.params, &tree, &p.losses).unwrap();
            assert_eq!(aug.config, complete_latent(ex));
            assert_eq!(dp_infer(&inputs, &out.params, &tree).unwrap().config, complete_latent(ex));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let tree = KinematicTree::default19();
        let set = toy_set(8, 5, 4, 0.3);
        let cfg = StructTrainConfig { c: 0.05, seed: 9, ..Default::default() };
        let a = cccp_train(&set, &tree, StructParams::unit(&tree), &cfg).unwrap();
        let b = cccp_train(&set, &tree, StructParams::unit(&tree), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_config_is_rejected() {
        for cfg in [
            StructTrainConfig { c: 0.0, ..Default::default() },
            StructTrainConfig { tau: -1.0, ..Default::default() },
            StructTrainConfig { outer_iterations: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
