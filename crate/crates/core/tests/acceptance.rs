//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) before asserting.

use std::fmt::Display;
use std::io::Write as _;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use posekit::dataio::{
    synthesize_dataset, DepthImage, Joint, PoseConfig, Split, SynthConfig, DOWN_SPINE, NUM_JOINTS, UPPER_SPINE,
};
use posekit::eval::{component_analysis, pdj_curve, pdj_curve_with, PdjTable, Torso};
use posekit::fcn::{
    fcn_backward, fcn_forward, fcn_loss, gaussian_targets, loss_log_csv, parse_loss_log, EpochLoss, FcnArch, FcnParams,
};
use posekit::inference::{brute_force_infer, brute_force_infer_loss_augmented, dp_infer, dp_infer_loss_augmented};
use posekit::kinematics::{config_score, KinematicTree, ScoreInputs, StructParams};
use posekit::learning::{
    cccp_train, joint_train, parse_train_log, struct_objective, train_log_csv, JointConfig, LogRow, StructExample,
    StructTrainConfig,
};
use posekit::matchnet::{matcher_loss, matcher_loss_grad, MatcherArch, MatcherParams, TemplateSet, PATCH_LEN};
use posekit::pipeline::Evidence;
use posekit::proposals::{PartProposal, ProposalSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Serialises the checks so timings are not skewed by a concurrent run.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, what: &str, pass: bool, detail: impl Display) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {n} [{verdict}] {what}: {detail}");
}

fn random_tree(rng: &mut ChaCha8Rng, k: usize) -> KinematicTree {
    let parents: Vec<usize> = (1..k).map(|i| rng.random_range(0..i)).collect();
    KinematicTree::from_parents(&parents).unwrap()
}

/// Distinct-position proposals with depths and unaries drawn at random.
fn random_proposals(rng: &mut ChaCha8Rng, k: usize, n: usize) -> (ProposalSet, Vec<Vec<f64>>) {
    let parts = (0..k)
        .map(|part| {
            let mut cells: Vec<(u32, u32)> = Vec::new();
            while cells.len() < n {
                let c = (rng.random_range(0..64), rng.random_range(0..64));
                if !cells.contains(&c) {
                    cells.push(c);
                }
            }
            cells
                .into_iter()
                .map(|(x, y)| PartProposal { x, y, w: 8, h: 8, k: part, z: rng.random_range(1500.0..3000.0), score: 0.0 })
                .collect()
        })
        .collect();
    let unaries = (0..k).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
    (ProposalSet { parts }, unaries)
}

fn random_weights(rng: &mut ChaCha8Rng, tree: &KinematicTree) -> StructParams {
    let mut w = StructParams {
        omega: (0..tree.k()).map(|_| rng.random_range(-1.0..2.0)).collect(),
        gamma: (0..tree.edges().len())
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5)))
            .collect(),
    };
    w.project();
    w
}

/// Runs `instances` random DP-versus-enumeration comparisons; returns the
/// number of agreements and the largest score gap.
fn dp_agreement(seed: u64, instances: usize, with_losses: bool) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let k = rng.random_range(1..=6);
        let n = rng.random_range(1..=5);
        let tree = random_tree(&mut rng, k);
        let (set, unaries) = random_proposals(&mut rng, k, n);
        let w = random_weights(&mut rng, &tree);
        let inputs = ScoreInputs { proposals: &set, unaries: &unaries, mm_per_pixel: rng.random_range(5.0..30.0) };
        let (dp, bf, losses) = if with_losses {
            let mut losses: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| if rng.random_bool(0.5) { rng.random_range(0.1..3.0) } else { 0.0 }).collect())
                .collect();
            losses[0][0] = 1.0;
            let dp = dp_infer_loss_augmented(&inputs, &w, &tree, &losses).unwrap();
            let bf = brute_force_infer_loss_augmented(&inputs, &w, &tree, &losses).unwrap();
            (dp, bf, Some(losses))
        } else {
            (dp_infer(&inputs, &w, &tree).unwrap(), brute_force_infer(&inputs, &w, &tree).unwrap(), None)
        };
        // The reported objective must be the objective of the configuration.
        let extra = |cfg: &[usize]| losses.as_ref().map_or(0.0, |l| cfg.iter().enumerate().map(|(p, &i)| l[p][i]).sum());
        let recomputed = config_score(&dp.config, &inputs, &w, &tree).unwrap() + extra(&dp.config);
        let gap = (dp.score - bf.score).abs().max((dp.score - recomputed).abs());
        worst = worst.max(gap);
        if dp.config == bf.config && gap <= 1e-9 {
            agree += 1;
        }
    }
    (agree, worst)
}

#[test]
fn dp_matches_exhaustive_search() {
    let _g = serial();
    let t0 = Instant::now();
    let (agree, worst) = dp_agreement(2024, 200, false);
    let secs = t0.elapsed().as_secs_f64();
    let pass = agree == 200 && secs < 5.0;
    report(1, "tree DP equals brute force", pass, format!("{agree}/200 agree, max |dF| {worst:.1e}, {secs:.2} s"));
    assert!(pass);
}

#[test]
fn loss_augmented_dp_matches_exhaustive_search() {
    let _g = serial();
    let t0 = Instant::now();
    let (agree, worst) = dp_agreement(4048, 200, true);
    let secs = t0.elapsed().as_secs_f64();
    let pass = agree == 200 && secs < 5.0;
    report(2, "loss-augmented DP equals brute force", pass, format!("{agree}/200 agree, max |dF| {worst:.1e}, {secs:.2} s"));
    assert!(pass);
}

fn close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= 1e-7 || err / analytic.abs().max(numeric.abs()) <= 1e-4
}

/// Counts of (checked, kink-skipped, failed) probes.
#[derive(Default)]
struct Probes {
    checked: usize,
    skipped: usize,
    failed: usize,
}

fn fcn_gradient_config(seed: u64, probes: &mut Probes) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=2);
    let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=4)).collect();
    let k = rng.random_range(1..=3);
    let p: FcnParams<f64> = FcnParams::init(&FcnArch::from_widths(&widths, k), seed).unwrap();
    let (w, h) = (rng.random_range(12..=20u32), rng.random_range(12..=20u32));
    let d: Vec<u16> = (0..w * h).map(|_| if rng.random_bool(0.1) { 0 } else { rng.random_range(800..4000) }).collect();
    let img = DepthImage::new(w, h, d, 10.0).unwrap();
    let pose = PoseConfig::new(
        (0..k)
            .map(|_| Joint::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64), 2000.0))
            .collect(),
    );
    let (mh, mw) = p.output_shape(h as usize, w as usize).unwrap();
    let targets: Vec<f64> = gaussian_targets(&pose, mh, mw, p.downsample(), rng.random_range(0.5..2.0));
    let (_, grad) = fcn_backward(&img, &p, &targets).unwrap();
    let base = p.relu_pattern(&img).unwrap();
    let step = 1e-3;
    for t in 0..p.tensors().len() {
        for i in 0..p.tensors()[t].len() {
            let mut plus = p.clone();
            plus.tensors_mut()[t][i] += step;
            let mut minus = p.clone();
            minus.tensors_mut()[t][i] -= step;
            if plus.relu_pattern(&img).unwrap() != base || minus.relu_pattern(&img).unwrap() != base {
                probes.skipped += 1;
                continue;
            }
            let lp = fcn_loss(&fcn_forward(&img, &plus).unwrap(), &targets).unwrap();
            let lm = fcn_loss(&fcn_forward(&img, &minus).unwrap(), &targets).unwrap();
            probes.checked += 1;
            if !close(grad.tensors()[t][i], (lp - lm) / (2.0 * step)) {
                probes.failed += 1;
            }
        }
    }
}

fn random_patches(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n * PATCH_LEN).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn matcher_gradient_config(seed: u64, probes: &mut Probes) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = MatcherArch {
        conv1: rng.random_range(1..=3),
        conv2: rng.random_range(1..=3),
        hidden: rng.random_range(2..=4),
        share_tower: rng.random_bool(0.5),
    };
    let parts = rng.random_range(1..=2);
    let p: MatcherParams<f64> = MatcherParams::init(&arch, parts, seed).unwrap();
    let k = rng.random_range(0..parts);
    let n = rng.random_range(2..=3);
    let a = random_patches(&mut rng, n);
    let b = random_patches(&mut rng, n);
    let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
    let mut grad = p.zeros_like();
    matcher_loss_grad(&p, k, &a, &b, &y, 1.0 / n as f64, &mut grad).unwrap();
    let base = p.activation_pattern(k, &a, &b).unwrap();
    let step = 1e-5;
    for t in 0..p.tensors().len() {
        for i in 0..p.tensors()[t].len() {
            let mut plus = p.clone();
            plus.tensors_mut()[t][i] += step;
            let mut minus = p.clone();
            minus.tensors_mut()[t][i] -= step;
            if plus.activation_pattern(k, &a, &b).unwrap() != base || minus.activation_pattern(k, &a, &b).unwrap() != base {
                probes.skipped += 1;
                continue;
            }
            let fd = (matcher_loss(&plus, k, &a, &b, &y).unwrap() - matcher_loss(&minus, k, &a, &b, &y).unwrap()) / (2.0 * step);
            probes.checked += 1;
            if !close(grad.tensors()[t][i], fd) {
                probes.failed += 1;
            }
        }
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let _g = serial();
    let t0 = Instant::now();
    let mut fcn = Probes::default();
    for seed in 0..20 {
        fcn_gradient_config(100 + seed, &mut fcn);
    }
    let mut mat = Probes::default();
    for seed in 0..20 {
        matcher_gradient_config(200 + seed, &mut mat);
    }
    let secs = t0.elapsed().as_secs_f64();
    // Kink-crossing probes are skipped; most probes must still be checked.
    let enough = |p: &Probes| p.checked * 10 >= (p.checked + p.skipped) * 9;
    let pass = fcn.failed == 0 && mat.failed == 0 && enough(&fcn) && enough(&mat) && secs < 60.0;
    report(
        3,
        "FCN and matcher gradients",
        pass,
        format!(
            "20+20 configs; fcn {}/{} probes ok ({} skipped), matcher {}/{} ok ({} skipped), {secs:.1} s",
            fcn.checked - fcn.failed,
            fcn.checked,
            fcn.skipped,
            mat.checked - mat.failed,
            mat.checked,
            mat.skipped
        ),
    );
    assert!(pass);
}

/// A structured-learning toy: the first proposal of every part sits on the
/// true joint, the rest scatter around it, and the unaries favour the truth
/// by `signal`.
fn toy_problem(seed: u64) -> (Vec<StructExample>, KinematicTree, StructTrainConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(5..=7);
    let tree = random_tree(&mut rng, k);
    let n = rng.random_range(3..=6);
    let signal = rng.random_range(0.0..1.5);
    let count = rng.random_range(6..=12);
    let examples = (0..count)
        .map(|_| {
            let mut joints: Vec<Joint> =
                (0..k).map(|_| Joint::new(rng.random_range(10.0..90.0), rng.random_range(10.0..90.0), 2000.0)).collect();
            joints[UPPER_SPINE] = Joint::new(50.0, 30.0, 2000.0);
            joints[DOWN_SPINE] = Joint::new(50.0, 60.0, 2000.0);
            let parts = joints
                .iter()
                .enumerate()
                .map(|(part, j)| {
                    (0..n)
                        .map(|i| {
                            let (dx, dy) = if i == 0 { (0.0, 0.0) } else { (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)) };
                            PartProposal {
                                x: (j.x + dx).max(0.0).round() as u32,
                                y: (j.y + dy).max(0.0).round() as u32,
                                w: 10,
                                h: 10,
                                k: part,
                                z: 2000.0 + rng.random_range(-60.0..60.0),
                                score: 0.0,
                            }
                        })
                        .collect()
                })
                .collect();
            let unaries = (0..k)
                .map(|_| (0..n).map(|i| rng.random_range(0.0..1.0) + if i == 0 { signal } else { 0.0 }).collect())
                .collect();
            let truth = PoseConfig::new(joints.iter().map(|j| Joint::new(j.x.round(), j.y.round(), j.z)).collect());
            StructExample { evidence: Evidence { proposals: ProposalSet { parts }, unaries, mm_per_pixel: 16.0 }, truth }
        })
        .collect();
    let cfg = StructTrainConfig {
        c: [0.001, 0.1, 1.0, 10.0][(seed % 4) as usize],
        outer_iterations: 10,
        tol: 0.0,
        seed,
        ..StructTrainConfig::default()
    };
    (examples, tree, cfg)
}

#[test]
fn cccp_objective_never_increases() {
    let _g = serial();
    let mut failures = Vec::new();
    let mut iterations = 0;
    for seed in 0..10 {
        let (examples, tree, cfg) = toy_problem(seed);
        let init = StructParams::unit(&tree);
        let start = struct_objective(&init, &examples, &tree, cfg.c, cfg.tau).unwrap();
        let out = match cccp_train(&examples, &tree, init, &cfg) {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        iterations += out.objective.len() - 1;
        let mut trace = vec![start];
        trace.extend(&out.objective);
        if let Some(i) = trace.windows(2).position(|p| p[1] > p[0] + 1e-9) {
            failures.push(format!("seed {seed}: {} -> {} at step {i}", trace[i], trace[i + 1]));
        }
        let end = struct_objective(&out.params, &examples, &tree, cfg.c, cfg.tau).unwrap();
        if (end - trace[trace.len() - 1]).abs() > 1e-9 * end.abs().max(1.0) {
            failures.push(format!("seed {seed}: final params score {end}, logged {}", trace[trace.len() - 1]));
        }
    }
    let pass = failures.is_empty();
    let detail = if pass { format!("10 problems, {iterations} outer iterations, no increase") } else { failures.join("; ") };
    report(4, "CCCP objective non-increasing", pass, detail);
    assert!(pass);
}

#[test]
fn component_ordering_on_synthetic_split() {
    let _g = serial();
    let t0 = Instant::now();
    let data = synthesize_dataset(&SynthConfig { count: 2500, subjects: 10, test_subjects: 2, seed: 11, ..SynthConfig::default() })
        .unwrap();
    let train = data.split_vec(Split::Train);
    let test = data.split_vec(Split::Test);
    assert_eq!((train.len(), test.len()), (2000, 500));
    assert_eq!((data.samples[0].image.width(), data.samples[0].image.height()), (128, 128));
    // Published bundle: n = 17² = 289, tau 0.2, K 19, C 0.001, T 10.
    let cfg = JointConfig { rounds: 1, ..JointConfig::default() };
    assert_eq!(cfg.proposals.window * cfg.proposals.window, 289);
    assert_eq!((cfg.structure.tau, cfg.structure.c, cfg.templates), (0.2, 0.001, 10));
    let model = cfg.initial_model(&train, KinematicTree::default19()).unwrap();
    assert_eq!(model.k(), NUM_JOINTS);
    let state = joint_train(&train, model, &cfg).unwrap();
    let rep = component_analysis(&test, &state.model).unwrap();
    let [fcn, matchnet, full] = rep.reports().map(|r| r.at(0.2).unwrap());
    let pass = full >= fcn + 0.02 && matchnet >= fcn;
    report(
        5,
        "component ordering at PDJ(0.2)",
        pass,
        format!(
            "fcn {fcn:.4}, fcn+matchnet {matchnet:.4}, full {full:.4} on {} test images, {:.0} s",
            test.len(),
            t0.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn inference_is_fast_enough() {
    let _g = serial();
    let data = synthesize_dataset(&SynthConfig { count: 40, subjects: 4, test_subjects: 1, seed: 3, ..SynthConfig::default() }).unwrap();
    let train = data.split_vec(Split::Train);
    let model = JointConfig::default().initial_model(&train, KinematicTree::default19()).unwrap();
    let images: Vec<&DepthImage> = data.samples.iter().take(10).map(|s| &s.image).collect();
    let mut dp_worst = Duration::ZERO;
    let mut e2e_worst = Duration::ZERO;
    let mut sizes_ok = true;
    for img in images {
        let t0 = Instant::now();
        let (ev, _) = model.predict(img).unwrap();
        e2e_worst = e2e_worst.max(t0.elapsed());
        sizes_ok &= ev.proposals.parts.len() == NUM_JOINTS && ev.proposals.parts.iter().all(|p| p.len() == 289);
        // Best of three isolates the DP cost from scheduler noise.
        let dp = (0..3)
            .map(|_| {
                let t = Instant::now();
                dp_infer(&ev.inputs(), &model.structure, &model.tree).unwrap();
                t.elapsed()
            })
            .min()
            .unwrap();
        dp_worst = dp_worst.max(dp);
    }
    let pass = sizes_ok && dp_worst < Duration::from_millis(10) && e2e_worst < Duration::from_secs(1);
    report(
        6,
        "inference time, K=19 n=289",
        pass,
        format!(
            "worst DP {:.2} ms, worst end-to-end {:.0} ms over 10 images",
            dp_worst.as_secs_f64() * 1e3,
            e2e_worst.as_secs_f64() * 1e3
        ),
    );
    assert!(pass);
}

fn random_pose(rng: &mut ChaCha8Rng, width: u32) -> PoseConfig {
    let mut joints: Vec<Joint> = (0..NUM_JOINTS)
        .map(|_| Joint::new(rng.random_range(0..width) as f64, rng.random_range(0..100) as f64, 2000.0))
        .collect();
    joints[UPPER_SPINE] = Joint::new(rng.random_range(40..60) as f64, 20.0, 2000.0);
    joints[DOWN_SPINE] = Joint::new(rng.random_range(40..60) as f64, rng.random_range(60..90) as f64, 2000.0);
    PoseConfig::new(joints)
}

/// Predictions near their truths, on the integer grid so flips are exact.
fn jittered(rng: &mut ChaCha8Rng, truth: &PoseConfig, width: u32) -> PoseConfig {
    PoseConfig::new(
        truth
            .joints
            .iter()
            .map(|j| {
                let x = (j.x + rng.random_range(-12..=12) as f64).clamp(0.0, (width - 1) as f64);
                Joint::new(x, j.y + rng.random_range(-12..=12) as f64, j.z)
            })
            .collect(),
    )
}

fn pdj_checks() -> Vec<String> {
    let mut failures = Vec::new();

    // Boundary: a 6-8-10 offset against a 100 px torso sits exactly on 0.10.
    let mut truth = vec![Joint::new(30.0, 40.0, 2000.0); NUM_JOINTS];
    truth[UPPER_SPINE] = Joint::new(50.0, 10.0, 2000.0);
    truth[DOWN_SPINE] = Joint::new(50.0, 110.0, 2000.0);
    let truth = PoseConfig::new(truth);
    let pred = truth.translated(6.0, 8.0);
    let r = pdj_curve_with(&[pred], std::slice::from_ref(&truth), &[0.09, 0.1], &Torso::default()).unwrap();
    if r.correct[0].iter().any(|&c| c != 0) || r.correct[1].iter().any(|&c| c != 1) {
        failures.push(format!("boundary: {:?}", r.correct));
    }
    let beyond = truth.translated(6.0, 8.0 + 1e-9);
    let r = pdj_curve_with(&[beyond], &[truth], &[0.1], &Torso::default()).unwrap();
    if r.overall(0) != 0.0 {
        failures.push("boundary: a joint just beyond the threshold counted".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let width = 128;
    for round in 0..20 {
        let truths: Vec<PoseConfig> = (0..rng.random_range(1..30)).map(|_| random_pose(&mut rng, width)).collect();
        let preds: Vec<PoseConfig> = truths.iter().map(|t| jittered(&mut rng, t, width)).collect();
        let r = pdj_curve(&preds, &truths).unwrap();

        // Monotone in the threshold, overall and per part.
        for t in 1..r.thresholds.len() {
            if r.overall(t) < r.overall(t - 1) || (0..r.k()).any(|k| r.correct[t][k] < r.correct[t - 1][k]) {
                failures.push(format!("round {round}: not monotone at threshold {}", r.thresholds[t]));
            }
        }

        // Counts agree with a direct recount; per-part accuracies average to
        // the overall accuracy.
        for (t, th) in r.thresholds.iter().enumerate() {
            for k in 0..NUM_JOINTS {
                let direct = preds
                    .iter()
                    .zip(&truths)
                    .filter(|(p, g)| {
                        let torso = (g.joints[UPPER_SPINE].x - g.joints[DOWN_SPINE].x).hypot(g.joints[UPPER_SPINE].y - g.joints[DOWN_SPINE].y);
                        (p.joints[k].x - g.joints[k].x).hypot(p.joints[k].y - g.joints[k].y) <= th * torso
                    })
                    .count();
                if direct != r.correct[t][k] {
                    failures.push(format!("round {round}: count mismatch at t={th} k={k}"));
                }
            }
            let mean: f64 = (0..NUM_JOINTS).map(|k| r.part_accuracy(t, k)).sum::<f64>() / NUM_JOINTS as f64;
            let counted: usize = r.correct[t].iter().sum();
            if (mean - r.overall(t)).abs() > 1e-12 || counted as f64 / (r.samples * NUM_JOINTS) as f64 != r.overall(t) {
                failures.push(format!("round {round}: per-part and overall disagree at t={th}"));
            }
        }

        // Flipping predictions and truths together permutes parts only.
        let fp: Vec<PoseConfig> = preds.iter().map(|p| p.flipped(width)).collect();
        let ft: Vec<PoseConfig> = truths.iter().map(|p| p.flipped(width)).collect();
        let f = pdj_curve(&fp, &ft).unwrap();
        let perm = posekit::dataio::mirror_permutation(NUM_JOINTS);
        for t in 0..r.thresholds.len() {
            if f.overall(t) != r.overall(t) || (0..NUM_JOINTS).any(|k| f.correct[t][perm[k]] != r.correct[t][k]) {
                failures.push(format!("round {round}: flip changed the result at t={}", r.thresholds[t]));
            }
        }
    }
    failures
}

#[test]
fn pdj_metric_properties() {
    let _g = serial();
    let failures = pdj_checks();
    let pass = failures.is_empty();
    let detail = if pass { "boundary, monotonicity, flip invariance, consistency".to_string() } else { failures.join("; ") };
    report(7, "PDJ metric", pass, detail);
    assert!(pass);
}

fn bits32(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn roundtrip_checks(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(format!("{name} (seed {seed})"));
        }
    };

    let (w, h) = (rng.random_range(1..48), rng.random_range(1..48));
    let depth: Vec<u16> = (0..w * h).map(|_| rng.random()).collect();
    let img = DepthImage::from_fixed(w, h, depth, rng.random_range(1..100_000)).unwrap();
    let bytes = img.to_kdep_bytes();
    let back = DepthImage::from_kdep_bytes(&bytes).unwrap();
    check("KDEP", back == img && back.to_kdep_bytes() == bytes);

    let widths: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
    let arch = FcnArch::from_widths(&widths, rng.random_range(1..5));
    let mut fcn: FcnParams<f32> = FcnParams::init(&arch, seed).unwrap();
    for t in fcn.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-1e3f32..1e3) * rng.random_range(1e-6f32..1.0));
    }
    let bytes = fcn.to_kfcn_bytes();
    let back = FcnParams::from_kfcn_bytes(&bytes, &arch).unwrap();
    let same = back.tensors().iter().zip(fcn.tensors()).all(|(a, b)| bits32(a) == bits32(b));
    check("KFCN", same && back.to_kfcn_bytes() == bytes);

    let (k, t) = (rng.random_range(1..4), rng.random_range(1..4));
    let data: Vec<f32> = (0..k * t * PATCH_LEN).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    let scale = rng.random_range(100.0..2000.0);
    let tpl = TemplateSet::new(k, t, scale, data).unwrap();
    let bytes = tpl.to_ktpl_bytes();
    let back = TemplateSet::from_ktpl_bytes(&bytes, scale).unwrap();
    check("KTPL", bits32(&back.data) == bits32(&tpl.data) && (back.k, back.t) == (k, t) && back.to_ktpl_bytes() == bytes);

    let arch = MatcherArch {
        conv1: rng.random_range(1..4),
        conv2: rng.random_range(1..4),
        hidden: rng.random_range(1..6),
        share_tower: rng.random_bool(0.5),
    };
    let mat: MatcherParams<f32> = MatcherParams::init(&arch, rng.random_range(1..4), seed).unwrap();
    let bytes = mat.to_kmat_bytes();
    let back = MatcherParams::<f32>::from_kmat_bytes(&bytes).unwrap();
    let same = back.tensors().iter().zip(mat.tensors()).all(|(a, b)| bits32(a) == bits32(b));
    check("KMAT", same && back.to_kmat_bytes() == bytes);

    let k = rng.random_range(1..20);
    let tree = random_tree(&mut rng, k);
    // KSTR stores f32, so the payload is drawn on the f32 grid.
    let w = StructParams {
        omega: (0..tree.k()).map(|_| rng.random_range(-1e6f32..1e6) as f64).collect(),
        gamma: (0..tree.edges().len())
            .map(|_| std::array::from_fn(|_| rng.random_range(-1e-3f32..1e3) as f64))
            .collect(),
    };
    let bytes = w.to_kstr_bytes();
    let back = StructParams::from_kstr_bytes(&bytes).unwrap();
    let bits = |p: &StructParams| p.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check("KSTR", bits(&back) == bits(&w) && back.to_kstr_bytes() == bytes);

    let stages = ["fcn", "matcher", "struct", "eval"];
    let rows: Vec<LogRow> = (0..rng.random_range(1..30))
        .map(|i| LogRow {
            round: i / 4 + 1,
            stage: stages[i % 4].to_string(),
            metric: ["loss", "objective", "pdj@0.20"][rng.random_range(0..3)].to_string(),
            value: f64::from_bits(rng.random::<u64>() >> 2),
        })
        .collect();
    let text = train_log_csv(&rows);
    let back = parse_train_log(&text).unwrap();
    let same = back.len() == rows.len() && back.iter().zip(&rows).all(|(a, b)| a.value.to_bits() == b.value.to_bits() && a == b);
    check("training log CSV", same && train_log_csv(&back) == text);

    let losses: Vec<EpochLoss> = (1..rng.random_range(2..20))
        .map(|epoch| EpochLoss { epoch, mean_loss: rng.random_range(0.0..1e4) / rng.random_range(1.0..1e3) })
        .collect();
    let text = loss_log_csv(&losses);
    let back = parse_loss_log(&text).unwrap();
    check("loss log CSV", back == losses && loss_log_csv(&back) == text);

    let truths: Vec<PoseConfig> = (0..rng.random_range(1..9)).map(|_| random_pose(&mut rng, 128)).collect();
    let preds: Vec<PoseConfig> = truths.iter().map(|t| jittered(&mut rng, t, 128)).collect();
    let pdj = pdj_curve(&preds, &truths).unwrap();
    let table = PdjTable::parse_csv(&pdj.to_csv()).unwrap();
    check("PDJ CSV", table == PdjTable::from_report(&pdj));

    failures
}

#[test]
fn formats_round_trip_bit_exactly() {
    let _g = serial();
    let failures: Vec<String> = (0..25).flat_map(roundtrip_checks).collect();
    let pass = failures.is_empty();
    let detail = if pass { "KDEP, KFCN, KTPL, KMAT, KSTR and CSV logs over 25 seeds".to_string() } else { failures.join("; ") };
    report(8, "format round-trips", pass, detail);
    assert!(pass);
}
