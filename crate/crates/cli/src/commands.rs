use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use posekit::dataio::{pose_from_json, read_depth_image, synthesize_dataset, Dataset, DepthImage, Sample, Split, SynthConfig, NUM_JOINTS};
use posekit::eval::{component_analysis, part_summary, pdj_curve, write_pdj, ComponentReport, PdjReport};
use posekit::inference::{config_pose, InferenceJson};
use posekit::kinematics::KinematicTree;
use posekit::learning::{joint_train, write_train_log, JointConfig, Stages, LOG_FILE};
use posekit::pipeline::{Model, META_FILE};
use rayon::prelude::*;
use serde_json::json;

use crate::overlay::overlay_svg;
use crate::{CliError, EvalArgs, GenArgs, InferArgs, SplitArg, StageArg, TrainArgs};

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::Run(posekit::Error::Io { path: path.to_path_buf(), source: e }))
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    if !dir.is_dir() {
        return Err(usage(format!("dataset directory {} does not exist", dir.display())));
    }
    Dataset::load(dir).map_err(|e| usage(format!("cannot load dataset: {e}")))
}

fn select(data: &Dataset, split: SplitArg) -> Vec<Sample> {
    match split {
        SplitArg::Train => data.split_vec(Split::Train),
        SplitArg::Test => data.split_vec(Split::Test),
        SplitArg::All => data.samples.clone(),
    }
}

pub fn gen(a: &GenArgs) -> CliResult {
    let subjects = a.subjects.unwrap_or(a.count.min(10));
    let cfg = SynthConfig {
        count: a.count,
        subjects,
        test_subjects: a.test_subjects.unwrap_or(subjects.saturating_sub(1).min(2)),
        width: a.width,
        height: a.height,
        mm_per_pixel: a.mm_per_pixel,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let t0 = Instant::now();
    let data = synthesize_dataset(&cfg)?;
    create_dir(&a.out)?;
    let manifest = data.save(&a.out)?;
    eprintln!("generated in {:.2} s", t0.elapsed().as_secs_f64());
    println!(
        "{} images ({}x{}, K = {}): {} train, {} test -> {}",
        manifest.entries.len(),
        manifest.width,
        manifest.height,
        manifest.k,
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn joint_config(a: &TrainArgs) -> JointConfig {
    let mut cfg = JointConfig {
        rounds: a.rounds,
        tol: a.tol,
        stages: match a.stage {
            StageArg::All => Stages::ALL,
            StageArg::Fcn => Stages { fcn: true, matcher: false, structure: false },
            StageArg::Matcher => Stages { fcn: false, matcher: true, structure: false },
            StageArg::Struct => Stages { fcn: false, matcher: false, structure: true },
        },
        templates: a.templates,
        seed: a.seed,
        ..JointConfig::default()
    };
    cfg.proposals.window = a.window;
    cfg.fcn.epochs = a.fcn_epochs;
    cfg.fcn.learning_rate = a.fcn_lr;
    cfg.fcn.sigma = a.fcn_sigma;
    cfg.fcn.seed = a.seed;
    cfg.matcher.epochs = a.matcher_epochs;
    cfg.matcher.learning_rate = a.matcher_lr;
    cfg.matcher.seed = a.seed;
    cfg.structure.c = a.c;
    cfg.structure.tau = a.tau;
    cfg.structure.outer_iterations = a.outer_iterations;
    cfg.structure.seed = a.seed;
    cfg
}

pub fn train(a: &TrainArgs) -> CliResult {
    let data = load_dataset(&a.data)?;
    if data.k != a.parts {
        return Err(usage(format!("dataset has K = {}, --parts is {}", data.k, a.parts)));
    }
    let tree = match &a.tree {
        Some(p) => KinematicTree::read_json(p).map_err(|e| usage(e.to_string()))?,
        None if a.parts == NUM_JOINTS => KinematicTree::default19(),
        None => return Err(usage(format!("--tree is required for K = {}", a.parts))),
    };
    if tree.k() != a.parts {
        return Err(usage(format!("tree has {} nodes, K is {}", tree.k(), a.parts)));
    }
    let train = data.split_vec(Split::Train);
    if train.is_empty() {
        return Err(usage("the dataset has no training images"));
    }
    let mut cfg = joint_config(a);
    cfg.validate()?;

    let init = if a.model.join(META_FILE).is_file() {
        let m = Model::load(&a.model)?;
        if m.k() != a.parts {
            return Err(usage(format!("model has K = {}, dataset {}", m.k(), a.parts)));
        }
        log::info!("resuming from {}", a.model.display());
        cfg.proposals = m.proposals;
        m
    } else {
        cfg.initial_model(&train, tree).map_err(|e| usage(e.to_string()))?
    };
    let t0 = Instant::now();
    let state = joint_train(&train, init, &cfg)?;
    eprintln!(
        "trained {} round(s) on {} images in {:.1} s",
        state.rounds,
        train.len(),
        t0.elapsed().as_secs_f64()
    );
    let meta = json!({
        "config": cfg,
        "rounds_run": state.rounds,
        "converged": state.converged,
        "mean_scores": state.mean_scores,
        "published_defaults": { "n": 289, "tau": 0.2, "k": 19, "c": 0.001, "t": 10 },
    });
    state.model.save(&a.model, meta)?;
    write_train_log(&state.log, &a.model.join(LOG_FILE))?;
    println!("model written to {}", a.model.display());
    Ok(())
}

fn infer_inputs(a: &InferArgs) -> CliResult<Vec<(String, DepthImage)>> {
    let mut out = Vec::new();
    for p in &a.input {
        if p.is_dir() {
            let data = load_dataset(p)?;
            out.extend(select(&data, a.split).into_iter().map(|s| (s.name, s.image)));
        } else {
            let img = read_depth_image(p).map_err(|e| usage(e.to_string()))?;
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| usage(format!("{} has no file name", p.display())))?;
            out.push((name, img));
        }
    }
    if out.is_empty() {
        return Err(usage("no input images"));
    }
    Ok(out)
}

pub fn infer(a: &InferArgs) -> CliResult {
    let inputs = infer_inputs(a)?;
    let model = Model::load(&a.model)?;
    create_dir(&a.out)?;
    for (name, img) in &inputs {
        let t0 = Instant::now();
        let ev = model.evidence(img)?;
        let t1 = Instant::now();
        let inf = model.infer(&ev)?;
        let t2 = Instant::now();
        let out = InferenceJson::new(&inf, &ev.proposals);
        let text = serde_json::to_string_pretty(&out).expect("inference result serialises") + "\n";
        write(&a.out.join(format!("{name}.json")), &text)?;
        if a.overlay {
            write(&a.out.join(format!("{name}.svg")), &overlay_svg(img, &out.pose(), &model.tree))?;
        }
        eprintln!(
            "{name}: heat maps and unaries {:.1} ms, dp {:.2} ms, total {:.1} ms",
            (t1 - t0).as_secs_f64() * 1e3,
            (t2 - t1).as_secs_f64() * 1e3,
            t0.elapsed().as_secs_f64() * 1e3
        );
    }
    println!("{} pose(s) written to {}", inputs.len(), a.out.display());
    Ok(())
}

fn read_predictions(dir: &Path, samples: &[Sample]) -> CliResult<Vec<posekit::dataio::PoseConfig>> {
    samples
        .iter()
        .map(|s| {
            let path: PathBuf = dir.join(format!("{}.json", s.name));
            let bytes = fs::read(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let pose = pose_from_json(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            if pose.k() != s.pose.k() {
                return Err(usage(format!("{}: {} joints, expected {}", path.display(), pose.k(), s.pose.k())));
            }
            Ok(pose)
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let data = load_dataset(&a.data)?;
    let samples = select(&data, a.split);
    if samples.is_empty() {
        return Err(usage("the selected split is empty"));
    }
    let truths: Vec<_> = samples.iter().map(|s| s.pose.clone()).collect();
    let t0 = Instant::now();
    let report: PdjReport = match (&a.predictions, &a.model) {
        (Some(dir), _) => pdj_curve(&read_predictions(dir, &samples)?, &truths)?,
        (None, Some(dir)) => {
            let model = Model::load(dir)?;
            if model.k() != data.k {
                return Err(usage(format!("model has K = {}, dataset {}", model.k(), data.k)));
            }
            if a.components {
                let rep = component_analysis(&samples, &model)?;
                create_dir(&a.out)?;
                rep.write(&a.out)?;
                for (name, r) in ComponentReport::names().iter().zip(rep.reports()) {
                    eprintln!("{name}: PDJ(0.20)={:.4}", r.at(0.2).unwrap_or(f64::NAN));
                }
                rep.full
            } else {
                let preds = samples
                    .par_iter()
                    .map(|s| {
                        let (ev, inf) = model.predict(&s.image)?;
                        Ok(config_pose(&inf.config, &ev.proposals))
                    })
                    .collect::<posekit::Result<Vec<_>>>()?;
                pdj_curve(&preds, &truths)?
            }
        }
        (None, None) => return Err(usage("either --model or --predictions is required")),
    };
    create_dir(&a.out)?;
    write_pdj(&report, &a.out)?;
    eprintln!("evaluated {} images in {:.1} s", samples.len(), t0.elapsed().as_secs_f64());
    let last = report.thresholds.len() - 1;
    eprintln!("{}", part_summary(&report, last));
    println!("PDJ(0.20)={:.4}", report.at(0.2).unwrap_or(report.overall(last)));
    Ok(())
}
