use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cccp::{cccp_train, StructExample, StructTrainConfig};
use crate::binio;
use crate::dataio::{PoseConfig, Sample};
use crate::error::{Error, FormatError, Result};
use crate::eval::pdj;
use crate::fcn::{fcn_train, FcnArch, FcnParams, FcnTrainConfig};
use crate::inference::{config_pose, dp_infer};
use crate::kinematics::{KinematicTree, StructParams};
use crate::matchnet::{cluster_templates, matcher_train, KMeansConfig, MatcherArch, MatcherParams, MatcherTrainConfig};
use crate::pipeline::{Evidence, Model, ProposalConfig};

pub const LOG_FILE: &str = "train_log.csv";

/// Which stage trainers run in each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub fcn: bool,
    pub matcher: bool,
    pub structure: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        fcn: true,
        matcher: true,
        structure: true,
    };
}

impl Default for Stages {
    fn default() -> Self {
        Stages::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub rounds: usize,
    /// Relative change of the mean best score below which rounds stop.
    pub tol: f64,
    pub stages: Stages,
    /// Hidden widths of the heat-map network.
    pub fcn_widths: Vec<usize>,
    pub matcher_arch: MatcherArch,
    /// Templates per part (T).
    pub templates: usize,
    pub kmeans: KMeansConfig,
    pub proposals: ProposalConfig,
    pub fcn: FcnTrainConfig,
    pub matcher: MatcherTrainConfig,
    pub structure: StructTrainConfig,
    /// Seed of the initial network weights.
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            rounds: 5,
            tol: 1e-3,
            stages: Stages::ALL,
            fcn_widths: vec![8, 16, 16, 32, 32],
            matcher_arch: MatcherArch::default(),
            templates: 10,
            kmeans: KMeansConfig::default(),
            proposals: ProposalConfig::default(),
            fcn: FcnTrainConfig::default(),
            matcher: MatcherTrainConfig::default(),
            structure: StructTrainConfig::default(),
            seed: 0,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::config("tolerance must be >= 0"));
        }
        if self.templates == 0 {
            return Err(Error::config("need at least one template per part"));
        }
        if self.matcher.depth_scale != self.proposals.depth_scale {
            return Err(Error::config("matcher and proposal depth scales differ"));
        }
        self.proposals.validate()?;
        self.fcn.validate()?;
        self.matcher.validate()?;
        self.structure.validate()?;
        self.matcher_arch.validate()
    }

    /// Fresh model: random networks, templates clustered from `train`,
    /// unit structural weights.
    pub fn initial_model(&self, train: &[Sample], tree: KinematicTree) -> Result<Model> {
        self.validate()?;
        let k = tree.k();
        let fcn_arch = FcnArch::from_widths(&self.fcn_widths, k);
        let templates = cluster_templates(
            train,
            k,
            self.templates,
            self.proposals.box_size()?,
            self.proposals.depth_scale,
            &self.kmeans,
        )?;
        Ok(Model {
            fcn: FcnParams::init(&fcn_arch, self.seed)?,
            fcn_arch,
            templates,
            matcher: MatcherParams::init(&self.matcher_arch, k, self.seed.wrapping_add(1))?,
            structure: StructParams::unit(&tree),
            tree,
            proposals: self.proposals,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub round: usize,
    pub stage: String,
    pub metric: String,
    pub value: f64,
}

impl LogRow {
    fn new(round: usize, stage: &str, metric: &str, value: f64) -> Self {
        LogRow {
            round,
            stage: stage.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

pub fn train_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("round,stage,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.round, r.stage, r.metric, r.value);
    }
    s
}

pub fn parse_train_log(text: &str) -> Result<Vec<LogRow>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| FormatError::invalid("header", e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["round", "stage", "metric", "value"] {
        return Err(FormatError::invalid("header", "expected `round,stage,metric,value`"));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| FormatError::invalid("row", e.to_string()))?;
            if rec.len() != 4 {
                return Err(FormatError::invalid("row", format!("{} fields", rec.len())));
            }
            Ok(LogRow {
                round: rec[0].parse().map_err(|_| FormatError::invalid("round", rec[0].to_string()))?,
                stage: rec[1].to_string(),
                metric: rec[2].to_string(),
                value: rec[3].parse().map_err(|_| FormatError::invalid("value", rec[3].to_string()))?,
            })
        })
        .collect()
}

pub fn write_train_log(rows: &[LogRow], path: &Path) -> Result<()> {
    binio::write_file(path, train_log_csv(rows).as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub log: Vec<LogRow>,
    /// Mean best-configuration score over the training images, per round.
    pub mean_scores: Vec<f64>,
    pub rounds: usize,
    pub converged: bool,
}

fn stage<T>(round: usize, name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        round,
        stage: name,
        source: Box::new(e),
    })
}

fn evidence_all(model: &Model, train: &[Sample], with_unaries: bool) -> Result<Vec<Evidence>> {
    train
        .par_iter()
        .map(|s| {
            let proposals = model.extract(&s.image)?;
            let unaries = if with_unaries {
                model.unaries(&s.image, &proposals)?
            } else {
                Vec::new()
            };
            Ok(Evidence {
                proposals,
                unaries,
                mm_per_pixel: s.image.mm_per_pixel(),
            })
        })
        .collect()
}

fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_add(round as u64 - 1)
}

/// Alternates the three stage trainers: heat-map network, matcher, then
/// structural weights, regenerating proposals from the current network
/// each round. Stops when the mean best score over `train` changes by less
/// than `cfg.tol` (relative) between rounds, or after `cfg.rounds`.
pub fn joint_train(train: &[Sample], init: Model, cfg: &JointConfig) -> Result<TrainState> {
    cfg.validate()?;
    init.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if train.iter().any(|s| s.pose.k() != init.k()) {
        return Err(Error::contract("training poses and model disagree on K"));
    }
    let truths: Vec<PoseConfig> = train.iter().map(|s| s.pose.clone()).collect();
    let mut model = init;
    let mut log = Vec::new();
    let mut mean_scores: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    for round in 1..=cfg.rounds {
        rounds = round;
        if cfg.stages.fcn {
            let fc = FcnTrainConfig {
                seed: round_seed(cfg.fcn.seed, round),
                ..cfg.fcn.clone()
            };
            let out = stage(round, "fcn", fcn_train(train, model.fcn.clone(), &fc))?;
            model.fcn = out.params;
            if let Some(last) = out.log.last() {
                log.push(LogRow::new(round, "fcn", "loss", last.mean_loss));
            }
        }
        if cfg.stages.matcher {
            let ev = stage(round, "matcher", evidence_all(&model, train, false))?;
            let sets: Vec<_> = ev.into_iter().map(|e| e.proposals).collect();
            let mc = MatcherTrainConfig {
                seed: round_seed(cfg.matcher.seed, round),
                ..cfg.matcher.clone()
            };
            let out = stage(
                round,
                "matcher",
                matcher_train(train, &sets, &model.templates, model.matcher.clone(), &mc),
            )?;
            model.matcher = out.params;
            if let Some(last) = out.log.last() {
                log.push(LogRow::new(round, "matcher", "loss", last.mean_loss));
            }
        }
        let evidence = stage(round, "struct", evidence_all(&model, train, true))?;
        let examples: Vec<StructExample> = evidence
            .into_iter()
            .zip(&truths)
            .map(|(evidence, t)| StructExample {
                evidence,
                truth: t.clone(),
            })
            .collect();
        if cfg.stages.structure {
            let sc = StructTrainConfig {
                seed: round_seed(cfg.structure.seed, round),
                ..cfg.structure.clone()
            };
            let out = stage(round, "struct", cccp_train(&examples, &model.tree, model.structure.clone(), &sc))?;
            model.structure = out.params;
            log.push(LogRow::new(round, "struct", "objective", *out.objective.last().expect("initial objective")));
        }
        let results = stage(
            round,
            "eval",
            examples
                .par_iter()
                .map(|ex| dp_infer(&ex.evidence.inputs(), &model.structure, &model.tree))
                .collect::<Result<Vec<_>>>(),
        )?;
        let mean = results.iter().map(|r| r.score).sum::<f64>() / results.len() as f64;
        let preds: Vec<PoseConfig> = results
            .iter()
            .zip(&examples)
            .map(|(r, ex)| config_pose(&r.config, &ex.evidence.proposals))
            .collect();
        let acc = stage(round, "eval", pdj(&preds, &truths, 0.2))?.overall(0);
        log.push(LogRow::new(round, "eval", "mean_score", mean));
        log.push(LogRow::new(round, "eval", "pdj@0.20", acc));
        log::info!("round {round}: mean score {mean}, train PDJ(0.20) {acc}");
        if let Some(&prev) = mean_scores.last() {
            let change = (mean - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
            mean_scores.push(mean);
            if change < cfg.tol || mean == prev {
                converged = true;
                break;
            }
        } else {
            mean_scores.push(mean);
        }
    }
    Ok(TrainState {
        model,
        log,
        mean_scores,
        rounds,
        converged,
    })
}
