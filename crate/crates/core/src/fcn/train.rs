use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fcn_backward, gaussian_targets, FcnParams};
use crate::binio;
use crate::dataio::{augment, AugmentConfig, Sample};
use crate::error::{Error, FormatError, Result};
use crate::nn::sgd_step;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Target Gaussian std in heat-map pixels.
    pub sigma: f64,
    /// Batch gradients with a larger L2 norm are rescaled to this norm.
    pub clip_norm: Option<f64>,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for FcnTrainConfig {
    fn default() -> Self {
        FcnTrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 20,
            epochs: 10,
            sigma: 2.0,
            clip_norm: Some(10.0),
            augment: None,
            seed: 0,
        }
    }
}

impl FcnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("FCN learning rate must be finite and non-negative"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("target sigma must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("momentum must lie in [0, 1) and weight decay be >= 0"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip norm must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FcnTrainOutcome {
    pub params: FcnParams<f32>,
    pub log: Vec<EpochLoss>,
}

fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [epoch as u64, index as u64] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01B3).rotate_left(29);
    }
    h
}

/// Minibatch SGD with momentum on the summed per-image loss; the batch
/// gradient is the mean over its images.
pub fn fcn_train(train: &[Sample], init: FcnParams<f32>, cfg: &FcnTrainConfig) -> Result<FcnTrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    if train.is_empty() {
        return Err(Error::contract("FCN training needs a non-empty train split"));
    }
    if let Some(s) = train.iter().find(|s| s.pose.k() != init.k()) {
        return Err(Error::contract(format!(
            "sample {} has {} joints, network predicts {}",
            s.name,
            s.pose.k(),
            init.k()
        )));
    }
    let mut params = init;
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let stride = params.downsample();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let params_ref = &params;
            let results: Vec<Result<(f64, FcnParams<f32>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    let (img, pose) = match &cfg.augment {
                        Some(a) => {
                            let out = augment(&s.image, &s.pose, sample_seed(cfg.seed, epoch, i), a);
                            (out.image, out.pose)
                        }
                        None => (s.image.clone(), s.pose.clone()),
                    };
                    let (mh, mw) = params_ref
                        .output_shape(img.height() as usize, img.width() as usize)
                        .ok_or_else(|| Error::contract(format!("image {} is too small for the network", s.name)))?;
                    let t = gaussian_targets::<f32>(&pose, mh, mw, stride, cfg.sigma);
                    fcn_backward(&img, params_ref, &t)
                })
                .collect();
            let mut grad = params.zeros_like();
            let scale = 1.0 / batch.len() as f32;
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                total += loss;
                grad.add_scaled(&g, scale);
            }
            if let Some(c) = cfg.clip_norm {
                let norm = grad
                    .tensors()
                    .iter()
                    .flat_map(|t| t.iter())
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    let f = (c / norm) as f32;
                    grad.tensors_mut().into_iter().flatten().for_each(|v| *v *= f);
                }
            }
            for ((p, g), v) in params
                .tensors_mut()
                .into_iter()
                .zip(grad.tensors())
                .zip(velocity.tensors_mut())
            {
                sgd_step(p, g, v, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
            }
        }
        let mean_loss = total / train.len() as f64;
        if !mean_loss.is_finite() || params.validate().is_err() {
            return Err(Error::Diverged { epoch, loss: mean_loss });
        }
        log::debug!("fcn epoch {epoch}: mean loss {mean_loss}");
        log.push(EpochLoss { epoch, mean_loss });
    }
    Ok(FcnTrainOutcome { params, log })
}

/// CSV `epoch,mean_loss`; values use the shortest round-tripping form.
pub fn loss_log_csv(log: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for e in log {
        let _ = writeln!(s, "{},{}", e.epoch, e.mean_loss);
    }
    s
}

pub fn parse_loss_log(text: &str) -> Result<Vec<EpochLoss>, FormatError> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,mean_loss") {
        return Err(FormatError::invalid("header", "expected `epoch,mean_loss`"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| FormatError::invalid("row", format!("`{l}` has no comma")))?;
            Ok(EpochLoss {
                epoch: a.parse().map_err(|_| FormatError::invalid("epoch", a.to_string()))?,
                mean_loss: b.parse().map_err(|_| FormatError::invalid("mean_loss", b.to_string()))?,
            })
        })
        .collect()
}

pub fn write_loss_log(log: &[EpochLoss], path: &Path) -> Result<()> {
    binio::write_file(path, loss_log_csv(log).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthesize_dataset, Split, SynthConfig};
    use crate::fcn::FcnArch;

    fn small_set(count: usize, size: u32) -> Vec<Sample> {
        let cfg = SynthConfig {
            count,
            subjects: 2,
            test_subjects: 0,
            width: size,
            height: size,
            mm_per_pixel: 16.0 * 128.0 / size as f64,
            seed: 3,
            ..SynthConfig::default()
        };
        synthesize_dataset(&cfg).unwrap().split_vec(Split::Train)
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let data = small_set(6, 48);
        let p = FcnParams::init(&FcnArch::desk_scale(19), 1).unwrap();
        let cfg = FcnTrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            augment: Some(AugmentConfig::default()),
            ..Default::default()
        };
        let out = fcn_train(&data, p.clone(), &cfg).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn equal_seeds_give_identical_parameters() {
        let data = small_set(6, 48);
        let p = FcnParams::init(&FcnArch::desk_scale(19), 1).unwrap();
        let cfg = FcnTrainConfig {
            epochs: 2,
            batch_size: 3,
            augment: Some(AugmentConfig::default()),
            seed: 5,
            ..Default::default()
        };
        let a = fcn_train(&data, p.clone(), &cfg).unwrap();
        let b = fcn_train(&data, p, &cfg).unwrap();
        assert_eq!(a.params.to_kfcn_bytes(), b.params.to_kfcn_bytes());
    }

    #[test]
    fn training_reduces_loss() {
        let data = small_set(50, 64);
        let p = FcnParams::init(&FcnArch::desk_scale(19), 2).unwrap();
        let cfg = FcnTrainConfig {
            epochs: 30,
            ..Default::default()
        };
        let out = fcn_train(&data, p, &cfg).unwrap();
        let first = out.log[0].mean_loss;
        let last = out.log.last().unwrap().mean_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn bad_config_is_rejected() {
        let p = FcnParams::init(&FcnArch::desk_scale(19), 1).unwrap();
        let data = small_set(2, 48);
        for cfg in [
            FcnTrainConfig { learning_rate: -1.0, ..Default::default() },
            FcnTrainConfig { sigma: 0.0, ..Default::default() },
            FcnTrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(fcn_train(&data, p.clone(), &cfg), Err(Error::Config(_))));
        }
        assert!(fcn_train(&[], p, &FcnTrainConfig::default()).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let data = small_set(4, 48);
        let p = FcnParams::init(&FcnArch::desk_scale(19), 1).unwrap();
        let cfg = FcnTrainConfig {
            learning_rate: 1e30,
            clip_norm: None,
            epochs: 5,
            ..Default::default()
        };
        assert!(matches!(fcn_train(&data, p, &cfg), Err(Error::Diverged { .. }) | Err(Error::Numeric(_))));
    }

    #[test]
    fn loss_log_round_trips() {
        let log: Vec<EpochLoss> = (0..5)
            .map(|e| EpochLoss {
                epoch: e,
                mean_loss: 1.0 / (e as f64 + 3.0),
            })
            .collect();
        assert_eq!(parse_loss_log(&loss_log_csv(&log)).unwrap(), log);
    }
}
