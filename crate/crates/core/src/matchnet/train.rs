use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{matcher_loss_grad, MatcherParams};
use super::patch::{extract_patch, label_pair, BoxF, DEFAULT_DEPTH_SCALE};
use super::templates::TemplateSet;
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::fcn::EpochLoss;
use crate::nn::sgd_step;
use crate::proposals::ProposalSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Pairs per batch, half positive and half negative.
    pub batch_size: usize,
    pub epochs: usize,
    /// Positives and negatives drawn per image and part.
    pub samples_per_part: usize,
    pub depth_scale: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for MatcherTrainConfig {
    fn default() -> Self {
        MatcherTrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 20,
            epochs: 5,
            samples_per_part: 2,
            depth_scale: DEFAULT_DEPTH_SCALE,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl MatcherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("matcher learning rate must be finite and non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("matcher batch size must be >= 2"));
        }
        if self.samples_per_part == 0 {
            return Err(Error::config("samples per part must be >= 1"));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::config("depth scale must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("momentum must lie in [0, 1) and weight decay be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MatcherTrainOutcome {
    pub params: MatcherParams<f32>,
    /// Mean loss over the balanced pair set before any update.
    pub initial_loss: f64,
    pub log: Vec<EpochLoss>,
    /// Parts with no positive proposal anywhere in the training set.
    pub skipped_parts: Vec<usize>,
    /// Balanced pairs seen per epoch.
    pub pairs: usize,
}

#[derive(Debug, Clone, Copy)]
struct Triple {
    sample: u32,
    k: u16,
    proposal: u16,
    template: u16,
    y: u8,
}

fn build_triples(
    samples: &[Sample],
    proposals: &[ProposalSet],
    t: usize,
    cfg: &MatcherTrainConfig,
) -> Result<(Vec<Triple>, Vec<Triple>, Vec<usize>)> {
    let k = proposals.first().map_or(0, ProposalSet::k);
    let mut pos: Vec<Vec<Triple>> = vec![Vec::new(); k];
    let mut neg: Vec<Vec<Triple>> = vec![Vec::new(); k];
    for (i, (s, set)) in samples.iter().zip(proposals).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        for part in 0..k {
            let list = &set.parts[part];
            let mut p_idx = Vec::new();
            let mut n_idx = Vec::new();
            for (j, p) in list.iter().enumerate() {
                let truth = BoxF::around(&s.pose.joints[part], p.w as f64, p.h as f64);
                if label_pair(p, &truth)? == 1 {
                    p_idx.push(j);
                } else {
                    n_idx.push(j);
                }
            }
            for (idx, y, out) in [(&p_idx, 1u8, &mut pos[part]), (&n_idx, 0u8, &mut neg[part])] {
                for &j in idx.choose_multiple(&mut rng, cfg.samples_per_part) {
                    out.push(Triple {
                        sample: i as u32,
                        k: part as u16,
                        proposal: j as u16,
                        template: rng.random_range(0..t) as u16,
                        y,
                    });
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5);
    let (mut all_pos, mut all_neg, mut skipped) = (Vec::new(), Vec::new(), Vec::new());
    for part in 0..k {
        if pos[part].is_empty() {
            log::warn!("part {part} has no positive proposals; skipped this round");
            skipped.push(part);
            continue;
        }
        let m = pos[part].len().min(neg[part].len());
        pos[part].shuffle(&mut rng);
        neg[part].shuffle(&mut rng);
        all_pos.extend_from_slice(&pos[part][..m]);
        all_neg.extend_from_slice(&neg[part][..m]);
    }
    Ok((all_pos, all_neg, skipped))
}

struct PairBatch {
    a: Vec<f32>,
    b: Vec<f32>,
    y: Vec<u8>,
}

/// Groups a batch by part and materialises its patches.
fn materialise(
    batch: &[Triple],
    samples: &[Sample],
    proposals: &[ProposalSet],
    templates: &TemplateSet,
    depth_scale: f64,
) -> Vec<(usize, PairBatch)> {
    let mut parts: Vec<usize> = batch.iter().map(|t| t.k as usize).collect();
    parts.sort_unstable();
    parts.dedup();
    parts
        .into_iter()
        .map(|k| {
            let mut pb = PairBatch {
                a: Vec::new(),
                b: Vec::new(),
                y: Vec::new(),
            };
            for tr in batch.iter().filter(|t| t.k as usize == k) {
                let s = &samples[tr.sample as usize];
                let p = &proposals[tr.sample as usize].parts[k][tr.proposal as usize];
                pb.a.extend(extract_patch::<f32>(&s.image, p, depth_scale));
                pb.b.extend_from_slice(templates.template(k, tr.template as usize));
                pb.y.push(tr.y);
            }
            (k, pb)
        })
        .collect()
}

fn mean_loss(
    params: &MatcherParams<f32>,
    pairs: &[Triple],
    samples: &[Sample],
    proposals: &[ProposalSet],
    templates: &TemplateSet,
    depth_scale: f64,
) -> Result<f64> {
    use rayon::prelude::*;
    let sums: Vec<Result<f64>> = pairs
        .par_chunks(64)
        .map(|chunk| {
            let mut total = 0.0;
            for (k, pb) in materialise(chunk, samples, proposals, templates, depth_scale) {
                total += super::net::matcher_loss(params, k, &pb.a, &pb.b, &pb.y)? * pb.y.len() as f64;
            }
            Ok(total)
        })
        .collect();
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / pairs.len() as f64)
}

/// Minibatch SGD on the clamped cross-entropy over balanced
/// (proposal patch, template, label) triples.
pub fn matcher_train(
    samples: &[Sample],
    proposals: &[ProposalSet],
    templates: &TemplateSet,
    init: MatcherParams<f32>,
    cfg: &MatcherTrainConfig,
) -> Result<MatcherTrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    if samples.is_empty() || samples.len() != proposals.len() {
        return Err(Error::contract("need one proposal set per training sample"));
    }
    if templates.k != init.k() || proposals.iter().any(|p| p.k() != init.k()) {
        return Err(Error::contract("templates, proposals and matcher disagree on K"));
    }
    let (mut pos, mut neg, skipped_parts) = build_triples(samples, proposals, templates.t, cfg)?;
    let mut params = init;
    if pos.is_empty() {
        return Ok(MatcherTrainOutcome {
            params,
            initial_loss: f64::NAN,
            log: Vec::new(),
            skipped_parts,
            pairs: 0,
        });
    }
    let all: Vec<Triple> = pos.iter().chain(&neg).copied().collect();
    let initial_loss = mean_loss(&params, &all, samples, proposals, templates, cfg.depth_scale)?;
    drop(all);

    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = cfg.batch_size / 2;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let mut total = 0.0;
        for (bp, bn) in pos.chunks(half).zip(neg.chunks(half)) {
            let batch: Vec<Triple> = bp.iter().chain(bn).copied().collect();
            let scale = 1.0 / batch.len() as f64;
            let mut grad = params.zeros_like();
            for (k, pb) in materialise(&batch, samples, proposals, templates, cfg.depth_scale) {
                total += matcher_loss_grad(&params, k, &pb.a, &pb.b, &pb.y, scale, &mut grad)?;
            }
            if let Some(c) = cfg.clip_norm {
                let norm = grad
                    .tensors()
                    .iter()
                    .flat_map(|t| t.iter())
                    .map(|&v| (v as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    let f = (c / norm) as f32;
                    grad.tensors_mut().into_iter().flatten().for_each(|v| *v *= f);
                }
            }
            for ((p, g), v) in params.tensors_mut().into_iter().zip(grad.tensors()).zip(velocity.tensors_mut()) {
                sgd_step(p, g, v, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
            }
        }
        let mean_loss = total / (2 * pos.len()) as f64;
        if !mean_loss.is_finite() || params.validate().is_err() {
            return Err(Error::Diverged { epoch, loss: mean_loss });
        }
        log::debug!("matcher epoch {epoch}: mean loss {mean_loss}");
        log.push(EpochLoss { epoch, mean_loss });
    }
    Ok(MatcherTrainOutcome {
        params,
        initial_loss,
        log,
        skipped_parts,
        pairs: 2 * pos.len(),
    })
}
