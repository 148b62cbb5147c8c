//! K-means template banks and the `KTPL` file: magic, u32 K, T, 32, 32,
//! then K*T*32*32 f32 values, part-major.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patch::{truth_patch, PATCH, PATCH_LEN};
use crate::binio::{self, Reader, Writer};
use crate::dataio::Sample;
use crate::error::{Error, FormatError, Result};

pub const KTPL_MAGIC: &[u8; 4] = b"KTPL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once the relative inertia change drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k x dim`, row-major.
    pub centers: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding over `points` (`n x dim`).
/// An empty cluster is moved onto the point farthest from its centre.
pub fn kmeans(points: &[f64], dim: usize, k: usize, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::contract("point buffer is not a multiple of the dimension"));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::contract(format!("{n} points cannot form {k} clusters")));
    }
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(pt(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(pt(i), &centers[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = pt(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(pt(i), &c));
        }
        centers.extend_from_slice(&c);
    }

    let mut assignment = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut inertia = Vec::new();
    for _ in 0..cfg.max_iter.max(1) {
        for i in 0..n {
            let mut best = (0, f64::INFINITY);
            for j in 0..k {
                let d = dist2(pt(i), &centers[j * dim..(j + 1) * dim]);
                if d < best.1 {
                    best = (j, d);
                }
            }
            assignment[i] = best.0;
            dist[i] = best.1;
        }
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&a| counts[a] += 1);
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignment[i]] > 1)
                    .max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[assignment[i]] -= 1;
                    assignment[i] = j;
                    counts[j] = 1;
                    dist[i] = 0.0;
                    centers[j * dim..(j + 1) * dim].copy_from_slice(pt(i));
                }
            }
        }
        let cur: f64 = dist.iter().sum();
        let prev = inertia.last().copied();
        inertia.push(cur);

        let mut sums = vec![0.0f64; k * dim];
        for i in 0..n {
            let a = assignment[i];
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(pt(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centers[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
        if let Some(prev) = prev {
            if cur == 0.0 || (prev - cur).abs() <= cfg.tol * prev {
                break;
            }
        }
    }
    // Final inertia against the updated centres.
    let last: f64 = (0..n)
        .map(|i| dist2(pt(i), &centers[assignment[i] * dim..(assignment[i] + 1) * dim]))
        .sum();
    inertia.push(last);
    Ok(KMeansResult {
        centers,
        assignment,
        inertia,
    })
}

/// T normalised `PATCH x PATCH` templates for each of K parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub k: usize,
    pub t: usize,
    /// Depth scale the patches were normalised with.
    pub depth_scale: f64,
    pub data: Vec<f32>,
}

impl TemplateSet {
    pub fn new(k: usize, t: usize, depth_scale: f64, data: Vec<f32>) -> Result<Self> {
        if k == 0 || t == 0 {
            return Err(Error::contract("template bank needs K, T >= 1"));
        }
        if data.len() != k * t * PATCH_LEN {
            return Err(Error::contract("template data does not match K x T patches"));
        }
        if !crate::nn::all_finite(&data) {
            return Err(Error::Numeric("template patches".into()));
        }
        Ok(TemplateSet { k, t, depth_scale, data })
    }

    pub fn template(&self, k: usize, t: usize) -> &[f32] {
        let i = (k * self.t + t) * PATCH_LEN;
        &self.data[i..i + PATCH_LEN]
    }

    /// All T templates of part `k`, back to back.
    pub fn part(&self, k: usize) -> &[f32] {
        &self.data[k * self.t * PATCH_LEN..(k + 1) * self.t * PATCH_LEN]
    }

    pub fn to_ktpl_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(KTPL_MAGIC);
        for v in [self.k, self.t, PATCH, PATCH] {
            w.u32(v as u32);
        }
        w.f32s(self.data.iter().copied());
        w.buf
    }

    /// The depth scale is not stored in the file and must be supplied.
    pub fn from_ktpl_bytes(bytes: &[u8], depth_scale: f64) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes, "KTPL template bank");
        r.magic(KTPL_MAGIC)?;
        let (k, t, ph, pw) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if k == 0 || t == 0 || ph == 0 || pw == 0 {
            return Err(FormatError::ZeroDimension("template bank"));
        }
        if ph != PATCH || pw != PATCH {
            return Err(FormatError::invalid("patch size", format!("{ph}x{pw}, expected {PATCH}x{PATCH}")));
        }
        let n = k
            .checked_mul(t)
            .and_then(|v| v.checked_mul(PATCH_LEN))
            .ok_or_else(|| FormatError::invalid("dims", "size overflows"))?;
        let data = r.f32_vec(n)?;
        r.finish()?;
        if !crate::nn::all_finite(&data) {
            return Err(FormatError::invalid("patches", "non-finite value"));
        }
        Ok(TemplateSet { k, t, depth_scale, data })
    }
}

pub fn write_ktpl(set: &TemplateSet, path: &Path) -> Result<()> {
    binio::write_file(path, &set.to_ktpl_bytes())
}

pub fn read_ktpl(path: &Path, depth_scale: f64) -> Result<TemplateSet> {
    binio::decode_file(path, |b| TemplateSet::from_ktpl_bytes(b, depth_scale))
}

/// Clusters the ground-truth patches of every part into `t` templates.
pub fn cluster_templates(
    samples: &[Sample],
    k: usize,
    t: usize,
    box_size: (u32, u32),
    depth_scale: f64,
    cfg: &KMeansConfig,
) -> Result<TemplateSet> {
    if samples.len() < t {
        return Err(Error::contract(format!(
            "{} ground-truth patches per part, need at least T = {t}",
            samples.len()
        )));
    }
    use rayon::prelude::*;
    let per_part: Vec<Result<Vec<f64>>> = (0..k)
        .into_par_iter()
        .map(|part| {
            let mut pts = Vec::with_capacity(samples.len() * PATCH_LEN);
            for s in samples {
                pts.extend(truth_patch::<f64>(&s.image, &s.pose.joints[part], part, box_size, depth_scale));
            }
            let part_cfg = KMeansConfig {
                seed: cfg.seed.wrapping_add(part as u64),
                ..cfg.clone()
            };
            Ok(kmeans(&pts, PATCH_LEN, t, &part_cfg)?.centers)
        })
        .collect();
    let mut data = Vec::with_capacity(k * t * PATCH_LEN);
    for c in per_part {
        data.extend(c?.into_iter().map(|v| v as f32));
    }
    TemplateSet::new(k, t, depth_scale, data)
}
