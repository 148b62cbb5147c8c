//! Two-tower patch matcher. Each tower is conv3x3-ReLU-pool twice on a
//! `PATCH x PATCH` input; the head sees `[f1 + f2, |f1 - f2|]`, so the
//! match probability is symmetric in its arguments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patch::{PATCH, PATCH_LEN};
use crate::error::{Error, Result};
use crate::nn::{
    all_finite, conv3x3_relu_hwc, hwc_weights, maxpool2, maxpool2_backward, maxpool2_hwc, relu_backward, relu_inplace, Conv2d,
    ConvGeom, Dense, Real,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatcherArch {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    /// One tower for all parts; otherwise one tower per part.
    pub share_tower: bool,
}

impl Default for MatcherArch {
    fn default() -> Self {
        MatcherArch {
            conv1: 8,
            conv2: 8,
            hidden: 16,
            share_tower: true,
        }
    }
}

impl MatcherArch {
    pub fn pooled_side() -> usize {
        ((PATCH - 2) / 2 - 2) / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.conv2 * Self::pooled_side() * Self::pooled_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv1 == 0 || self.conv2 == 0 || self.hidden == 0 {
            return Err(Error::config("matcher layer widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tower<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

/// Matcher parameters for K parts: per-part heads and either one shared
/// tower or one tower per part.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams<T = f32> {
    pub towers: Vec<Tower<T>>,
    pub heads: Vec<Head<T>>,
}

impl<T: Real> MatcherParams<T> {
    pub fn init(arch: &MatcherArch, k: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if k == 0 {
            return Err(Error::config("matcher needs K >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_towers = if arch.share_tower { 1 } else { k };
        let towers = (0..n_towers)
            .map(|_| Tower {
                conv1: Conv2d::he(&mut rng, 1, arch.conv1, 3, 1, 0),
                conv2: Conv2d::he(&mut rng, arch.conv1, arch.conv2, 3, 1, 0),
            })
            .collect();
        let f = arch.feature_dim();
        let heads = (0..k)
            .map(|_| Head {
                fc1: Dense::he(&mut rng, 2 * f, arch.hidden),
                fc2: Dense::he(&mut rng, arch.hidden, 1),
            })
            .collect();
        Ok(MatcherParams { towers, heads })
    }

    /// Random towers with all-zero heads, which output 0.5 everywhere.
    pub fn with_zero_heads(arch: &MatcherArch, k: usize, seed: u64) -> Result<Self> {
        let mut p = Self::init(arch, k, seed)?;
        for h in &mut p.heads {
            h.fc1 = h.fc1.zeros_like();
            h.fc2 = h.fc2.zeros_like();
        }
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn arch(&self) -> MatcherArch {
        MatcherArch {
            conv1: self.towers[0].conv1.out_c,
            conv2: self.towers[0].conv2.out_c,
            hidden: self.heads[0].fc1.output,
            share_tower: self.towers.len() == 1,
        }
    }

    pub fn tower(&self, k: usize) -> &Tower<T> {
        &self.towers[if self.towers.len() == 1 { 0 } else { k }]
    }

    pub fn tower_index(&self, k: usize) -> usize {
        if self.towers.len() == 1 {
            0
        } else {
            k
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.heads.len();
        if k == 0 || !(self.towers.len() == 1 || self.towers.len() == k) {
            return Err(Error::contract("matcher needs one tower or one per part"));
        }
        let arch = self.arch();
        let f = arch.feature_dim();
        for t in &self.towers {
            let ok = t.conv1.in_c == 1
                && t.conv1.out_c == arch.conv1
                && t.conv2.in_c == arch.conv1
                && t.conv2.out_c == arch.conv2
                && [t.conv1.kh, t.conv1.kw, t.conv2.kh, t.conv2.kw] == [3; 4]
                && t.conv1.stride == 1
                && t.conv2.stride == 1
                && t.conv1.pad == 0
                && t.conv2.pad == 0;
            if !ok {
                return Err(Error::contract("matcher towers have inconsistent shapes"));
            }
        }
        for h in &self.heads {
            if h.fc1.input != 2 * f || h.fc1.output != arch.hidden || h.fc2.input != arch.hidden || h.fc2.output != 1 {
                return Err(Error::contract("matcher heads have inconsistent shapes"));
            }
        }
        if self.tensors().iter().any(|t| !all_finite(t)) {
            return Err(Error::Numeric("matcher parameters".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for t in &self.towers {
            v.extend([&t.conv1.weight[..], &t.conv1.bias, &t.conv2.weight, &t.conv2.bias]);
        }
        for h in &self.heads {
            v.extend([&h.fc1.weight[..], &h.fc1.bias, &h.fc2.weight, &h.fc2.bias]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for t in &mut self.towers {
            v.extend([
                &mut t.conv1.weight[..],
                &mut t.conv1.bias[..],
                &mut t.conv2.weight[..],
                &mut t.conv2.bias[..],
            ]);
        }
        for h in &mut self.heads {
            v.extend([&mut h.fc1.weight[..], &mut h.fc1.bias[..], &mut h.fc2.weight[..], &mut h.fc2.bias[..]]);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        MatcherParams {
            towers: self
                .towers
                .iter()
                .map(|t| Tower {
                    conv1: t.conv1.zeros_like(),
                    conv2: t.conv2.zeros_like(),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    fc1: h.fc1.zeros_like(),
                    fc2: h.fc2.zeros_like(),
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> MatcherParams<U> {
        MatcherParams {
            towers: self
                .towers
                .iter()
                .map(|t| Tower {
                    conv1: t.conv1.cast(),
                    conv2: t.conv2.cast(),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    fc1: h.fc1.cast(),
                    fc2: h.fc2.cast(),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, a: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * *s;
            }
        }
    }
}

pub(crate) struct TowerCache<T> {
    n: usize,
    cols1: Vec<T>,
    g1: ConvGeom,
    out1: Vec<T>,
    arg1: Vec<u32>,
    cols2: Vec<T>,
    g2: ConvGeom,
    out2: Vec<T>,
    arg2: Vec<u32>,
    /// `[N][F]`.
    pub feats: Vec<T>,
}

/// Runs the tower on `n` patches stored back to back.
pub(crate) fn tower_forward<T: Real>(t: &Tower<T>, patches: &[T]) -> TowerCache<T> {
    let n = patches.len() / PATCH_LEN;
    let g1 = t.conv1.geom(n, PATCH, PATCH).expect("patch fits the kernel");
    let (mut out1, cols1) = t.conv1.forward(patches, g1);
    relu_inplace(&mut out1);
    let (p1, arg1, h1, w1) = maxpool2(&out1, t.conv1.out_c, n, g1.oh, g1.ow);
    let g2 = t.conv2.geom(n, h1, w1).expect("pooled map fits the kernel");
    let (mut out2, cols2) = t.conv2.forward(&p1, g2);
    relu_inplace(&mut out2);
    let (p2, arg2, h2, w2) = maxpool2(&out2, t.conv2.out_c, n, g2.oh, g2.ow);
    let plane = h2 * w2;
    let f = t.conv2.out_c * plane;
    let mut feats = vec![T::zero(); n * f];
    for c in 0..t.conv2.out_c {
        for b in 0..n {
            feats[b * f + c * plane..b * f + (c + 1) * plane].copy_from_slice(&p2[(c * n + b) * plane..(c * n + b + 1) * plane]);
        }
    }
    TowerCache {
        n,
        cols1,
        g1,
        out1,
        arg1,
        cols2,
        g2,
        out2,
        arg2,
        feats,
    }
}

/// Tower features only, without the backward cache. Towers of 8 or 16
/// channels per layer take a channels-last path with a vectorised kernel.
pub(crate) fn tower_features<T: Real>(t: &Tower<T>, patches: &[T]) -> Vec<T> {
    match (t.conv1.out_c, t.conv2.out_c) {
        (8, 8) => tower_features_hwc::<T, 8, 8>(t, patches),
        (16, 16) => tower_features_hwc::<T, 16, 16>(t, patches),
        _ => None,
    }
    .unwrap_or_else(|| tower_forward(t, patches).feats)
}

fn tower_features_hwc<T: Real, const A: usize, const B: usize>(t: &Tower<T>, patches: &[T]) -> Option<Vec<T>> {
    let (w1, b1) = hwc_weights::<T, A>(&t.conv1)?;
    let (w2, b2) = hwc_weights::<T, B>(&t.conv2)?;
    if t.conv1.in_c != 1 {
        return None;
    }
    let n = patches.len() / PATCH_LEN;
    let s1 = PATCH - 2;
    let y1 = conv3x3_relu_hwc(patches, n, PATCH, PATCH, 1, &w1, &b1);
    let p1 = maxpool2_hwc(&y1, n, s1, s1);
    let h1 = s1 / 2;
    let flat: Vec<T> = p1.iter().flat_map(|px| px.iter().copied()).collect();
    let y2 = conv3x3_relu_hwc(&flat, n, h1, h1, A, &w2, &b2);
    let s2 = h1 - 2;
    let p2 = maxpool2_hwc(&y2, n, s2, s2);
    let plane = (s2 / 2) * (s2 / 2);
    let f = B * plane;
    let mut feats = vec![T::zero(); n * f];
    for b in 0..n {
        for (i, px) in p2[b * plane..(b + 1) * plane].iter().enumerate() {
            for (c, &v) in px.iter().enumerate() {
                feats[b * f + c * plane + i] = v;
            }
        }
    }
    Some(feats)
}

pub(crate) fn tower_backward<T: Real>(t: &Tower<T>, c: &TowerCache<T>, dfeats: &[T], grad: &mut Tower<T>) {
    let n = c.n;
    let c2 = t.conv2.out_c;
    let plane = dfeats.len() / (n * c2);
    let f = c2 * plane;
    let mut dp2 = vec![T::zero(); dfeats.len()];
    for ch in 0..c2 {
        for b in 0..n {
            dp2[(ch * n + b) * plane..(ch * n + b + 1) * plane].copy_from_slice(&dfeats[b * f + ch * plane..b * f + (ch + 1) * plane]);
        }
    }
    let mut d2 = maxpool2_backward(&dp2, &c.arg2, c.out2.len());
    relu_backward(&mut d2, &c.out2);
    let dp1 = t.conv2.backward(&d2, &c.cols2, c.g2, &mut grad.conv2, true).expect("dx requested");
    let mut d1 = maxpool2_backward(&dp1, &c.arg1, c.out1.len());
    relu_backward(&mut d1, &c.out1);
    t.conv1.backward(&d1, &c.cols1, c.g1, &mut grad.conv1, false);
}

pub(crate) fn head_input<T: Real>(f1: &[T], f2: &[T], f: usize) -> Vec<T> {
    let n = f1.len() / f;
    let mut x = Vec::with_capacity(n * 2 * f);
    for b in 0..n {
        let (a, c) = (&f1[b * f..(b + 1) * f], &f2[b * f..(b + 1) * f]);
        x.extend(a.iter().zip(c).map(|(u, v)| *u + *v));
        x.extend(a.iter().zip(c).map(|(u, v)| (*u - *v).abs()));
    }
    x
}

pub(crate) struct PairCache<T> {
    pub t1: TowerCache<T>,
    pub t2: TowerCache<T>,
    x: Vec<T>,
    hid: Vec<T>,
    pub logits: Vec<T>,
}

/// Forward pass over `n` pairs for part `k`.
pub(crate) fn pair_forward<T: Real>(p: &MatcherParams<T>, k: usize, a: &[T], b: &[T]) -> PairCache<T> {
    let tower = p.tower(k);
    let head = &p.heads[k];
    let t1 = tower_forward(tower, a);
    let t2 = tower_forward(tower, b);
    let f = head.fc1.input / 2;
    let x = head_input(&t1.feats, &t2.feats, f);
    let n = t1.n;
    let mut hid = head.fc1.forward(&x, n);
    relu_inplace(&mut hid);
    let logits = head.fc2.forward(&hid, n);
    PairCache { t1, t2, x, hid, logits }
}

/// Backpropagates `dlogits` and accumulates into `grad`.
pub(crate) fn pair_backward<T: Real>(p: &MatcherParams<T>, k: usize, c: &PairCache<T>, dlogits: &[T], grad: &mut MatcherParams<T>) {
    let head = &p.heads[k];
    let n = c.t1.n;
    let f = head.fc1.input / 2;
    let mut dh = head.fc2.backward(dlogits, &c.hid, n, &mut grad.heads[k].fc2, true).expect("dx requested");
    relu_backward(&mut dh, &c.hid);
    let dx = head.fc1.backward(&dh, &c.x, n, &mut grad.heads[k].fc1, true).expect("dx requested");
    let mut d1 = vec![T::zero(); n * f];
    let mut d2 = vec![T::zero(); n * f];
    for b in 0..n {
        for i in 0..f {
            let ds = dx[b * 2 * f + i];
            let dd = dx[b * 2 * f + f + i];
            let diff = c.t1.feats[b * f + i] - c.t2.feats[b * f + i];
            let sign = if diff > T::zero() {
                T::one()
            } else if diff < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            d1[b * f + i] = ds + dd * sign;
            d2[b * f + i] = ds - dd * sign;
        }
    }
    let ti = p.tower_index(k);
    let tower = p.tower(k);
    tower_backward(tower, &c.t1, &d1, &mut grad.towers[ti]);
    tower_backward(tower, &c.t2, &d2, &mut grad.towers[ti]);
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl<T: Real> MatcherParams<T> {
    /// ReLU signs, pooling winners and `|f1 - f2|` signs of the forward pass
    /// over the pairs `(a_i, b_i)`. The loss is smooth in the parameters
    /// wherever this stays fixed.
    pub fn activation_pattern(&self, k: usize, a: &[T], b: &[T]) -> Result<Vec<u32>> {
        check_patches(a, b)?;
        let c = pair_forward(self, k, a, b);
        let mut v = Vec::new();
        for t in [&c.t1, &c.t2] {
            v.extend(t.out1.iter().chain(&t.out2).map(|x| u32::from(*x > T::zero())));
            v.extend(t.arg1.iter().chain(&t.arg2));
        }
        v.extend(c.hid.iter().map(|x| u32::from(*x > T::zero())));
        v.extend(c.t1.feats.iter().zip(&c.t2.feats).map(|(x, y)| match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => 2,
            Some(std::cmp::Ordering::Less) => 0,
            _ => 1,
        }));
        Ok(v)
    }
}

fn check_patches<T: Real>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() || !a.len().is_multiple_of(PATCH_LEN) || a.is_empty() {
        return Err(Error::contract(format!("patch buffers must hold equal numbers of {PATCH}x{PATCH} patches")));
    }
    Ok(())
}

/// Match probabilities for pairs `(a_i, b_i)` under part `k`'s parameters.
pub fn match_probs<T: Real>(p: &MatcherParams<T>, k: usize, a: &[T], b: &[T]) -> Result<Vec<f64>> {
    check_patches(a, b)?;
    if k >= p.k() {
        return Err(Error::contract(format!("part {k} out of range")));
    }
    let c = pair_forward(p, k, a, b);
    if !all_finite(&c.logits) {
        return Err(Error::Numeric("matcher activations".into()));
    }
    Ok(c.logits.iter().map(|z| sigmoid(z.as_f64())).collect())
}

pub fn match_prob<T: Real>(p1: &[T], p2: &[T], params: &MatcherParams<T>, k: usize) -> Result<f64> {
    Ok(match_probs(params, k, p1, p2)?[0])
}

pub const PROB_CLAMP: f64 = 1e-7;

fn cross_entropy(phi: f64, y: u8) -> (f64, bool) {
    let c = phi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let l = if y == 1 { -c.ln() } else { -(1.0 - c).ln() };
    (l, c == phi)
}

/// Mean clamped cross-entropy over the pairs `(a_i, b_i, y_i)`.
pub fn matcher_loss<T: Real>(p: &MatcherParams<T>, k: usize, a: &[T], b: &[T], y: &[u8]) -> Result<f64> {
    let probs = match_probs(p, k, a, b)?;
    if probs.len() != y.len() {
        return Err(Error::contract("one label per pair required"));
    }
    Ok(probs.iter().zip(y).map(|(&phi, &yy)| cross_entropy(phi, yy).0).sum::<f64>() / y.len() as f64)
}

/// Summed loss over the pairs and its gradient times `scale`, accumulated
/// into `grad`.
pub fn matcher_loss_grad<T: Real>(
    p: &MatcherParams<T>,
    k: usize,
    a: &[T],
    b: &[T],
    y: &[u8],
    scale: f64,
    grad: &mut MatcherParams<T>,
) -> Result<f64> {
    check_patches(a, b)?;
    let c = pair_forward(p, k, a, b);
    if !all_finite(&c.logits) {
        return Err(Error::Numeric("matcher activations".into()));
    }
    let mut total = 0.0;
    let dl: Vec<T> = c
        .logits
        .iter()
        .zip(y)
        .map(|(z, &yy)| {
            let phi = sigmoid(z.as_f64());
            let (l, inside) = cross_entropy(phi, yy);
            total += l;
            if inside {
                T::lit((phi - yy as f64) * scale)
            } else {
                T::zero()
            }
        })
        .collect();
    pair_backward(p, k, &c, &dl, grad);
    Ok(total)
}

/// Sum of match probabilities between one patch and each of part `k`'s
/// templates (stored back to back).
pub fn unary_score<T: Real>(patch: &[T], templates: &[T], params: &MatcherParams<T>, k: usize) -> Result<f64> {
    let t = templates.len() / PATCH_LEN;
    let mut a = Vec::with_capacity(templates.len());
    for _ in 0..t {
        a.extend_from_slice(patch);
    }
    Ok(match_probs(params, k, &a, templates)?.iter().sum())
}

/// Scores many patches against a fixed template bank, reusing the template
/// features and the sum half of the first head layer.
pub struct MatchScorer<'a, T: Real> {
    params: &'a MatcherParams<T>,
    /// Per part: `[T][F]` template features.
    tpl_feats: Vec<Vec<T>>,
    t: usize,
}

impl<'a, T: Real> MatchScorer<'a, T> {
    pub fn new(params: &'a MatcherParams<T>, templates: &[Vec<T>]) -> Result<Self> {
        params.validate()?;
        if templates.len() != params.k() {
            return Err(Error::contract(format!(
                "{} template parts for a {}-part matcher",
                templates.len(),
                params.k()
            )));
        }
        let t = templates[0].len() / PATCH_LEN;
        if t == 0 || templates.iter().any(|p| p.len() != t * PATCH_LEN) {
            return Err(Error::contract("every part needs the same number T >= 1 of templates"));
        }
        let tpl_feats = templates
            .iter()
            .enumerate()
            .map(|(k, tp)| tower_features(params.tower(k), tp))
            .collect();
        Ok(MatchScorer { params, tpl_feats, t })
    }

    pub fn templates_per_part(&self) -> usize {
        self.t
    }

    /// Unary scores of `patches` (back to back) for part `k`.
    pub fn unaries(&self, k: usize, patches: &[T]) -> Result<Vec<f64>> {
        let n = patches.len() / PATCH_LEN;
        if n * PATCH_LEN != patches.len() {
            return Err(Error::contract("patch buffer is not a whole number of patches"));
        }
        let head = &self.params.heads[k];
        let f = head.fc1.input / 2;
        let hdim = head.fc1.output;
        let qf = tower_features(self.params.tower(k), patches);
        let tf = &self.tpl_feats[k];
        // fc1 = [A | B]: A acts on f1 + f2, B on |f1 - f2|.
        let mut a = vec![T::zero(); hdim * f];
        let mut bmat = vec![T::zero(); hdim * f];
        for h in 0..hdim {
            a[h * f..(h + 1) * f].copy_from_slice(&head.fc1.weight[h * 2 * f..h * 2 * f + f]);
            bmat[h * f..(h + 1) * f].copy_from_slice(&head.fc1.weight[h * 2 * f + f..(h + 1) * 2 * f]);
        }
        let mut qa = vec![T::zero(); n * hdim];
        crate::nn::matmul(n, f, hdim, &qf, false, &a, true, &mut qa, false);
        let mut ta = vec![T::zero(); self.t * hdim];
        crate::nn::matmul(self.t, f, hdim, tf, false, &a, true, &mut ta, false);
        let mut diff = vec![T::zero(); n * self.t * f];
        for q in 0..n {
            for t in 0..self.t {
                let row = &mut diff[(q * self.t + t) * f..(q * self.t + t + 1) * f];
                for ((d, x), y) in row.iter_mut().zip(&qf[q * f..(q + 1) * f]).zip(&tf[t * f..(t + 1) * f]) {
                    *d = (*x - *y).abs();
                }
            }
        }
        let mut hb = vec![T::zero(); n * self.t * hdim];
        crate::nn::matmul(n * self.t, f, hdim, &diff, false, &bmat, true, &mut hb, false);
        let mut out = Vec::with_capacity(n);
        for q in 0..n {
            let mut s = 0.0;
            for t in 0..self.t {
                let mut z = head.fc2.bias[0];
                for h in 0..hdim {
                    let pre = qa[q * hdim + h] + ta[t * hdim + h] + hb[(q * self.t + t) * hdim + h] + head.fc1.bias[h];
                    if pre > T::zero() {
                        z += head.fc2.weight[h] * pre;
                    }
                }
                if !z.is_finite() {
                    return Err(Error::Numeric("matcher activations".into()));
                }
                s += sigmoid(z.as_f64());
            }
            out.push(s);
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;

    pub fn random_patches(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n * PATCH_LEN).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    fn tiny() -> MatcherArch {
        MatcherArch {
            conv1: 2,
            conv2: 2,
            hidden: 3,
            share_tower: true,
        }
    }

    #[test]
    fn feature_dim_is_288_by_default() {
        assert_eq!(MatcherArch::default().feature_dim(), 288);
    }

    #[test]
    fn probability_is_symmetric_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: MatcherParams<f64> = MatcherParams::init(&MatcherArch::default(), 3, 7).unwrap();
        for _ in 0..10 {
            let a = random_patches(&mut rng, 1);
            let b = random_patches(&mut rng, 1);
            let ab = match_prob(&a, &b, &p, 2).unwrap();
            let ba = match_prob(&b, &a, &p, 2).unwrap();
            assert!((ab - ba).abs() <= 1e-12);
            assert!(ab > 0.0 && ab < 1.0);
        }
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: MatcherParams<f64> = MatcherParams::with_zero_heads(&MatcherArch::default(), 2, 3).unwrap();
        let a = random_patches(&mut rng, 1);
        let b = random_patches(&mut rng, 1);
        assert_eq!(match_prob(&a, &b, &p, 1).unwrap(), 0.5);
        let tpl = random_patches(&mut rng, 10);
        assert_eq!(unary_score(&a, &tpl, &p, 0).unwrap(), 5.0);
    }

    #[test]
    fn loss_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: MatcherParams<f64> = MatcherParams::with_zero_heads(&tiny(), 1, 3).unwrap();
        let a = random_patches(&mut rng, 1);
        let b = random_patches(&mut rng, 1);
        assert!((matcher_loss(&p, 0, &a, &b, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cross_entropy(1.0, 1).0 - 1e-7).abs() < 1e-12);
        assert!((cross_entropy(0.0, 0).0 - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn single_template_unary_is_the_match_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: MatcherParams<f64> = MatcherParams::init(&MatcherArch::default(), 1, 5).unwrap();
        let a = random_patches(&mut rng, 1);
        let t = random_patches(&mut rng, 1);
        assert_eq!(unary_score(&a, &t, &p, 0).unwrap(), match_prob(&a, &t, &p, 0).unwrap());
    }

    #[test]
    fn scorer_matches_per_pair_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for share in [true, false] {
            let arch = MatcherArch {
                share_tower: share,
                ..Default::default()
            };
            let p: MatcherParams<f64> = MatcherParams::init(&arch, 2, 6).unwrap();
            let tpls: Vec<Vec<f64>> = (0..2).map(|_| random_patches(&mut rng, 4)).collect();
            let scorer = MatchScorer::new(&p, &tpls).unwrap();
            let queries = random_patches(&mut rng, 5);
            for k in 0..2 {
                let fast = scorer.unaries(k, &queries).unwrap();
                for (q, got) in fast.iter().enumerate() {
                    let patch = &queries[q * PATCH_LEN..(q + 1) * PATCH_LEN];
                    let mut oracle = 0.0;
                    for t in 0..4 {
                        oracle += match_prob(patch, &tpls[k][t * PATCH_LEN..(t + 1) * PATCH_LEN], &p, k).unwrap();
                    }
                    assert!((got - oracle).abs() <= 1e-12, "{got} vs {oracle}");
                }
            }
        }
    }

    #[test]
    fn channels_last_features_match_the_training_tower() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (c1, c2) in [(8, 8), (16, 16), (2, 2), (8, 16)] {
            let arch = MatcherArch { conv1: c1, conv2: c2, ..Default::default() };
            let p: MatcherParams<f64> = MatcherParams::init(&arch, 1, 13).unwrap();
            let x = random_patches(&mut rng, 3);
            let want = tower_forward(p.tower(0), &x).feats;
            let got = tower_features(p.tower(0), &x);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    fn pattern(p: &MatcherParams<f64>, k: usize, a: &[f64], b: &[f64]) -> Vec<u32> {
        p.activation_pattern(k, a, b).unwrap()
    }

    /// Central differences on every parameter whose probe keeps the
    /// activation pattern fixed; returns how many were checked.
    pub(crate) fn gradient_check(seed: u64) -> (usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = MatcherArch {
            share_tower: seed.is_multiple_of(2),
            ..tiny()
        };
        let p: MatcherParams<f64> = MatcherParams::init(&arch, 2, seed).unwrap();
        let n = 3;
        let a = random_patches(&mut rng, n);
        let b = random_patches(&mut rng, n);
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let k = (seed % 2) as usize;
        let mut grad = p.zeros_like();
        matcher_loss_grad(&p, k, &a, &b, &y, 1.0 / n as f64, &mut grad).unwrap();
        let base = pattern(&p, k, &a, &b);
        let h = 1e-5;
        let (mut checked, mut total) = (0, 0);
        for t in 0..p.tensors().len() {
            for i in 0..p.tensors()[t].len() {
                total += 1;
                let mut plus = p.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t][i] -= h;
                if pattern(&plus, k, &a, &b) != base || pattern(&minus, k, &a, &b) != base {
                    continue;
                }
                let fd = (matcher_loss(&plus, k, &a, &b, &y).unwrap() - matcher_loss(&minus, k, &a, &b, &y).unwrap()) / (2.0 * h);
                let an = grad.tensors()[t][i];
                let err = (fd - an).abs();
                assert!(
                    err <= 1e-7 || err / fd.abs().max(an.abs()) <= 1e-4,
                    "seed {seed} tensor {t} idx {i}: analytic {an} vs numeric {fd}"
                );
                checked += 1;
            }
        }
        (checked, total)
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..4 {
            let (checked, total) = gradient_check(seed);
            assert!(checked * 10 >= total * 9, "only {checked}/{total} probes were kink-free");
        }
    }
}
