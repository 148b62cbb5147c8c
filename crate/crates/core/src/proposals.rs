//! Part proposals: the heat-map argmax and the window of map cells around it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::DepthImage;
use crate::error::{Error, Result};
use crate::fcn::HeatMapStack;
use crate::nn::Real;

/// Candidate location for part `k`: a `w x h` box centred on image pixel
/// `(x, y)`, its median depth and the heat value it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartProposal {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub k: usize,
    pub z: f64,
    pub score: f64,
}

impl PartProposal {
    /// Inclusive-exclusive pixel bounds `(x0, y0, x1, y1)`, possibly outside
    /// the image.
    pub fn bounds(&self) -> (i64, i64, i64, i64) {
        let x0 = self.x as i64 - (self.w / 2) as i64;
        let y0 = self.y as i64 - (self.h / 2) as i64;
        (x0, y0, x0 + self.w as i64, y0 + self.h as i64)
    }
}

/// `n` proposals for each of the K parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub parts: Vec<Vec<PartProposal>>,
}

impl ProposalSet {
    pub fn k(&self) -> usize {
        self.parts.len()
    }

    /// Proposals per part (0 for an empty set).
    pub fn n(&self) -> usize {
        self.parts.first().map_or(0, Vec::len)
    }

    pub fn get(&self, k: usize, i: usize) -> &PartProposal {
        &self.parts[k][i]
    }

    /// Debug dump, CSV `k,x,y,w,h,z,score`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,x,y,w,h,z,score\n");
        for p in self.parts.iter().flatten() {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", p.k, p.x, p.y, p.w, p.h, p.z, p.score);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxMode {
    Fixed,
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxConfig {
    pub mode: BoxMode,
    pub size: u32,
    /// Pose scale (torso diameter, pixels) at which `size` applies in
    /// proportional mode.
    pub reference_scale: f64,
}

impl Default for BoxConfig {
    fn default() -> Self {
        BoxConfig {
            mode: BoxMode::Fixed,
            size: 10,
            reference_scale: 10.0,
        }
    }
}

/// Box size for a pose of the given scale; the same for every part.
pub fn default_box_size(cfg: &BoxConfig, pose_scale: f64) -> Result<(u32, u32)> {
    if !(pose_scale > 0.0) {
        return Err(Error::contract("pose scale must be > 0"));
    }
    let s = match cfg.mode {
        BoxMode::Fixed => cfg.size,
        BoxMode::Proportional => {
            if !(cfg.reference_scale > 0.0) {
                return Err(Error::config("reference scale must be > 0"));
            }
            ((cfg.size as f64 * pose_scale / cfg.reference_scale).round() as u32).max(1)
        }
    };
    Ok((s, s))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: Real>(v: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &x) in v.iter().enumerate() {
        if x.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Median of the non-zero readings inside the box, 0 when there are none.
pub fn box_median_depth(img: &DepthImage, p: &PartProposal) -> f64 {
    let (x0, y0, x1, y1) = p.bounds();
    let x0 = x0.max(0) as u32;
    let y0 = y0.max(0) as u32;
    let x1 = (x1.max(0) as u32).min(img.width());
    let y1 = (y1.max(0) as u32).min(img.height());
    let mut v: Vec<u16> = Vec::with_capacity(p.w as usize * p.h as usize);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = img.get(x, y);
            if d != 0 {
                v.push(d);
            }
        }
    }
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] as f64 + v[m] as f64) / 2.0
    }
}

/// First cell of a `window`-wide run centred at `c`, moved inward so the
/// run stays inside `0..len`.
fn window_start(c: usize, window: usize, len: usize) -> usize {
    let half = window / 2;
    c.saturating_sub(half).min(len - window)
}

/// `window x window` proposals per part around the heat-map argmax, sorted
/// by descending score (ties by row-major map index), so the argmax comes
/// first. Near the map border the window is moved inward so that all
/// `window²` cells are distinct.
pub fn extract_proposals<T: Real>(
    maps: &HeatMapStack<T>,
    img: &DepthImage,
    window: usize,
    box_size: (u32, u32),
) -> Result<ProposalSet> {
    if window.is_multiple_of(2) {
        return Err(Error::contract(format!("window {window} must be odd")));
    }
    if window > maps.width || window > maps.height {
        return Err(Error::contract(format!(
            "window {window} exceeds the {}x{} heat map",
            maps.width, maps.height
        )));
    }
    let s = maps.stride;
    if maps.width != (img.width() as usize).div_ceil(s) || maps.height != (img.height() as usize).div_ceil(s) {
        return Err(Error::contract("heat map and image sizes disagree"));
    }
    if box_size.0 == 0 || box_size.1 == 0 {
        return Err(Error::contract("zero-area proposal box"));
    }
    let mut parts = Vec::with_capacity(maps.k);
    for k in 0..maps.k {
        let m = maps.map(k);
        if !crate::nn::all_finite(m) {
            return Err(Error::Numeric(format!("heat map of part {k}")));
        }
        let peak = argmax(m).ok_or_else(|| Error::Numeric(format!("heat map of part {k}")))?;
        let (px, py) = (peak % maps.width, peak / maps.width);
        let x0 = window_start(px, window, maps.width);
        let y0 = window_start(py, window, maps.height);
        let mut cells: Vec<(usize, usize)> = (y0..y0 + window)
            .flat_map(|y| (x0..x0 + window).map(move |x| (x, y)))
            .collect();
        cells.sort_by(|a, b| {
            let ia = a.1 * maps.width + a.0;
            let ib = b.1 * maps.width + b.0;
            m[ib].partial_cmp(&m[ia]).expect("finite").then(ia.cmp(&ib))
        });
        let list = cells
            .into_iter()
            .map(|(x, y)| {
                let mut p = PartProposal {
                    x: (x * s) as u32,
                    y: (y * s) as u32,
                    w: box_size.0,
                    h: box_size.1,
                    k,
                    z: 0.0,
                    score: m[y * maps.width + x].as_f64(),
                };
                p.z = box_median_depth(img, &p);
                p
            })
            .collect();
        parts.push(list);
    }
    Ok(ProposalSet { parts })
}
