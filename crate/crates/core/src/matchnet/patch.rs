use serde::{Deserialize, Serialize};

use crate::dataio::{DepthImage, Joint};
use crate::error::{Error, Result};
use crate::nn::Real;
use crate::proposals::{box_median_depth, PartProposal};

/// Side length of matcher patches and templates.
pub const PATCH: usize = 32;
pub const PATCH_LEN: usize = PATCH * PATCH;
pub const DEFAULT_DEPTH_SCALE: f64 = 500.0;

/// `PATCH x PATCH` crop centred on the proposal, mirror-padded at the image
/// border, as `(d - centre) / depth_scale`. The centre reading falls back to
/// the proposal's median depth when the centre pixel has no reading.
pub fn extract_patch<T: Real>(img: &DepthImage, p: &PartProposal, depth_scale: f64) -> Vec<T> {
    let (cx, cy) = (p.x as i64, p.y as i64);
    let centre = match img.get_reflected(cx, cy) {
        0 => p.z,
        d => d as f64,
    };
    let half = (PATCH / 2) as i64;
    let mut out = Vec::with_capacity(PATCH_LEN);
    for y in cy - half..cy + half {
        for x in cx - half..cx + half {
            out.push(T::lit((img.get_reflected(x, y) as f64 - centre) / depth_scale));
        }
    }
    out
}

/// Patch centred on a ground-truth joint, used for template clustering.
pub fn truth_patch<T: Real>(img: &DepthImage, joint: &Joint, k: usize, box_size: (u32, u32), depth_scale: f64) -> Vec<T> {
    let mut p = PartProposal {
        x: joint.x.round().clamp(0.0, (img.width() - 1) as f64) as u32,
        y: joint.y.round().clamp(0.0, (img.height() - 1) as f64) as u32,
        w: box_size.0,
        h: box_size.1,
        k,
        z: 0.0,
        score: 0.0,
    };
    p.z = box_median_depth(img, &p);
    extract_patch(img, &p, depth_scale)
}

/// Axis-aligned box given by its centre and size, in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxF {
    pub fn of_proposal(p: &PartProposal) -> Self {
        BoxF {
            cx: p.x as f64,
            cy: p.y as f64,
            w: p.w as f64,
            h: p.h as f64,
        }
    }

    /// Box of the proposal's size centred on a ground-truth joint.
    pub fn around(j: &Joint, w: f64, h: f64) -> Self {
        BoxF { cx: j.x, cy: j.y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

pub fn iou(a: &BoxF, b: &BoxF) -> Result<f64> {
    if !(a.area() > 0.0) || !(b.area() > 0.0) {
        return Err(Error::contract("IoU of a zero-area box"));
    }
    let ix = ((a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0)).max(0.0);
    let iy = ((a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0)).max(0.0);
    let inter = ix * iy;
    Ok(inter / (a.area() + b.area() - inter))
}

/// 1 when the proposal box overlaps the truth box with IoU above 0.5.
pub fn label_pair(p: &PartProposal, truth: &BoxF) -> Result<u8> {
    Ok(u8::from(iou(&BoxF::of_proposal(p), truth)? > 0.5))
}
