//! Horizontal flip and crop augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kdep::DepthImage;
use super::pose::PoseConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Output is `max_crop` pixels smaller than the input on each axis.
    pub max_crop: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            max_crop: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: DepthImage,
    pub pose: PoseConfig,
    pub flipped: bool,
    /// Crop origin, when a crop was applied.
    pub crop: Option<(u32, u32)>,
    /// The drawn crop would have evicted a joint and was not applied.
    pub crop_skipped: bool,
}

pub fn flip_horizontal(img: &DepthImage, pose: &PoseConfig) -> (DepthImage, PoseConfig) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut depth = Vec::with_capacity(w * h);
    for row in img.depth().chunks_exact(w) {
        depth.extend(row.iter().rev());
    }
    let out = DepthImage::from_fixed(img.width(), img.height(), depth, img.scale_milli())
        .expect("same shape as a valid image");
    (out, pose.flipped(img.width()))
}

/// Crops the `width x height` window at `(dx, dy)`; joints move by
/// `(-dx, -dy)`. Fails if the window leaves the image or evicts a joint.
pub fn crop(img: &DepthImage, pose: &PoseConfig, dx: u32, dy: u32, width: u32, height: u32) -> Result<(DepthImage, PoseConfig)> {
    if width == 0 || height == 0 || dx + width > img.width() || dy + height > img.height() {
        return Err(Error::contract("crop window outside the image"));
    }
    let moved = pose.translated(-(dx as f64), -(dy as f64));
    if !moved.in_bounds(width, height) {
        return Err(Error::contract("crop would evict a joint"));
    }
    let src_w = img.width() as usize;
    let mut depth = Vec::with_capacity(width as usize * height as usize);
    for y in dy..dy + height {
        let start = y as usize * src_w + dx as usize;
        depth.extend_from_slice(&img.depth()[start..start + width as usize]);
    }
    let out = DepthImage::from_fixed(width, height, depth, img.scale_milli())?;
    Ok((out, moved))
}

/// Random flip then crop, fully determined by `seed`.
pub fn augment(img: &DepthImage, pose: &PoseConfig, seed: u64, cfg: &AugmentConfig) -> Augmented {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flipped = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob.min(1.0));
    let (mut image, mut pose) = if flipped {
        flip_horizontal(img, pose)
    } else {
        (img.clone(), pose.clone())
    };
    let mut crop_origin = None;
    let mut crop_skipped = false;
    let m = cfg.max_crop;
    if m > 0 && m < image.width() && m < image.height() {
        let dx = rng.random_range(0..=m);
        let dy = rng.random_range(0..=m);
        match crop(&image, &pose, dx, dy, image.width() - m, image.height() - m) {
            Ok((i, p)) => {
                image = i;
                pose = p;
                crop_origin = Some((dx, dy));
            }
            Err(_) => crop_skipped = true,
        }
    }
    Augmented {
        image,
        pose,
        flipped,
        crop: crop_origin,
        crop_skipped,
    }
}
