//! Synthetic labelled depth images of a 19-joint stick figure.
//!
//! Limbs are filled capsules and the head a disc; each covered pixel takes
//! the depth of the bone axis under it and the nearest surface wins. Joint
//! positions are snapped to pixel centres and whole millimetres before
//! rendering so that an unoccluded joint pixel reads back exactly the
//! joint's depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Sample, Split};
use super::kdep::DepthImage;
use super::pose::{Joint, PoseConfig, NUM_JOINTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

impl Span {
    pub const fn new(min: f64, max: f64) -> Self {
        Span { min, max }
    }

    fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..self.max)
        }
    }
}

/// Bone lengths in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoneLengths {
    pub head_neck: f64,
    pub neck_upper_spine: f64,
    pub upper_middle_spine: f64,
    pub middle_down_spine: f64,
    pub shoulder: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub hand: f64,
    pub hip: f64,
    pub thigh: f64,
    pub shin: f64,
}

impl Default for BoneLengths {
    fn default() -> Self {
        BoneLengths {
            head_neck: 220.0,
            neck_upper_spine: 110.0,
            upper_middle_spine: 190.0,
            middle_down_spine: 190.0,
            shoulder: 170.0,
            upper_arm: 290.0,
            forearm: 250.0,
            hand: 90.0,
            hip: 95.0,
            thigh: 420.0,
            shin: 410.0,
        }
    }
}

impl BoneLengths {
    fn as_array(&self) -> [f64; 11] {
        [
            self.head_neck,
            self.neck_upper_spine,
            self.upper_middle_spine,
            self.middle_down_spine,
            self.shoulder,
            self.upper_arm,
            self.forearm,
            self.hand,
            self.hip,
            self.thigh,
            self.shin,
        ]
    }

    pub fn scaled(&self, f: f64) -> Self {
        BoneLengths {
            head_neck: self.head_neck * f,
            neck_upper_spine: self.neck_upper_spine * f,
            upper_middle_spine: self.upper_middle_spine * f,
            middle_down_spine: self.middle_down_spine * f,
            shoulder: self.shoulder * f,
            upper_arm: self.upper_arm * f,
            forearm: self.forearm * f,
            hand: self.hand * f,
            hip: self.hip * f,
            thigh: self.thigh * f,
            shin: self.shin * f,
        }
    }
}

/// Articulation ranges in degrees. Limb angles are measured from straight
/// down, positive away from the body midline (`*_abduction`) or towards the
/// camera (`*_flexion`); bends are relative to the parent bone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRanges {
    pub yaw: Span,
    pub torso_lean: Span,
    pub torso_pitch: Span,
    pub head_tilt: Span,
    pub shoulder_abduction: Span,
    pub shoulder_flexion: Span,
    pub elbow_bend: Span,
    pub elbow_flexion: Span,
    pub wrist_bend: Span,
    pub hip_abduction: Span,
    pub hip_flexion: Span,
    pub knee_bend: Span,
}

impl Default for AngleRanges {
    fn default() -> Self {
        AngleRanges {
            yaw: Span::new(-30.0, 30.0),
            torso_lean: Span::new(-12.0, 12.0),
            torso_pitch: Span::new(-10.0, 20.0),
            head_tilt: Span::new(-20.0, 20.0),
            shoulder_abduction: Span::new(-10.0, 150.0),
            shoulder_flexion: Span::new(-20.0, 70.0),
            elbow_bend: Span::new(-30.0, 120.0),
            elbow_flexion: Span::new(-20.0, 60.0),
            wrist_bend: Span::new(-20.0, 20.0),
            hip_abduction: Span::new(-5.0, 40.0),
            hip_flexion: Span::new(-15.0, 60.0),
            knee_bend: Span::new(-80.0, 0.0),
        }
    }
}

impl AngleRanges {
    fn spans(&self) -> [(&'static str, Span); 12] {
        [
            ("yaw", self.yaw),
            ("torso_lean", self.torso_lean),
            ("torso_pitch", self.torso_pitch),
            ("head_tilt", self.head_tilt),
            ("shoulder_abduction", self.shoulder_abduction),
            ("shoulder_flexion", self.shoulder_flexion),
            ("elbow_bend", self.elbow_bend),
            ("elbow_flexion", self.elbow_flexion),
            ("wrist_bend", self.wrist_bend),
            ("hip_abduction", self.hip_abduction),
            ("hip_flexion", self.hip_flexion),
            ("knee_bend", self.knee_bend),
        ]
    }

    /// Every articulation fixed at zero except the limb spreads needed to
    /// keep limbs apart; the figure lies in a single depth plane.
    pub fn planar() -> Self {
        let zero = Span::new(0.0, 0.0);
        AngleRanges {
            yaw: zero,
            torso_lean: zero,
            torso_pitch: zero,
            head_tilt: zero,
            shoulder_abduction: Span::new(60.0, 120.0),
            shoulder_flexion: zero,
            elbow_bend: Span::new(-20.0, 20.0),
            elbow_flexion: zero,
            wrist_bend: zero,
            hip_abduction: Span::new(15.0, 35.0),
            hip_flexion: zero,
            knee_bend: zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Total number of images.
    pub count: usize,
    /// Subjects; images are assigned to subjects in contiguous blocks of
    /// `count / subjects` poses.
    pub subjects: usize,
    /// The last `test_subjects` subjects form the test split.
    pub test_subjects: usize,
    pub width: u32,
    pub height: u32,
    pub mm_per_pixel: f64,
    pub bones: BoneLengths,
    /// Per-subject multiplicative bone-length variation.
    pub subject_scale: Span,
    pub angles: AngleRanges,
    /// Distance of the pelvis from the camera, mm.
    pub distance_mm: Span,
    pub occluder_prob: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 100,
            subjects: 10,
            test_subjects: 2,
            width: 128,
            height: 128,
            mm_per_pixel: 16.0,
            bones: BoneLengths::default(),
            subject_scale: Span::new(0.92, 1.08),
            angles: AngleRanges::default(),
            distance_mm: Span::new(2000.0, 3200.0),
            occluder_prob: 0.3,
            noise_std: 8.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("count must be >= 1"));
        }
        if self.subjects == 0 || self.subjects > self.count {
            return Err(Error::config(format!(
                "subjects must be in 1..={}, got {}",
                self.count, self.subjects
            )));
        }
        if self.test_subjects > self.subjects {
            return Err(Error::config("test_subjects exceeds subjects"));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::config("image must be at least 16x16"));
        }
        if !(self.mm_per_pixel.is_finite() && self.mm_per_pixel > 0.0) {
            return Err(Error::config("mm_per_pixel must be > 0"));
        }
        if self.bones.as_array().iter().any(|&b| !(b.is_finite() && b > 0.0)) {
            return Err(Error::config("bone lengths must be > 0"));
        }
        for (name, span) in self.angles.spans() {
            if !span.is_valid() {
                return Err(Error::config(format!(
                    "unsatisfiable joint-angle range {name}: [{}, {}]",
                    span.min, span.max
                )));
            }
        }
        if !self.subject_scale.is_valid() || self.subject_scale.min <= 0.0 {
            return Err(Error::config("subject_scale must be a positive range"));
        }
        if !self.distance_mm.is_valid() || self.distance_mm.min < 1000.0 || self.distance_mm.max > 60_000.0 {
            return Err(Error::config("distance_mm must lie within [1000, 60000]"));
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return Err(Error::config("occluder_prob must be in [0, 1]"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be >= 0"));
        }
        Ok(())
    }

    fn subject_of(&self, index: usize) -> usize {
        index * self.subjects / self.count
    }
}

type Vec3 = [f64; 3];

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Upward direction leaning by `lean` towards +x and `pitch` towards the
/// camera (-z).
fn up(lean: f64, pitch: f64) -> Vec3 {
    [lean.sin() * pitch.cos(), lean.cos() * pitch.cos(), -pitch.sin()]
}

/// Downward limb direction on `side` (-1 image-left, +1 image-right).
fn limb(out: f64, fwd: f64, side: f64) -> Vec3 {
    [side * out.sin() * fwd.cos(), -out.cos() * fwd.cos(), -fwd.sin()]
}

struct Articulation {
    yaw: f64,
    lean: f64,
    pitch: f64,
    head: f64,
    arm: [[f64; 5]; 2],
    leg: [[f64; 3]; 2],
}

impl Articulation {
    fn sample<R: Rng>(a: &AngleRanges, rng: &mut R) -> Self {
        let r = f64::to_radians;
        let mut arm = [[0.0; 5]; 2];
        let mut leg = [[0.0; 3]; 2];
        let yaw = r(a.yaw.sample(rng));
        let lean = r(a.torso_lean.sample(rng));
        let pitch = r(a.torso_pitch.sample(rng));
        let head = r(a.head_tilt.sample(rng));
        for side in arm.iter_mut() {
            *side = [
                r(a.shoulder_abduction.sample(rng)),
                r(a.shoulder_flexion.sample(rng)),
                r(a.elbow_bend.sample(rng)),
                r(a.elbow_flexion.sample(rng)),
                r(a.wrist_bend.sample(rng)),
            ];
        }
        for side in leg.iter_mut() {
            *side = [
                r(a.hip_abduction.sample(rng)),
                r(a.hip_flexion.sample(rng)),
                r(a.knee_bend.sample(rng)),
            ];
        }
        Articulation {
            yaw,
            lean,
            pitch,
            head,
            arm,
            leg,
        }
    }

    /// Joint positions in body coordinates (mm, y up, z away from camera),
    /// pelvis at the origin.
    fn skeleton(&self, b: &BoneLengths) -> [Vec3; NUM_JOINTS] {
        let mut j = [[0.0; 3]; NUM_JOINTS];
        let spine = up(self.lean, self.pitch);
        j[4] = [0.0; 3];
        j[3] = add(j[4], scale(spine, b.middle_down_spine));
        j[2] = add(j[3], scale(spine, b.upper_middle_spine));
        j[1] = add(j[2], scale(spine, b.neck_upper_spine));
        j[0] = add(j[1], scale(up(self.lean + self.head, self.pitch), b.head_neck));
        let lateral = [self.lean.cos(), -self.lean.sin(), 0.0];
        for (s, side) in [(0usize, -1.0f64), (1, 1.0)] {
            let base = if s == 0 { 5 } else { 9 };
            let [abd, flex, bend, eflex, wrist] = self.arm[s];
            j[base] = add(add(j[1], scale(lateral, side * b.shoulder)), [0.0, -25.0, 0.0]);
            j[base + 1] = add(j[base], scale(limb(abd, flex, side), b.upper_arm));
            j[base + 2] = add(j[base + 1], scale(limb(abd + bend, flex + eflex, side), b.forearm));
            j[base + 3] = add(
                j[base + 2],
                scale(limb(abd + bend + wrist, flex + eflex, side), b.hand),
            );
            let hip = if s == 0 { 13 } else { 16 };
            let [habd, hflex, knee] = self.leg[s];
            j[hip] = add(add(j[4], scale(lateral, side * b.hip)), [0.0, -50.0, 0.0]);
            j[hip + 1] = add(j[hip], scale(limb(habd, hflex, side), b.thigh));
            j[hip + 2] = add(j[hip + 1], scale(limb(habd * 0.5, hflex + knee, side), b.shin));
        }
        let (sy, cy) = self.yaw.sin_cos();
        for p in j.iter_mut() {
            let (x, z) = (p[0], p[2]);
            p[0] = x * cy + z * sy;
            p[2] = -x * sy + z * cy;
        }
        j
    }
}

/// Capsules `(from, to, radius_mm)` drawn for the figure.
const SEGMENTS: [(usize, usize, f64); 19] = [
    (0, 0, 105.0),
    (0, 1, 50.0),
    (1, 2, 120.0),
    (2, 3, 150.0),
    (3, 4, 150.0),
    (1, 5, 55.0),
    (5, 6, 45.0),
    (6, 7, 38.0),
    (7, 8, 38.0),
    (1, 9, 55.0),
    (9, 10, 45.0),
    (10, 11, 38.0),
    (11, 12, 38.0),
    (4, 13, 80.0),
    (13, 14, 70.0),
    (14, 15, 55.0),
    (4, 16, 80.0),
    (16, 17, 70.0),
    (17, 18, 55.0),
];

/// Rasterises the capsule from `a` to `b` into a z-buffer (`u16::MAX` = empty).
fn draw_capsule(zbuf: &mut [u16], width: u32, height: u32, a: &Joint, b: &Joint, radius_px: f64) {
    let x0 = (a.x.min(b.x) - radius_px).floor().max(0.0) as i64;
    let x1 = (a.x.max(b.x) + radius_px).ceil().min((width - 1) as f64) as i64;
    let y0 = (a.y.min(b.y) - radius_px).floor().max(0.0) as i64;
    let y1 = (a.y.max(b.y) + radius_px).ceil().min((height - 1) as f64) as i64;
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let r2 = radius_px * radius_px;
    for py in y0..=y1 {
        for px in x0..=x1 {
            let (ux, uy) = (px as f64 - a.x, py as f64 - a.y);
            let t = if len2 > 0.0 {
                ((ux * dx + uy * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (ux - t * dx, uy - t * dy);
            if ex * ex + ey * ey > r2 {
                continue;
            }
            let z = if len2 == 0.0 {
                a.z.min(b.z)
            } else if t == 0.0 {
                a.z
            } else if t == 1.0 {
                b.z
            } else {
                a.z + t * (b.z - a.z)
            };
            let z = z.round().clamp(1.0, 65534.0) as u16;
            let cell = &mut zbuf[py as usize * width as usize + px as usize];
            if z < *cell {
                *cell = z;
            }
        }
    }
}

fn place<R: Rng>(cfg: &SynthConfig, body: &[Vec3; NUM_JOINTS], rng: &mut R) -> Option<PoseConfig> {
    let mmpp = cfg.mm_per_pixel;
    let xs = body.iter().map(|p| p[0] / mmpp);
    let ys = body.iter().map(|p| -p[1] / mmpp);
    let (min_x, max_x) = xs.fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (min_y, max_y) = ys.fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let margin = 3.0;
    let slack_x = (cfg.width - 1) as f64 - 2.0 * margin - (max_x - min_x);
    let slack_y = (cfg.height - 1) as f64 - 2.0 * margin - (max_y - min_y);
    if slack_x < 0.0 || slack_y < 0.0 {
        return None;
    }
    let ox = margin - min_x + rng.random_range(0.0..=slack_x);
    let oy = margin - min_y + rng.random_range(0.0..=slack_y);
    let dist = cfg.distance_mm.sample(rng);
    let pose = PoseConfig::new(
        body.iter()
            .map(|p| {
                Joint::new(
                    (p[0] / mmpp + ox).round(),
                    (-p[1] / mmpp + oy).round(),
                    (dist + p[2]).round(),
                )
            })
            .collect(),
    );
    pose.in_bounds(cfg.width, cfg.height).then_some(pose)
}

fn render<R: Rng>(cfg: &SynthConfig, pose: &PoseConfig, girth: f64, rng: &mut R) -> Vec<u16> {
    let (w, h) = (cfg.width, cfg.height);
    let mut zbuf = vec![u16::MAX; w as usize * h as usize];
    for &(a, b, r) in &SEGMENTS {
        draw_capsule(&mut zbuf, w, h, &pose.joints[a], &pose.joints[b], r * girth / cfg.mm_per_pixel);
    }

    if cfg.occluder_prob > 0.0 && rng.random_bool(cfg.occluder_prob) {
        let torso: Vec<&Joint> = [1usize, 2, 3, 4].iter().map(|&i| &pose.joints[i]).collect();
        let pad = 150.0 * girth / cfg.mm_per_pixel;
        let tx0 = torso.iter().map(|j| j.x).fold(f64::MAX, f64::min) - pad;
        let tx1 = torso.iter().map(|j| j.x).fold(f64::MIN, f64::max) + pad;
        let ty0 = torso.iter().map(|j| j.y).fold(f64::MAX, f64::min) - pad;
        let ty1 = torso.iter().map(|j| j.y).fold(f64::MIN, f64::max) + pad;
        let nearest = pose.joints.iter().map(|j| j.z).fold(f64::MAX, f64::min);
        let depth = (nearest - rng.random_range(200.0..600.0)).max(1.0).round() as u16;
        for _ in 0..20 {
            let rw = rng.random_range(8..=24u32).min(w);
            let rh = rng.random_range(8..=32u32).min(h);
            let rx = rng.random_range(0..=w - rw);
            let ry = rng.random_range(0..=h - rh);
            let overlaps = (rx as f64) <= tx1
                && ((rx + rw - 1) as f64) >= tx0
                && (ry as f64) <= ty1
                && ((ry + rh - 1) as f64) >= ty0;
            if overlaps {
                continue;
            }
            for y in ry..ry + rh {
                for x in rx..rx + rw {
                    let cell = &mut zbuf[(y * w + x) as usize];
                    *cell = (*cell).min(depth);
                }
            }
            break;
        }
    }

    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("valid std"));
    for cell in zbuf.iter_mut() {
        if *cell == u16::MAX {
            *cell = 0;
        } else if let Some(n) = &noise {
            let v = *cell as f64 + n.sample(rng);
            *cell = v.round().clamp(1.0, 65535.0) as u16;
        }
    }
    zbuf
}

fn subject_scale(cfg: &SynthConfig, subject: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((1u64 << 40) + subject as u64);
    let bone = cfg.subject_scale.sample(&mut rng);
    let girth = rng.random_range(0.9..1.1);
    (bone, girth)
}

fn synthesize_one(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let subject = cfg.subject_of(index);
    let (bone_scale, girth) = subject_scale(cfg, subject);
    let bones = cfg.bones.scaled(bone_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    for _ in 0..1000 {
        let art = Articulation::sample(&cfg.angles, &mut rng);
        let body = art.skeleton(&bones);
        let Some(pose) = place(cfg, &body, &mut rng) else {
            continue;
        };
        let depth = render(cfg, &pose, girth, &mut rng);
        let image = DepthImage::new(cfg.width, cfg.height, depth, cfg.mm_per_pixel)?;
        let split = if subject >= cfg.subjects - cfg.test_subjects {
            Split::Test
        } else {
            Split::Train
        };
        return Ok(Sample {
            name: format!("{index:05}"),
            image,
            pose,
            split,
            subject: subject as u32,
        });
    }
    Err(Error::config(format!(
        "could not fit a pose inside {}x{} after 1000 attempts; joint-angle or bone ranges are unsatisfiable",
        cfg.width, cfg.height
    )))
}

/// Renders `cfg.count` labelled images. The result is a pure function of
/// `cfg`; each image draws from its own ChaCha stream so generation order
/// does not matter.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.count)
        .into_par_iter()
        .map(|i| synthesize_one(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        k: NUM_JOINTS,
        samples,
        synth: Some(cfg.clone()),
    })
}
