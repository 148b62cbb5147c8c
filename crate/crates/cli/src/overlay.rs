use std::fmt::Write as _;

use posekit::dataio::{DepthImage, PoseConfig};
use posekit::kinematics::KinematicTree;

const SCALE: u32 = 4;
const LEVELS: u32 = 32;

/// Grey level of a depth reading: near is bright, holes are black.
fn shade(d: u16, lo: u16, hi: u16) -> u32 {
    if d == 0 {
        return 0;
    }
    let span = (hi - lo).max(1) as f64;
    let t = 1.0 - (d - lo) as f64 / span;
    ((t * (LEVELS - 1) as f64).round() as u32 + 1).min(LEVELS)
}

/// The depth image as run-length grey rectangles with the pose drawn on
/// top: joints in red, bones in white.
pub fn overlay_svg(img: &DepthImage, pose: &PoseConfig, tree: &KinematicTree) -> String {
    let (w, h) = (img.width(), img.height());
    let valid = img.depth().iter().copied().filter(|&d| d > 0);
    let lo = valid.clone().min().unwrap_or(0);
    let hi = valid.max().unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {h}" shape-rendering="crispEdges">"#,
        w * SCALE,
        h * SCALE
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="black"/>"#);
    for y in 0..h {
        let mut x = 0;
        while x < w {
            let level = shade(img.get(x, y), lo, hi);
            let start = x;
            while x < w && shade(img.get(x, y), lo, hi) == level {
                x += 1;
            }
            if level > 0 {
                let g = 255 * level / LEVELS;
                let _ = writeln!(
                    s,
                    r#"<rect x="{start}" y="{y}" width="{}" height="1" fill="rgb({g},{g},{g})"/>"#,
                    x - start
                );
            }
        }
    }
    for &(p, c) in tree.edges() {
        let (a, b) = (pose.joints[p], pose.joints[c]);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="white" stroke-width="0.8"/>"#,
            a.x + 0.5,
            a.y + 0.5,
            b.x + 0.5,
            b.y + 0.5
        );
    }
    for j in &pose.joints {
        let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="1.5" fill="red"/>"#, j.x + 0.5, j.y + 0.5);
    }
    s.push_str("</svg>\n");
    s
}
