use super::HeatMapStack;
use crate::dataio::PoseConfig;
use crate::error::{Error, Result};
use crate::nn::Real;

/// Unit-amplitude Gaussian centred on joint `k` in map coordinates
/// (`image / stride`); joints beyond the map border are clamped onto it.
pub fn gaussian_target<T: Real>(pose: &PoseConfig, k: usize, height: usize, width: usize, stride: usize, sigma: f64) -> Vec<T> {
    let j = &pose.joints[k];
    let s = stride as f64;
    let (mut cx, mut cy) = (j.x / s, j.y / s);
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    if cx < 0.0 || cy < 0.0 || cx > max_x || cy > max_y {
        log::debug!("joint {k} at ({cx}, {cy}) clamped onto the {width}x{height} map");
        cx = cx.clamp(0.0, max_x);
        cy = cy.clamp(0.0, max_y);
    }
    let denom = 2.0 * sigma * sigma;
    let gx: Vec<f64> = (0..width).map(|x| (-(x as f64 - cx).powi(2) / denom).exp()).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let gy = (-(y as f64 - cy).powi(2) / denom).exp();
        out.extend(gx.iter().map(|g| T::lit(g * gy)));
    }
    out
}

/// All K target maps back to back.
pub fn gaussian_targets<T: Real>(pose: &PoseConfig, height: usize, width: usize, stride: usize, sigma: f64) -> Vec<T> {
    (0..pose.k())
        .flat_map(|k| gaussian_target(pose, k, height, width, stride, sigma))
        .collect()
}

/// Sum of squared differences over every pixel of every part.
pub fn fcn_loss<T: Real>(pred: &HeatMapStack<T>, targets: &[T]) -> Result<f64> {
    if pred.data.len() != targets.len() {
        return Err(Error::contract(format!(
            "prediction has {} values, targets {}",
            pred.data.len(),
            targets.len()
        )));
    }
    Ok(pred
        .data
        .iter()
        .zip(targets)
        .map(|(z, t)| {
            let d = z.as_f64() - t.as_f64();
            d * d
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Joint;
    use rand::{Rng, SeedableRng};

    fn centred(k: usize, x: f64, y: f64) -> PoseConfig {
        PoseConfig::new(vec![Joint::new(x, y, 1000.0); k])
    }

    #[test]
    fn peak_and_one_sigma_values() {
        let t: Vec<f64> = gaussian_target(&centred(1, 20.0, 10.0), 0, 16, 16, 2, 2.0);
        assert_eq!(t[5 * 16 + 10], 1.0);
        assert!((t[5 * 16 + 12] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((t[5 * 16 + 12] - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn narrower_gaussian_has_smaller_mass() {
        // Closed-form sums over a 32x32 map with the joint at (16, 16).
        let pose = centred(1, 16.0, 16.0);
        let mass = |sigma: f64| -> f64 {
            let oracle: f64 = (0..32)
                .flat_map(|y| (0..32).map(move |x| (x, y)))
                .map(|(x, y): (i32, i32)| {
                    (-(((x - 16).pow(2) + (y - 16).pow(2)) as f64) / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            let got: f64 = gaussian_target::<f64>(&pose, 0, 32, 32, 1, sigma).iter().sum();
            assert!((oracle - got).abs() < 1e-9);
            got
        };
        assert!(mass(2.0) < mass(4.0));
    }

    #[test]
    fn target_is_translation_equivariant() {
        let a: Vec<f64> = gaussian_target(&centred(1, 10.0, 12.0), 0, 24, 24, 1, 2.0);
        let b: Vec<f64> = gaussian_target(&centred(1, 13.0, 10.0), 0, 24, 24, 1, 2.0);
        for y in 2..20 {
            for x in 0..20 {
                assert!((a[y * 24 + x] - b[(y - 2) * 24 + x + 3]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let k = 19;
        let zeros = HeatMapStack::new(k, 4, 4, 1, vec![0.0f64; k * 16]).unwrap();
        assert_eq!(fcn_loss(&zeros, &zeros.data).unwrap(), 0.0);
        let mut t = vec![0.0; k * 16];
        for p in 0..k {
            t[p * 16 + 5] = 1.0;
        }
        assert_eq!(fcn_loss(&zeros, &t).unwrap(), 19.0);
        assert!(fcn_loss(&zeros, &t[1..]).is_err());
    }

    #[test]
    fn loss_matches_naive_double_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (k, h, w) = (3, 5, 7);
        let a: Vec<f64> = (0..k * h * w).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..k * h * w).map(|_| rng.random::<f64>()).collect();
        let mut oracle = 0.0;
        for p in 0..k {
            for y in 0..h {
                for x in 0..w {
                    let i = (p * h + y) * w + x;
                    oracle += (a[i] - b[i]) * (a[i] - b[i]);
                }
            }
        }
        let pred = HeatMapStack::new(k, w, h, 1, a).unwrap();
        assert!((fcn_loss(&pred, &b).unwrap() - oracle).abs() < 1e-12);
    }
}
