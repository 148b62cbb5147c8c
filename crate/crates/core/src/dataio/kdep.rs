//! `KDEP` depth raster: magic, u32 width, u32 height, u32 mm-per-pixel x 1000,
//! then `width * height` little-endian u16 samples in row-major order.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, FormatError, Result};

pub const KDEP_MAGIC: &[u8; 4] = b"KDEP";
pub const DEFAULT_MM_PER_PIXEL: f64 = 10.0;

/// Depth image in millimetres, `0` meaning no reading.
///
/// The lateral scale is kept in the same fixed-point form the file format
/// uses, so encoding is lossless.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DepthImage {
    width: u32,
    height: u32,
    depth: Vec<u16>,
    scale_milli: u32,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, depth: Vec<u16>, mm_per_pixel: f64) -> Result<Self> {
        if !(mm_per_pixel.is_finite() && mm_per_pixel > 0.0) {
            return Err(Error::contract(format!("mm_per_pixel must be > 0, got {mm_per_pixel}")));
        }
        let milli = (mm_per_pixel * 1000.0).round();
        if milli < 1.0 || milli > u32::MAX as f64 {
            return Err(Error::contract(format!("mm_per_pixel {mm_per_pixel} not representable")));
        }
        Self::from_fixed(width, height, depth, milli as u32)
    }

    pub fn from_fixed(width: u32, height: u32, depth: Vec<u16>, scale_milli: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract("depth image dimensions must be non-zero"));
        }
        if scale_milli == 0 {
            return Err(Error::contract("mm_per_pixel must be > 0"));
        }
        let expected = width as usize * height as usize;
        if depth.len() != expected {
            return Err(Error::contract(format!(
                "depth array has {} samples, expected {expected}",
                depth.len()
            )));
        }
        Ok(DepthImage {
            width,
            height,
            depth,
            scale_milli,
        })
    }

    pub fn filled(width: u32, height: u32, value: u16, mm_per_pixel: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width as usize * height as usize], mm_per_pixel)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn depth(&self) -> &[u16] {
        &self.depth
    }

    pub fn mm_per_pixel(&self) -> f64 {
        self.scale_milli as f64 / 1000.0
    }

    pub fn scale_milli(&self) -> u32 {
        self.scale_milli
    }

    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.depth[y as usize * self.width as usize + x as usize]
    }

    /// Sample with mirror reflection outside the raster.
    pub fn get_reflected(&self, x: i64, y: i64) -> u16 {
        let xi = reflect(x, self.width as usize);
        let yi = reflect(y, self.height as usize);
        self.depth[yi * self.width as usize + xi]
    }

    pub fn to_kdep_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(KDEP_MAGIC);
        w.u32(self.width);
        w.u32(self.height);
        w.u32(self.scale_milli);
        w.u16s(&self.depth);
        w.buf
    }

    pub fn from_kdep_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes, "KDEP raster");
        r.magic(KDEP_MAGIC)?;
        let width = r.u32()?;
        let height = r.u32()?;
        let scale_milli = r.u32()?;
        if width == 0 {
            return Err(FormatError::ZeroDimension("KDEP width"));
        }
        if height == 0 {
            return Err(FormatError::ZeroDimension("KDEP height"));
        }
        if scale_milli == 0 {
            return Err(FormatError::invalid("mm_per_pixel", "must be > 0"));
        }
        let n = (width as usize)
            .checked_mul(height as usize)
            .ok_or_else(|| FormatError::invalid("dimensions", "width * height overflows"))?;
        let depth = r.u16_vec(n)?;
        r.finish()?;
        Ok(DepthImage {
            width,
            height,
            depth,
            scale_milli,
        })
    }
}

/// Reflects an index into `[0, n)` without repeating the edge sample.
pub fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn write_depth_image(img: &DepthImage, path: &Path) -> Result<()> {
    binio::write_file(path, &img.to_kdep_bytes())
}

pub fn read_depth_image(path: &Path) -> Result<DepthImage> {
    binio::decode_file(path, DepthImage::from_kdep_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_pixel_encoding() {
        let img = DepthImage::new(1, 1, vec![1234], 10.0).unwrap();
        let bytes = img.to_kdep_bytes();
        assert_eq!(bytes.len(), 18);
        assert_eq!(&bytes[16..], &[0xD2, 0x04]);
        assert_eq!(&bytes[12..16], &10_000u32.to_le_bytes());
    }

    #[test]
    fn two_by_two_length() {
        let img = DepthImage::filled(2, 2, 0, 10.0).unwrap();
        assert_eq!(img.to_kdep_bytes().len(), 24);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = DepthImage::filled(2, 2, 7, 10.0).unwrap().to_kdep_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            DepthImage::from_kdep_bytes(&bytes),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_names_lengths() {
        let bytes = DepthImage::filled(4, 4, 7, 10.0).unwrap().to_kdep_bytes();
        let cut = &bytes[..bytes.len() - 5];
        match DepthImage::from_kdep_bytes(cut) {
            Err(FormatError::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, 16 + 32);
                assert_eq!(actual, 43);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut w = Writer::with_magic(KDEP_MAGIC);
        w.u32(0);
        w.u32(3);
        w.u32(10_000);
        assert_eq!(
            DepthImage::from_kdep_bytes(&w.buf),
            Err(FormatError::ZeroDimension("KDEP width"))
        );
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-9, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn file_round_trip_64() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(64);
        let depth: Vec<u16> = (0..64 * 64).map(|_| rng.random()).collect();
        let img = DepthImage::new(64, 64, depth, 12.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.kdep");
        write_depth_image(&img, &path).unwrap();
        assert_eq!(read_depth_image(&path).unwrap(), img);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(w in 1u32..24, h in 1u32..24, milli in 1u32..100_000, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let depth: Vec<u16> = (0..w * h).map(|_| rng.random()).collect();
            let img = DepthImage::from_fixed(w, h, depth, milli).unwrap();
            let bytes = img.to_kdep_bytes();
            let back = DepthImage::from_kdep_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_kdep_bytes(), bytes);
            prop_assert_eq!(back, img);
        }
    }
}
