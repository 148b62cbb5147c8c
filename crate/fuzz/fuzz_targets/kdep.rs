#![no_main]
use libfuzzer_sys::fuzz_target;
use posekit::dataio::DepthImage;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = DepthImage::from_kdep_bytes(data) {
        assert_eq!(img.to_kdep_bytes(), data);
    }
});
