#![no_main]
use libfuzzer_sys::fuzz_target;
use posekit::matchnet::MatcherParams;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = MatcherParams::<f32>::from_kmat_bytes(data) {
        assert_eq!(p.to_kmat_bytes(), data);
    }
});
