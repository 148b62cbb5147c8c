#![no_main]
use libfuzzer_sys::fuzz_target;
use posekit::kinematics::StructParams;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = StructParams::from_kstr_bytes(data) {
        assert_eq!(w.to_kstr_bytes(), data);
    }
});
