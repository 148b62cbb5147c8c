#![no_main]
use libfuzzer_sys::fuzz_target;
use posekit::fcn::{FcnArch, FcnParams};

fuzz_target!(|data: &[u8]| {
    let _ = FcnParams::blocks_from_kfcn_bytes(data);
    if let Ok(p) = FcnParams::from_kfcn_bytes(data, &FcnArch::from_widths(&[2], 2)) {
        assert_eq!(p.to_kfcn_bytes(), data);
    }
});
