#![no_main]
use libfuzzer_sys::fuzz_target;
use posekit::matchnet::TemplateSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = TemplateSet::from_ktpl_bytes(data, 500.0) {
        assert_eq!(t.to_ktpl_bytes(), data);
    }
});
