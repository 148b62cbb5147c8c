#![no_main]
use libfuzzer_sys::fuzz_target;
use posekit::kinematics::KinematicTree;

fuzz_target!(|data: &[u8]| {
    if let Ok(tree) = KinematicTree::from_json_bytes(data) {
        assert_eq!(tree.order().len(), tree.k());
    }
});
