#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = posekit::learning::parse_train_log(text);
    let _ = posekit::fcn::parse_loss_log(text);
    let _ = posekit::eval::PdjTable::parse_csv(text);
});
