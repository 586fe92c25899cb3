#![no_main]

use libfuzzer_sys::fuzz_target;
use maxplus_hjb::problem::MaxPlusValueFunction;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(vf) = MaxPlusValueFunction::from_json(text) {
            let x = vec![1.0; vf.dim()];
            let _ = vf.value_at_step(0, &x);
            let again = vf.to_json().expect("re-encode");
            assert!(MaxPlusValueFunction::from_json(&again).is_ok());
        }
    }
});
