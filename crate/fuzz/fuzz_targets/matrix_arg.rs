#![no_main]

use libfuzzer_sys::fuzz_target;
use maxplus_hjb::bench::parse_matrix;
use maxplus_hjb::scheme::discrete_increment_weights_2d;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_matrix(text) {
            let _ = discrete_increment_weights_2d(&m);
        }
    }
});
