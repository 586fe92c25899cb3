#![no_main]

use libfuzzer_sys::fuzz_target;
use maxplus_hjb::simulation::PathDump;

fuzz_target!(|data: &[u8]| {
    if let Ok(dump) = PathDump::decode(data) {
        assert_eq!(dump.encode(), data);
    }
});
