#![no_main]

use libfuzzer_sys::fuzz_target;
use maxplus_hjb::bench::OracleFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = OracleFile::from_json(text);
    }
});
