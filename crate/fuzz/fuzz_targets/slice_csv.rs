#![no_main]

use libfuzzer_sys::fuzz_target;
use maxplus_hjb::bench::{read_slice_csv, write_slice_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_slice_csv(data) {
        let mut out = Vec::new();
        write_slice_csv(&rows, &mut out).expect("write to memory");
        let back = read_slice_csv(&out).expect("own output parses");
        assert_eq!(back.len(), rows.len());
    }
});
