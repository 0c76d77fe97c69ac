#![no_main]
use libfuzzer_sys::fuzz_target;
use savgrid_core::cascade::{format_trail, parse_trail};

fuzz_target!(|data: &[u8]| {
    if let Ok(trail) = parse_trail(data) {
        let again = parse_trail(&format_trail(&trail).expect("re-format")).expect("re-parse");
        assert_eq!(again.len(), trail.len());
    }
});
