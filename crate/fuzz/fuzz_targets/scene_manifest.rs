#![no_main]
use libfuzzer_sys::fuzz_target;
use savgrid_core::scene::{format_manifest, parse_manifest};

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = parse_manifest(data) {
        let again = parse_manifest(&format_manifest(&entries).expect("re-format")).expect("re-parse");
        assert_eq!(again, entries);
    }
});
