#![no_main]
use libfuzzer_sys::fuzz_target;
use savgrid_core::harness::{parse_records_csv, records_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = parse_records_csv(data) {
        let again = parse_records_csv(&records_csv(&records).expect("re-format")).expect("re-parse");
        assert_eq!(again.len(), records.len());
    }
});
