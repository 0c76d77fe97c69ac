#![no_main]
use libfuzzer_sys::fuzz_target;
use savgrid_core::wav;

fuzz_target!(|data: &[u8]| {
    if let Ok(clip) = wav::decode(data) {
        let again = wav::decode(&wav::encode(&clip).expect("decoded clips re-encode")).expect("re-decode");
        assert_eq!(again, clip);
    }
});
