#![no_main]
use libfuzzer_sys::fuzz_target;
use savgrid_nn::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = checkpoint::decode(data) {
        let bytes = checkpoint::encode(&records);
        assert_eq!(checkpoint::decode(&bytes).expect("re-decode").len(), records.len());
    }
});
