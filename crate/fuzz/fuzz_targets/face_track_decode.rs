#![no_main]
use libfuzzer_sys::fuzz_target;
use savgrid_core::visual::FaceTrack;

fuzz_target!(|data: &[u8]| {
    if let Ok(track) = FaceTrack::decode(data) {
        assert_eq!(FaceTrack::decode(&track.encode()).expect("re-decode"), track);
    }
});
