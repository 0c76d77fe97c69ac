#![no_main]
use libfuzzer_sys::fuzz_target;
use savgrid_core::config::Settings;
use savgrid_core::harness::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = Settings::parse(text) {
        let _ = RunConfig::from_settings(s);
    }
});
