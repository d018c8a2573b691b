#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cams) = splatkit::io::parse_cameras(s) {
            for c in &cams {
                c.validate().unwrap();
            }
        }
    }
});
