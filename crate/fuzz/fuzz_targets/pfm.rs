#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = splatkit::io::parse_pfm(data) {
        assert_eq!(img.data.len(), img.width * img.height * img.channels);
    }
});
