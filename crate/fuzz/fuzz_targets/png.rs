#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = splatkit::io::decode_color(data);
    if let Ok(mask) = splatkit::io::decode_mask(data) {
        assert!(mask.data.iter().all(|v| *v == 0.0 || *v == 1.0));
    }
});
