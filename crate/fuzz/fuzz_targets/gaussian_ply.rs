#![no_main]
use libfuzzer_sys::fuzz_target;
use splatkit::io::{encode_gaussian_ply, parse_gaussian_ply};

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = parse_gaussian_ply(data) {
        // After one write the values are f32 and must round-trip exactly.
        let bytes = encode_gaussian_ply(&cloud, &[]).unwrap();
        if let Ok(again) = parse_gaussian_ply(&bytes) {
            assert_eq!(encode_gaussian_ply(&again, &[]).unwrap(), bytes);
        }
    }
});
