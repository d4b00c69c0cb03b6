#![no_main]

use fooling::data::decode_pnm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm(data) {
        assert_eq!(img.pixels.len(), img.width * img.height * img.channels);
        assert_eq!(decode_pnm(&img.encode()).expect("round trip"), img);
    }
});
