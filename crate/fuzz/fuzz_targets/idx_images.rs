#![no_main]

use fooling::data::{encode_idx_images, parse_idx_images};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = parse_idx_images(data) {
        assert_eq!(images.pixels.len(), images.count * images.rows * images.cols);
        let again = parse_idx_images(&encode_idx_images(&images)).expect("round trip");
        assert_eq!(again.pixels, images.pixels);
    }
});
