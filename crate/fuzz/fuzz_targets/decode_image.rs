#![no_main]

use carrot_core::image::{preprocess, FuzzyFilterConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = carrot_core::image::decode_image(data) {
        assert_eq!(img.pixels().len(), img.width() * img.height() * 3);
        if img.width() * img.height() <= 1 << 16 {
            let _ = preprocess(&img, &FuzzyFilterConfig::default(), 16);
        }
    }
});
