#![no_main]

use carrot_core::dataset::CarrotClass;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = carrot_serve::parse_remedy_kb(text) {
        for class in CarrotClass::ALL {
            assert!(!table.get(class).medicine.is_empty());
        }
    }
});
