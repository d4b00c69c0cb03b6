#![no_main]

use fooling::model::ArchDescriptor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(desc) = ArchDescriptor::parse(text) {
        let _ = desc.validate();
        let canonical = desc.to_text();
        let again = ArchDescriptor::parse(&canonical).expect("canonical text parses");
        assert_eq!(again.to_text(), canonical);
    }
});
