#![no_main]

use hyperforget::concepts::ConceptSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = ConceptSet::from_json(text) {
        let back = ConceptSet::from_json(&set.to_json()).expect("serialized concept set parses");
        assert_eq!(back, set);
    }
});
