#![no_main]

use libfuzzer_sys::fuzz_target;
use stimweave_core::kvconf::KvConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KvConfig::parse(text) {
        // exercise the typed getters and the canonical re-render
        for key in ["gamma", "steps", "hidden"] {
            let _ = kv.get_f64(key);
            let _ = kv.get_u64(key);
        }
        let rendered = kv.render();
        let again = KvConfig::parse(&rendered).expect("canonical rendering must re-parse");
        assert_eq!(kv, again);
    }
});
