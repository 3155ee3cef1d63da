#![no_main]

use libfuzzer_sys::fuzz_target;
use stimweave_core::bg_env::PatientProfile;
use stimweave_core::kvconf::KvConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KvConfig::parse(text) {
        let _ = PatientProfile::from_kv(&kv);
    }
});
