#![no_main]

use libfuzzer_sys::fuzz_target;
use stimweave_core::replay::ReplayBuffer;

fuzz_target!(|data: &[u8]| {
    let cursor = std::io::Cursor::new(data);
    let _ = ReplayBuffer::read(std::io::BufReader::new(cursor));
});
