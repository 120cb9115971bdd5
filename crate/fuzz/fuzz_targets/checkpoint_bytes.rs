#![no_main]

use driftprompt::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cp) = Checkpoint::from_bytes(data) {
        // anything the decoder accepts must re-encode stably
        let bytes = cp.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(bytes, again.to_bytes());
    }
});
