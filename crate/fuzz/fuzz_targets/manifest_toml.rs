#![no_main]

use driftprompt::data::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(manifest) = DatasetManifest::from_toml_str(text) {
            let _ = manifest.validate();
        }
    }
});
