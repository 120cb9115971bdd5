#![no_main]

use driftprompt::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = ExperimentConfig::from_toml_str(text) {
            // accepted configs must survive validation without panicking
            let _ = config.validate();
        }
    }
});
