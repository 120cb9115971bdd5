#![no_main]

use driftprompt::data::{load_partitioned_from, DatasetManifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let manifest = DatasetManifest {
        path: "unused.csv".into(),
        feature_columns: vec!["f0".into(), "f1".into()],
        target_columns: vec!["y".into()],
        domain_column: "t".into(),
        domain_bucket: "verbatim".into(),
        train_fraction: 0.9,
        target_domains: 1,
    };
    let _ = load_partitioned_from(&manifest, data);
});
