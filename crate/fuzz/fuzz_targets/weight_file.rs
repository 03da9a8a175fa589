#![no_main]

use libfuzzer_sys::fuzz_target;
use sfkit::cli::RunConfig;
use sfkit::weights::{ModelWeights, WeightStore};

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = WeightStore::decode(data) {
        let shape = RunConfig { channels: 2, state: 2, ..Default::default() }.shape();
        let _ = ModelWeights::from_store(&shape, &store);
    }
});
