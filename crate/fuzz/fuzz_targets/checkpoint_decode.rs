#![no_main]

use hrsegnet::model::{Checkpoint, Model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = Checkpoint::decode(data) else { return };
    // Anything that decodes must re-encode to the same bytes.
    assert_eq!(ck.encode(), data);
    if let Ok(cfg) = ck.model_config() {
        // Keep materialized models small.
        if cfg.base <= 8 && cfg.num_blocks <= 3 && cfg.layers_per_block <= 3 {
            let _ = ck.to_model::<f32>(None).map(|m: Model<f32>| m.config().clone());
        }
    }
});
