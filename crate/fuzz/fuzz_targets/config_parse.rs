#![no_main]

use hrsegnet::data::Manifest;
use hrsegnet::training::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let again = RunConfig::parse(&cfg.to_text()).expect("rendered config must parse");
        assert_eq!(again, cfg);
    }
    if let Ok(m) = Manifest::parse(text) {
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }
});
