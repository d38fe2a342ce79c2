#![no_main]

use libfuzzer_sys::fuzz_target;
use spinereg::config::RegistrationConfig;
use spinereg::objective::Preset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = RegistrationConfig::parse(text);
    if let Ok(c) = RegistrationConfig::from_preset(Preset::PcRigidDice).overlay(text) {
        c.weights.validate().unwrap();
        c.settings.validate().unwrap();
    }
});
