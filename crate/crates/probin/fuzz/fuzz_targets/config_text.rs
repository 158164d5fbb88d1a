//! Run-config parser: must never panic, and any config it accepts must
//! survive an emit/parse round trip unchanged.
//!
//! Inputs with absolute-path values are skipped so the fuzzer never touches
//! the real filesystem; relative references still exercise the resolution
//! code because they fail the existence check under the fake base directory.

#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use probin::cli::{emit_config, parse_config_text, CliOverrides};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for line in text.lines() {
        if let Some((_, value)) = line.split_once('=') {
            if value.trim().starts_with('/') {
                return;
            }
        }
    }
    let base = Path::new("/nonexistent-fuzz-base");
    let over = CliOverrides::default();
    let Ok(config) = parse_config_text(text, base, &over) else {
        return;
    };
    let echo = emit_config(&config);
    let back = parse_config_text(&echo, base, &over).expect("echoed config failed to reparse");
    assert_eq!(config, back, "emit/parse round trip changed the config");
});
