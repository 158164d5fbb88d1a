//! Measurement CSV parser: must never panic against a fixed reference
//! domain, and any measurement it accepts must round-trip bitwise.

#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use probin::domain::{build_interval_domain, DiscreteDomain, GammaEnd};
use probin::inverse::{parse_measurement_csv, write_measurement_csv};

static DOMAIN: OnceLock<DiscreteDomain> = OnceLock::new();

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let domain = DOMAIN.get_or_init(|| build_interval_domain(8, GammaEnd::Right).unwrap());
    let Ok(m) = parse_measurement_csv(text, domain, 2.0) else {
        return;
    };
    let out = write_measurement_csv(&m);
    let back = parse_measurement_csv(&out, domain, 2.0).expect("rewritten CSV failed to reparse");
    assert_eq!(m.lambda.to_bits(), back.lambda.to_bits(), "lambda drifted");
    assert_eq!(m.flux_trace, back.flux_trace, "flux trace drifted");
    assert_eq!(m.face_ids, back.face_ids, "face ids drifted");
});
