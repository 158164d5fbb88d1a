//! Mesh text parser: must never panic, and any mesh it accepts must survive
//! a write/parse round trip unchanged.

#![no_main]

use libfuzzer_sys::fuzz_target;
use probin::domain::mesh_text::{parse_mesh_text, write_mesh_text};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(mesh) = parse_mesh_text(text) else {
        return;
    };
    // parsed meshes carry no runtime-only regions, so they always serialize
    let out = write_mesh_text(&mesh).expect("accepted mesh failed to serialize");
    let back = parse_mesh_text(&out).expect("serialized mesh failed to reparse");
    assert_eq!(mesh, back, "write/parse round trip changed the mesh");
});
