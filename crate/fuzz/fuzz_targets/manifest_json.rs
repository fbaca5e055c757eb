//! Arbitrary bytes into the split-manifest parser: it must reject malformed
//! input with an error, never a panic.

#![no_main]
use libfuzzer_sys::fuzz_target;
use organoseg::splits::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let _ = parse_manifest(data);
});
