//! Arbitrary bytes into the run-config parser.

#![no_main]
use libfuzzer_sys::fuzz_target;
use organoseg::train::parse_run_config;

fuzz_target!(|data: &[u8]| {
    let _ = parse_run_config(data);
});
