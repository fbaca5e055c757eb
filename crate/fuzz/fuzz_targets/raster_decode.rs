//! Arbitrary bytes into the raster slice decoder (PNG/TIFF/... via the
//! `image` crate plus our grayscale conversion).

#![no_main]
use libfuzzer_sys::fuzz_target;
use organoseg::imaging::decode_slice_bytes;

fuzz_target!(|data: &[u8]| {
    let _ = decode_slice_bytes(data, "fuzz");
});
