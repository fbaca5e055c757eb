//! Feed arbitrary bytes through the checkpoint decoder. The input is split
//! into meta / index / blob thirds by two length prefixes so the fuzzer can
//! vary each part independently; decoding must never panic or overflow.

#![no_main]
use libfuzzer_sys::fuzz_target;
use organoseg::model::decode_checkpoint_parts;

fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let a = u16::from_le_bytes([data[0], data[1]]) as usize;
    let b = u16::from_le_bytes([data[2], data[3]]) as usize;
    let rest = &data[4..];
    let a = a.min(rest.len());
    let b = b.min(rest.len() - a);
    let (meta, tail) = rest.split_at(a);
    let (index, blob) = tail.split_at(b);
    let _ = decode_checkpoint_parts(meta, index, blob);
});
