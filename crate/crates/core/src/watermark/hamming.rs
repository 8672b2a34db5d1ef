//! Systematic Hamming(7,4): codeword `d1 d2 d3 d4 p1 p2 p3` with
//! `p1 = d1⊕d2⊕d4`, `p2 = d1⊕d3⊕d4`, `p3 = d2⊕d3⊕d4`.

use crate::error::{Error, Result};

/// Syndrome `(s1, s2, s3)` packed as `s1·4 + s2·2 + s3`, mapped to the
/// codeword position it flags.
const SYNDROME_POSITION: [Option<usize>; 8] = [
    None,    // 000
    Some(6), // 001: p3
    Some(5), // 010: p2
    Some(2), // 011: d3
    Some(4), // 100: p1
    Some(1), // 101: d2
    Some(0), // 110: d1
    Some(3), // 111: d4
];

fn check_bits(bits: &[u8], len: usize) -> Result<()> {
    if bits.len() != len {
        return Err(Error::LengthError { len: bits.len(), reason: "wrong block length" });
    }
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::LengthError { len: bits.len(), reason: "bits must be 0 or 1" });
    }
    Ok(())
}

pub fn hamming74_encode(data: &[u8]) -> Result<[u8; 7]> {
    check_bits(data, 4)?;
    let [d1, d2, d3, d4] = [data[0], data[1], data[2], data[3]];
    Ok([d1, d2, d3, d4, d1 ^ d2 ^ d4, d1 ^ d3 ^ d4, d2 ^ d3 ^ d4])
}

/// Decodes one block, correcting at most one flipped bit. The flag reports
/// whether a correction was applied.
pub fn hamming74_decode(code: &[u8]) -> Result<([u8; 4], bool)> {
    check_bits(code, 7)?;
    let mut c = [0u8; 7];
    c.copy_from_slice(code);
    let s1 = c[4] ^ c[0] ^ c[1] ^ c[3];
    let s2 = c[5] ^ c[0] ^ c[2] ^ c[3];
    let s3 = c[6] ^ c[1] ^ c[2] ^ c[3];
    let syndrome = usize::from(s1 << 2 | s2 << 1 | s3);
    let corrected = match SYNDROME_POSITION[syndrome] {
        Some(pos) => {
            c[pos] ^= 1;
            true
        }
        None => false,
    };
    Ok(([c[0], c[1], c[2], c[3]], corrected))
}
