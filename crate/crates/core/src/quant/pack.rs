//! Bit packing for the two sub-byte payload layouts.

/// Pack signed codes in `[-8, 7]` as offset-binary nibbles, low nibble first.
pub fn pack_nibbles(codes: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; codes.len().div_ceil(2)];
    for (i, &c) in codes.iter().enumerate() {
        let nib = ((c as i16 + 8) as u8) & 0x0F;
        out[i / 2] |= nib << ((i % 2) * 4);
    }
    out
}

pub fn unpack_nibbles(bytes: &[u8], n: usize) -> Vec<i8> {
    (0..n)
        .map(|i| {
            let nib = (bytes[i / 2] >> ((i % 2) * 4)) & 0x0F;
            nib as i8 - 8
        })
        .collect()
}

/// One bit per flag, LSB first within each byte.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nibble_order_is_low_first() {
        assert_eq!(pack_nibbles(&[-8, 7]), vec![0xF0]);
        assert_eq!(pack_nibbles(&[1, -1, 0]), vec![0x79, 0x08]);
    }

    #[test]
    fn bit_order_is_lsb_first() {
        assert_eq!(pack_bits(&[true, false, false, true, false, false, false, false, true]), vec![0x09, 0x01]);
    }

    proptest! {
        #[test]
        fn nibbles_round_trip(codes in proptest::collection::vec(-8i8..=7, 0..64)) {
            prop_assert_eq!(unpack_nibbles(&pack_nibbles(&codes), codes.len()), codes);
        }

        #[test]
        fn bits_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..80)) {
            prop_assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
        }
    }
}
