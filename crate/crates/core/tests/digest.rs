mod common;

use common::md5_ref::{hex, md5};
use hydroguard::resilience::{digest, digest_bytes};
use hydroguard::rng::XorShift64Star;
use hydroguard::solver::{init_sod, State};
use proptest::prelude::*;

#[test]
fn published_vectors() {
    let vectors: [(&[u8], &str); 4] = [
        (b"", "d41d8cd98f00b204e9800998ecf8427e"),
        (b"abc", "900150983cd24fb0d6963f7d28e17f72"),
        (b"message digest", "f96b697d7cb7938d525a2f31aaf161d0"),
        (
            b"12345678901234567890123456789012345678901234567890123456789012345678901234567890",
            "57edf4a22be3c955ac49da2e2107b67a",
        ),
    ];
    for (input, want) in vectors {
        assert_eq!(hex(&md5(input)), want);
        assert_eq!(digest_bytes(input).to_hex(), want);
    }
}

#[test]
fn state_digest_matches_reference_over_dump() {
    let mut rng = XorShift64Star::new(3);
    for n in [2usize, 4, 8, 30, 200, 1000] {
        let mut s = init_sod(n, 1.4).unwrap();
        for v in s.rho.iter_mut().chain(s.mom.iter_mut()).chain(s.ene.iter_mut()) {
            *v += (rng.next_u64() >> 40) as f64 * 1e-9;
        }
        assert_eq!(digest(&s).0, md5(&s.to_dump()), "n = {n}");
    }
}

fn flip(s: &mut State, field: usize, cell: usize, bit: u32) {
    let arr = match field {
        0 => &mut s.rho,
        1 => &mut s.mom,
        _ => &mut s.ene,
    };
    arr[cell] = f64::from_bits(arr[cell].to_bits() ^ (1 << bit));
}

#[test]
fn every_single_bit_flip_of_eight_cells_changes_digest() {
    let base_state = init_sod(8, 1.4).unwrap();
    let base = digest(&base_state);
    let mut seen = std::collections::HashSet::new();
    for field in 0..3 {
        for cell in 0..8 {
            for bit in 0..64 {
                let mut s = base_state.clone();
                flip(&mut s, field, cell, bit);
                let d = digest(&s);
                assert_ne!(d, base, "field {field} cell {cell} bit {bit}");
                seen.insert(d);
            }
        }
    }
    assert_eq!(seen.len(), 1536);
}

proptest! {
    #[test]
    fn random_small_states_detect_any_flip(
        cells in proptest::collection::vec(any::<[u64; 3]>(), 1..=8),
        pick in any::<(usize, usize, u32)>(),
    ) {
        let s = State {
            dx: 1.0 / cells.len() as f64,
            rho: cells.iter().map(|c| f64::from_bits(c[0])).collect(),
            mom: cells.iter().map(|c| f64::from_bits(c[1])).collect(),
            ene: cells.iter().map(|c| f64::from_bits(c[2])).collect(),
            gamma: 1.4,
            time: 0.0,
            iteration: 0,
        };
        let mut t = s.clone();
        flip(&mut t, pick.0 % 3, pick.1 % cells.len(), pick.2 % 64);
        prop_assert_ne!(digest(&s), digest(&t));
        prop_assert_eq!(digest(&s).0, md5(&s.to_dump()));
    }
}
