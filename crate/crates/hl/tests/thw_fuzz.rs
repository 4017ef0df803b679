use std::collections::BTreeMap;

use highlighter::thw::ThwFile;
use highlighter::FormatError;
use highlighter_core::numerics::Tensor2D;
use proptest::prelude::*;

fn sample() -> Vec<u8> {
    let mut tensors = BTreeMap::new();
    tensors.insert("a".to_string(), Tensor2D::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    tensors.insert("b".to_string(), Tensor2D::new(1, 2, vec![-1.0, 0.5]).unwrap());
    ThwFile { tensors, metadata: Some(serde_json::json!({ "note": "x" })) }.to_bytes()
}

#[test]
fn header_length_past_end_is_truncation() {
    let mut bytes = sample();
    bytes[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(ThwFile::from_bytes(&bytes), Err(FormatError::Truncated(_))));
}

#[test]
fn garbage_header_is_rejected() {
    let mut bytes = sample();
    bytes[8] = b'[';
    assert!(matches!(ThwFile::from_bytes(&bytes), Err(FormatError::Header(_))));
    assert!(matches!(ThwFile::from_bytes(b"NOPE\0\0\0\0"), Err(FormatError::BadMagic)));
}

proptest! {
    #[test]
    fn corrupt_bytes_never_panic(flips in proptest::collection::vec((any::<usize>(), any::<u8>()), 1..8)) {
        let mut bytes = sample();
        for (at, v) in flips {
            let i = at % bytes.len();
            bytes[i] = v;
        }
        let _ = ThwFile::from_bytes(&bytes);
    }

    #[test]
    fn truncation_is_an_error(cut in 0usize..200) {
        let bytes = sample();
        prop_assume!(cut < bytes.len());
        prop_assert!(ThwFile::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = highlighter_core::rng::Xoshiro256StarStar::seed_from_u64(seed);
        let t = Tensor2D::new(rows, cols, (0..rows * cols).map(|_| rng.next_f32_symmetric()).collect()).unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert("t".to_string(), t);
        let f = ThwFile { tensors, metadata: None };
        prop_assert_eq!(ThwFile::from_bytes(&f.to_bytes()).unwrap(), f);
    }
}
