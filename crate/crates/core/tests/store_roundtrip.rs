//! Container round-trip fuzzing: arbitrary maps must survive a trip
//! through bytes and through a file with every bit intact, and damaged
//! files must be rejected rather than half-loaded.

use mmrg_core::tensor_store::{
    bitwise_equal, from_bytes, load_checkpoint, save_checkpoint, to_bytes, Tensor, TensorMap,
    STAGES,
};
use proptest::prelude::*;

/// Finite f32 values biased toward the awkward corners: signed zeros,
/// subnormals, huge and tiny magnitudes.
fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![
        5 => -1e6f32..1e6f32,
        1 => Just(0.0f32),
        1 => Just(-0.0f32),
        1 => Just(f32::MIN_POSITIVE / 2.0),
        1 => Just(-f32::MIN_POSITIVE / 4.0),
        1 => Just(f32::MAX),
        1 => Just(f32::MIN),
        1 => Just(1e-40f32),
    ]
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..4)
        .prop_flat_map(|shape| {
            let numel = shape.iter().product::<usize>();
            (
                Just(shape),
                prop::collection::vec(finite_f32(), numel..=numel),
            )
        })
        .prop_map(|(shape, data)| Tensor::new(shape, data).unwrap())
}

fn name_strategy() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_.]{0,14}"
}

fn map_strategy() -> impl Strategy<Value = TensorMap> {
    let stage = prop::sample::select(STAGES.to_vec());
    let entries = prop::collection::btree_map(name_strategy(), tensor_strategy(), 0..6);
    let meta = prop::collection::btree_map("[a-z]{1,8}", "[ -~]{0,12}", 0..3);
    (stage, entries, meta).prop_map(|(stage, entries, meta)| {
        let mut m = TensorMap::new(stage).unwrap();
        for (name, t) in entries {
            m.insert(&name, t).unwrap();
        }
        for (k, v) in meta {
            if k != "stage" {
                m.set_meta(&k, &v).unwrap();
            }
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hundred_random_maps_round_trip_bit_exact(map in map_strategy()) {
        let bytes = to_bytes(&map).unwrap();
        let back = from_bytes(&bytes).unwrap();
        prop_assert!(bitwise_equal(&map, &back));

        // Same trip through the filesystem.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mmrg");
        save_checkpoint(&map, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        prop_assert!(bitwise_equal(&map, &loaded));

        // Writing is a pure function of the map.
        prop_assert_eq!(to_bytes(&map).unwrap(), bytes);
    }

    #[test]
    fn truncation_never_yields_a_map(map in map_strategy(), frac in 0.0f64..1.0) {
        let bytes = to_bytes(&map).unwrap();
        let cut = ((bytes.len() - 1) as f64 * frac) as usize;
        prop_assert!(from_bytes(&bytes[..cut]).is_err());
    }
}

fn sample_map() -> TensorMap {
    let mut m = TensorMap::new("sft").unwrap();
    m.insert("w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.0, 4.0]).unwrap())
        .unwrap();
    m.insert("b", Tensor::new(vec![2], vec![-0.0, 3.25]).unwrap())
        .unwrap();
    m.set_meta("note", "fixture").unwrap();
    m
}

#[test]
fn corrupted_magic_is_rejected() {
    let mut bytes = to_bytes(&sample_map()).unwrap();
    bytes[0] ^= 0xFF;
    let err = from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("malformed"), "got: {err}");
}

#[test]
fn corrupted_file_on_disk_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.mmrg");
    let bytes = to_bytes(&sample_map()).unwrap();

    // Truncate mid-payload.
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_checkpoint(&path).is_err());

    // Force the last four payload bytes (a float) to a NaN pattern.
    let mut evil = bytes.clone();
    let n = evil.len();
    evil[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&path, &evil).unwrap();
    assert!(load_checkpoint(&path).is_err());

    // Empty file.
    std::fs::write(&path, b"").unwrap();
    assert!(load_checkpoint(&path).is_err());

    // Missing file reports the path.
    let missing = dir.path().join("nope.mmrg");
    let err = load_checkpoint(&missing).unwrap_err();
    assert!(err.to_string().contains("nope.mmrg"), "got: {err}");
}
