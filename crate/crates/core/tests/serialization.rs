use proptest::prelude::*;

use agfusion::io::{decode_tensor, encode_tensor, Weights};
use agfusion::windowing::{merge, partition};
use agfusion::{BevMap, Modality, Tensor};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(f64::MAX),
        Just(f64::MIN),
        Just(5e-324),
    ]
}

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(finite(), n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn tensor_roundtrip_is_bit_exact(t in tensor()) {
        let bytes = encode_tensor(&t).unwrap();
        prop_assert_eq!(bytes.len(), 8 + 4 * t.rank() + 8 * t.len());
        let back = decode_tensor(&bytes).unwrap();
        prop_assert!(back.bit_eq(&t));
        prop_assert_eq!(encode_tensor(&back).unwrap(), bytes);
    }

    #[test]
    fn weights_roundtrip_is_bit_exact(ts in prop::collection::btree_map("[a-z.]{1,12}", tensor(), 0..6)) {
        let w = Weights::from_named(ts.clone()).unwrap();
        let bytes = w.encode().unwrap();
        let back = Weights::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), ts.len());
        for (name, t) in &ts {
            prop_assert!(back.get(name).unwrap().bit_eq(t));
        }
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_always_rejected(t in tensor(), cut in 1usize..8) {
        let bytes = encode_tensor(&t).unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(decode_tensor(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn partition_merge_roundtrip(wy in 1usize..4, wx in 1usize..4, h in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let shape = [wy * h, wx * h, c];
        let t = Tensor::from_fn(&shape, |i| agfusion::rng::normal_at(seed, i as u64));
        let f = BevMap::new(t, Modality::Lidar).unwrap();
        let ws = partition(&f, h).unwrap();
        prop_assert_eq!(ws.num_windows(), wy * wx);
        let back = merge(&ws, Modality::Lidar).unwrap();
        prop_assert!(back.tensor().bit_eq(f.tensor()));
    }
}

#[test]
fn zero_extent_tensors_are_not_written() {
    assert!(encode_tensor(&Tensor::zeros(&[0, 3])).is_err());
}
