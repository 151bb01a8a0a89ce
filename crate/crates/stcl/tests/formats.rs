use proptest::prelude::*;

use stcl::checkpoint::Container;
use stcl::featio::{decode_coords, encode_coords};
use stcl::kv::{fmt_f64, KvMap};
use stcl::pnm::{decode_pgm16, decode_ppm, encode_pgm16, encode_ppm};
use stcl::stnt;
use stcl_core::image::RgbImage;
use stcl_core::tensor::Tensor;

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), n)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn stnt_round_trips_bit_exactly(t in tensor()) {
        let bytes = stnt::encode(&t);
        prop_assert_eq!(bytes.len(), stnt::header_len(t.shape().len()) + 8 * t.numel());
        let back = stnt::decode(&bytes).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert!(stnt::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn container_round_trips(ts in prop::collection::vec(tensor(), 0..4), seed in any::<u32>()) {
        let mut header = KvMap::new();
        header.set("seed", seed);
        header.set("name", "run");
        let c = Container {
            header,
            tensors: ts.into_iter().enumerate().map(|(i, t)| (format!("layer{}.w", i), t)).collect(),
        };
        prop_assert_eq!(Container::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn kv_text_round_trips(entries in prop::collection::btree_map("[a-z][a-z0-9_.]{0,11}", "[A-Za-z0-9:,._-]{0,16}", 0..8)) {
        let mut map = KvMap::new();
        for (k, v) in &entries {
            map.set(k, v);
        }
        let back = KvMap::from_text(&map.to_text()).unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn float_text_is_exact(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn ppm_round_trips_8bit_images(w in 1usize..9, h in 1usize..9, seed in any::<u8>()) {
        let bytes: Vec<u8> = (0..3 * w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = RgbImage::from_rgb8(w, h, &bytes).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        prop_assert_eq!(back.to_rgb8(), bytes);
    }

    #[test]
    fn pgm16_round_trips(w in 1usize..9, h in 1usize..9, samples in prop::collection::vec(any::<u16>(), 64)) {
        let s = &samples[..w * h];
        prop_assert_eq!(decode_pgm16(&encode_pgm16(w, h, s)).unwrap(), (w, h, s.to_vec()));
    }

    #[test]
    fn coordinate_tables_round_trip(coords in prop::collection::vec((any::<u32>(), any::<u32>()), 0..20)) {
        let bytes = encode_coords(&coords);
        prop_assert_eq!(bytes.len(), 4 + 8 * coords.len());
        prop_assert_eq!(decode_coords(&bytes).unwrap(), coords);
    }
}
