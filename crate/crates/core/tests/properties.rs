use std::collections::BTreeMap;

use proptest::prelude::*;

use stcl_core::features::{Extractor, ExtractorSpec, FeatureGrid, Group, LayerGrid, LayerSpec};
use stcl_core::homography::Homography;
use stcl_core::image::{Provenance, RgbImage};
use stcl_core::loss::{self, StclConfig, StclInputs};
use stcl_core::metrics::{psnr, ssim};
use stcl_core::raw::{pack_bayer, photometric_align, unpack_bayer, BayerFrame, LinearMosaic};
use stcl_core::synth::split_counts;
use stcl_core::{Tape, Tensor};

fn unit_rows(raw: &[f64], dim: usize) -> Vec<f64> {
    raw.chunks(dim)
        .flat_map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            r.iter().map(move |v| v / n).collect::<Vec<_>>()
        })
        .collect()
}

fn grid_strategy(group: Group) -> impl Strategy<Value = FeatureGrid> {
    (1usize..5, 1usize..5, 2usize..6).prop_flat_map(move |(w, h, dim)| {
        prop::collection::vec(0.05f64..1.0, w * h * dim).prop_map(move |raw| {
            let coords = (0..h).flat_map(|y| (0..w).map(move |x| (x as u32, y as u32))).collect();
            let vectors = Tensor::new(vec![w * h, dim], unit_rows(&raw, dim)).unwrap();
            FeatureGrid {
                group,
                source_size: (4 * h, 4 * w),
                layers: vec![LayerGrid::new(coords, vectors).unwrap()],
            }
        })
    })
}

fn same_shape(g: &FeatureGrid, seed: u64) -> FeatureGrid {
    let mut out = g.clone();
    let mut s = seed | 1;
    for l in &mut out.layers {
        let dim = l.dim();
        let raw: Vec<f64> = (0..l.vectors.numel())
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                0.05 + (s % 1000) as f64 / 1000.0
            })
            .collect();
        l.vectors = Tensor::new(l.vectors.shape().to_vec(), unit_rows(&raw, dim)).unwrap();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_identities(l in grid_strategy(Group::Phi1), h in grid_strategy(Group::Phi2), seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let lp = same_shape(&l, seed);
        let sr = same_shape(&h, seed ^ 0xabc);
        let mut neighbours = BTreeMap::new();
        let mut tape = Tape::new();
        for t in [-1, 1] {
            neighbours.insert(t, same_shape(&h, seed.wrapping_add(t as u64)).to_tape(&mut tape, false));
        }
        let cfg = StclConfig { lambda, ..StclConfig::default() };
        let (tl, tlp, th, ts) = (l.to_tape(&mut tape, false), lp.to_tape(&mut tape, false), h.to_tape(&mut tape, false), sr.to_tape(&mut tape, false));
        let inputs = StclInputs { lr: &tl, lr_prime: &tlp, h0: &th, sr: &ts, neighbors: &neighbours };
        let v = loss::stcl_total(&mut tape, &inputs, &cfg).unwrap().values(&tape);
        prop_assert!((v.total - (v.loss_a + v.loss_r + lambda * v.loss_t)).abs() < 1e-12);
        let by_hand: f64 = [-1, 1].iter().map(|t| {
            let c = loss::cx(&mut tape, &neighbours[t], &ts, &cfg).unwrap();
            0.1 * tape.value(c).data()[0]
        }).sum();
        prop_assert!((v.loss_t - by_hand).abs() < 1e-12);
        prop_assert!(v.loss_a >= 0.0 && v.loss_r >= 0.0 && v.loss_t >= 0.0);

        let mut tape = Tape::new();
        let (tl, th) = (l.to_tape(&mut tape, false), h.to_tape(&mut tape, false));
        let mut same = BTreeMap::new();
        same.insert(-1, th.clone());
        same.insert(1, th.clone());
        let inputs = StclInputs { lr: &tl, lr_prime: &tl, h0: &th, sr: &th, neighbors: &same };
        let v = loss::stcl_total(&mut tape, &inputs, &cfg).unwrap().values(&tape);
        prop_assert_eq!(v.total, 0.0);
    }

    #[test]
    fn kernel_is_bounded_and_peaks_at_mu(ax in 0u32..30, ay in 0u32..30, bx in 0u32..30, by in 0u32..30) {
        let k = loss::spatial_kernel(&[(ax, ay)], &[(bx, by), (ax, ay)], 0.0, 2.0).unwrap();
        prop_assert!(k.data()[0] > 0.0 || (ax, ay) != (bx, by));
        prop_assert!(k.data()[0] <= 1.0);
        prop_assert_eq!(k.data()[1], 1.0);
    }

    #[test]
    fn alignment_is_monotone(black in 0u16..4000, rr in 0.5f64..3.0, rb in 0.5f64..3.0, a in 0u16..=u16::MAX, b in 0u16..=u16::MAX) {
        let (lo, hi) = (a.min(b), a.max(b));
        for site in 0..4 {
            let mut s = vec![black; 4];
            s[site] = lo;
            let f_lo = photometric_align(&BayerFrame::new(2, 2, s.clone(), black, (rr, rb)).unwrap()).unwrap();
            s[site] = hi;
            let f_hi = photometric_align(&BayerFrame::new(2, 2, s, black, (rr, rb)).unwrap()).unwrap();
            prop_assert!(f_lo.data[site] <= f_hi.data[site]);
            prop_assert!(f_lo.data[site] >= 0.0);
        }
    }

    #[test]
    fn pack_unpack_is_a_bijection(hw in 1usize..6, hh in 1usize..6, seed in any::<u64>()) {
        let (w, h) = (2 * hw, 2 * hh);
        let data: Vec<f64> = (0..w * h).map(|i| ((i as u64).wrapping_mul(seed | 1) % 997) as f64 / 997.0).collect();
        let m = LinearMosaic { width: w, height: h, data };
        let back = unpack_bayer(&pack_bayer(&m).unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn homography_inverse_round_trips(a in -0.1f64..0.1, b in -0.1f64..0.1, tx in -50.0f64..50.0, ty in -50.0f64..50.0, p in -1e-4f64..1e-4, x in 0.0f64..500.0, y in 0.0f64..500.0) {
        let h = Homography::new([1.0 + a, b, tx, -b, 1.0 - a, ty, p, -p, 1.0]).unwrap();
        let (u, v) = h.apply(x, y);
        let (x2, y2) = h.inverse().unwrap().apply(u, v);
        prop_assert!((x2 - x).abs() < 1e-8 && (y2 - y).abs() < 1e-8);
    }

    #[test]
    fn metric_symmetry(seed in any::<u64>()) {
        let f = |k: u64| RgbImage::from_fn(16, 12, move |c, x, y| (((x * 7 + y * 13 + c * 5) as u64).wrapping_mul(k | 1) % 256) as f64 / 255.0);
        let (a, b) = (f(seed), f(seed.rotate_left(17)));
        prop_assert_eq!(psnr(&a, &b, 255.0).unwrap(), psnr(&b, &a, 255.0).unwrap());
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn split_counts_partition(n in 0usize..500, r in (0u32..100, 0u32..100, 1u32..100)) {
        let (tr, va, te) = split_counts(n, r).unwrap();
        prop_assert_eq!(tr + va + te, n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn extracted_vectors_are_unit(seed in any::<u64>(), side in 16usize..28) {
        let spec = ExtractorSpec {
            phi2: vec![LayerSpec::new(6, 3, 1), LayerSpec::new(8, 3, 2)],
            phi1: vec![LayerSpec::new(8, 3, 2)],
            ..ExtractorSpec::default()
        };
        let ex = Extractor::build(spec).unwrap();
        let img = RgbImage::new(side, side, (0..3 * side * side).map(|i| (((i as u64) ^ seed).wrapping_mul(0x9e37_79b9) % 1000) as f64 / 1000.0).collect(), Provenance::Synthetic).unwrap();
        for group in [Group::Phi1, Group::Phi2] {
            let g = ex.extract(&img, group).unwrap();
            let sizes = ex.layer_sizes(side, side, group);
            prop_assert_eq!(g.len(), sizes.iter().map(|(h, w)| h * w).sum::<usize>());
            for l in &g.layers {
                for i in 0..l.len() {
                    let n: f64 = l.vector(i).iter().map(|v| v * v).sum();
                    prop_assert!((n.sqrt() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
