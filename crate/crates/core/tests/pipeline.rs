use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stcl_core::homography::{estimate_homography, warp, Correspondence, Homography};
use stcl_core::image::{Provenance, RgbImage};
use stcl_core::raw::{crop_patches, photometric_align, ClipPair, PatchSpec, Site, WHITE_LEVEL};
use stcl_core::synth::{perturb_correspondences, residual_misalignment, Camera, RigSpec, SceneSpec, Sprite};

fn perspective_h() -> Homography {
    Homography::new([1.02, 0.03, 12.5, -0.015, 0.98, -7.25, 2e-5, -1.5e-5, 1.0]).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Vec<(f64, f64)> {
    (0..n).map(|_| (rng.gen_range(0.0..w), rng.gen_range(0.0..h))).collect()
}

#[test]
fn twenty_point_recovery_is_exact_without_noise() {
    let truth = perspective_h();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corr: Vec<Correspondence> = random_points(&mut rng, 20, 640.0, 480.0)
            .into_iter()
            .map(|p| (p, truth.apply(p.0, p.1)))
            .collect();
        let fit = estimate_homography(&corr).unwrap();
        for (a, b) in fit.homography.matrix().iter().zip(truth.matrix()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{} vs {}", a, b);
        }
        assert!(fit.rms < 1e-6);
    }
}

#[test]
fn point_noise_shows_up_as_reprojection_rms() {
    let truth = perspective_h();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = random_points(&mut rng, 200, 640.0, 480.0);
    let clean: Vec<Correspondence> = pts.iter().map(|&p| (truth.apply(p.0, p.1), p)).collect();
    for sigma in [0.5, 1.0, 2.0] {
        let noisy = perturb_correspondences(&clean, sigma, 17).unwrap();
        let fit = estimate_homography(&noisy).unwrap();
        // residual on the target side of a noisy source is close to sigma·√2
        let per_axis = fit.rms / 2f64.sqrt();
        assert!(per_axis > 0.7 * sigma && per_axis < 1.3 * sigma, "sigma {} rms {}", sigma, fit.rms);
    }
}

#[test]
fn too_few_or_collinear_points_are_rejected() {
    let line: Vec<Correspondence> = (0..6).map(|i| ((i as f64, 2.0 * i as f64), (i as f64, i as f64))).collect();
    assert!(estimate_homography(&line).is_err());
    assert!(estimate_homography(&line[..3]).is_err());
}

fn smooth(w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w, h, |c, x, y| {
        let (x, y) = (x as f64, y as f64);
        0.5 + 0.3 * (0.11 * x + 0.07 * y + c as f64).sin() * (0.05 * y - 0.03 * x).cos()
    })
}

#[test]
fn warp_round_trip_is_interpolation_limited() {
    let img = smooth(96, 80);
    let h = Homography::new([1.01, 0.02, 3.3, -0.01, 0.99, -2.6, 1e-4, 5e-5, 1.0]).unwrap();
    let there = warp(&img, &h, 96, 80).unwrap();
    let back = warp(&there.image, &h.inverse().unwrap(), 96, 80).unwrap();
    let (mut sq, mut n) = (0.0, 0usize);
    for y in 12..68 {
        for x in 12..84 {
            for c in 0..3 {
                let d = back.image.get(c, x, y) - img.get(c, x, y);
                sq += d * d;
                n += 1;
            }
        }
    }
    let rms = (sq / n as f64).sqrt();
    assert!(rms < 1e-2, "{}", rms);
}

#[test]
fn integer_translation_moves_pixels_exactly() {
    let img = smooth(40, 30);
    let out = warp(&img, &Homography::translation(5.0, -3.0), 40, 30).unwrap();
    for y in 0..27 {
        for x in 5..40 {
            for c in 0..3 {
                assert_eq!(out.image.get(c, x, y), img.get(c, x - 5, y + 3));
            }
            assert!(out.valid[y * 40 + x]);
        }
    }
    assert!(!out.valid[29 * 40]);
    let same = warp(&img, &Homography::identity(), 40, 30).unwrap();
    assert_eq!(same.image, img);
}

fn flat_scene(size: usize) -> SceneSpec {
    SceneSpec {
        contrast: 0.0,
        blocks: 0,
        ..SceneSpec::still(size, size, 3, 4)
    }
}

#[test]
fn moving_sprite_correlates_at_its_velocity() {
    let mut spec = flat_scene(128);
    spec.sprites.push(Sprite {
        seed: 99,
        size: (32, 24),
        velocity: (2.0, 0.0),
        start: (40.0, 50.0),
    });
    let cam = Camera::new(&spec, &RigSpec::ideal()).unwrap();
    let f0 = cam.scene().render(0).unwrap();
    let f1 = cam.scene().render(1).unwrap();
    let luma = |im: &RgbImage| -> Vec<f64> {
        let l = im.luma();
        let m = l.iter().sum::<f64>() / l.len() as f64;
        l.into_iter().map(|v| v - m).collect()
    };
    let (a, b) = (luma(&f0), luma(&f1));
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for dy in -4i64..=4 {
        for dx in -4i64..=4 {
            let mut s = 0.0;
            for y in 8..120i64 {
                for x in 8..120i64 {
                    s += b[(y * 128 + x) as usize] * a[((y - dy) * 128 + x - dx) as usize];
                }
            }
            if s > best.1 {
                best = ((dx, dy), s);
            }
        }
    }
    assert_eq!(best.0, (2, 0));
}

#[test]
fn configured_shift_is_the_mean_corner_displacement() {
    for shift in [10.0, 20.0, 40.0] {
        let rig = RigSpec {
            shift_range: (shift, shift),
            ..RigSpec::default()
        };
        let cam = Camera::new(&SceneSpec::still(256, 256, 1, 2), &rig).unwrap();
        let (w, h) = cam.hr_size();
        let d = cam.alignment().homography.mean_corner_displacement(w as f64, h as f64);
        assert!((d - shift).abs() < 1e-6, "{} vs {}", d, shift);
    }
}

#[test]
fn lr_green_inverts_to_downsampled_truth() {
    let spec = SceneSpec::random(256, 256, 2, 8);
    let rig = RigSpec::ideal();
    let cam = Camera::new(&spec, &rig).unwrap();
    let cap = cam.capture(1).unwrap();
    let lin = photometric_align(&cap.lr).unwrap();
    let (lw, lh) = cam.lr_size();
    let small = cam.scene().render(1).unwrap().resize_bicubic(lw, lh);
    let bound = 2.0 / f64::from(WHITE_LEVEL);
    for y in 0..lh {
        for x in 0..lw {
            if Site::at(x, y).rgb() == 1 {
                let want = small.get(1, x, y).clamp(0.0, 1.0);
                assert!((lin.get(x, y) - want).abs() <= bound);
            }
        }
    }
}

#[test]
fn capture_ranges() {
    let cam = Camera::new(&SceneSpec::random(256, 256, 1, 1), &RigSpec::default()).unwrap();
    let cap = cam.capture(0).unwrap();
    assert!(cap.lr.samples().iter().all(|&s| s >= 256));
    for v in cap.hr.data().iter().chain(cap.hr_aligned.data()) {
        let k = v * 255.0;
        assert!((k - k.round()).abs() < 1e-9 && (0.0..=255.0).contains(&k));
    }
    assert_eq!(cap.hr.provenance(), Provenance::Srgb8);
}

#[test]
fn ground_truth_alignment_undoes_the_misalignment() {
    let rig = RigSpec {
        shift_range: (25.0, 25.0),
        ..RigSpec::ideal()
    };
    let cam = Camera::new(&SceneSpec::random(512, 512, 1, 5), &rig).unwrap();
    let cap = cam.capture(0).unwrap();
    let (w, h) = cam.hr_size();
    let back = warp(&cap.hr, &cap.alignment.homography, w, h).unwrap();
    let (mut sq, mut n) = (0.0, 0usize);
    for y in 40..h - 40 {
        for x in 40..w - 40 {
            assert!(back.valid[y * w + x]);
            for c in 0..3 {
                let d = back.image.get(c, x, y) - cap.hr_aligned.get(c, x, y);
                sq += d * d;
                n += 1;
            }
        }
    }
    let rms = (sq / n as f64).sqrt();
    assert!(rms < 2.0 / 255.0, "{}", rms);
}

#[test]
fn flat_field_noise_matches_configuration() {
    let read = 24.0;
    for shot in [0.0, 0.5] {
        let rig = RigSpec {
            read_noise: read,
            shot_noise: shot,
            ..RigSpec::ideal()
        };
        let cam = Camera::new(&flat_scene(800), &rig).unwrap();
        let truth = cam.scene().render(0).unwrap();
        let lr = cam.capture(0).unwrap().lr;
        let black = f64::from(rig.black_level);
        let signal = truth.get(1, 400, 400) * (f64::from(WHITE_LEVEL) - black);
        let greens: Vec<f64> = (0..lr.height())
            .flat_map(|y| (0..lr.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| Site::at(x, y).rgb() == 1)
            .map(|(x, y)| f64::from(lr.get(x, y)))
            .collect();
        assert!(greens.len() >= 10_000);
        let n = greens.len() as f64;
        let mean = greens.iter().sum::<f64>() / n;
        let var = greens.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let want = read * read + shot * signal;
        assert!((var / want - 1.0).abs() < 0.1, "variance {} vs {}", var, want);
    }
}

fn synthetic_clip(seed: u64, noise: f64) -> (Camera, ClipPair) {
    let rig = RigSpec {
        shift_range: (15.0, 30.0),
        seed,
        ..RigSpec::default()
    };
    let cam = Camera::new(&SceneSpec::random(256, 256, 3, seed), &rig).unwrap();
    let caps: Vec<_> = (0..3).map(|t| cam.capture(t).unwrap()).collect();
    let corr = &caps[0].alignment.correspondences;
    let corr = if noise > 0.0 {
        perturb_correspondences(corr, noise, seed).unwrap()
    } else {
        corr.clone()
    };
    let est = estimate_homography(&corr).unwrap().homography;
    let pair = ClipPair {
        lr_frames: caps.iter().map(|c| c.lr.clone()).collect(),
        hr_frames: caps.iter().map(|c| c.hr.clone()).collect(),
        fps: 15.0,
        homography: est,
        scale_offset: 1.0,
        zoom_ratio: 4.0,
        valid: None,
    };
    (cam, pair)
}

#[test]
fn registration_leaves_subpixel_residuals() {
    for seed in 0..8 {
        for (noise, bound) in [(0.0, 1.0), (1.0, 2.0)] {
            let (cam, pair) = synthetic_clip(seed, noise);
            let (w, h) = cam.hr_size();
            let before = residual_misalignment(&cam.forward(), &Homography::identity(), w as f64, h as f64);
            let after = residual_misalignment(&cam.forward(), &pair.homography, w as f64, h as f64);
            assert!(before >= 10.0, "seed {} shift {}", seed, before);
            assert!(after < bound, "seed {} noise {} residual {}", seed, noise, after);
        }
    }
}

#[test]
fn patch_windows_stay_in_bounds() {
    let (cam, pair) = synthetic_clip(3, 1.0);
    let aligned = pair.aligned(&pair.homography, 4).unwrap();
    let rect = aligned.valid.expect("a shifted frame leaves an invalid border");
    let win = cam.fov();
    for seed in 0..100 {
        let spec = PatchSpec {
            lr_patch: 8,
            zoom: 4,
            radius: 1,
            count: 4,
            seed,
        };
        for s in crop_patches(&aligned, &spec).unwrap() {
            let (ox, oy) = s.lr_origin;
            assert!(ox % 2 == 0 && oy % 2 == 0);
            assert!(ox + 8 <= win.width && oy + 8 <= win.height);
            assert!(ox * 4 >= rect.x0 && oy * 4 >= rect.y0);
            assert!(ox * 4 + 32 <= rect.x1 && oy * 4 + 32 <= rect.y1);
            assert_eq!(s.hr.len(), 3);
            assert!(s.hr.iter().all(|p| p.size() == (32, 32)));
            assert_eq!(s.lr.width(), 8);
        }
        assert_eq!(crop_patches(&aligned, &spec).unwrap(), crop_patches(&aligned, &spec).unwrap());
    }
}
