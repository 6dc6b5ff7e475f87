use proptest::prelude::*;
use sateco::metrics::*;
use sateco::{RngState, Tensor};

fn rand_clip(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(shape, 0.0, 1.0, &mut RngState::new(seed))
}

#[test]
fn psnr_constant_offset_is_twenty_db() {
    let x = Tensor::<f32>::full(&[2, 8, 8, 3], 0.25);
    let y = Tensor::<f32>::full(&[2, 8, 8, 3], 0.25).map(|v| v + 0.1);
    let r = psnr(&x, &y, 1.0).unwrap();
    // f32 storage of 0.35 - 0.25 leaves a ~1e-7 relative error in the offset
    assert!(r.per_frame.iter().all(|v| (v - 20.0).abs() < 1e-5), "{:?}", r.per_frame);
    assert_eq!(format!("{:.3}", r.mean), "20.000");
}

#[test]
fn psnr_of_identical_clips_is_capped() {
    let x = rand_clip(&[3, 8, 8, 3], 1);
    assert_eq!(psnr_frame(x.data(), x.data(), 1.0), f64::INFINITY);
    let r = psnr(&x, &x, 1.0).unwrap();
    assert_eq!(r.mean, PSNR_CAP_DB);
    assert!(psnr(&x, &rand_clip(&[3, 8, 4, 3], 2), 1.0).is_err());
}

#[test]
fn psnr_matches_direct_recomputation() {
    let (x, y) = (rand_clip(&[2, 9, 7, 3], 3), rand_clip(&[2, 9, 7, 3], 4));
    let r = psnr(&x, &y, 1.0).unwrap();
    for f in 0..2 {
        let (a, b) = (x.frame(f).unwrap(), y.frame(f).unwrap());
        let mut se = 0.0;
        for i in 0..a.len() {
            se += (a.data()[i] as f64 - b.data()[i] as f64).powi(2);
        }
        let direct = -10.0 * (se / a.len() as f64).log10();
        assert!((r.per_frame[f] - direct).abs() < 1e-9);
    }
}

// scikit-image structural_similarity(gaussian_weights=True, sigma=1.5,
// use_sample_covariance=False, data_range=1.0) on float64 maps
#[test]
fn ssim_checkerboard_matches_reference() {
    let board = |cell: usize, lo: f32, hi: f32| {
        Tensor::<f32>::from_fn(&[1, 16, 16, 3], |i| {
            let (y, x) = ((i / 3) / 16, (i / 3) % 16);
            if (y / cell + x / cell).is_multiple_of(2) {
                hi
            } else {
                lo
            }
        })
    };
    let a = board(4, 0.0, 1.0);
    let r = ssim(&a, &a.map(|v| 0.9 * v)).unwrap();
    assert!((r.mean - 0.988_994_084_996_374_3).abs() < 1e-4, "{}", r.mean);
    let b = board(2, 0.1, 0.9);
    let r = ssim(&b, &b.map(|v| 0.9 * v)).unwrap();
    assert!((r.mean - 0.988_999_036_651_793).abs() < 1e-4, "{}", r.mean);
}

#[test]
fn ssim_identity_and_non_identity() {
    let x = rand_clip(&[2, 16, 16, 3], 5);
    assert!(ssim(&x, &x).unwrap().per_frame.iter().all(|&v| v == 1.0));
    let inv = x.map(|v| 1.0 - v);
    let r = ssim(&x, &inv).unwrap();
    assert!(r.per_frame.iter().all(|&v| (-1.0..1.0).contains(&v)));
    assert!(ssim(&rand_clip(&[1, 10, 16, 3], 1), &rand_clip(&[1, 10, 16, 3], 2)).is_err());
}

#[test]
fn temporal_consistency_cases() {
    let x = rand_clip(&[4, 8, 8, 3], 6);
    assert_eq!(temporal_consistency(&x, &x).unwrap().mean, 0.0);
    let still = |seed| {
        let f = rand_clip(&[1, 8, 8, 3], seed);
        Tensor::stack_frames(&[f.clone(), f.clone(), f]).unwrap()
    };
    let (a, b) = (still(7), still(8));
    assert_eq!(temporal_consistency(&a, &b).unwrap().mean, 0.0);
    assert!(temporal_consistency(&x.frame(0).unwrap(), &x.frame(0).unwrap()).is_err());
}

// E|n1 - n2| = 2 a / sqrt(pi) for independent N(0, a^2) fields
#[test]
fn temporal_consistency_of_independent_noise() {
    let a = 0.05;
    let x = Tensor::<f32>::full(&[6, 32, 32, 3], 0.5);
    let noise = Tensor::<f32>::randn(x.shape(), a, &mut RngState::new(9));
    let y = x.add(&noise).unwrap();
    let score = temporal_consistency(&x, &y).unwrap().mean;
    let want = 2.0 * a / std::f64::consts::PI.sqrt();
    assert!((score / want - 1.0).abs() < 0.05, "{score} vs {want}");
}

#[test]
fn temporal_consistency_is_order_sensitive() {
    let x = rand_clip(&[4, 8, 8, 3], 10);
    let y = x.add(&Tensor::randn(x.shape(), 0.1, &mut RngState::new(11))).unwrap();
    let order = [2, 0, 3, 1];
    let p = temporal_consistency(&x.permute_frames(&order).unwrap(), &y.permute_frames(&order).unwrap()).unwrap().mean;
    assert!((p - temporal_consistency(&x, &y).unwrap().mean).abs() > 1e-6);
}

#[test]
fn report_lines_roundtrip() {
    let r = psnr(&rand_clip(&[3, 8, 8, 3], 1), &rand_clip(&[3, 8, 8, 3], 2), 1.0).unwrap().with_ids("clip_0001", "D");
    let back = MetricReport::from_line(&r.to_line()).unwrap();
    assert_eq!(back, r);
    assert!(MetricReport::from_line("metric=psnr mean=1").is_err());
    assert_eq!(Metric::parse_list("psnr,ssim,tc").unwrap(), Metric::ALL.to_vec());
    assert!(Metric::parse("lpips").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn clip_mean_is_the_mean_of_frames(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (x, y) = (rand_clip(&[3, 12, 12, 3], s1), rand_clip(&[3, 12, 12, 3], s2));
        for m in Metric::ALL {
            let r = m.evaluate(&x, &y).unwrap();
            let mean = r.per_frame.iter().sum::<f64>() / r.per_frame.len() as f64;
            prop_assert!((r.mean - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (x, y) = (rand_clip(&[2, 12, 12, 3], s1), rand_clip(&[2, 12, 12, 3], s2));
        prop_assert!((psnr(&x, &y, 1.0).unwrap().mean - psnr(&y, &x, 1.0).unwrap().mean).abs() < 1e-9);
        prop_assert!((ssim(&x, &y).unwrap().mean - ssim(&y, &x).unwrap().mean).abs() < 1e-9);
    }

    #[test]
    fn frame_metrics_ignore_joint_permutation(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (x, y) = (rand_clip(&[3, 12, 12, 3], s1), rand_clip(&[3, 12, 12, 3], s2));
        let order = [2, 0, 1];
        let (xp, yp) = (x.permute_frames(&order).unwrap(), y.permute_frames(&order).unwrap());
        prop_assert!((psnr(&x, &y, 1.0).unwrap().mean - psnr(&xp, &yp, 1.0).unwrap().mean).abs() < 1e-9);
        prop_assert!((ssim(&x, &y).unwrap().mean - ssim(&xp, &yp).unwrap().mean).abs() < 1e-9);
    }
}
