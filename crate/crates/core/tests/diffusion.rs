use proptest::prelude::*;
use sateco::diffusion::*;
use sateco::{Error, Graph, ParamStore, RngState, Tensor};

fn sched() -> NoiseSchedule {
    NoiseSchedule::new(SchedulerConfig::default()).unwrap()
}

#[test]
fn beta_endpoints_are_exact() {
    let s = sched();
    assert_eq!(s.beta(1), 0.00085);
    assert_eq!(s.beta(1000), 0.0120);
    assert_eq!(s.alpha(1), 0.99915);
    assert_eq!(s.alpha_bar(1), 1.0 - 0.00085);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert_eq!(s.betas().len(), 1000);
}

// float64 cumulative products of numpy.linspace betas
#[test]
fn alpha_bar_matches_cumulative_product_oracle() {
    let s = sched();
    assert!((s.alpha_bar(1000) - 0.001_578_962_930_551_441_6).abs() < 1e-6);
    assert!((s.alpha_bar(500) - 0.161_812_145_913_401_8).abs() < 1e-6);
    let sq = NoiseSchedule::new(SchedulerConfig { sqrt_space: true, ..Default::default() }).unwrap();
    assert!((sq.alpha_bar(1000) - 0.004_660_098_513_077_238).abs() < 1e-6);
    assert_eq!(sq.beta(1), 0.00085);
}

#[test]
fn alpha_bars_strictly_decrease_within_unit_interval() {
    for sqrt_space in [false, true] {
        let s = NoiseSchedule::new(SchedulerConfig { sqrt_space, ..Default::default() }).unwrap();
        let ab = s.alpha_bars();
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [SchedulerConfig { beta_1: 0.0, ..Default::default() }, SchedulerConfig { beta_t: 1.0, ..Default::default() }, SchedulerConfig { steps: 0, ..Default::default() }] {
        assert!(matches!(NoiseSchedule::new(cfg), Err(Error::Config(_))));
    }
}

#[test]
fn add_noise_boundary_cases() {
    let s = sched();
    let mut rng = RngState::new(1);
    let z0 = Tensor::<f64>::randn(&[2, 4, 4, 4], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[2, 4, 4, 4], 1.0, &mut rng);
    let t = 321;
    let a = add_noise(&z0, &Tensor::zeros(z0.shape()), t, &s).unwrap();
    assert!(a.max_abs_diff(&z0.scale(s.alpha_bar(t).sqrt())) < 1e-15);
    let b = add_noise(&Tensor::zeros(z0.shape()), &eps, t, &s).unwrap();
    assert!(b.max_abs_diff(&eps.scale((1.0 - s.alpha_bar(t)).sqrt())) < 1e-15);
    assert!(matches!(add_noise(&z0, &eps, 0, &s), Err(Error::TimestepOutOfRange { t: 0, max: 1000 })));
    assert!(add_noise(&z0, &eps, 1001, &s).is_err());
}

#[test]
fn add_noise_variance_matches_marginal() {
    let s = sched();
    let mut rng = RngState::new(77);
    for t in [1, 50, 250, 600, 1000] {
        let eps = Tensor::<f64>::randn(&[10_000], 1.0, &mut rng);
        let z = add_noise(&Tensor::zeros(&[10_000]), &eps, t, &s).unwrap();
        let mean = z.mean();
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9_999.0;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var / want - 1.0).abs() < 0.05, "t = {t}: {var} vs {want}");
    }
}

#[test]
fn ddpm_final_step_is_deterministic_and_inverts() {
    let s = sched();
    let mut rng = RngState::new(2);
    let z0 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let z1 = add_noise(&z0, &eps, 1, &s).unwrap();
    let a = ddpm_step(&z1, &eps, 1, &s, &mut RngState::new(5)).unwrap();
    let b = ddpm_step(&z1, &eps, 1, &s, &mut RngState::new(6)).unwrap();
    assert!(a.bit_eq(&b));
    assert!(a.max_abs_diff(&z0) < 1e-12);
}

#[test]
fn ddpm_trajectories_repeat_under_a_fixed_seed() {
    let s = sched();
    let run = |seed| {
        let mut rng = RngState::new(seed);
        let mut z = Tensor::<f32>::randn(&[2, 3], 1.0, &mut rng);
        for t in (1..=20).rev() {
            let e = z.scale(0.1);
            z = ddpm_step(&z, &e, t, &s, &mut rng).unwrap();
        }
        z
    };
    assert!(run(9).bit_eq(&run(9)));
    assert!(!run(9).bit_eq(&run(10)));
    assert!(ddpm_step(&Tensor::<f32>::zeros(&[1]), &Tensor::zeros(&[1]), 0, &s, &mut RngState::new(0)).is_err());
}

/// Oracle noise predictor for a known clean sample.
fn oracle(z0: Tensor<f64>, s: &NoiseSchedule) -> impl FnMut(&Tensor<f64>, usize) -> sateco::Result<Tensor<f64>> + '_ {
    move |z, t| {
        let ab = s.alpha_bar(t);
        z.zip_map(&z0, |zt, x| (zt - ab.sqrt() * x) / (1.0 - ab).sqrt())
    }
}

#[test]
fn ddim_with_oracle_noise_inverts_forward_noising() {
    let s = sched();
    let mut rng = RngState::new(3);
    let z0 = Tensor::<f64>::randn(&[2, 4, 4, 4], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(z0.shape(), 1.0, &mut rng);
    let z_t = add_noise(&z0, &eps, 1000, &s).unwrap();
    for steps in [1000, 50, 7, 1] {
        let out = ddim_sample(&z_t, oracle(z0.clone(), &s), steps, &s).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-4, "steps = {steps}");
    }
    assert!(ddim_sample(&z_t, oracle(z0.clone(), &s), 0, &s).is_err());
}

#[test]
fn single_step_ddim_is_the_direct_prediction() {
    let s = sched();
    let mut rng = RngState::new(4);
    let z_t = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
    let e = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
    let out = ddim_sample(&z_t, |_, _| Ok(e.clone()), 1, &s).unwrap();
    let ab = s.alpha_bar(1000);
    let want = z_t.zip_map(&e, |z, e| (z - (1.0 - ab).sqrt() * e) / ab.sqrt()).unwrap();
    assert!(out.max_abs_diff(&want) < 1e-12);
    let again = ddim_sample(&z_t, |_, _| Ok(e.clone()), 1, &s).unwrap();
    assert!(out.bit_eq(&again));
}

#[test]
fn loss_of_perfect_and_zero_predictors() {
    let s = sched();
    let store = ParamStore::<f64>::new();
    let mut rng = RngState::new(8);
    let z0 = Tensor::<f64>::randn(&[2, 4, 4, 4], 1.0, &mut rng);
    // perfect predictor: recover eps from z_t using the sampled ts
    let mut g = Graph::new(&store);
    let loss = diffusion_loss(&mut g, &z0, 2, &s, &mut rng, |g, zt, ts| {
        let zv = g.value(zt).clone();
        let per = zv.len() / ts.len();
        let eps = Tensor::from_fn(zv.shape(), |i| {
            let ab = s.alpha_bar(ts[i / per]);
            (zv.data()[i] - ab.sqrt() * z0.data()[i]) / (1.0 - ab).sqrt()
        });
        Ok(g.constant(eps))
    })
    .unwrap();
    assert!(g.value(loss).data()[0] < 1e-20);

    let mut total = 0.0;
    for _ in 0..1000 {
        let mut g = Graph::new(&store);
        let loss = diffusion_loss(&mut g, &z0, 2, &s, &mut rng, |g, zt, _| Ok(g.scale(zt, 0.0))).unwrap();
        total += g.value(loss).data()[0];
    }
    assert!((total / 1000.0 - 1.0).abs() < 0.1);
}

proptest! {
    #[test]
    fn add_noise_is_linear_in_its_inputs(t in 1usize..=1000, a in -3.0f64..3.0, e in -3.0f64..3.0) {
        let s = sched();
        let z = add_noise(&Tensor::full(&[1], a), &Tensor::full(&[1], e), t, &s).unwrap();
        let ab = s.alpha_bar(t);
        prop_assert!((z.data()[0] - (ab.sqrt() * a + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
    }
}
