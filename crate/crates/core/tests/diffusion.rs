use mudiff::diffusion::{add_noise, coeffs, ddim_step, sample, v_target, SamplerSchedule};
use mudiff::Result;
use proptest::prelude::*;

fn oracle(x0: Vec<f64>, eps: Vec<f64>) -> impl Fn(&[f64], f64) -> Result<Vec<f64>> {
    move |x: &[f64], sigma: f64| {
        let c = coeffs(sigma)?;
        // The velocity consistent with `x` and the known clean signal.
        Ok(x.iter()
            .zip(&x0)
            .zip(&eps)
            .map(|((&xt, &x0), &e)| {
                if c.beta > 0.0 {
                    (c.alpha * xt - x0) / c.beta
                } else {
                    e
                }
            })
            .collect())
    }
}

#[test]
fn trig_identity_over_thousand_levels() {
    for i in 0..1000 {
        let c = coeffs(i as f64 / 999.0).unwrap();
        assert!((c.alpha * c.alpha + c.beta * c.beta - 1.0).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&c.alpha) && (0.0..=1.0).contains(&c.beta));
    }
    assert!(coeffs(-0.01).is_err());
    assert!(coeffs(1.01).is_err());
}

#[test]
fn half_noise_level_values() {
    let c = coeffs(0.5).unwrap();
    assert!((c.alpha - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    let x = add_noise(&[1.0f32], &[0.0], 0.5).unwrap();
    assert!((x[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    assert_eq!(v_target(&[3.0f32], &[0.0], 1.0).unwrap(), vec![-3.0]);
    assert!(add_noise(&[1.0f32, 2.0], &[0.0], 0.5).is_err());
}

#[test]
fn rejects_increasing_levels() {
    let m = |x: &[f64], _: f64| -> Result<Vec<f64>> { Ok(x.to_vec()) };
    assert!(ddim_step(&m, &[0.0], 0.3, 0.4).is_err());
}

proptest! {
    #[test]
    fn recovery_identity_f32(
        x0 in prop::collection::vec(-2.0f32..2.0, 1..16),
        seed in any::<u32>(),
        sigma in 0.0f64..=1.0,
    ) {
        let eps: Vec<f32> = x0.iter().enumerate().map(|(i, _)| ((seed as f32 + i as f32) * 0.71).sin()).collect();
        let c = coeffs(sigma).unwrap();
        let (a, b) = (c.alpha as f32, c.beta as f32);
        let xs = add_noise(&x0, &eps, sigma).unwrap();
        let v = v_target(&x0, &eps, sigma).unwrap();
        for i in 0..x0.len() {
            prop_assert!((a * xs[i] - b * v[i] - x0[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn perfect_step_lands_on_forward_process(
        x0 in prop::collection::vec(-1.0f64..1.0, 4),
        eps in prop::collection::vec(-2.0f64..2.0, 4),
        t in 0.05f64..=1.0,
        frac in 0.0f64..1.0,
    ) {
        let prev = t * frac;
        let m = oracle(x0.clone(), eps.clone());
        let xt = add_noise(&x0, &eps, t).unwrap();
        let stepped = ddim_step(&m, &xt, t, prev).unwrap();
        let want = add_noise(&x0, &eps, prev).unwrap();
        for (s, w) in stepped.iter().zip(&want) {
            prop_assert!((s - w).abs() < 1e-9);
        }
        prop_assert_eq!(ddim_step(&m, &xt, t, t).unwrap(), xt);
    }

    #[test]
    fn oracle_sampling_ignores_step_count(steps in 1usize..60, x0 in prop::collection::vec(-1.0f64..1.0, 3)) {
        let noise = vec![0.3, -1.2, 0.8];
        let m = oracle(x0.clone(), noise.clone());
        let out = sample(&m, &noise, &SamplerSchedule::linear(steps).unwrap()).unwrap();
        for (o, x) in out.iter().zip(&x0) {
            prop_assert!((o - x).abs() < 1e-9);
        }
    }
}
