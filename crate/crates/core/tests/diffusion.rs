mod common;

use common::rng;
use morphflow::autodiff::Tensor;
use morphflow::diffusion::{
    elbo_terms, forward_sample, forward_step, gaussian_optimal_predictor, kl_term, posterior_mean, reverse_step,
    sample, simple_loss, standard_normal, DiffusionSchedule, NoisePredictor, ScheduleKind,
};

fn scalar(v: f64) -> Tensor<f64> {
    Tensor::new(vec![1], vec![v]).unwrap()
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn two_step_schedule_by_hand() {
    let s = DiffusionSchedule::new(2, 0.1, 0.1, ScheduleKind::Linear).unwrap();
    assert_eq!(s.alphas(), &[0.9, 0.9]);
    assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
    assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
    assert_eq!(s.sigma2(2), 0.1);
}

#[test]
fn degenerate_schedules_are_rejected() {
    assert!(DiffusionSchedule::new(10, 0.0, 0.0, ScheduleKind::Linear).is_err());
    assert!(DiffusionSchedule::new(10, 0.02, 0.01, ScheduleKind::Linear).is_err());
    assert!(DiffusionSchedule::new(10, 0.01, 1.0, ScheduleKind::Linear).is_err());
    assert!(DiffusionSchedule::new(0, 0.01, 0.02, ScheduleKind::Linear).is_err());
    assert!(DiffusionSchedule::from_betas(vec![0.1, 0.0]).is_err());
}

#[test]
fn long_schedule_reaches_noise() {
    let s = DiffusionSchedule::standard(1000).unwrap();
    // independent evaluation of Π (1 − β_t) with β_t linear
    let log: f64 = (0..1000)
        .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
        .sum();
    assert!((s.alpha_bar(1000) - log.exp()).abs() < 1e-15);
    assert!(s.alpha_bar(1000) < 1e-4);
}

#[test]
fn steps_outside_range_are_rejected() {
    let s = DiffusionSchedule::standard(10).unwrap();
    let x = scalar(0.3);
    assert!(forward_sample(&x, 0, &x, &s).is_err());
    assert!(forward_sample(&x, 11, &x, &s).is_err());
    assert!(posterior_mean(&x, &x, 0, &s).is_err());
    assert!(forward_sample(&x, 3, &Tensor::zeros(&[2]), &s).is_err());
}

#[test]
fn forward_sample_special_cases() {
    let s = DiffusionSchedule::standard(50).unwrap();
    let n0 = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let eps = Tensor::new(vec![3], vec![1.0, 0.25, -0.5]).unwrap();
    let t = 17;
    let a = s.alpha_bar(t);
    let no_noise = forward_sample(&n0, t, &Tensor::zeros(&[3]), &s).unwrap();
    let from_zero = forward_sample(&Tensor::zeros(&[3]), t, &eps, &s).unwrap();
    for i in 0..3 {
        assert!((no_noise.data()[i] - a.sqrt() * n0.data()[i]).abs() < 1e-15);
        assert!((from_zero.data()[i] - (1.0 - a).sqrt() * eps.data()[i]).abs() < 1e-15);
    }
}

#[test]
fn forward_marginal_monte_carlo() {
    let s = DiffusionSchedule::standard(200).unwrap();
    let n = 10_000;
    let n0 = Tensor::full(&[n], 0.7);
    let mut r = rng(1);
    for t in [1, 50, 200] {
        let eps = standard_normal(&mut r, &[n]);
        let x = forward_sample(&n0, t, &eps, &s).unwrap();
        let (m, v) = mean_var(x.data());
        let sd = (1.0 - s.alpha_bar(t)).sqrt();
        let se_mean = sd / (n as f64).sqrt();
        let se_sd = sd / (2.0 * n as f64).sqrt();
        assert!((m - s.alpha_bar(t).sqrt() * 0.7).abs() <= 4.0 * se_mean, "t={t} mean");
        assert!((v.sqrt() - sd).abs() <= 4.0 * se_sd, "t={t} sd");
    }
}

#[test]
fn two_kernel_steps_match_closed_form_marginal() {
    let s = DiffusionSchedule::standard(100).unwrap();
    let n = 10_000;
    let n0 = Tensor::full(&[n], -1.2);
    let mut r = rng(2);
    let mut x = n0.clone();
    for t in 1..=2 {
        let eps = standard_normal(&mut r, &[n]);
        x = forward_step(&x, t, &eps, &s).unwrap();
    }
    let (m, v) = mean_var(x.data());
    let sd = (1.0 - s.alpha_bar(2)).sqrt();
    assert!((m - s.alpha_bar(2).sqrt() * -1.2).abs() <= 4.0 * sd / (n as f64).sqrt());
    assert!((v.sqrt() - sd).abs() <= 4.0 * sd / (2.0 * n as f64).sqrt());
}

#[test]
fn posterior_mean_properties() {
    let s = DiffusionSchedule::standard(30).unwrap();
    let nt = Tensor::new(vec![2], vec![0.4, -0.9]).unwrap();
    let m = posterior_mean(&nt, &Tensor::zeros(&[2]), 5, &s).unwrap();
    for i in 0..2 {
        assert!((m.data()[i] - nt.data()[i] / s.alpha(5).sqrt()).abs() < 1e-15);
    }
    // t = 1 with the true noise recovers the data
    let n0 = Tensor::new(vec![2], vec![0.3, -0.8]).unwrap();
    let eps = Tensor::new(vec![2], vec![1.1, 0.6]).unwrap();
    let n1 = forward_sample(&n0, 1, &eps, &s).unwrap();
    let back = posterior_mean(&n1, &eps, 1, &s).unwrap();
    assert!(back.max_abs_diff(&n0) <= 1e-12);
    // affine in ε
    let e2 = Tensor::new(vec![2], vec![-0.2, 0.9]).unwrap();
    let sum = Tensor::new(vec![2], vec![0.9, 1.5]).unwrap();
    let (a, b, c) = (
        posterior_mean(&nt, &eps, 9, &s).unwrap(),
        posterior_mean(&nt, &e2, 9, &s).unwrap(),
        posterior_mean(&nt, &sum, 9, &s).unwrap(),
    );
    let z = posterior_mean(&nt, &Tensor::zeros(&[2]), 9, &s).unwrap();
    for i in 0..2 {
        let lin = a.data()[i] + b.data()[i] - z.data()[i];
        assert!((c.data()[i] - lin).abs() < 1e-12);
    }
}

#[test]
fn reverse_step_examples() {
    let s = DiffusionSchedule::standard(30).unwrap();
    let nt = Tensor::new(vec![2], vec![0.4, -0.9]).unwrap();
    let zero = Tensor::zeros(&[2]);
    let r = reverse_step(&nt, &zero, 4, &s, &zero).unwrap();
    for i in 0..2 {
        assert!((r.data()[i] - nt.data()[i] / s.alpha(4).sqrt()).abs() < 1e-15);
    }
    let n0 = Tensor::new(vec![2], vec![0.3, -0.8]).unwrap();
    let eps = Tensor::new(vec![2], vec![1.1, 0.6]).unwrap();
    let n1 = forward_sample(&n0, 1, &eps, &s).unwrap();
    // noise is ignored at t = 1
    let back = reverse_step(&n1, &eps, 1, &s, &Tensor::full(&[2], 5.0)).unwrap();
    assert!(back.max_abs_diff(&n0) <= 1e-12);
    // otherwise it enters with standard deviation √β
    let noisy = reverse_step(&nt, &zero, 4, &s, &Tensor::full(&[2], 1.0)).unwrap();
    assert!((noisy.data()[0] - r.data()[0] - s.beta(4).sqrt()).abs() < 1e-15);
}

#[test]
fn gaussian_data_sampler_reproduces_variance() {
    for (steps, data_var) in [(200, 0.25), (1000, 2.0)] {
        let s = DiffusionSchedule::standard(steps).unwrap();
        let model = gaussian_optimal_predictor(&s, data_var);
        let out = sample(&model, &s, &[10_000, 1], &mut rng(3), |_, _| {}).unwrap();
        let (m, v) = mean_var(out.data());
        assert!(m.abs() < 4.0 * (data_var / 10_000.0).sqrt(), "T={steps} mean {m}");
        assert!((v / data_var - 1.0).abs() <= 0.05, "T={steps} ratio {}", v / data_var);
    }
}

#[test]
fn sampler_reports_every_step() {
    let s = DiffusionSchedule::standard(12).unwrap();
    let model = gaussian_optimal_predictor(&s, 1.0);
    let mut seen = Vec::new();
    sample(&model, &s, &[2, 1], &mut rng(4), |t, _| seen.push(t)).unwrap();
    assert_eq!(seen, (0..=12).rev().collect::<Vec<_>>());
}

#[test]
fn simple_loss_examples() {
    let s = DiffusionSchedule::standard(100).unwrap();
    let n0: Tensor<f64> = standard_normal(&mut rng(5), &[4000, 2]);
    let zero = |x: &Tensor<f64>, _: &[usize]| -> morphflow::Result<Tensor<f64>> { Ok(Tensor::zeros(x.shape())) };
    let l = simple_loss(&n0, &s, &zero, &mut rng(6)).unwrap();
    // chi-square mean: E(ε²) = 1 per coordinate, standard error √(2/8000)
    assert!((l - 1.0).abs() <= 4.0 * (2.0 / 8000.0f64).sqrt(), "{l}");

    let n0c = n0.clone();
    let sc = s.clone();
    let perfect = move |x: &Tensor<f64>, steps: &[usize]| -> morphflow::Result<Tensor<f64>> {
        let mut out = Vec::new();
        for (i, &t) in steps.iter().enumerate() {
            let a = sc.alpha_bar(t);
            out.extend(
                x.outer(i)
                    .iter()
                    .zip(n0c.outer(i))
                    .map(|(v, d)| (v - a.sqrt() * d) / (1.0 - a).sqrt()),
            );
        }
        Ok(Tensor::new(x.shape().to_vec(), out)?)
    };
    let l = simple_loss(&n0, &s, &perfect, &mut rng(7)).unwrap();
    assert!(l < 1e-20, "{l}");
}

#[test]
fn kl_examples() {
    assert_eq!(kl_term(&scalar(1.0), &scalar(0.0), 0.5).unwrap(), 1.0);
    assert_eq!(kl_term(&scalar(0.3), &scalar(0.3), 0.1).unwrap(), 0.0);
    assert!(kl_term(&scalar(0.3), &scalar(0.31), 0.1).unwrap() > 0.0);
}

#[test]
fn elbo_terms_reweight_the_noise_error() {
    let s = DiffusionSchedule::standard(20).unwrap();
    let n0: Tensor<f64> = standard_normal(&mut rng(8), &[6, 3]);
    let model = |x: &Tensor<f64>, steps: &[usize]| -> morphflow::Result<Tensor<f64>> {
        Ok(x.map(|v| 0.3 * v + 0.01 * steps[0] as f64))
    };
    let terms = elbo_terms(&n0, &s, &model, &mut rng(9)).unwrap();
    assert_eq!(terms.steps, (2..=20).collect::<Vec<_>>());
    for (i, &t) in terms.steps.iter().enumerate() {
        let expect = s.kl_weight(t) * terms.eps_sq[i];
        assert!(terms.kl[i] >= 0.0);
        assert!((terms.kl[i] - expect).abs() <= 1e-9 * expect.max(1e-12), "t={t}");
    }
    assert!(terms.reconstruction.is_finite());
}

#[test]
fn elbo_terms_vanish_for_the_true_noise() {
    // the same seed reproduces the noise the bound draws internally
    let s = DiffusionSchedule::standard(8).unwrap();
    let n0: Tensor<f64> = standard_normal(&mut rng(10), &[3, 2]);
    let n0c = n0.clone();
    let sc = s.clone();
    let perfect = move |x: &Tensor<f64>, steps: &[usize]| -> morphflow::Result<Tensor<f64>> {
        let a = sc.alpha_bar(steps[0]);
        let mut out = x.clone();
        for (o, d) in out.data_mut().iter_mut().zip(n0c.data()) {
            *o = (*o - a.sqrt() * d) / (1.0 - a).sqrt();
        }
        Ok(out)
    };
    let p: &dyn NoisePredictor<f64> = &perfect;
    let terms = elbo_terms(&n0, &s, p, &mut rng(11)).unwrap();
    assert!(terms.kl.iter().all(|k| k.abs() < 1e-18), "{:?}", terms.kl);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn schedule_invariants(steps in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.3) {
            let hi = (lo + span).min(0.999);
            let s = DiffusionSchedule::new(steps, lo, hi, ScheduleKind::Linear).unwrap();
            for t in 1..=steps {
                prop_assert_eq!(s.alpha(t), 1.0 - s.beta(t));
                prop_assert_eq!(s.sigma2(t), s.beta(t));
                if t > 1 {
                    prop_assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
                    prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                }
            }
        }
    }
}
