use hcld::fusion::{adain, fdp_sample, fdp_with_noise, instance_norm, ChannelStats, NoiseSchedule, NORM_EPS};
use tensorlab::{Rng, Tensor};

fn latent(rng: &mut Rng, scale: f64, shift: f64) -> Tensor<f64> {
    Tensor::<f64>::randn(&[4, 4, 4, 2], rng).map(|v| v * scale + shift)
}

fn loop_stats(z: &Tensor<f64>) -> Vec<(f64, f64)> {
    let per = z.numel() / z.shape()[0];
    z.data()
        .chunks(per)
        .map(|ch| {
            let m = ch.iter().sum::<f64>() / per as f64;
            let v = ch.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / per as f64;
            (m, v.sqrt())
        })
        .collect()
}

fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 0.0015, 0.0195).unwrap()
}

#[test]
fn instance_norm_standardizes_each_channel() {
    let mut rng = Rng::new(1);
    let z = latent(&mut rng, 3.0, -2.0);
    for (m, s) in loop_stats(&instance_norm(&z, NORM_EPS).unwrap()) {
        assert!(m.abs() < 1e-5);
        assert!((s - 1.0).abs() < 1e-3);
    }
    let stats = ChannelStats::of(&z);
    for (c, (m, s)) in loop_stats(&z).into_iter().enumerate() {
        assert!((stats.mu[c] - m).abs() < 1e-12);
        assert!((stats.sigma[c] - s).abs() < 1e-12);
    }
}

#[test]
fn instance_norm_is_idempotent() {
    let mut rng = Rng::new(2);
    let once = instance_norm(&latent(&mut rng, 0.3, 1.0), NORM_EPS).unwrap();
    let twice = instance_norm(&once, NORM_EPS).unwrap();
    assert!(once.max_abs_diff(&twice) < 1e-4);
}

#[test]
fn constant_channel_normalizes_to_zero() {
    let z = Tensor::<f64>::from_fn(&[2, 3, 3, 3], |_| 0.7);
    let out = instance_norm(&z, NORM_EPS).unwrap();
    assert!(out.data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn adain_identity_and_target_statistics() {
    let mut rng = Rng::new(3);
    for _ in 0..20 {
        let zx = latent(&mut rng, 2.0, 0.5);
        let zy = latent(&mut rng, 0.4, -1.0);
        assert!(adain(&zx, &zx, NORM_EPS).unwrap().max_abs_diff(&zx) < 1e-4);
        let out = adain(&zx, &zy, NORM_EPS).unwrap();
        for ((m, s), (tm, ts)) in loop_stats(&out).into_iter().zip(loop_stats(&zy)) {
            assert!((m - tm).abs() < 1e-4);
            assert!((s - ts).abs() / ts < 1e-3);
        }
    }
}

#[test]
fn adain_preserves_rank_order_per_channel() {
    let mut rng = Rng::new(4);
    let zx = latent(&mut rng, 1.0, 0.0);
    let zy = latent(&mut rng, 0.2, 3.0);
    let out = adain(&zx, &zy, NORM_EPS).unwrap();
    let per = zx.numel() / 4;
    for c in 0..4 {
        let a = &zx.data()[c * per..(c + 1) * per];
        let b = &out.data()[c * per..(c + 1) * per];
        let mut ia: Vec<usize> = (0..per).collect();
        let mut ib = ia.clone();
        ia.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
        ib.sort_by(|&i, &j| b[i].total_cmp(&b[j]));
        assert_eq!(ia, ib);
    }
}

#[test]
fn adain_then_in_recovers_content() {
    let mut rng = Rng::new(5);
    let zx = latent(&mut rng, 1.5, 0.2);
    let zy = latent(&mut rng, 0.6, -0.3);
    let back = instance_norm(&adain(&zx, &zy, NORM_EPS).unwrap(), NORM_EPS).unwrap();
    assert!(back.max_abs_diff(&instance_norm(&zx, NORM_EPS).unwrap()) < 1e-3);
}

#[test]
fn adain_rejects_shape_mismatch() {
    let a = Tensor::<f64>::zeros(&[4, 4, 4, 2]);
    let b = Tensor::<f64>::zeros(&[4, 4, 4, 1]);
    assert!(adain(&a, &b, NORM_EPS).is_err());
}

#[test]
fn schedule_matches_log_sum_recomputation() {
    let s = default_schedule();
    let mut prev = 1.0;
    for t in 1..=1000 {
        let beta = 0.0015 + (0.0195 - 0.0015) * (t - 1) as f64 / 999.0;
        assert!((s.beta(t) - beta).abs() < 1e-12);
        let log_sum: f64 = (1..=t)
            .map(|i| (1.0 - (0.0015 + (0.0195 - 0.0015) * (i - 1) as f64 / 999.0)).ln())
            .sum();
        let want = log_sum.exp();
        assert!((s.alpha_bar(t) - want).abs() / want < 1e-6);
        assert!(s.alpha_bar(t) < prev);
        prev = s.alpha_bar(t);
    }
    assert!(s.alpha_bar(1000) < 1e-3);
}

#[test]
fn first_step_scale() {
    let s = default_schedule();
    assert!((s.alpha_bar(1).sqrt() - 0.99925).abs() < 1e-5);
    let mut rng = Rng::new(6);
    let z0 = latent(&mut rng, 1.0, 0.0);
    let zt = fdp_with_noise(&z0, &Tensor::zeros(z0.shape()), 1, &s).unwrap();
    for (a, b) in zt.data().iter().zip(z0.data()) {
        assert!((a - b * (1.0f64 - 0.0015).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn timestep_out_of_range_is_rejected() {
    let s = default_schedule();
    let z = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
    let mut rng = Rng::new(0);
    assert!(fdp_sample(&z, 0, &s, &mut rng).is_err());
    assert!(fdp_sample(&z, 1001, &s, &mut rng).is_err());
}

#[test]
fn injected_variance_matches_schedule() {
    let s = default_schedule();
    let mut rng = Rng::new(7);
    let z0 = Tensor::<f64>::from_fn(&[1, 1, 1, 1], |_| 0.8);
    let t = 300;
    let ab = s.alpha_bar(t);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| fdp_sample(&z0, t, &s, &mut rng).unwrap().0.item() - ab.sqrt() * 0.8)
        .collect();
    let m = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / draws.len() as f64;
    assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "variance {var} vs {}", 1.0 - ab);
}

#[test]
fn final_step_destroys_the_signal() {
    let s = default_schedule();
    let mut rng = Rng::new(8);
    let mut total = 0.0;
    for _ in 0..100 {
        let z0 = latent(&mut rng, 1.0, 0.0);
        let (zt, _) = fdp_sample(&z0, 1000, &s, &mut rng).unwrap();
        let n = z0.numel() as f64;
        let (ma, mb) = (z0.data().iter().sum::<f64>() / n, zt.data().iter().sum::<f64>() / n);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (a, b) in z0.data().iter().zip(zt.data()) {
            sab += (a - ma) * (b - mb);
            saa += (a - ma).powi(2);
            sbb += (b - mb).powi(2);
        }
        total += sab / (saa * sbb).sqrt();
    }
    assert!((total / 100.0).abs() < 0.05);
}
