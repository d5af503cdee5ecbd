use diss_core::schedule::{q_sample, q_step};
use diss_core::{Image, ScheduleConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[test]
fn iterated_noising_matches_direct_marginal() {
    let sched = ScheduleConfig::scaled_linear(50).build().unwrap();
    let x0 = Image::<f64>::from_vec(1, 1, 2, vec![0.6, -0.3]).unwrap();
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for t in [1usize, 7, 25, 50] {
        let (mut it, mut direct) = (vec![Vec::new(); 2], vec![Vec::new(); 2]);
        for _ in 0..draws {
            let mut x = x0.clone();
            for s in 1..=t {
                x = q_step(&x, s, &Image::randn(1, 1, 2, &mut rng), &sched).unwrap();
            }
            let y = q_sample(&x0, t, &Image::randn(1, 1, 2, &mut rng), &sched).unwrap();
            for p in 0..2 {
                it[p].push(x.data()[p]);
                direct[p].push(y.data()[p]);
            }
        }
        let ab = sched.alpha_bar(t);
        for p in 0..2 {
            let want_mean = ab.sqrt() * x0.data()[p];
            let want_var = 1.0 - ab;
            for xs in [&it[p], &direct[p]] {
                let (m, v) = moments(xs);
                let se_mean = (want_var / draws as f64).sqrt();
                let se_var = want_var * (2.0 / (draws as f64 - 1.0)).sqrt();
                assert!((m - want_mean).abs() <= 3.0 * se_mean, "t={t} mean {m} vs {want_mean}");
                assert!((v - want_var).abs() <= 3.0 * se_var, "t={t} var {v} vs {want_var}");
            }
        }
    }
}

#[test]
fn noising_is_reproducible_for_fixed_noise() {
    let sched = ScheduleConfig::scaled_linear(10).build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0: Image<f32> = Image::randn(3, 4, 4, &mut rng);
    let eps: Image<f32> = Image::randn(3, 4, 4, &mut rng);
    let a = q_sample(&x0, 4, &eps, &sched).unwrap();
    let b = q_sample(&x0, 4, &eps, &sched).unwrap();
    assert_eq!(a, b);
    assert!(q_sample(&x0, 11, &eps, &sched).is_err());
}
