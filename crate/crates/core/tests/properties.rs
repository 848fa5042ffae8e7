use ndarray::Array2;
use proptest::prelude::*;

use dlpm::eval::{f1_pr, msle, precision_recall};
use dlpm::rng::seeded;
use dlpm::sample::strided_timesteps;
use dlpm::schedule::{build_cosine_schedule, interpolation_factor, BridgeDraw};
use dlpm::stable::{PositiveStable, StableParams};
use dlpm::train::{median_of_means, median_of_means_index};
use dlpm::verify::{scale_identity_error, telescoping_error};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_schedules_keep_unit_scale(steps in 1usize..600, alpha in 1.05f64..=2.0) {
        let s = build_cosine_schedule(steps, alpha).unwrap();
        prop_assert!(scale_identity_error(&s) < 1e-10);
        prop_assert!(telescoping_error(&s) < 1e-12);
        for t in 1..=steps {
            prop_assert!(s.gamma_cum(t) <= s.gamma_cum(t - 1));
            prop_assert!(s.sigma_cum(t) >= s.sigma_cum(t - 1));
        }
    }

    #[test]
    fn interpolation_factor_is_a_fraction(
        gamma in 0.01f64..1.0,
        sigma in 0.0f64..1.0,
        prev in 0.0f64..1e6,
        a1 in 1e-6f64..1e6,
    ) {
        let cur = sigma * sigma * a1 + gamma * gamma * prev;
        let f = interpolation_factor(gamma, prev, cur);
        prop_assert!((0.0..=1.0).contains(&f), "{f}");
    }

    #[test]
    fn bridge_draws_are_consistent(alpha in 1.1f64..2.0, t in 1usize..=100, seed in any::<u64>()) {
        let s = build_cosine_schedule(100, alpha).unwrap();
        let b: BridgeDraw = s.make_bridge_draw(t, &mut seeded(seed)).unwrap();
        let expect = s.sigma(t).powi(2) * b.a1 + s.gamma(t).powi(2) * b.sigma_prime_prev;
        prop_assert!((b.sigma_prime - expect).abs() <= 1e-12 * expect.max(1.0));
        prop_assert!((0.0..=1.0).contains(&b.gamma_prime));
        if t == 1 {
            prop_assert_eq!(b.sigma_prime_prev, 0.0);
            prop_assert_eq!(b.gamma_prime, 1.0);
        }
    }

    #[test]
    fn median_of_means_lies_between_group_means(
        m in 1usize..6,
        raw in prop::collection::vec(-1e3f64..1e3, 36),
    ) {
        let v = &raw[..m * m];
        let means: Vec<f64> = v.chunks(m).map(|c| c.iter().sum::<f64>() / m as f64).collect();
        let (k, value) = median_of_means_index(v, m).unwrap();
        prop_assert_eq!(value, means[k]);
        let below = means.iter().filter(|&&x| x < value).count();
        let above = means.iter().filter(|&&x| x > value).count();
        prop_assert!(below <= m / 2 && above <= m / 2);
        prop_assert!(median_of_means(&v[..m * m - 1], m).is_err());
    }

    #[test]
    fn strided_grid_is_decreasing_and_ends_at_one(horizon in 1usize..500, frac in 0.0f64..1.0) {
        let steps = 1 + ((horizon - 1) as f64 * frac) as usize;
        let ts = strided_timesteps(horizon, steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(ts[0], horizon);
        if steps > 1 {
            prop_assert_eq!(*ts.last().unwrap(), 1);
        }
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn f1_is_symmetric_and_bounded(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let f = f1_pr(p, r);
        prop_assert_eq!(f, f1_pr(r, p));
        prop_assert!(f <= p.max(r) + 1e-15 && f >= 0.0);
    }

    #[test]
    fn stable_draws_are_finite(alpha in 0.3f64..=2.0, beta in -1.0f64..=1.0, seed in any::<u64>()) {
        prop_assume!((alpha - 1.0).abs() > 1e-3);
        let p = StableParams::new(alpha, beta, 0.0, 1.0).unwrap();
        let mut rng = seeded(seed);
        for _ in 0..200 {
            prop_assert!(p.sample(&mut rng).is_finite());
        }
    }

    #[test]
    fn mixing_draws_are_positive(alpha in 0.2f64..2.0, seed in any::<u64>()) {
        let a = PositiveStable::new(alpha).unwrap();
        let mut rng = seeded(seed);
        for _ in 0..200 {
            let x = a.sample(&mut rng);
            prop_assert!(x > 0.0 && x.is_finite(), "{x}");
        }
    }
}

fn cloud(n: usize, seed: u64) -> Array2<f64> {
    let p = StableParams::symmetric(1.7, 0.0, 1.0).unwrap();
    let mut rng = seeded(seed);
    Array2::from_shape_fn((n, 2), |_| p.sample(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tail_error_ignores_row_order(seed in any::<u64>(), shift in 0usize..300) {
        let x = cloud(300, seed);
        let y = cloud(300, seed ^ 1);
        let mut rows: Vec<usize> = (0..300).collect();
        rows.rotate_left(shift);
        let yp = y.select(ndarray::Axis(0), &rows);
        prop_assert_eq!(msle(x.view(), y.view(), 0.95).unwrap(), msle(x.view(), yp.view(), 0.95).unwrap());
    }

    #[test]
    fn tail_error_grows_with_scale_mismatch(seed in any::<u64>(), c in 1.05f64..3.0) {
        let x = cloud(400, seed);
        let small = msle(x.view(), (&x * c).view(), 0.95).unwrap();
        let large = msle(x.view(), (&x * (c * 1.5)).view(), 0.95).unwrap();
        prop_assert!(small < large);
    }

    #[test]
    fn precision_recall_swap(seed in any::<u64>()) {
        let x = cloud(200, seed);
        let y = cloud(150, seed ^ 7);
        let (p, r) = precision_recall(x.view(), y.view(), 3).unwrap();
        let (p2, r2) = precision_recall(y.view(), x.view(), 3).unwrap();
        prop_assert_eq!((p, r), (r2, p2));
    }
}
