mod common;

use common::rng;
use inplace_abn::batchnorm::{self, MinibatchStats, RunningStats};
use inplace_abn::gradcheck::{check_equivalence, compare, fd_gradient};
use inplace_abn::{init, ActivationFn, ChannelParams, ConvParams, Scalar, Tensor};
use proptest::prelude::*;
use rand::Rng;

type Shape4 = (usize, usize, usize, usize);

fn instance<T: Scalar>(seed: u64, shape: Shape4) -> (Tensor<T>, Tensor<T>, ChannelParams<T>) {
    let mut r = rng(seed);
    let x = init::uniform_tensor(&mut r, shape, -3.0, 3.0);
    let dy = init::uniform_tensor(&mut r, shape, -1.0, 1.0);
    let p = init::random_channel_params(&mut r, shape.1);
    (x, dy, p)
}

fn three_way<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, p: &ChannelParams<T>, tol: f64) {
    let f = batchnorm::forward(x, p).unwrap();
    let standard = batchnorm::backward_standard(x, dy, &f.stats, p).unwrap();
    let star = batchnorm::backward_star(&f.xhat, dy, &f.stats.var, p).unwrap();
    let dagger = batchnorm::backward_dagger(&f.y, dy, &f.stats.var, p).unwrap();
    let r1 = check_equivalence(&standard, &star, tol).unwrap();
    let r2 = check_equivalence(&standard, &dagger, tol).unwrap();
    assert!(r1.passed, "star: {r1:?}");
    assert!(r2.passed, "dagger: {r2:?}");
}

#[test]
fn three_backward_forms_agree_in_double() {
    for seed in 0..50 {
        let (x, dy, p) = instance::<f64>(seed, (4, 3, 5, 5));
        three_way(&x, &dy, &p, 1e-10);
    }
}

#[test]
fn three_backward_forms_agree_in_single() {
    for seed in 0..20 {
        let (x, dy, p) = instance::<f32>(1000 + seed, (4, 3, 5, 5));
        three_way(&x, &dy, &p, 1e-4);
    }
}

#[test]
fn dagger_matches_star_on_recovered_xhat() {
    let (x, dy, _) = instance::<f64>(7, (3, 2, 4, 4));
    let p = ChannelParams::new(vec![2.0, 2.0], vec![-1.0, -1.0], 1e-5).unwrap();
    let f = batchnorm::forward(&x, &p).unwrap();
    let xhat = batchnorm::pi_inverse(&f.y, &p).unwrap();
    let star = batchnorm::backward_star(&xhat, &dy, &f.stats.var, &p).unwrap();
    let dagger = batchnorm::backward_dagger(&f.y, &dy, &f.stats.var, &p).unwrap();
    let r = check_equivalence(&star, &dagger, 1e-10).unwrap();
    assert!(r.passed, "{r:?}");
}

/// `L = sum w * phi(BN(x))`, recomputing the statistics from the probe.
#[test]
fn bn_act_gradients_match_finite_differences() {
    let act = ActivationFn::default();
    let mut checked = 0;
    let mut seed = 0;
    while checked < 20 {
        seed += 1;
        let (x, _, p) = instance::<f64>(500 + seed, (3, 2, 3, 3));
        let f = batchnorm::forward(&x, &p).unwrap();
        if f.y.data().iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let w = init::uniform_tensor::<f64, _>(&mut rng(900 + seed), x.shape(), -1.0, 1.0);
        let loss = |x: &Tensor<f64>| {
            let y = batchnorm::forward(x, &p)?.y;
            Ok(act
                .forward(&y)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum())
        };
        let fd = fd_gradient(loss, &x, 1e-5).unwrap();
        let z = act.forward(&f.y);
        let dy = act.backward_from_output(&z, &w).unwrap();
        let g = batchnorm::backward_standard(&x, &dy, &f.stats, &p).unwrap();
        let r = compare(fd.data(), g.dx.data(), 1e-5).unwrap();
        assert!(r.passed, "seed {seed}: {r:?}");
        checked += 1;
    }
}

#[test]
fn whitened_output_has_zero_mean_unit_variance() {
    let (x, _, _) = instance::<f64>(3, (4, 3, 6, 6));
    let f = batchnorm::forward(&x, &ChannelParams::identity(3)).unwrap();
    let mean = f.xhat.channel_mean().unwrap();
    let var = f.xhat.channel_var(&mean).unwrap();
    for c in 0..3 {
        assert!(mean[c].abs() < 1e-12, "{mean:?}");
        let expected = f.stats.var[c] / (f.stats.var[c] + 1e-5);
        assert!((var[c] - expected).abs() < 1e-12, "{var:?}");
    }
}

#[test]
fn input_gradient_centering() {
    let (x, dy, p) = instance::<f64>(4, (3, 2, 4, 4));
    let f = batchnorm::forward(&x, &p).unwrap();
    let g = batchnorm::backward_star(&f.xhat, &dy, &f.stats.var, &p).unwrap();
    // dx sums to zero per channel; against xhat only the eps share of the
    // variance survives, since sum xhat^2 = m var / (var + eps)
    let sums = g.dx.channel_sum();
    let dots = g.dx.mul(&f.xhat).unwrap().channel_sum();
    for c in 0..2 {
        let (var, eps) = (f.stats.var[c], p.eps);
        let expected = p.gamma[c] / (var + eps).sqrt() * g.dgamma[c] * eps / (var + eps);
        assert!(sums[c].abs() < 1e-12, "{sums:?}");
        assert!((dots[c] - expected).abs() < 1e-12, "{dots:?} vs {expected}");
    }
}

#[test]
fn sync_stats_over_splits() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let x = init::uniform_tensor::<f64, _>(&mut r, (8, 3, 4, 4), -5.0, 5.0)
            .add_scalar(r.random_range(-10.0..10.0));
        let whole = MinibatchStats::of(&x).unwrap();
        for sizes in [
            vec![8],
            vec![4, 4],
            vec![3, 5],
            vec![2, 2, 2, 2],
            vec![1, 3, 1, 3],
        ] {
            let shards: Vec<_> = x
                .split_batch(&sizes)
                .unwrap()
                .iter()
                .map(|t| MinibatchStats::of(t).unwrap())
                .collect();
            let merged = batchnorm::sync_stats(&shards).unwrap();
            assert_eq!(merged.m, whole.m);
            assert!(
                compare(&merged.mu, &whole.mu, 1e-12).unwrap().passed,
                "{sizes:?}"
            );
            assert!(
                compare(&merged.var, &whole.var, 1e-12).unwrap().passed,
                "{sizes:?}"
            );
        }
    }
}

#[test]
fn sync_stats_rejects_bad_input() {
    assert!(batchnorm::sync_stats::<f64>(&[]).is_err());
    let a = MinibatchStats::of(&Tensor::<f64>::full((2, 1, 2, 2), 1.0)).unwrap();
    let b = MinibatchStats::of(&Tensor::<f64>::full((2, 2, 2, 2), 1.0)).unwrap();
    assert!(batchnorm::sync_stats(&[a, b]).is_err());
}

fn fold_case(seed: u64, k: usize) {
    let mut r = rng(seed);
    let (cin, cout) = (3, 4);
    let template = ConvParams::<f64>::zeros(cout, cin, k);
    let conv = init::he_conv(&mut r, &template, 1.0, 0.5);
    let p = init::random_channel_params::<f64, _>(&mut r, cout);
    let mut running = RunningStats::new(cout, 1.0).unwrap();
    running.mu = (0..cout).map(|_| r.random_range(-1.0..1.0)).collect();
    running.var = (0..cout).map(|_| r.random_range(0.2..3.0)).collect();
    let x = init::uniform_tensor::<f64, _>(&mut r, (2, cin, 5, 5), -1.0, 1.0);

    let reference = batchnorm::inference_forward(&conv.forward(&x).unwrap(), &running, &p).unwrap();
    let folded = batchnorm::fold_into_conv(&conv, &running, &p)
        .unwrap()
        .forward(&x)
        .unwrap();
    let r = compare(folded.data(), reference.data(), 1e-12).unwrap();
    assert!(r.passed, "k={k}: {r:?}");
}

#[test]
fn fold_matches_conv_then_bn() {
    for seed in 0..10 {
        fold_case(seed, 1);
        fold_case(100 + seed, 3);
    }
}

#[test]
fn running_stats_track_constant_batches() {
    let x = init::uniform_tensor::<f64, _>(&mut rng(5), (4, 2, 3, 3), -1.0, 1.0);
    let batch = MinibatchStats::of(&x).unwrap();
    let mut running = RunningStats::new(2, 0.1).unwrap();
    for _ in 0..400 {
        running = running.update(&batch).unwrap();
    }
    assert!(compare(&running.mu, &batch.mu, 1e-12).unwrap().passed);
    assert!(compare(&running.var, &batch.var, 1e-12).unwrap().passed);
    assert!(RunningStats::<f64>::new(2, 0.0).is_err());
    assert!(RunningStats::<f64>::new(2, 1.5).is_err());
}

fn gamma_strategy() -> impl Strategy<Value = f64> {
    (0.1f64..2.0, any::<bool>()).prop_map(|(g, neg)| if neg { -g } else { g })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pi_round_trip(
        xs in prop::collection::vec(-10.0f64..10.0, 1..40),
        gamma in gamma_strategy(),
        beta in -2.0f64..2.0,
    ) {
        let x = Tensor::from_vec((1, 1, 1, xs.len()), xs).unwrap();
        let p = ChannelParams::new(vec![gamma], vec![beta], 1e-5).unwrap();
        let back = batchnorm::pi_inverse(&batchnorm::affine(&x, &p).unwrap(), &p).unwrap();
        let shift = (beta / gamma).abs();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * (b.abs() + shift), "{a} vs {b}");
        }
    }

    #[test]
    fn dagger_equals_star(seed in 0u64..10_000, n in 1usize..4, c in 1usize..4, hw in 1usize..5) {
        let (x, dy, p) = instance::<f64>(seed, (n.max(2), c, hw, hw));
        let f = batchnorm::forward(&x, &p).unwrap();
        let star = batchnorm::backward_star(&f.xhat, &dy, &f.stats.var, &p).unwrap();
        let dagger = batchnorm::backward_dagger(&f.y, &dy, &f.stats.var, &p).unwrap();
        let r = check_equivalence(&star, &dagger, 1e-9).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn stats_ignore_batch_order(seed in 0u64..10_000) {
        let x = init::uniform_tensor::<f64, _>(&mut rng(seed), (4, 2, 2, 2), -3.0, 3.0);
        let parts = x.split_batch(&[1, 1, 1, 1]).unwrap();
        let mut data = Vec::new();
        for t in parts.iter().rev() {
            data.extend_from_slice(t.data());
        }
        let reversed = Tensor::from_vec(x.shape(), data).unwrap();
        let (a, b) = (MinibatchStats::of(&x).unwrap(), MinibatchStats::of(&reversed).unwrap());
        prop_assert!(compare(&a.mu, &b.mu, 1e-13).unwrap().passed);
        prop_assert!(compare(&a.var, &b.var, 1e-13).unwrap().passed);
    }
}
