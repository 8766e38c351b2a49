use proptest::prelude::*;
use ssm_xbar::ssm::{init_kernel, kernel_conv_unroll, kernel_run, DiscreteKernel, C64};

fn complex(max_norm: f64) -> impl Strategy<Value = C64> {
    (0.0..max_norm, 0.0..std::f64::consts::TAU).prop_map(|(r, t)| C64::from_polar(r, t))
}

fn kernel() -> impl Strategy<Value = DiscreteKernel> {
    (1usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec(complex(0.99), n),
            prop::collection::vec(complex(2.0), n),
            prop::collection::vec(complex(2.0), n),
        )
            .prop_map(|(a_bar, b_bar, c_bar)| DiscreteKernel { a_bar, b_bar, c_bar })
    })
}

fn signal(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..=max_len)
}

fn max_norm(ys: &[C64]) -> f64 {
    ys.iter().fold(0.0, |m, y| m.max(y.norm()))
}

fn rel_err(a: &[C64], b: &[C64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).norm()));
    diff / max_norm(b).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn recurrence_equals_convolution(dk in kernel(), u in signal(64)) {
        let rec = kernel_run(&dk, &u).unwrap();
        let conv = kernel_conv_unroll(&dk, &u).unwrap();
        prop_assert_eq!(rec.len(), u.len());
        prop_assert!(rel_err(&rec, &conv) <= 1e-6, "relative error {}", rel_err(&rec, &conv));
    }

    #[test]
    fn time_invariance(dk in kernel(), u in signal(40), delay in 0usize..24) {
        let y = kernel_run(&dk, &u).unwrap();
        let mut shifted = vec![0.0; delay];
        shifted.extend_from_slice(&u);
        let ys = kernel_run(&dk, &shifted).unwrap();
        prop_assert!(ys[..delay].iter().all(|z| z.norm() == 0.0));
        prop_assert_eq!(&ys[delay..], &y[..]);
    }

    #[test]
    fn linearity(dk in kernel(), pair in (1usize..48).prop_flat_map(|l| (
        prop::collection::vec(-1.0f64..1.0, l),
        prop::collection::vec(-1.0f64..1.0, l),
    )), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let (u, v) = pair;
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let yu = kernel_run(&dk, &u).unwrap();
        let yv = kernel_run(&dk, &v).unwrap();
        let expect: Vec<C64> = yu.iter().zip(&yv).map(|(a, b)| a * alpha + b * beta).collect();
        let got = kernel_run(&dk, &mix).unwrap();
        let scale = max_norm(&yu) * alpha.abs() + max_norm(&yv) * beta.abs() + 1e-12;
        let diff = got.iter().zip(&expect).fold(0.0f64, |m, (x, y)| m.max((x - y).norm()));
        prop_assert!(diff / scale <= 1e-9);
    }

    #[test]
    fn initialized_kernels_are_stable_and_deterministic(n in 1usize..20, seed in any::<u64>()) {
        let k = init_kernel(n, seed).unwrap();
        prop_assert_eq!(&k, &init_kernel(n, seed).unwrap());
        prop_assert!(k.a_re().iter().all(|&re| re < 0.0));
        let dk = k.discretize().unwrap();
        prop_assert!(dk.a_bar.iter().all(|a| a.norm() < 1.0));
    }
}
