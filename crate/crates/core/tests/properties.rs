use dkd_core::data::{build_universe, make_trials, sample_dataset};
use dkd_core::losses::{
    decouple, decouple_logits, dkd_loss, kd_conventional, nskd_loss, tskd_loss, DkdConfig, Gamma, KdMode,
};
use dkd_core::models::{init_params, MlpParams};
use dkd_core::numerics::{kl_divergence, softmax, Logits, RngStream};
use proptest::prelude::*;

fn logits(max_k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-15.0f64..15.0, 2..max_k)
}

fn pair(max_k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (2..max_k).prop_flat_map(|k| {
        (
            prop::collection::vec(-15.0f64..15.0, k),
            prop::collection::vec(-15.0f64..15.0, k),
            0..k,
        )
    })
}

fn lg(v: &[f64]) -> Logits {
    Logits::new(v.to_vec()).unwrap()
}

fn dkd(gamma: f64, t: f64) -> DkdConfig {
    DkdConfig {
        mode: KdMode::Dkd,
        gamma: Gamma::Value(gamma),
        temperature: t,
        ..DkdConfig::default()
    }
}

proptest! {
    #[test]
    fn decomposition_identity((zt, zs, tau) in pair(40)) {
        let kd = kd_conventional(&softmax(&lg(&zt)), &softmax(&lg(&zs))).unwrap();
        let dt = decouple_logits(&lg(&zt), tau).unwrap();
        let ds = decouple_logits(&lg(&zs), tau).unwrap();
        let rhs = tskd_loss(&dt, &ds).unwrap() + dt.p_nontarget_total() * nskd_loss(&dt, &ds).unwrap();
        prop_assert!((kd - rhs).abs() <= 1e-9 * (1.0 + kd.abs()), "{kd} vs {rhs}");
    }

    #[test]
    fn decoupling_round_trips(z in logits(40), pick in any::<prop::sample::Index>()) {
        let p = softmax(&lg(&z));
        let tau = pick.index(z.len());
        let back = decouple(&p, tau).unwrap().reconstruct();
        for (a, b) in back.iter().zip(p.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let d = decouple_logits(&lg(&z), tau).unwrap();
        let s: f64 = d.nontarget_dist().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!((d.p_target() + d.p_nontarget_total() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn kl_is_non_negative((a, b, _t) in pair(40)) {
        let kl = kl_divergence(&softmax(&lg(&a)), &softmax(&lg(&b))).unwrap().value();
        prop_assert!(kl >= -1e-12);
    }

    #[test]
    fn softmax_ignores_shifts(z in logits(40), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        let (p, q) = (softmax(&lg(&z)), softmax(&lg(&shifted)));
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn dkd_is_non_negative_and_zero_at_match(
        (zt, zs, tau) in pair(30),
        gamma in 0.0f64..8.0,
        t in 0.5f64..4.0,
    ) {
        let d = dkd_loss(&lg(&zt), &lg(&zs), tau, &dkd(gamma, t)).unwrap();
        prop_assert!(d.loss >= -1e-12 && d.tskd >= -1e-12 && d.nskd >= -1e-12);
        let same = dkd_loss(&lg(&zt), &lg(&zt), tau, &dkd(gamma, t)).unwrap();
        prop_assert!(same.loss.abs() <= 1e-12);
        prop_assert!(same.grad.iter().all(|g| g.abs() <= 1e-12));
    }

    #[test]
    fn dkd_gradient_sums_to_zero((zt, zs, tau) in pair(30), gamma in 0.0f64..8.0) {
        let d = dkd_loss(&lg(&zt), &lg(&zs), tau, &dkd(gamma, 1.0)).unwrap();
        let s: f64 = d.grad.iter().sum();
        prop_assert!(s.abs() <= 1e-10, "{s}");
    }

    #[test]
    fn nskd_vanishes_for_two_classes((zt, zs, tau) in pair(3)) {
        let dt = decouple_logits(&lg(&zt), tau).unwrap();
        let ds = decouple_logits(&lg(&zs), tau).unwrap();
        prop_assert_eq!(nskd_loss(&dt, &ds).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoints_round_trip(
        widths in prop::collection::vec(1usize..12, 2..5),
        classes in 2usize..10,
        seed in any::<u64>(),
    ) {
        let p = init_params(&widths, classes, &mut RngStream::new(seed)).unwrap();
        let bytes = p.to_bytes();
        prop_assert_eq!(MlpParams::from_bytes(&bytes).unwrap(), p);
        prop_assert!(MlpParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn data_is_a_function_of_its_seeds(seed in any::<u64>(), speakers in 2usize..8) {
        let build = || {
            let u = build_universe(speakers, 3, 5, 0.3, seed).unwrap();
            let ids: Vec<usize> = (0..speakers).collect();
            let d = sample_dataset(&u, &ids, 3, seed ^ 1).unwrap();
            let t = make_trials(&d, 5, 5, seed ^ 2).unwrap();
            (d, t)
        };
        let (a, b) = (build(), build());
        prop_assert_eq!(&a.0, &b.0);
        prop_assert_eq!(a.1.trials, b.1.trials);
    }
}
