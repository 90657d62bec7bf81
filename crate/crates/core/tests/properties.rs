use durnn::cell::{ConstraintSpec, LayerSpec, Network, Variant};
use durnn::linalg::{clip_singular_values, spectral_norm, svd_small};
use durnn::optim::project_constraints;
use durnn::oracle::{random_instance, InstanceSizes};
use durnn::tasks::PixelPermutation;
use durnn::{Head, Mat, SeededRng};
use proptest::prelude::*;

fn random_mat(seed: u64, rows: usize, cols: usize, scale: f64) -> Mat {
    let mut rng = SeededRng::new(seed);
    Mat::from_fn(rows, cols, |_, _| scale * rng.gaussian())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipping_bounds_and_is_idempotent(seed in any::<u64>(), n in 1usize..12, delta in 0.05f64..0.999, scale in 0.01f64..5.0) {
        let a = random_mat(seed, n, n, scale);
        let c = clip_singular_values(&a, delta).unwrap();
        prop_assert!(spectral_norm(&c).unwrap() <= delta + 1e-10);
        let again = clip_singular_values(&c, delta).unwrap();
        let diff = again.sub(&c).unwrap().max_abs();
        prop_assert!(diff <= 1e-12 * c.max_abs().max(1.0));
    }

    #[test]
    fn clipping_keeps_singular_vectors(seed in any::<u64>(), n in 2usize..10) {
        let a = random_mat(seed, n, n, 1.0);
        let delta = 0.5;
        let before = svd_small(&a).unwrap();
        let after = svd_small(&clip_singular_values(&a, delta).unwrap()).unwrap();
        for (s0, s1) in before.sigma.iter().zip(&after.sigma) {
            prop_assert!((s0.min(delta) - s1).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_states_are_nonnegative_and_selection_in_unit_interval(seed in any::<u64>(), v in 0usize..5) {
        let variant = Variant::ALL[v];
        let mut rng = SeededRng::new(seed);
        let (net, batch) = random_instance(&mut rng, variant, InstanceSizes { neurons: 6, inputs: 3, steps: 12, batch: 3, layers: 3 }).unwrap();
        for cache in net.forward(&batch.inputs).unwrap() {
            for st in &cache.steps {
                for m in [&st.h_short, &st.h_long, &st.i] {
                    prop_assert!(m.as_slice().iter().all(|&x| x >= 0.0 && x.is_finite()));
                }
                prop_assert!(st.s.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn projection_lands_in_the_feasible_set(seed in any::<u64>(), horizon in 1usize..2000, top in any::<bool>(), v in 0usize..5) {
        let variant = Variant::ALL[v];
        let spec = ConstraintSpec::standard(horizon, top);
        let mut rng = SeededRng::new(seed);
        let mut p = durnn::LayerParams::init(3, 5, variant, &spec, &mut rng).unwrap();
        p.w_rec = random_mat(seed ^ 1, 5, 5, 3.0);
        for x in p.u.iter_mut() { *x = rng.uniform_range(-2.0, 3.0); }
        p.b_thre = rng.uniform_range(-1.0, 2.0);
        project_constraints(&mut p, variant, &spec).unwrap();
        let bound = if variant.diagonal_short() { spec.u_high } else { spec.delta };
        prop_assert!(spectral_norm(&p.w_rec).unwrap() <= bound + 1e-10);
        prop_assert!(p.u.iter().all(|&u| u >= spec.u_low && u <= spec.u_high));
        prop_assert!((0.0..=1.0).contains(&p.b_thre));
    }

    #[test]
    fn permutation_inverse_round_trips(seed in any::<u64>(), len in 1usize..900) {
        let p = PixelPermutation::from_seed(seed, len);
        let inv = p.inverse();
        for (i, &j) in p.as_slice().iter().enumerate() {
            prop_assert_eq!(inv.as_slice()[j], i);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn svd_reconstructs_up_to_128(seed in any::<u64>(), n in 1usize..=128) {
        let a = random_mat(seed, n, n, 1.0);
        let svd = svd_small(&a).unwrap();
        let err = svd.reconstruct().sub(&a).unwrap().max_abs();
        prop_assert!(err < 1e-10, "{}", err);
        prop_assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn same_seed_gives_bitwise_identical_networks_and_outputs() {
    let build = || {
        let mut rng = SeededRng::new(2024);
        let specs = [LayerSpec {
            neurons: 8,
            variant: Variant::Durnn,
            constraint: ConstraintSpec::standard(30, true),
        }];
        let net = Network::init(2, &specs, Head::Regression, 1.0, &mut rng).unwrap();
        let batch = durnn::tasks::gen_adding(30, 4, &mut rng).unwrap();
        let caches = net.forward(&batch.inputs).unwrap();
        (net, caches)
    };
    let (a, ca) = build();
    let (b, cb) = build();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}
