use durnn::cell::{ConstraintSpec, Head, LayerSpec, Network, Variant};
use durnn::grad::{network_gradients, GradOptions};
use durnn::oracle::{
    compare_tensors, finite_diff_frozen, kink_guarded, random_instance, verify_suite, FrozenMode,
    InstanceSizes, ParamRef, VerifyConfig,
};
use durnn::{ParamKind, SeededRng};

#[test]
fn default_suite_passes() {
    let report = verify_suite(&VerifyConfig::default()).unwrap();
    let summary = report.summary();
    println!("{}", summary.to_text());
    assert!(report.passed());
}

#[test]
fn every_variant_and_param_appears_in_the_report() {
    let cfg = VerifyConfig {
        oracle_instances: 1,
        fd_instances: 0,
        ..VerifyConfig::default()
    };
    let report = verify_suite(&cfg).unwrap();
    for k in ParamKind::ALL {
        assert!(
            report.entries.iter().any(|e| e.param == k.name()),
            "{}",
            k.name()
        );
    }
}

#[test]
fn central_differences_converge_quadratically() {
    // Away from kinks the frozen loss is smooth, so halving the step should
    // cut the truncation error by about four. The softmax head keeps the
    // third derivative well above rounding level.
    let mut rng = SeededRng::new(77);
    let sizes = InstanceSizes {
        neurons: 3,
        inputs: 2,
        steps: 5,
        batch: 2,
        layers: 1,
    };
    let (net, batch, record, grads) = loop {
        let (net, batch, record) =
            kink_guarded(&mut rng, |r| random_instance(r, Variant::Durnn, sizes)).unwrap();
        let (_, grads) =
            network_gradients(&net, &batch.inputs, &batch.targets, GradOptions::default()).unwrap();
        if matches!(net.head, Head::Classification { .. })
            && grads.layers[0].params.u.iter().any(|g| g.abs() > 1e-2)
        {
            break (net, batch, record, grads);
        }
    };
    let analytic = grads.layers[0].params.get(ParamKind::U);
    let err = |h: f64| {
        let fd = finite_diff_frozen(
            &net,
            &batch,
            &record,
            ParamRef::Layer(0, ParamKind::U),
            h,
            FrozenMode::Selection,
        )
        .unwrap();
        fd.iter()
            .zip(analytic)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let coarse = err(8e-4);
    let fine = err(4e-4);
    let ratio = coarse / fine;
    assert!(
        ratio > 3.0 && ratio < 5.0,
        "ratio {ratio} ({coarse:e} vs {fine:e})"
    );
}

#[test]
fn selection_parameters_match_direct_selection_loss() {
    let mut rng = SeededRng::new(5);
    let sizes = InstanceSizes {
        neurons: 4,
        inputs: 2,
        steps: 6,
        batch: 2,
        layers: 1,
    };
    for _ in 0..5 {
        let (net, batch, record) =
            kink_guarded(&mut rng, |r| random_instance(r, Variant::Durnn, sizes)).unwrap();
        let (_, grads) =
            network_gradients(&net, &batch.inputs, &batch.targets, GradOptions::default()).unwrap();
        for k in [
            ParamKind::WSs,
            ParamKind::WLs,
            ParamKind::BS,
            ParamKind::BThre,
        ] {
            let fd = finite_diff_frozen(
                &net,
                &batch,
                &record,
                ParamRef::Layer(0, k),
                1e-5,
                FrozenMode::DirectSelection,
            )
            .unwrap();
            let e = compare_tensors(
                "fd",
                k.name(),
                Some(0),
                grads.layers[0].params.get(k),
                &fd,
                1e-4,
            );
            assert!(e.pass, "{e:?}");
        }
    }
}

#[test]
fn disabling_selection_bias_zeroes_only_b_s() {
    let mut rng = SeededRng::new(9);
    let (net, batch) = random_instance(&mut rng, Variant::Durnn, InstanceSizes::default()).unwrap();
    let (_, on) =
        network_gradients(&net, &batch.inputs, &batch.targets, GradOptions::default()).unwrap();
    let (_, off) = network_gradients(
        &net,
        &batch.inputs,
        &batch.targets,
        GradOptions {
            selection_bias: false,
        },
    )
    .unwrap();
    for (a, b) in on.layers.iter().zip(&off.layers) {
        assert!(b.params.b_s.iter().all(|&x| x == 0.0));
        for k in ParamKind::ALL.into_iter().filter(|&k| k != ParamKind::BS) {
            assert_eq!(a.params.get(k), b.params.get(k));
        }
    }
}

#[test]
fn untrained_adding_network_predicts_the_mean() {
    let mut rng = SeededRng::new(1);
    let specs = [LayerSpec {
        neurons: 16,
        variant: Variant::Durnn,
        constraint: ConstraintSpec::standard(100, true),
    }];
    let net = Network::init(2, &specs, Head::Regression, 1.0, &mut rng).unwrap();
    let batch = durnn::tasks::gen_adding(100, 2000, &mut rng).unwrap();
    let out = net.evaluate(&batch.inputs, &batch.targets).unwrap();
    assert!((out.loss - 1.0 / 6.0).abs() < 0.02, "{}", out.loss);
    assert!(out.predictions.as_slice().iter().all(|&p| p == 1.0));
}

#[test]
fn bounds_hold_on_short_sequences() {
    let out = durnn::oracle::bound_suite(&[20, 60], 10, 8, 3).unwrap();
    println!("{}", out.report.summary().to_text());
    assert!(out.report.passed());
    assert!(
        out.exact_checked.iter().all(|&(_, n)| n > 0),
        "{:?}",
        out.exact_checked
    );
}
