use std::sync::Arc;

use mfwsn::capture::CaptureCurve;
use mfwsn::model::{parse_model, ActionKind, Component, Rate, Transition};
use mfwsn::pctmc::{
    check_density_dependence, compile, transform_broadcast, transform_single_receiver,
    CompileOptions, Pctmc, QArgument, RateLaw, RateScaling,
};
use mfwsn::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALOHA: &str = include_str!("../models/aloha3.json");
const DISCOVERY: &str = include_str!("../models/discovery6.json");

/// Simple decreasing stand-in for q, unrelated to the channel code.
#[derive(Debug)]
struct Toy;

impl CaptureCurve for Toy {
    fn q(&self, i: f64) -> Result<f64> {
        Ok(if i < 1.0 { i } else { i * 0.8f64.powf(i - 1.0) })
    }
    fn describe(&self) -> String {
        "toy".into()
    }
}

fn drift(p: &Pctmc, x: &[f64]) -> Vec<f64> {
    let n = p.n_states();
    let mut out = vec![0.0; n];
    for (k, t) in p.transitions().iter().enumerate() {
        let r = p.rate(k, x).unwrap();
        for (o, v) in out.iter_mut().zip(t.change_vector(n, p.size())) {
            *o += v * r;
        }
    }
    out
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn aloha_drift_matches_hand_derived_system() {
    let bundle = parse_model(ALOHA).unwrap();
    let (r_o, r_send, r_r) = (0.0055, 1.0, 0.08);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for size in [10usize, 500] {
        let p = transform_single_receiver(&bundle.component, size, Arc::new(Toy), &bundle.initial)
            .unwrap();
        let n = size as f64;
        for _ in 0..100 {
            let x = random_simplex(&mut rng, 3);
            let (xo, xt, xr) = (x[0], x[1], x[2]);
            let q = Toy.q(n * xt).unwrap();
            let expected = [
                -r_o * xo + r_send * q / n,
                -r_send * (xt - q / n) - r_send * q / n + r_o * xo + r_r * xr,
                -r_r * xr + r_send * (xt - q / n),
            ];
            assert!(
                close(&drift(&p, &x), &expected, 1e-12),
                "N={size} x={x:?}"
            );
        }
    }
}

fn discovery_oracle(x: &[f64], d: f64, argument: QArgument) -> [f64; 6] {
    let (rs, rp, rt) = (100.0, 1.0, 30.0);
    let q = |g: f64| Toy.q(g).unwrap();
    let cm = x[1] + x[3];
    let ca = x[4] + x[5];
    let tot = cm + ca;
    let (qm, qa) = match argument {
        QArgument::InterferenceTotal => (q(d * tot), q(d * tot)),
        QArgument::SenderCount => (q(d * cm), q(d * ca)),
    };
    let fm = if tot > 0.0 && cm > 0.0 { cm / tot * qm } else { 0.0 };
    let fa = if tot > 0.0 && ca > 0.0 { ca / tot * qa } else { 0.0 };
    let (rm0, rm2, ra2) = (rs * fm * x[0], rs * fm * x[2], rs * fa * x[2]);
    [
        -rp * x[0] - rm0 + ra2 + rs * x[4],
        rp * x[0] - rs * x[1],
        rs * x[1] - ra2 - rm2 - rt * x[2] + rs * x[5] + rs * x[3],
        rt * x[2] - rs * x[3],
        rm0 - rs * x[4],
        rm2 - rs * x[5],
    ]
}

#[test]
fn discovery_drift_matches_hand_derived_system() {
    let bundle = parse_model(DISCOVERY).unwrap();
    let config = bundle.broadcast.clone().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for argument in [QArgument::InterferenceTotal, QArgument::SenderCount] {
        for size in [10usize, 500] {
            let p = transform_broadcast(
                &bundle.component,
                &config,
                size,
                argument,
                Arc::new(Toy),
                &bundle.initial,
            )
            .unwrap();
            let d = size as f64 * config.p;
            for _ in 0..100 {
                let x = random_simplex(&mut rng, 6);
                let expected = discovery_oracle(&x, d, argument);
                assert!(
                    close(&drift(&p, &x), &expected, 1e-12),
                    "{argument} N={size} x={x:?}"
                );
            }
        }
    }
}

#[test]
fn discovery_drops_the_self_loop() {
    let bundle = parse_model(DISCOVERY).unwrap();
    let p = compile(&bundle, &CompileOptions::default()).unwrap();
    assert_eq!(p.transitions().len(), 9);
    assert_eq!(p.dropped_self_loops(), ["receive(ack)".to_string()]);
    for t in p.transitions() {
        let nu = t.scaled_change(6, p.size());
        assert_eq!(nu.iter().sum::<i32>(), 0);
        assert_eq!(nu.iter().filter(|v| **v != 0).count(), 2);
    }
}

#[test]
fn capture_and_failure_add_up_to_send_rate() {
    let bundle = parse_model(ALOHA).unwrap();
    let p = compile(&bundle, &CompileOptions::default()).unwrap();
    let cap = p.transitions().iter().position(|t| t.label == "capture").unwrap();
    let fail = p.transitions().iter().position(|t| t.label == "failure").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let x = random_simplex(&mut rng, 3);
        let total = p.rate(cap, &x).unwrap() + p.rate(fail, &x).unwrap();
        let expected = 1.0 * p.size() as f64 * x[1];
        assert!((total - expected).abs() <= 1e-12 * expected.max(1.0));
        assert!(p.rate(fail, &x).unwrap() >= -1e-12);
    }
}

#[test]
fn rates_are_non_negative_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (text, n) in [(ALOHA, 3), (DISCOVERY, 6)] {
        let p = compile(&parse_model(text).unwrap(), &CompileOptions::default()).unwrap();
        for _ in 0..50 {
            let mut x = random_simplex(&mut rng, n);
            // include faces of the simplex
            let k = rng.random_range(0..n);
            x[k] = 0.0;
            let s: f64 = x.iter().sum();
            x.iter_mut().for_each(|v| *v /= s);
            for k in 0..p.transitions().len() {
                assert!(p.rate(k, &x).unwrap() >= -1e-12);
            }
        }
    }
}

#[test]
fn receive_rate_vanishes_without_senders() {
    let bundle = parse_model(DISCOVERY).unwrap();
    let p = compile(&bundle, &CompileOptions::default()).unwrap();
    let x = [0.5, 0.0, 0.5, 0.0, 0.0, 0.0];
    for (k, t) in p.transitions().iter().enumerate() {
        if t.label.starts_with("receive") {
            assert_eq!(p.rate(k, &x).unwrap(), 0.0);
        }
    }
}

#[test]
fn discovery_is_density_dependent_at_fixed_neighborhood() {
    let bundle = parse_model(DISCOVERY).unwrap();
    let d = 10.0;
    let build = |n: usize| -> Result<Pctmc> {
        let mut config = bundle.broadcast.clone().unwrap();
        config.p = d / n as f64;
        transform_broadcast(
            &bundle.component,
            &config,
            n,
            QArgument::InterferenceTotal,
            Arc::new(Toy),
            &bundle.initial,
        )
    };
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let probes: Vec<_> = (0..20).map(|_| random_simplex(&mut rng, 6)).collect();
    let report = check_density_dependence(&build, &[10, 100, 1000], &probes).unwrap();
    assert!(report.passes(), "{report:?}");
    assert!(report.fixed_size_transitions().is_empty());
}

#[test]
fn single_receiver_rates_scale_per_size_only() {
    let bundle = parse_model(ALOHA).unwrap();
    let build = |n: usize| {
        transform_single_receiver(&bundle.component, n, Arc::new(Toy), &bundle.initial)
    };
    let probes = vec![vec![0.2, 0.5, 0.3]];
    let report = check_density_dependence(&build, &[10, 100], &probes).unwrap();
    assert!(!report.passes());
    assert_eq!(report.fixed_size_transitions(), ["capture", "failure"]);
    for t in &report.transitions {
        assert!(t.change_consistent);
        assert_eq!(t.rate_consistent, t.scaling == RateScaling::Proportional);
    }
}

#[test]
fn density_check_rejects_changing_transition_sets() {
    let bundle = parse_model(ALOHA).unwrap();
    let build = |n: usize| -> Result<Pctmc> {
        let p = transform_single_receiver(&bundle.component, n, Arc::new(Toy), &bundle.initial)?;
        if n == 10 {
            Ok(p)
        } else {
            let mut t = p.transitions().to_vec();
            t.pop();
            Pctmc::new(p.states().to_vec(), n, t, p.x0().to_vec(), Arc::new(Toy))
        }
    };
    let err = check_density_dependence(&build, &[10, 20], &[vec![1.0, 0.0, 0.0]]).unwrap_err();
    assert!(matches!(err, Error::Structural(_)));
}

#[test]
fn density_check_flags_a_quadratic_rate() {
    let bundle = parse_model(ALOHA).unwrap();
    let build = |n: usize| -> Result<Pctmc> {
        let p = transform_single_receiver(&bundle.component, n, Arc::new(Toy), &bundle.initial)?;
        Ok(p.with_law(
            0,
            RateLaw::Custom {
                description: "N^2*x_O".into(),
                law: Arc::new(|x, n, _| Ok((n * n) as f64 * x[0])),
            },
        ))
    };
    let report = check_density_dependence(&build, &[10, 20], &[vec![0.5, 0.5, 0.0]]).unwrap();
    assert!(!report.transitions[0].rate_consistent);
    assert_eq!(report.transitions[0].scaling, RateScaling::Unknown);
}

fn component(transitions: Vec<(usize, usize, ActionKind, Rate)>) -> Component {
    Component::new(
        vec!["a".into(), "b".into(), "c".into()],
        transitions
            .into_iter()
            .map(|(from, to, action, rate)| Transition {
                from,
                to,
                action,
                rate,
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn unpaired_capture_is_rejected() {
    let c = component(vec![(0, 1, ActionKind::Capture, Rate::Fixed(1.0))]);
    let err = transform_single_receiver(&c, 10, Arc::new(Toy), &[1.0, 0.0, 0.0]).unwrap_err();
    assert!(matches!(err, Error::Model(_)));
    let c = component(vec![
        (0, 1, ActionKind::Capture, Rate::Fixed(1.0)),
        (0, 2, ActionKind::Failure, Rate::Fixed(2.0)),
    ]);
    let err = transform_single_receiver(&c, 10, Arc::new(Toy), &[1.0, 0.0, 0.0]).unwrap_err();
    assert!(matches!(err, Error::Model(_)));
}

#[test]
fn transformations_refuse_the_wrong_family() {
    let aloha = parse_model(ALOHA).unwrap();
    let disc = parse_model(DISCOVERY).unwrap();
    let err = transform_single_receiver(&disc.component, 10, Arc::new(Toy), &disc.initial)
        .unwrap_err();
    assert!(matches!(err, Error::Inapplicable(_)));
    let err = transform_broadcast(
        &aloha.component,
        disc.broadcast.as_ref().unwrap(),
        10,
        QArgument::default(),
        Arc::new(Toy),
        &aloha.initial,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Inapplicable(_)));
}

#[test]
fn unmatched_receive_and_mixed_send_rates_are_rejected() {
    let disc = parse_model(DISCOVERY).unwrap();
    let config = disc.broadcast.clone().unwrap();
    let c = component(vec![
        (0, 1, ActionKind::send("msg"), Rate::Fixed(1.0)),
        (1, 2, ActionKind::receive("ack"), Rate::Passive),
    ]);
    let err = transform_broadcast(&c, &config, 10, QArgument::default(), Arc::new(Toy), &[1.0, 0.0, 0.0])
        .unwrap_err();
    assert!(matches!(err, Error::Model(_)));
    let c = component(vec![
        (0, 1, ActionKind::send("msg"), Rate::Fixed(1.0)),
        (1, 0, ActionKind::send("msg"), Rate::Fixed(2.0)),
        (2, 0, ActionKind::receive("msg"), Rate::Passive),
    ]);
    let err = transform_broadcast(&c, &config, 10, QArgument::default(), Arc::new(Toy), &[1.0, 0.0, 0.0])
        .unwrap_err();
    assert!(matches!(err, Error::Model(_)));
}

#[test]
fn restriction_violations_block_broadcast_compilation() {
    let disc = parse_model(DISCOVERY).unwrap();
    let c = component(vec![
        (0, 1, ActionKind::send("msg"), Rate::Fixed(1.0)),
        (0, 2, ActionKind::receive("msg"), Rate::Passive),
    ]);
    let err = transform_broadcast(
        &c,
        disc.broadcast.as_ref().unwrap(),
        10,
        QArgument::default(),
        Arc::new(Toy),
        &[1.0, 0.0, 0.0],
    )
    .unwrap_err();
    assert!(err.to_string().contains("state 'a'"));
}

#[test]
fn listing_and_ode_text_name_every_state() {
    let p = compile(&parse_model(ALOHA).unwrap(), &CompileOptions::default()).unwrap();
    let text = p.ode_text();
    for s in ["d x_O/dt", "d x_T/dt", "d x_R/dt", "q(N*x_T)"] {
        assert!(text.contains(s), "{text}");
    }
    let listing = p.listing();
    assert_eq!(listing.len(), 4);
    assert_eq!(listing[1].change, vec![1, -1, 0]);
    assert_eq!(p.fingerprint(), p.clone().fingerprint());
    assert_ne!(p.fingerprint(), p.with_capture(Arc::new(Toy)).fingerprint());
}

#[test]
fn table_capture_source_stays_close_to_direct() {
    let bundle = parse_model(ALOHA).unwrap();
    let direct = compile(&bundle, &CompileOptions::default()).unwrap();
    let table = compile(
        &bundle,
        &CompileOptions {
            capture: mfwsn::pctmc::CaptureSource::Table { n_points: 200 },
            ..Default::default()
        },
    )
    .unwrap();
    let x = [0.3, 0.4, 0.3];
    for k in 0..direct.transitions().len() {
        let a = direct.rate(k, &x).unwrap();
        let b = table.rate(k, &x).unwrap();
        assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0), "{a} {b}");
    }
}
