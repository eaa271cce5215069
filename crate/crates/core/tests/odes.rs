use std::sync::Arc;

use mfwsn::model::parse_model;
use mfwsn::odes::{
    basin_grid, export_vector_field_grid, find_fixpoint, integrate, integrate_at, jacobian_fd,
    vector_field, AxisSpec, BasinOptions, Closure, FixpointOptions, GridSpec, SolverOptions,
};
use mfwsn::pctmc::{compile, CompileOptions, Pctmc, RateLaw};
use mfwsn::{ChannelModel, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALOHA: &str = include_str!("../models/aloha3.json");
const DISCOVERY: &str = include_str!("../models/discovery6.json");

fn aloha(size: usize, channel: Option<ChannelModel>) -> Pctmc {
    let mut bundle = parse_model(ALOHA).unwrap();
    if let Some(c) = channel {
        bundle.channel = c;
    }
    compile(
        &bundle,
        &CompileOptions {
            size: Some(size),
            ..Default::default()
        },
    )
    .unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn field_at_all_idle_is_generation_only() {
    let p = aloha(1000, None);
    let f = vector_field(&p, &[1.0, 0.0, 0.0]).unwrap();
    assert_eq!(f, vec![-0.0055, 0.0055, 0.0]);
}

#[test]
fn field_entries_sum_to_zero() {
    let p = aloha(90, None);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let x = random_simplex(&mut rng, 3);
        let f = vector_field(&p, &x).unwrap();
        assert!(f.iter().sum::<f64>().abs() < 1e-14, "{f:?}");
    }
}

#[test]
fn discovery_field_from_the_initial_state() {
    let p = compile(&parse_model(DISCOVERY).unwrap(), &CompileOptions::default()).unwrap();
    let f = vector_field(&p, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(f, vec![-1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn vector_field_rejects_points_off_the_simplex() {
    let p = aloha(90, None);
    assert!(matches!(
        vector_field(&p, &[0.5, 0.4, 0.0]),
        Err(Error::Domain(_))
    ));
}

#[test]
fn exponential_decay_matches_closed_form() {
    // Internal-only chain: x_O(t) = e^{-r_o t} in the absence of other flows.
    let p = aloha(90, None);
    let only_generate = Pctmc::new(
        p.states().to_vec(),
        90,
        p.transitions()[..1].to_vec(),
        p.x0().to_vec(),
        p.capture().clone(),
    )
    .unwrap();
    let traj = integrate_at(&only_generate, &[1.0, 0.0, 0.0], &[0.0, 100.0, 400.0], &SolverOptions::default()).unwrap();
    for (t, x) in traj.times.iter().zip(&traj.points) {
        assert!((x[0] - (-0.0055 * t).exp()).abs() < 1e-8);
    }
}

#[test]
fn trajectories_stay_on_the_simplex() {
    let p = aloha(90, None);
    for x0 in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.2, 0.3, 0.5]] {
        let traj = integrate(&p, &x0, 2000.0, &SolverOptions::default()).unwrap();
        assert!(traj.meta.max_clip_defect < 1e-8, "{}", traj.meta.max_clip_defect);
        for x in &traj.points {
            assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            assert!(x.iter().all(|v| *v > -1e-8));
        }
    }
}

#[test]
fn sampled_output_hits_the_requested_grid() {
    let p = aloha(90, None);
    let opts = SolverOptions {
        sample_interval: Some(25.0),
        ..Default::default()
    };
    let traj = integrate(&p, &[1.0, 0.0, 0.0], 100.0, &opts).unwrap();
    assert_eq!(traj.times, vec![0.0, 25.0, 50.0, 75.0, 100.0]);
    assert_eq!(traj.meta.model_hash, p.fingerprint());
}

#[test]
fn tighter_tolerance_moves_the_endpoint_less_than_the_coarse_tolerance() {
    let p = aloha(90, None);
    let coarse = SolverOptions {
        rtol: 1e-6,
        atol: 1e-8,
        ..Default::default()
    };
    let fine = SolverOptions {
        rtol: 5e-7,
        atol: 5e-9,
        ..Default::default()
    };
    let a = integrate(&p, &[0.0, 1.0, 0.0], 300.0, &coarse).unwrap();
    let b = integrate(&p, &[0.0, 1.0, 0.0], 300.0, &fine).unwrap();
    assert!(linf(a.last(), b.last()) < 1e-6);
}

#[test]
fn jacobian_columns_sum_to_zero() {
    let p = compile(&parse_model(DISCOVERY).unwrap(), &CompileOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let x = random_simplex(&mut rng, 6);
        let j = jacobian_fd(&p, &x, 1e-6).unwrap();
        for c in 0..6 {
            assert!(j.column(c).sum().abs() < 1e-6);
        }
    }
}

#[test]
fn aloha_is_bistable_at_n90_lognormal() {
    let p = aloha(90, None);
    let opts = FixpointOptions::default();
    let good = find_fixpoint(&p, &[1.0, 0.0, 0.0], &opts).unwrap();
    let bad = find_fixpoint(&p, &[0.0, 1.0, 0.0], &opts).unwrap();
    assert!(good.residual < 1e-10 && bad.residual < 1e-10);
    assert!(good.location[2] < 0.02, "{good:?}");
    assert!(bad.location[2] > 0.3, "{bad:?}");
    assert!(linf(&good.location, &bad.location) > 0.1);
    assert!(good.is_stable() && bad.is_stable());
    let f = vector_field(&p, &good.location).unwrap();
    assert!(f.iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn aloha_is_monostable_at_n90_uniform() {
    let p = aloha(90, Some(ChannelModel::uniform(4.0, 10.0).unwrap()));
    let opts = FixpointOptions::default();
    let a = find_fixpoint(&p, &[1.0, 0.0, 0.0], &opts).unwrap();
    let b = find_fixpoint(&p, &[0.0, 1.0, 0.0], &opts).unwrap();
    assert!(linf(&a.location, &b.location) < 1e-4, "{a:?} {b:?}");
}

#[test]
fn fixpoint_search_reports_unresolved_runs() {
    let p = aloha(90, None);
    let opts = FixpointOptions {
        horizon: 1.0,
        max_newton: 0,
        ..Default::default()
    };
    match find_fixpoint(&p, &[0.0, 1.0, 0.0], &opts) {
        Err(Error::Unresolved { residual, tail }) => {
            assert!(residual > 1e-10);
            assert!(!tail.is_empty());
        }
        other => panic!("expected unresolved, got {other:?}"),
    }
}

#[test]
fn stiff_rate_reports_step_size_underflow() {
    let p = aloha(90, None);
    let stiff = p.with_law(
        0,
        RateLaw::Linear {
            state: 0,
            rate: 1e20,
        },
    );
    let err = integrate(&stiff, &[0.5, 0.5, 0.0], 10.0, &SolverOptions::default()).unwrap_err();
    assert!(matches!(err, Error::StepSizeUnderflow { .. }), "{err:?}");
}

#[test]
fn non_finite_rate_is_reported() {
    let p = aloha(90, None).with_law(
        0,
        RateLaw::Custom {
            description: "nan".into(),
            law: Arc::new(|_, _, _| Ok(f64::NAN)),
        },
    );
    let err = integrate(&p, &[1.0, 0.0, 0.0], 1.0, &SolverOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
}

#[test]
fn coarse_basin_grid_has_both_labels() {
    let p = aloha(90, None);
    let opts = FixpointOptions::default();
    let fps = vec![
        find_fixpoint(&p, &[1.0, 0.0, 0.0], &opts).unwrap(),
        find_fixpoint(&p, &[0.0, 1.0, 0.0], &opts).unwrap(),
    ];
    let spec = GridSpec {
        axes: (AxisSpec::unit(0), AxisSpec::unit(2)),
        resolution: 11,
        closure: Closure::Remainder(1),
    };
    let grid = basin_grid(&p, &spec, &fps, &BasinOptions::default()).unwrap();
    assert_eq!(grid.cells.len(), 66);
    let counts = grid.label_counts();
    assert!(counts[0] > 0 && counts[1] > 0, "{counts:?}");
    assert_eq!(grid.cell(10, 0).unwrap().label, Some(0));
    assert!(grid.cell(10, 1).is_none());
}

#[test]
fn basin_grid_validates_its_inputs() {
    let p = aloha(90, None);
    let spec = GridSpec {
        axes: (AxisSpec::unit(0), AxisSpec::unit(2)),
        resolution: 5,
        closure: Closure::Remainder(1),
    };
    assert!(matches!(
        basin_grid(&p, &spec, &[], &BasinOptions::default()),
        Err(Error::Config(_))
    ));
    let bad = GridSpec {
        closure: Closure::Remainder(0),
        ..spec.clone()
    };
    assert!(export_vector_field_grid(&p, &bad).is_err());
    let bad = GridSpec {
        resolution: 1,
        ..spec
    };
    assert!(export_vector_field_grid(&p, &bad).is_err());
}

#[test]
fn vector_field_grid_shape_and_conservation() {
    let p = compile(&parse_model(DISCOVERY).unwrap(), &CompileOptions::default()).unwrap();
    let spec = GridSpec {
        axes: (AxisSpec::unit(0), AxisSpec::unit(3)),
        resolution: 6,
        closure: Closure::RandomCompletions {
            samples: 3,
            seed: 9,
        },
    };
    let samples = export_vector_field_grid(&p, &spec).unwrap();
    assert_eq!(samples.len(), 21 * 3);
    for s in &samples {
        assert!((s.point.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.derivative.iter().sum::<f64>().abs() < 1e-12);
    }
    assert_eq!(samples, export_vector_field_grid(&p, &spec).unwrap());
}
