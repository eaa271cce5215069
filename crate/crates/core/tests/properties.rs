use std::sync::LazyLock;

use mfwsn::capture::{inner_survival, CaptureCurve, CaptureModel, ChannelModel};
use mfwsn::model::parse_model;
use mfwsn::odes::vector_field;
use mfwsn::pctmc::{compile, CompileOptions, Pctmc};
use mfwsn::ssa::{round_to_lattice, simulate};
use proptest::prelude::*;

static UNIFORM: LazyLock<CaptureModel> =
    LazyLock::new(|| CaptureModel::new(ChannelModel::uniform(4.0, 10.0).unwrap()).unwrap());
static LOGNORMAL: LazyLock<CaptureModel> =
    LazyLock::new(|| CaptureModel::new(ChannelModel::lognormal(4.0, 10.0, 2.0).unwrap()).unwrap());
static ALOHA: LazyLock<Pctmc> = LazyLock::new(|| {
    compile(
        &parse_model(include_str!("../models/aloha3.json")).unwrap(),
        &CompileOptions::default(),
    )
    .unwrap()
});
static DISCOVERY: LazyLock<Pctmc> = LazyLock::new(|| {
    compile(
        &parse_model(include_str!("../models/discovery6.json")).unwrap(),
        &CompileOptions::default(),
    )
    .unwrap()
});

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn q_lies_between_zero_and_min_of_i_and_one(i in 0.0f64..500.0) {
        for m in [&*UNIFORM, &*LOGNORMAL] {
            let q = m.q(i).unwrap();
            prop_assert!(q >= 0.0 && q <= i.min(1.0), "q({}) = {}", i, q);
        }
    }

    #[test]
    fn closed_form_survival_is_a_decreasing_probability(r in 0.0f64..1.0, dr in 1e-6f64..0.1) {
        let ch = ChannelModel::uniform(4.0, 10.0).unwrap();
        let a = inner_survival(r, &ch).unwrap();
        let b = inner_survival(r + dr, &ch).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b <= a);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn vector_field_conserves_mass(x in simplex(3), y in simplex(6)) {
        let f = vector_field(&ALOHA, &x).unwrap();
        prop_assert!(f.iter().sum::<f64>().abs() < 1e-13);
        let g = vector_field(&DISCOVERY, &y).unwrap();
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-10 * g.iter().map(|v| v.abs()).sum::<f64>().max(1.0));
    }

    #[test]
    fn lattice_rounding_is_nearest_and_conserving(x in simplex(5), size in 1usize..2000) {
        let counts = round_to_lattice(&x, size);
        prop_assert_eq!(counts.iter().sum::<u64>(), size as u64);
        for (c, v) in counts.iter().zip(&x) {
            prop_assert!((*c as f64 - v * size as f64).abs() < 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn simulated_counts_stay_on_the_lattice(seed in any::<u64>(), o in 0usize..=40) {
        let p = compile(
            &parse_model(include_str!("../models/aloha3.json")).unwrap(),
            &CompileOptions { size: Some(40), ..Default::default() },
        )
        .unwrap();
        let x0 = [o as f64 / 40.0, (40 - o) as f64 / 40.0, 0.0];
        let traj = simulate(&p, &x0, 300.0, seed).unwrap();
        for c in &traj.counts {
            prop_assert_eq!(c.iter().sum::<u64>(), 40);
        }
        let again = simulate(&p, &x0, 300.0, seed).unwrap();
        prop_assert_eq!(traj, again);
    }
}
