use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mfwsn::capture::{CaptureCurve, CaptureModel, ChannelModel};
use mfwsn::model::parse_model;
use mfwsn::odes::vector_field;
use mfwsn::pctmc::{compile, CompileOptions};
use mfwsn::ssa::simulate;

const ALOHA: &str = include_str!("../../core/models/aloha3.json");
const DISCOVERY: &str = include_str!("../../core/models/discovery6.json");

fn capture(c: &mut Criterion) {
    let uni = ChannelModel::uniform(4.0, 10.0).unwrap();
    let ln = ChannelModel::lognormal(4.0, 10.0, 2.0).unwrap();
    c.bench_function("capture/build_lognormal", |b| {
        b.iter(|| CaptureModel::new(black_box(ln)).unwrap())
    });
    for (name, ch) in [("uniform", uni), ("lognormal", ln)] {
        let m = CaptureModel::new(ch).unwrap();
        c.bench_function(&format!("capture/q_{name}"), |b| {
            b.iter(|| m.q(black_box(37.5)).unwrap())
        });
    }
}

fn field(c: &mut Criterion) {
    let opts = CompileOptions::default();
    let aloha = compile(&parse_model(ALOHA).unwrap(), &opts).unwrap();
    let disc = compile(&parse_model(DISCOVERY).unwrap(), &opts).unwrap();
    let x = [0.6, 0.3, 0.1];
    let y = [0.5, 0.1, 0.1, 0.1, 0.1, 0.1];
    c.bench_function("odes/vector_field_aloha", |b| {
        b.iter(|| vector_field(&aloha, black_box(&x)).unwrap())
    });
    c.bench_function("odes/vector_field_discovery", |b| {
        b.iter(|| vector_field(&disc, black_box(&y)).unwrap())
    });
}

fn ssa(c: &mut Criterion) {
    let opts = CompileOptions { size: Some(500), ..Default::default() };
    let p = compile(&parse_model(ALOHA).unwrap(), &opts).unwrap();
    let mut seed = 0;
    c.bench_function("ssa/aloha_n500_t200", |b| {
        b.iter(|| {
            seed += 1;
            simulate(&p, &[1.0, 0.0, 0.0], 200.0, seed).unwrap()
        })
    });
}

criterion_group!(benches, capture, field, ssa);
criterion_main!(benches);
