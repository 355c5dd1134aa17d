//! Sequential vs rayon-parallel kernel and evaluation benchmarks.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use anchor_core::attacks::{attack_objective, pgd_attack, AttackConfig, ObjectiveKind};
use anchor_core::kernels::{self, ConvDims};
use anchor_core::losses::LossConfig;
use anchor_core::models::{ClassifierSpec, EncoderSpec, ModelBundle, ProjectionHeadSpec};
use anchor_core::rng::StreamRng;
use anchor_core::tensor::{Precision, Tensor};

fn conv_case(batch: usize) -> (Vec<f64>, Vec<f64>, ConvDims) {
    let d = ConvDims {
        batch,
        c_in: 16,
        c_out: 32,
        h: 8,
        w: 8,
    };
    let mut rng = StreamRng::new(1);
    let inp = (0..d.batch * d.c_in * d.hw()).map(|_| rng.normal()).collect();
    let wgt = (0..d.c_out * d.c_in * 9).map(|_| rng.normal()).collect();
    (inp, wgt, d)
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_forward");
    for batch in [16usize, 64] {
        let (inp, wgt, d) = conv_case(batch);
        let mut out = vec![0.0; d.batch * d.c_out * d.hw()];
        group.bench_with_input(BenchmarkId::new("seq_f32", batch), &batch, |b, _| {
            b.iter(|| kernels::seq::conv2d_forward(&inp, &wgt, &mut out, &d, Precision::F32))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par_f32", batch), &batch, |b, _| {
            b.iter(|| kernels::par::conv2d_forward(&inp, &wgt, &mut out, &d, Precision::F32))
        });
        group.bench_with_input(BenchmarkId::new("seq_f64", batch), &batch, |b, _| {
            b.iter(|| kernels::seq::conv2d_forward(&inp, &wgt, &mut out, &d, Precision::F64))
        });
    }
    group.finish();
}

fn bench_conv_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_backward_weight");
    let (inp, wgt, d) = conv_case(64);
    let d_out = vec![0.5; d.batch * d.c_out * d.hw()];
    let mut d_w = vec![0.0; wgt.len()];
    group.bench_function("seq_f32", |b| {
        b.iter(|| kernels::seq::conv2d_backward_weight(&inp, &d_out, &mut d_w, &d, Precision::F32))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par_f32", |b| {
        b.iter(|| kernels::par::conv2d_backward_weight(&inp, &d_out, &mut d_w, &d, Precision::F32))
    });
    group.finish();
}

fn bench_pgd(c: &mut Criterion) {
    let bundle = ModelBundle::new(
        EncoderSpec::default(),
        ProjectionHeadSpec::default(),
        ClassifierSpec::linear(3),
        7,
    )
    .unwrap();
    let mut rng = StreamRng::new(2);
    let x = Tensor::new(
        vec![32, 3, 8, 8],
        (0..32 * 3 * 64).map(|_| rng.uniform()).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..32).map(|i| i % 3).collect();
    let loss_cfg = LossConfig::default();
    let cfg = AttackConfig {
        steps: 5,
        ..AttackConfig::eval_default()
    };

    c.bench_function("pgd5_ce_batch32", |b| {
        b.iter(|| {
            let obj = attack_objective(ObjectiveKind::Ce, &bundle, &labels, &loss_cfg, 0.0, None);
            pgd_attack(&x, &*obj, &cfg, Precision::F32, 3).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv, bench_conv_backward, bench_pgd
}
criterion_main!(benches);
