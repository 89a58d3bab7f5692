use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use minusface::data::generate_toy_dataset;
use minusface::nn::{build_generator, build_recognizer, MarginConfig, Tensor};
use minusface::perturb::{permutation_from_seed, shuffle_channels};
use minusface::pipeline::{protect, ProtectorConfig};
use minusface::{decode, encode, MappingSpec, ShuffleSeed};

fn face() -> minusface::SpatialImage {
    let ds = generate_toy_dataset(2, 2, 32, 5).unwrap();
    ds.samples[0].image.clone()
}

fn codec(c: &mut Criterion) {
    let x = face();
    let mut group = c.benchmark_group("codec");
    for spec in [MappingSpec::dct8(), MappingSpec::haar2()] {
        let r = encode(&x, &spec);
        group.bench_with_input(BenchmarkId::new("encode", spec.kind), &spec, |b, s| {
            b.iter(|| encode(black_box(&x), s))
        });
        group.bench_with_input(BenchmarkId::new("decode", spec.kind), &spec, |b, s| {
            b.iter(|| decode(black_box(&r), s).unwrap())
        });
    }
    group.finish();
}

fn shuffle(c: &mut Criterion) {
    let x = face();
    let r = encode(&x, &MappingSpec::dct8());
    let mut seed = 0u64;
    c.bench_function("shuffle/dct8", |b| {
        b.iter(|| {
            seed += 1;
            let perm = permutation_from_seed(ShuffleSeed(seed), 192);
            shuffle_channels(black_box(&r), &perm).unwrap()
        })
    });
}

fn conv(c: &mut Criterion) {
    let (model, _) = build_recognizer(3, 64, 10, MarginConfig::default(), 1).unwrap();
    let input = Tensor::zeros(&[8, 3, 32, 32]);
    c.bench_function("recognizer_forward/8x3x32x32", |b| {
        b.iter(|| model.infer(black_box(&input)).unwrap())
    });
}

fn protection(c: &mut Criterion) {
    let x = face();
    let mut group = c.benchmark_group("protect");
    group.sample_size(20);
    for pcfg in [
        ProtectorConfig::default(),
        ProtectorConfig { mapping: MappingSpec::haar2(), ..ProtectorConfig::default() },
    ] {
        let mut g = build_generator(pcfg.mapping.channels(), 8, 3).unwrap();
        g.freeze();
        group.bench_function(BenchmarkId::from_parameter(pcfg.mapping.kind), |b| {
            b.iter(|| protect(black_box(&x), &g, ShuffleSeed(9), &pcfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, codec, shuffle, conv, protection);
criterion_main!(benches);
