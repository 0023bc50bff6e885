//! Sequential vs rayon execution of a training step and an index build.
//!
//! Build with `--no-default-features` to get the sequential fallback for
//! both variants.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use savs::data::{generate_synthetic, load_samples, records_in, scan_dataset, LoadedSample, Split, SynthSpec};
use savs::evaluation::build_index;
use savs::training::{PkSampler, TrainConfig, TrainSet, Trainer};
use savs::Exec;

struct Fixture {
    cfg: TrainConfig,
    train: TrainSet,
    gallery: Vec<LoadedSample>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        images_per_combination: 4,
        ..Default::default()
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    let cfg = TrainConfig::default();
    let records = scan_dataset(dir.path()).unwrap();
    let load = |split| load_samples(&records_in(&records, split), cfg.input_dims(), None, Exec::Sequential).unwrap();
    Fixture {
        train: TrainSet::new(load(Split::Train)).unwrap(),
        gallery: load(Split::Gallery),
        cfg,
    }
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_train_step(c: &mut Criterion, fx: &Fixture) {
    let sampler = PkSampler::new(&fx.train.person_ids(), fx.cfg.batch_size, fx.cfg.images_per_id).unwrap();
    let batch = sampler.epoch(&mut ChaCha8Rng::seed_from_u64(0)).remove(0);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut trainer = Trainer::new(fx.cfg.clone(), fx.train.num_classes(), exec).unwrap();
            b.iter(|| black_box(trainer.step(&fx.train, &batch, 0.0).unwrap()))
        });
    }
    group.finish();
}

fn bench_index_build(c: &mut Criterion, fx: &Fixture) {
    let trainer = Trainer::new(fx.cfg.clone(), fx.train.num_classes(), Exec::Sequential).unwrap();
    let model = trainer.model();
    let mut group = c.benchmark_group("index_build");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(build_index(model, &fx.gallery, exec).unwrap()))
        });
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let fx = fixture();
    bench_train_step(c, &fx);
    bench_index_build(c, &fx);
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
