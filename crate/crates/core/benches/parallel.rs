use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mcdm::diffusion::{self, make_schedule, SampleJob, ScheduleKind};
use mcdm::features::ConvFeatureExtractor;
use mcdm::losses::{train_step, TrainItem, TrainingConfig};
use mcdm::masks::{generate_masks, generate_random_mask, MaskGenParams};
use mcdm::model::{init_denoiser, DenoiserConfig};
use mcdm::optim::Adam;
use mcdm::{datapipe, Exec};

const EXECS: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn small_model() -> DenoiserConfig {
    DenoiserConfig {
        image_channels: 3,
        image_size: 16,
        base_width: 8,
        depth: 2,
        time_embed_dim: 16,
        channel_multipliers: vec![1, 2],
        attention: true,
        seed: 0,
    }
}

fn masks(c: &mut Criterion) {
    let params = MaskGenParams::for_image(64, 64, 0);
    let seeds: Vec<u64> = (0..256).collect();
    let mut g = c.benchmark_group("gen_masks_256");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_masks(&params, &seeds, exec).unwrap())
        });
    }
    g.finish();
}

fn moments(c: &mut Criterion) {
    let sched = make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
    let x0 = datapipe::toy_image(16, 1);
    let mut g = c.benchmark_group("forward_moments_4096");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| diffusion::forward_marginal_moments(&x0, 500, &sched, 4096, 3, exec).unwrap())
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let sched = make_schedule(50, ScheduleKind::Linear, 2e-3, 0.4).unwrap();
    let ext = ConvFeatureExtractor::random((3, 16, 16), 32, 1).unwrap();
    let params = MaskGenParams::for_image(16, 16, 0);
    let batch: Vec<TrainItem> = (0..8)
        .map(|i| TrainItem {
            x0: datapipe::toy_image(16, i),
            mask: generate_random_mask(&params.with_seed(i)).unwrap(),
            seed: i,
        })
        .collect();
    let cfg = TrainingConfig::default();
    let mut g = c.benchmark_group("train_step_batch8");
    g.sample_size(10);
    for (name, exec) in EXECS {
        let mut d = init_denoiser(&small_model()).unwrap();
        let mut opt = Adam::new(d.params().values());
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_step(&mut d, &batch, &sched, &ext, &cfg, &mut opt, exec).unwrap())
        });
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let d = init_denoiser(&small_model()).unwrap();
    let sched = make_schedule(10, ScheduleKind::Linear, 1e-3, 0.3).unwrap();
    let params = MaskGenParams::for_image(16, 16, 0);
    let jobs: Vec<SampleJob> = (0..8)
        .map(|i| SampleJob {
            x0: datapipe::toy_image(16, i),
            mask: generate_random_mask(&params.with_seed(i)).unwrap(),
            seed: i,
        })
        .collect();
    let mut g = c.benchmark_group("sample_batch8_T10");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| diffusion::sample_batch(&d, &jobs, &sched, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, masks, moments, training, sampling);
criterion_main!(benches);
