use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use prp_locate::em::{e_step, init_from_positions, m_step_pinned, run_batch_em, scan_to_locate, PositionGrid};
use prp_locate::harness::{init_model, plan_sample, render_example, Config, Split};
use prp_locate::room::{load_source_signals, render_scene};
use prp_locate::stft::stft;
use prp_locate::unfolded::CandidateSampler;
use prp_locate_bench::example;

fn front_end(c: &mut Criterion) {
    let config = Config::default();
    let mut group = c.benchmark_group("front_end");
    group.sample_size(10);
    for (name, index) in [("render_anechoic", 0), ("render_t60_0.2", 6)] {
        let (_, scene) = plan_sample(&config, Split::Test, index).unwrap();
        let signals = load_source_signals(&scene, &config.protocol).unwrap();
        group.bench_function(name, |b| b.iter(|| render_scene(black_box(&scene), &signals).unwrap()));
    }
    let (_, scene) = plan_sample(&config, Split::Test, 0).unwrap();
    let (_, audio) = render_example(&config, &scene).unwrap();
    group.bench_function("stft", |b| b.iter(|| stft(black_box(&audio), &config.stft).unwrap()));
    group.finish();
}

fn batch_em(c: &mut Criterion) {
    let config = Config::default();
    let ex = example(&config, true);
    let cands = CandidateSampler::default().fixed(&ex.room, 2, 0, 0);
    let init = init_from_positions(&cands, &ex.array, &ex.prp.layout, ex.room.speed_of_sound, true);
    let grid = PositionGrid::new(&ex.room, &ex.array, ex.prp.layout.sample_rate, 0.05, 1.5, 0.3).unwrap();
    let run = run_batch_em(&ex.prp, &init, &config.baseline.em).unwrap();

    let mut group = c.benchmark_group("batch_em");
    group.bench_function("e_step", |b| b.iter(|| e_step(black_box(&ex.prp), &init)));
    let post = e_step(&ex.prp, &init);
    group.bench_function("m_step", |b| b.iter(|| m_step_pinned(black_box(&ex.prp), &post, &init, Some(2))));
    group.sample_size(10);
    group.bench_function("run_70_iters", |b| b.iter(|| run_batch_em(black_box(&ex.prp), &init, &config.baseline.em).unwrap()));
    let (kept, _) = prp_locate::em::drop_outlier_cluster(&run.params).unwrap();
    group.bench_function("scan_to_locate", |b| b.iter(|| scan_to_locate(black_box(&kept), &grid, &ex.prp.layout).unwrap()));
    group.finish();
}

fn unfolded(c: &mut Criterion) {
    let config = Config::default();
    let ex = example(&config, true);
    let cands = config.candidates.fixed(&ex.room, 2, 0, 0);
    let model = init_model(&config, ex.prp.layout, ex.array.num_pairs()).unwrap();

    let mut group = c.benchmark_group("unfolded");
    group.sample_size(10);
    group.bench_function("infer", |b| b.iter(|| model.infer(black_box(&ex.prp), &ex.room, &cands).unwrap()));
    group.bench_function("loss_and_grad", |b| b.iter(|| model.loss_and_grad(black_box(&ex), &cands).unwrap()));
    group.finish();
}

criterion_group!(benches, front_end, batch_em, unfolded);
criterion_main!(benches);
