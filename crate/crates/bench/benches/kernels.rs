use criterion::{black_box, criterion_group, criterion_main, Criterion};
use eom_core::net::Mode;
use eom_core::tensor::Graph;
use eom_core::{earliest_occupancy, rasterize_history, CriticalRegion, Horizon, NetConfig, Network, OccupancyConfig};
use eom_bench::desk_scenes;

fn conv(c: &mut Criterion) {
    let input = vec![0.5f32; 8 * 16 * 50 * 50];
    let kernel = vec![0.01f32; 16 * 16 * 9];
    for dilation in [1, 4] {
        c.bench_function(&format!("conv2d 8x16x50x50 k3 dilation {dilation}"), |b| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let x = g.constant(input.clone(), [8, 16, 50, 50]).unwrap();
                let k = g.constant(kernel.clone(), [16, 16, 3, 3]).unwrap();
                black_box(g.conv2d(x, k, None, 1, dilation, dilation).unwrap());
            })
        });
    }
}

fn pipeline(c: &mut Criterion) {
    let scenes = desk_scenes(8);
    let (region, horizon) = (CriticalRegion::desk(), Horizon::full_scale());
    c.bench_function("earliest_occupancy desk", |b| {
        b.iter(|| {
            for s in &scenes {
                black_box(earliest_occupancy(s, &region, &horizon, &OccupancyConfig::default()).unwrap());
            }
        })
    });
    c.bench_function("rasterize_history desk", |b| {
        b.iter(|| {
            for s in &scenes {
                black_box(rasterize_history(s, &region, &horizon, 2).unwrap());
            }
        })
    });
}

fn train_step(c: &mut Criterion) {
    let scenes = desk_scenes(8);
    let (region, horizon) = (CriticalRegion::desk(), Horizon::full_scale());
    let rasters: Vec<_> = scenes.iter().map(|s| rasterize_history(s, &region, &horizon, 2).unwrap()).collect();
    let refs: Vec<_> = rasters.iter().collect();
    let (values, shape) = eom_core::net::batch_rasters::<f32>(&refs).unwrap();
    let net = Network::<f32>::new(NetConfig::default(), 1).unwrap();
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    group.bench_function("forward+backward batch 8", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(values.clone(), shape).unwrap();
            let f = net.forward(&mut g, x, Mode::Train).unwrap();
            let loss = g.sum(f.output);
            black_box(g.backward(loss).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, conv, pipeline, train_step);
criterion_main!(benches);
