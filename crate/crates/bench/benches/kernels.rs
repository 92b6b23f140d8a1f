use criterion::{black_box, criterion_group, criterion_main, Criterion};

use robudepth_core::camgeom::{synthesize_view, warp_var, PoseVar, DEFAULT_Z_MIN};
use robudepth_core::dataset::{generate_split, GenConfig};
use robudepth_core::diffcore::Graph;
use robudepth_core::losses::{photometric_var, ssim};
use robudepth_core::nets::{DepthNet, DepthNetConfig};
use robudepth_core::rng::stream;
use robudepth_core::trainer::{train_teacher, TrainConfig};

fn kernels(c: &mut Criterion) {
    let t = generate_split("train", 1, 0, &GenConfig::default())
        .expect("triplet")
        .remove(0);
    let k = t.intrinsics;

    c.bench_function("ssim 64x48", |b| {
        b.iter(|| ssim(black_box(&t.curr), black_box(&t.next)).unwrap())
    });

    c.bench_function("synthesize_view 64x48", |b| {
        b.iter(|| synthesize_view(black_box(&t.next), &t.gt_depth, &t.pose_next, &k).unwrap())
    });

    c.bench_function("warp + photometric fwd/bwd 64x48", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let src = g.leaf(t.next.to_chw());
            let depth = g.leaf(t.gt_depth.to_tensor());
            let target = g.constant(t.curr.to_chw());
            let pose = PoseVar::constant(&mut g, &t.pose_next);
            let (w, _) = warp_var(&mut g, src, depth, &pose, &k, DEFAULT_Z_MIN).unwrap();
            let pe = photometric_var(&mut g, target, w).unwrap();
            let l = g.sum(pe);
            g.backward(l).unwrap()
        })
    });

    let net = DepthNet::init(DepthNetConfig::default(), &mut stream(0, "bench")).unwrap();
    c.bench_function("depth net forward 64x48", |b| {
        b.iter(|| net.predict(black_box(&t.curr)).unwrap())
    });
    c.bench_function("depth net fwd/bwd 64x48", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = net.params.bind(&mut g, true);
            let x = g.constant(t.curr.to_chw());
            let out = net.forward(&mut g, &p, x).unwrap();
            let l = g.sum(out.depth);
            g.backward(l).unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let data = generate_split("train", 4, 0, &GenConfig::default()).expect("triplets");
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("teacher step, batch 4", |b| {
        b.iter(|| train_teacher(black_box(&data), &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, kernels, training);
criterion_main!(benches);
