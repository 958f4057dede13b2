//! Criterion benchmarks for the performance-critical paths: KD-tree
//! construction and queries, the continuous convolution forward and
//! backward passes, and one full fuse block.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fusenet::contconv::ContConvLayer;
use fusenet::fusenet::{BranchSet, FrameGeometry, FuseBlock};
use fusenet::geometry::{project, Intrinsics};
use fusenet::gradcheck::smooth_random;
use fusenet::neighbors::{brute_force_knn, precompute_table, KdTree};
use fusenet::{ParamStore, Tape, Tensor};
use fusenet_bench::point_cloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

fn bench_kdtree(c: &mut Criterion) {
    let mut group = c.benchmark_group("kdtree");
    for &n in &[1_000usize, 10_000] {
        let points = point_cloud(n, 1);
        group.bench_with_input(BenchmarkId::new("build", n), &points, |b, p| {
            b.iter(|| KdTree::build(p).unwrap())
        });
        let tree = KdTree::build(&points).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let queries: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                [
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(1.0..60.0),
                ]
            })
            .collect();
        group.bench_with_input(BenchmarkId::new("query_k9_x100", n), &tree, |b, t| {
            b.iter(|| {
                for q in &queries {
                    t.query_knn(q, 9).unwrap();
                }
            })
        });
        group.bench_with_input(BenchmarkId::new("brute_k9_x100", n), &points, |b, p| {
            b.iter(|| {
                for q in &queries {
                    brute_force_knn(p, q, 9).unwrap();
                }
            })
        });
    }
    group.finish();
}

fn bench_contconv(c: &mut Criterion) {
    let mut group = c.benchmark_group("contconv");
    group.sample_size(20);
    let n = 5_000;
    let channels = 32;
    let points = point_cloud(n, 3);
    let table = precompute_table(&points, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f32>::new();
    let layer = ContConvLayer::new(&mut store, "cc", channels, channels, &mut rng).unwrap();
    let f64s = smooth_random(&[n, channels], &mut rng);
    let feats = Tensor::<f32>::from_f64_slice(&f64s.shape, &f64s.data).unwrap();
    group.bench_function("forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let f = tape.leaf(feats.clone());
            layer.forward_raw(&mut tape, &store, f, &table).unwrap()
        })
    });
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let f = tape.leaf(feats.clone());
            let out = layer.forward_raw(&mut tape, &store, f, &table).unwrap();
            let s = tape.sum_all(out);
            tape.backward(s).unwrap();
        })
    });
    group.finish();
}

fn bench_fuse_block(c: &mut Criterion) {
    let mut group = c.benchmark_group("fuse_block");
    group.sample_size(20);
    let (h, w, channels, k) = (64usize, 192usize, 32usize, 9usize);
    let points = point_cloud(5_000, 5);
    let table = precompute_table(&points, k).unwrap();
    let intr = Intrinsics::new(
        0.6 * w as f64,
        0.6 * w as f64,
        w as f64 / 2.0 - 0.5,
        h as f64 / 2.0 - 0.5,
        w,
        h,
    )
    .unwrap();
    let geom = FrameGeometry {
        table,
        pixels: Rc::new(project(&points, &intr, 0.5).unwrap()),
        point_count: points.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f32>::new();
    let block = FuseBlock::new(&mut store, "blk", channels, channels, BranchSet::default(), &mut rng)
        .unwrap();
    let x64 = smooth_random(&[1, channels, h / 2, w / 2], &mut rng);
    let x = Tensor::<f32>::from_f64_slice(&x64.shape, &x64.data).unwrap();
    group.bench_function("forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            block.forward(&mut tape, &mut store, xv, &geom).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_kdtree, bench_contconv, bench_fuse_block);
criterion_main!(benches);
