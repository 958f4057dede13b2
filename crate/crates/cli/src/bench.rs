//! Timing report for the performance-sensitive pieces: KD-tree build,
//! KNN queries against the quadratic brute-force baseline, continuous
//! convolution forward/backward, and one full fuse block. Prints both
//! human-readable lines and machine-readable `key=value` pairs and
//! writes the latter beside the outputs.

use crate::config::RunConfig;
use fusenet::contconv::ContConvLayer;
use fusenet::fusenet::{BranchSet, FrameGeometry, FuseBlock};
use fusenet::geometry::{project, Intrinsics, PointSet};
use fusenet::gradcheck::smooth_random;
use fusenet::neighbors::{brute_force_knn, precompute_table, KdTree};
use fusenet::{Error, ParamStore, Result, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::rc::Rc;
use std::time::Instant;

const REPEATS: usize = 5;

/// Runs `f` `REPEATS` times and reports (min, median) in milliseconds.
fn time_ms(mut f: impl FnMut()) -> (f64, f64) {
    let mut samples: Vec<f64> = (0..REPEATS)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    samples.sort_by(|a, b| a.total_cmp(b));
    (samples[0], samples[REPEATS / 2])
}

fn random_points(n: usize, rng: &mut impl Rng) -> PointSet {
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(1.0..60.0),
            ]
        })
        .collect();
    PointSet::new(coords).unwrap()
}

struct Report {
    human: String,
    machine: String,
}

impl Report {
    fn add(&mut self, key: &str, unit: &str, min: f64, median: f64) {
        let _ = writeln!(
            self.human,
            "{key:<24} min {min:>10.3} {unit}, median {median:>10.3} {unit}"
        );
        let _ = writeln!(self.machine, "{key}_min_{unit}={min:.4}");
        let _ = writeln!(self.machine, "{key}_median_{unit}={median:.4}");
    }
}

pub fn run(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let n = config.sample_budget;
    let k = config.k;
    let c = config.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let points = random_points(n, &mut rng);
    let mut report = Report {
        human: format!("bench: {n} points, K={k}, C={c}, {REPEATS} repeats\n"),
        machine: format!("points={n}\nk={k}\nchannels={c}\nrepeats={REPEATS}\n"),
    };

    // KD-tree construction.
    let (min, med) = time_ms(|| {
        let _ = KdTree::build(&points).unwrap();
    });
    report.add("kdtree_build", "ms", min, med);

    // KNN queries: tree vs the O(N) scan it must beat.
    let tree = KdTree::build(&points)?;
    let queries: Vec<[f64; 3]> = (0..1000)
        .map(|_| {
            [
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(1.0..60.0),
            ]
        })
        .collect();
    let (min, med) = time_ms(|| {
        for q in &queries {
            let _ = tree.query_knn(q, k).unwrap();
        }
    });
    report.add("knn_tree_1k_queries", "ms", min, med);
    let brute_queries = &queries[..100];
    let (min, med) = time_ms(|| {
        for q in brute_queries {
            let _ = brute_force_knn(&points, q, k).unwrap();
        }
    });
    // Scaled to the same 1000-query unit for direct comparison.
    report.add("knn_brute_1k_queries", "ms", min * 10.0, med * 10.0);

    // Continuous convolution forward and backward.
    let table = precompute_table(&points, k)?;
    let mut store = ParamStore::<f32>::new();
    let layer = ContConvLayer::new(&mut store, "cc", c, c, &mut rng)?;
    let feats64 = smooth_random(&[n, c], &mut rng);
    let feats = fusenet::Tensor::<f32>::from_f64_slice(&feats64.shape, &feats64.data)?;
    let (min, med) = time_ms(|| {
        let mut tape = Tape::new();
        let f = tape.leaf(feats.clone());
        let _ = layer.forward_raw(&mut tape, &store, f, &table).unwrap();
    });
    report.add("contconv_forward", "ms", min, med);
    let (min, med) = time_ms(|| {
        let mut tape = Tape::new();
        let f = tape.leaf(feats.clone());
        let out = layer.forward_raw(&mut tape, &store, f, &table).unwrap();
        let s = tape.sum_all(out);
        tape.backward(s).unwrap();
    });
    report.add("contconv_fwd_bwd", "ms", min, med);

    // One fuse block at the configured width on a half-resolution grid.
    let (h2, w2) = (config.height / 2, config.width / 2);
    let intr = Intrinsics::new(
        0.6 * config.width as f64,
        0.6 * config.width as f64,
        config.width as f64 / 2.0 - 0.5,
        config.height as f64 / 2.0 - 0.5,
        config.width,
        config.height,
    )?;
    let geom = FrameGeometry {
        table,
        pixels: Rc::new(project(&points, &intr, 0.5)?),
        point_count: points.len(),
    };
    let mut bstore = ParamStore::<f32>::new();
    let block = FuseBlock::new(&mut bstore, "blk", c, c, BranchSet::default(), &mut rng)?;
    let x64 = smooth_random(&[1, c, h2, w2], &mut rng);
    let x = fusenet::Tensor::<f32>::from_f64_slice(&x64.shape, &x64.data)?;
    let (min, med) = time_ms(|| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let _ = block.forward(&mut tape, &mut bstore, xv, &geom).unwrap();
    });
    report.add("fuse_block_forward", "ms", min, med);

    print!("{}", report.human);
    println!("--- machine readable ---");
    print!("{}", report.machine);
    std::fs::create_dir_all(&config.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", config.out.display())))?;
    let path = config.out.join("bench.txt");
    std::fs::write(&path, &report.machine).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    log::info!("wrote {}", path.display());
    Ok(())
}
