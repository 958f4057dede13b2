//! Central-difference verification of reverse-mode gradients.
//!
//! Every differentiable op is exercised in f64 against a numeric
//! derivative of a randomly weighted scalar readout. The weighting
//! keeps sign errors from cancelling the way a plain sum would.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Relative error with an absolute fallback for near-zero pairs.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

fn readout_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Checks the gradient flowing to a single input tensor.
///
/// `build` records the op(s) under test on a fresh tape, mapping the
/// input var to an output var. Returns the worst relative error over
/// all input coordinates.
pub fn check_input<F>(x0: &Tensor<f64>, step: f64, seed: u64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut eval = |x: &Tensor<f64>, want_grad: bool| -> Result<(f64, Option<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = build(&mut tape, xv)?;
        let w = tape.leaf(readout_weights(tape.shape(out), seed));
        let prod = tape.mul(out, w)?;
        let scalar = tape.sum_all(prod);
        let value = tape.value(scalar).item();
        if want_grad {
            tape.backward(scalar)?;
            Ok((value, Some(tape.grad(xv).cloned().unwrap_or_else(|| {
                Tensor::zeros(&x.shape)
            }))))
        } else {
            Ok((value, None))
        }
    };
    let (_, grad) = eval(x0, true)?;
    let grad = grad.unwrap();
    let mut worst = 0.0f64;
    let mut x = x0.clone();
    for i in 0..x.data.len() {
        let orig = x.data[i];
        x.data[i] = orig + step;
        let (fp, _) = eval(&x, false)?;
        x.data[i] = orig - step;
        let (fm, _) = eval(&x, false)?;
        x.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        worst = worst.max(rel_err(grad.data[i], numeric));
    }
    Ok(worst)
}

/// Checks gradients of every trainable parameter in the store.
///
/// `run` records a full forward pass and returns a scalar loss var.
/// The closure may mutate the store (batch-norm running statistics);
/// in training mode those buffers do not feed the loss value, so the
/// repeated evaluations stay consistent.
pub fn check_params<F>(store: &mut ParamStore<f64>, step: f64, mut run: F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let root = run(&mut tape, store)?;
    tape.backward(root)?;
    tape.accumulate_param_grads(store);
    let grads: Vec<(crate::params::ParamId, Vec<f64>)> = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .map(|id| (id, store.grad(id).data.clone()))
        .collect();
    let mut worst = 0.0f64;
    for (id, analytic) in grads {
        for i in 0..analytic.len() {
            let orig = store.value(id).data[i];
            store.value_mut(id).data[i] = orig + step;
            let mut tp = Tape::new();
            let r = run(&mut tp, store)?;
            let fp = tp.value(r).item();
            store.value_mut(id).data[i] = orig - step;
            let mut tm = Tape::new();
            let r = run(&mut tm, store)?;
            let fm = tm.value(r).item();
            store.value_mut(id).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    Ok(worst)
}

/// Draws a tensor with entries in `(-1, 1)`, nudged away from the
/// kink points of ReLU and smooth-L1 so central differences stay valid.
pub fn smooth_random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mut v: f64 = rng.gen_range(-1.0..1.0);
            for knot in [-1.0, 0.0, 1.0] {
                if (v - knot).abs() < 1e-3 {
                    v += 2e-3;
                }
            }
            v
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Result of checking one operation across several seeds.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

pub const OP_TOLERANCE: f64 = 1e-4;
pub const BLOCK_TOLERANCE: f64 = 1e-3;

fn toy_pixels(
    n: usize,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> std::rc::Rc<crate::geometry::ProjectedPixels> {
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(1.0..4.0),
            ]
        })
        .collect();
    let points = crate::geometry::PointSet::new(coords).unwrap();
    let fx = w as f64;
    let intr =
        crate::geometry::Intrinsics::new(fx, fx, w as f64 - 0.5, h as f64 - 0.5, 2 * w, 2 * h)
            .unwrap();
    std::rc::Rc::new(crate::geometry::project(&points, &intr, 0.5).unwrap())
}

fn toy_table(n: usize, k: usize, rng: &mut impl Rng) -> crate::neighbors::NeighborTable {
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..3.0),
            ]
        })
        .collect();
    crate::neighbors::precompute_table(&crate::geometry::PointSet::new(coords).unwrap(), k)
        .unwrap()
}

/// Runs the finite-difference check on every differentiable operation,
/// `seeds` random instances each, and reports the worst relative error
/// per op against [`OP_TOLERANCE`].
pub fn standard_suite(seeds: u64) -> Result<Vec<OpReport>> {
    use std::rc::Rc;
    let mut reports = Vec::new();
    let mut run = |name: &'static str,
                   f: &mut dyn FnMut(u64) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(f(seed)?);
        }
        reports.push(OpReport {
            name,
            max_rel_err: worst,
            threshold: OP_TOLERANCE,
        });
        Ok(())
    };

    run("conv2d", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = smooth_random(&[1, 3, 6, 8], &mut rng);
        let w = smooth_random(&[4, 3, 3, 3], &mut rng);
        let b = smooth_random(&[4], &mut rng);
        let ex = check_input(&x, FD_STEP, seed, |t, xv| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            t.conv2d(xv, wv, Some(bv), 1, 1)
        })?;
        let ew = check_input(&w, FD_STEP, seed, |t, wv| {
            let xv = t.leaf(x.clone());
            let bv = t.leaf(b.clone());
            t.conv2d(xv, wv, Some(bv), 1, 1)
        })?;
        let stride2 = check_input(&x, FD_STEP, seed, |t, xv| {
            let wv = t.leaf(w.clone());
            t.conv2d(xv, wv, None, 2, 1)
        })?;
        Ok(ex.max(ew).max(stride2))
    })?;

    run("linear", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = smooth_random(&[5, 4], &mut rng);
        let w = smooth_random(&[3, 4], &mut rng);
        let b = smooth_random(&[3], &mut rng);
        let ex = check_input(&x, FD_STEP, seed, |t, xv| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            t.linear(xv, wv, Some(bv))
        })?;
        let ew = check_input(&w, FD_STEP, seed, |t, wv| {
            let xv = t.leaf(x.clone());
            t.linear(xv, wv, None)
        })?;
        Ok(ex.max(ew))
    })?;

    run("batchnorm", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = smooth_random(&[2, 3, 4, 4], &mut rng);
        let gamma = smooth_random(&[3], &mut rng);
        let beta = smooth_random(&[3], &mut rng);
        check_input(&x, FD_STEP, seed, |t, xv| {
            let g = t.leaf(gamma.clone());
            let b = t.leaf(beta.clone());
            let mut rm = Tensor::zeros(&[3]);
            let mut rv = Tensor::full(&[3], 1.0);
            t.batchnorm(xv, g, b, &mut rm, &mut rv, 1e-5, 0.1, true)
        })
    })?;

    run("relu", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = smooth_random(&[4, 7], &mut rng);
        check_input(&x, FD_STEP, seed, |t, xv| Ok(t.relu(xv)))
    })?;

    run("smooth_l1", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = smooth_random(&[4, 7], &mut rng);
        check_input(&x, FD_STEP, seed, |t, xv| Ok(t.smooth_l1(xv)))
    })?;

    run("upsample2x", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = smooth_random(&[1, 2, 3, 4], &mut rng);
        check_input(&x, FD_STEP, seed, |t, xv| t.upsample2x(xv))
    })?;

    run("mul", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = smooth_random(&[3, 5], &mut rng);
        let y = smooth_random(&[3, 5], &mut rng);
        check_input(&x, FD_STEP, seed, |t, xv| {
            let yv = t.leaf(y.clone());
            t.mul(xv, yv)
        })
    })?;

    run("gather_scatter_pixels", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = toy_pixels(6, 4, 5, &mut rng);
        let x = smooth_random(&[1, 3, 4, 5], &mut rng);
        let eg = check_input(&x, FD_STEP, seed, |t, xv| {
            t.gather_pixels(xv, 0, pixels.clone())
        })?;
        let pf = smooth_random(&[6, 3], &mut rng);
        let es = check_input(&pf, FD_STEP, seed, |t, fv| {
            t.scatter_pixels(fv, 0, 1, pixels.clone())
        })?;
        Ok(eg.max(es))
    })?;

    run("gather_rows_sum_groups", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = smooth_random(&[5, 3], &mut rng);
        let indices: Rc<Vec<usize>> = Rc::new((0..10).map(|_| rng.gen_range(0..5)).collect());
        check_input(&x, FD_STEP, seed, |t, xv| {
            let g = t.gather_rows(xv, indices.clone())?;
            t.sum_groups(g, 2)
        })
    })?;

    run("contconv", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = toy_table(7, 3, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let layer = crate::contconv::ContConvLayer::new(&mut store, "cc", 4, 4, &mut rng)?;
        let f = smooth_random(&[7, 4], &mut rng);
        let ei = check_input(&f, FD_STEP, seed, |t, fv| {
            layer.forward_raw(t, &store, fv, &table)
        })?;
        let readout = smooth_random(&[7, 4], &mut rng);
        let ep = check_params(&mut store, FD_STEP, |t, s| {
            let fv = t.leaf(f.clone());
            let out = layer.forward_raw(t, s, fv, &table)?;
            let w = t.leaf(readout.clone());
            let prod = t.mul(out, w)?;
            Ok(t.sum_all(prod))
        })?;
        Ok(ei.max(ep))
    })?;

    Ok(reports)
}

/// Checks every parameter gradient of a full fuse block end to end;
/// judged against [`BLOCK_TOLERANCE`].
pub fn full_block_check(seeds: u64) -> Result<OpReport> {
    use std::rc::Rc;
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[f64; 3]> = (0..6)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(1.0..3.0),
                ]
            })
            .collect();
        let points = crate::geometry::PointSet::new(coords).unwrap();
        let table = crate::neighbors::precompute_table(&points, 3)?;
        let intr = crate::geometry::Intrinsics::new(8.0, 8.0, 7.5, 3.5, 16, 8)?;
        let geom = crate::fusenet::FrameGeometry {
            pixels: Rc::new(crate::geometry::project(&points, &intr, 0.5)?),
            point_count: points.len(),
            table,
        };
        let mut store = ParamStore::<f64>::new();
        let block = crate::fusenet::FuseBlock::new(
            &mut store,
            "blk",
            4,
            4,
            crate::fusenet::BranchSet::default(),
            &mut rng,
        )?;
        let x = smooth_random(&[1, 4, 4, 8], &mut rng);
        let readout = smooth_random(&[1, 4, 4, 8], &mut rng);
        let err = check_params(&mut store, FD_STEP, |t, s| {
            let xv = t.leaf(x.clone());
            let out = block.forward(t, s, xv, &geom)?;
            let w = t.leaf(readout.clone());
            let prod = t.mul(out, w)?;
            Ok(t.sum_all(prod))
        })?;
        worst = worst.max(err);
    }
    Ok(OpReport {
        name: "fuse_block",
        max_rel_err: worst,
        threshold: BLOCK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_fallback_near_zero() {
        assert!(rel_err(0.0, 1e-12) < 1e-8);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quadratic_gradient_checks_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = smooth_random(&[4, 3], &mut rng);
        let err = check_input(&x, FD_STEP, 0, |tape, xv| tape.mul(xv, xv)).unwrap();
        assert!(err < 1e-7, "worst rel err {err}");
    }
}
