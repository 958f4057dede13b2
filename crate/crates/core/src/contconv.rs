//! Continuous convolution on point sets: per-point weighted aggregation
//! of neighbor features with MLP-parameterized geometric weights,
//! `h_i = W(sum_k MLP(x_i - x_k) * f_k)`, followed by batch
//! normalization over points and ReLU.

use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, LinearLayer};
use crate::neighbors::NeighborTable;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use rand::Rng;
use std::rc::Rc;

pub struct ContConvLayer {
    /// Two-layer MLP on 3D offsets: 3 -> c_in/2 -> c_in, ReLU after the
    /// hidden layer only. Its output is multiplied elementwise with the
    /// neighbor features, so the output width equals the feature width.
    pub mlp_hidden: LinearLayer,
    pub mlp_out: LinearLayer,
    /// Outer channel-mixing transform, bias-free (batch norm follows).
    pub w: LinearLayer,
    pub bn: BatchNormLayer,
    pub c_in: usize,
    pub c_out: usize,
}

impl ContConvLayer {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c_in % 2 != 0 {
            return Err(Error::invalid(
                "ContConvLayer::new",
                format!("feature width {c_in} must be even (MLP hidden width is c_in/2)"),
            ));
        }
        let hidden = c_in / 2;
        Ok(ContConvLayer {
            mlp_hidden: LinearLayer::new(store, &format!("{name}.mlp.hidden"), 3, hidden, true, rng),
            mlp_out: LinearLayer::new(store, &format!("{name}.mlp.out"), hidden, c_in, true, rng),
            w: LinearLayer::new(store, &format!("{name}.w"), c_in, c_out, false, rng),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), c_out),
            c_in,
            c_out,
        })
    }

    /// Pre-normalization aggregation of the weighted neighbor sum.
    pub fn forward_raw<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        f: Var,
        table: &NeighborTable,
    ) -> Result<Var> {
        let shape = tape.shape(f).to_vec();
        if shape.len() != 2 || shape[1] != self.c_in {
            return Err(Error::shape(
                "contconv",
                format!("point features {:?} do not match layer width {}", shape, self.c_in),
            ));
        }
        if table.rows() != shape[0] {
            return Err(Error::shape(
                "contconv",
                format!("table has {} rows for {} points", table.rows(), shape[0]),
            ));
        }
        // Offsets are constants: no gradient flows to point geometry.
        let offsets = tape.leaf(Tensor::from_f64_slice(
            &[table.indices.len(), 3],
            &table.offsets,
        )?);
        let h = self.mlp_hidden.forward(tape, store, offsets)?;
        let h = tape.relu(h);
        let weights = self.mlp_out.forward(tape, store, h)?;
        let gathered = tape.gather_rows(f, Rc::new(table.indices.clone()))?;
        let weighted = tape.mul(weights, gathered)?;
        let summed = tape.sum_groups(weighted, table.k)?;
        self.w.forward(tape, store, summed)
    }

    /// Full layer: aggregation, then batch norm over the point axis, then ReLU.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &mut ParamStore<E>,
        f: Var,
        table: &NeighborTable,
    ) -> Result<Var> {
        let raw = self.forward_raw(tape, store, f, table)?;
        let normed = self.bn.forward(tape, store, raw)?;
        Ok(tape.relu(normed))
    }

    pub fn set_training(&mut self, training: bool) {
        self.bn.training = training;
    }
}

/// Direct triple-loop evaluation of the aggregation, kept independent
/// of the tape path for cross-checking.
pub fn contconv_reference(
    f: &Tensor<f64>,
    table: &NeighborTable,
    mlp_hidden_w: &Tensor<f64>,
    mlp_hidden_b: &Tensor<f64>,
    mlp_out_w: &Tensor<f64>,
    mlp_out_b: &Tensor<f64>,
    w: &Tensor<f64>,
) -> Tensor<f64> {
    let n = table.rows();
    let c_in = f.shape[1];
    let c_out = w.shape[0];
    let hidden = mlp_hidden_w.shape[0];
    let mut out = Tensor::zeros(&[n, c_out]);
    for i in 0..n {
        let mut acc = vec![0.0; c_in];
        for kk in 0..table.k {
            let neighbor = table.row(i)[kk];
            let off = table.offset(i, kk);
            // MLP(x_i - x_k)
            let mut hid = vec![0.0; hidden];
            for hn in 0..hidden {
                let mut s = mlp_hidden_b.data[hn];
                for a in 0..3 {
                    s += mlp_hidden_w.data[hn * 3 + a] * off[a];
                }
                hid[hn] = s.max(0.0);
            }
            for c in 0..c_in {
                let mut s = mlp_out_b.data[c];
                for hn in 0..hidden {
                    s += mlp_out_w.data[c * hidden + hn] * hid[hn];
                }
                acc[c] += s * f.data[neighbor * c_in + c];
            }
        }
        for co in 0..c_out {
            let mut s = 0.0;
            for c in 0..c_in {
                s += w.data[co * c_in + c] * acc[c];
            }
            out.data[i * c_out + co] = s;
        }
    }
    out
}
