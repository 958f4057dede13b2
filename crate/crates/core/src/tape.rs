//! Reverse-mode differentiation over a per-pass tape.
//!
//! Each forward pass records nodes onto a fresh [`Tape`]; `backward`
//! walks the tape in reverse and accumulates gradients. Parameters are
//! bound from a [`ParamStore`] at the start of a pass and their
//! gradients flow back into the store afterwards.

use crate::error::{Error, Result};
use crate::geometry::{scatter_counts, ProjectedPixels};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Element, Tensor};
use std::rc::Rc;

/// Handle to a node on the tape.
pub type Var = usize;

struct BnSaved<E> {
    /// Normalized input (x - mean) * inv_std, same shape as x.
    xhat: Tensor<E>,
    /// Per-channel 1/sqrt(var + eps) actually used for normalization.
    inv_std: Vec<E>,
    /// Number of positions reduced per channel.
    count: usize,
    training: bool,
}

struct Interp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

enum Op<E> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<E>,
    },
    Relu {
        x: Var,
    },
    Upsample2x {
        x: Var,
        rows: Interp,
        cols: Interp,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: E,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    SumAll {
        x: Var,
    },
    SmoothL1 {
        x: Var,
    },
    GatherPixels {
        x: Var,
        batch: usize,
        pixels: Rc<ProjectedPixels>,
    },
    ScatterPixels {
        x: Var,
        batch: usize,
        pixels: Rc<ProjectedPixels>,
        counts: Vec<u32>,
    },
    GatherRows {
        x: Var,
        indices: Rc<Vec<usize>>,
    },
    SumGroups {
        x: Var,
        group: usize,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    param_binds: Vec<(Var, ParamId)>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_binds: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v].value.shape
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v].as_ref()
    }

    pub fn check_finite(&self, v: Var, op: &'static str) -> Result<()> {
        if self.nodes[v].value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Record a constant (or input) tensor.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bind a stored parameter as a leaf; its gradient is routed back to
    /// the store by [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.param_binds.push((v, id));
        v
    }

    pub fn accumulate_param_grads(&self, store: &mut ParamStore<E>) {
        for &(v, id) in &self.param_binds {
            if let Some(g) = &self.grads[v] {
                store.accumulate_grad(id, g);
            }
        }
    }

    // ---- elementwise and structural ops ----

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let mut value = self.nodes[a].value.clone();
        value.add_assign(&self.nodes[b].value);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let value = self.nodes[x].value.map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x].value.map(|v| v.max(E::zero()));
        self.push(value, Op::Relu { x })
    }

    /// Elementwise smooth-l1: `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let half = E::from_f64(0.5);
        let value = self.nodes[x].value.map(|v| {
            if v.abs() < E::one() {
                half * v * v
            } else {
                v.abs() - half
            }
        });
        self.push(value, Op::SmoothL1 { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: E = self.nodes[x].value.data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Concatenate two `[B,C,H,W]` maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", sa, sb),
            ));
        }
        let (bsz, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let hw = h * w;
        let mut out = Tensor::zeros(&[bsz, ca + cb, h, w]);
        for bi in 0..bsz {
            let dst = &mut out.data[bi * (ca + cb) * hw..];
            dst[..ca * hw].copy_from_slice(&self.nodes[a].value.data[bi * ca * hw..(bi + 1) * ca * hw]);
            dst[ca * hw..(ca + cb) * hw]
                .copy_from_slice(&self.nodes[b].value.data[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    // ---- dense layers ----

    /// 2D cross-correlation, `x: [B,Cin,H,W]`, `w: [Cout,Cin,k,k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be rank 4, got {:?}", xs)));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("kernel must be [Cout,Cin,k,k], got {:?}", ws)));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} do not match kernel channels {}", xs[1], ws[1]),
            ));
        }
        let k = ws[2];
        if k % 2 == 0 || padding != (k - 1) / 2 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel size {k} must be odd with padding (k-1)/2, got padding {padding}"),
            ));
        }
        if stride == 0 || xs[2] % stride != 0 || xs[3] % stride != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("spatial extents {}x{} must divide stride {}", xs[2], xs[3], stride),
            ));
        }
        if let Some(bv) = b {
            if self.shape(bv) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match {} output channels", self.shape(bv), ws[0]),
                ));
            }
        }
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let (oh, ow) = (conv_out(h, k, stride, padding), conv_out(wd, k, stride, padding));
        let ckk = cin * k * k;
        let l = oh * ow;
        let mut out = Tensor::zeros(&[bsz, cout, oh, ow]);
        let wmat = &self.nodes[w].value.data;
        for bi in 0..bsz {
            let cols = im2col(
                &self.nodes[x].value.data[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                cin,
                h,
                wd,
                k,
                stride,
                padding,
            );
            let y = matmul(wmat, &cols, cout, ckk, l);
            let dst = &mut out.data[bi * cout * l..(bi + 1) * cout * l];
            dst.copy_from_slice(&y);
            if let Some(bv) = b {
                let bias = &self.nodes[bv].value.data;
                for co in 0..cout {
                    let add = bias[co];
                    for v in &mut dst[co * l..(co + 1) * l] {
                        *v += add;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, padding }))
    }

    /// Rows-wise affine map, `x: [M,Din]`, `w: [Dout,Din]`, `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("input {:?} incompatible with weight {:?}", xs, ws),
            ));
        }
        let (m, din, dout) = (xs[0], xs[1], ws[0]);
        let mut data = matmul_nt(
            &self.nodes[x].value.data,
            &self.nodes[w].value.data,
            m,
            din,
            dout,
        );
        if let Some(bv) = b {
            if self.shape(bv) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} does not match output width {}", self.shape(bv), dout),
                ));
            }
            let bias = &self.nodes[bv].value.data;
            for row in data.chunks_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let value = Tensor {
            shape: vec![m, dout],
            data,
        };
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Batch normalization over channel axis 1 of a rank-2 or rank-4
    /// tensor. In training mode, batch statistics normalize and update
    /// the running buffers; in eval mode the running buffers are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<E>,
        running_var: &mut Tensor<E>,
        eps: f64,
        momentum: f64,
        training: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::shape("batchnorm", format!("rank must be 2 or 4, got {:?}", xs)));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.shape != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!("channel extent {c} does not match layer parameters"),
            ));
        }
        let count = self.nodes[x].value.numel() / c;
        if count == 0 {
            return Err(Error::invalid("batchnorm", "zero-size batch"));
        }
        let (mean, var): (Vec<E>, Vec<E>) = if training {
            let mut mean = vec![E::zero(); c];
            let mut var = vec![E::zero(); c];
            for_each_channel(&self.nodes[x].value, |ch, v| mean[ch] += v);
            let inv_n = E::from_f64(1.0 / count as f64);
            for m in &mut mean {
                *m *= inv_n;
            }
            for_each_channel(&self.nodes[x].value, |ch, v| {
                let d = v - mean[ch];
                var[ch] += d * d;
            });
            for v in &mut var {
                *v *= inv_n;
            }
            // Running stats track the unbiased variance when possible.
            let unbias = if count > 1 {
                E::from_f64(count as f64 / (count as f64 - 1.0))
            } else {
                E::one()
            };
            let mom = E::from_f64(momentum);
            let keep = E::one() - mom;
            for ch in 0..c {
                running_mean.data[ch] = keep * running_mean.data[ch] + mom * mean[ch];
                running_var.data[ch] = keep * running_var.data[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (running_mean.data.clone(), running_var.data.clone())
        };
        let inv_std: Vec<E> = var
            .iter()
            .map(|&v| E::one() / (v + E::from_f64(eps)).sqrt())
            .collect();
        let mut xhat = Tensor::zeros(&xs);
        {
            let src = &self.nodes[x].value;
            map_channels(src, &mut xhat, |ch, v| (v - mean[ch]) * inv_std[ch]);
        }
        let g = &self.nodes[gamma].value.data;
        let bta = &self.nodes[beta].value.data;
        let mut out = Tensor::zeros(&xs);
        map_channels(&xhat, &mut out, |ch, v| g[ch] * v + bta[ch]);
        let saved = BnSaved {
            xhat,
            inv_std,
            count,
            training,
        };
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, saved }))
    }

    /// Bilinear 2x upsampling with the align_corners=false convention
    /// (sample centers at (i + 0.5)/2 - 0.5).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample2x", format!("rank must be 4, got {:?}", xs)));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let rows = interp_axis(h);
        let cols = interp_axis(w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[bsz, c, oh, ow]);
        let src = &self.nodes[x].value.data;
        for plane in 0..bsz * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
                for ox in 0..ow {
                    let (x0, x1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                    let w00 = E::from_f64((1.0 - fy) * (1.0 - fx));
                    let w01 = E::from_f64((1.0 - fy) * fx);
                    let w10 = E::from_f64(fy * (1.0 - fx));
                    let w11 = E::from_f64(fy * fx);
                    dp[oy * ow + ox] = sp[y0 * w + x0] * w00
                        + sp[y0 * w + x1] * w01
                        + sp[y1 * w + x0] * w10
                        + sp[y1 * w + x1] * w11;
                }
            }
        }
        Ok(self.push(out, Op::Upsample2x { x, rows, cols }))
    }

    // ---- point/grid exchange ----

    /// Nearest-pixel lookup on batch sample `batch` of a `[B,C,H,W]`
    /// map; out-of-bounds points receive zero rows.
    pub fn gather_pixels(&mut self, x: Var, batch: usize, pixels: Rc<ProjectedPixels>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] != pixels.grid_height || xs[3] != pixels.grid_width {
            return Err(Error::shape(
                "gather_pixels",
                format!(
                    "map {:?} does not match grid {}x{}",
                    xs, pixels.grid_height, pixels.grid_width
                ),
            ));
        }
        if batch >= xs[0] {
            return Err(Error::invalid("gather_pixels", format!("batch {batch} out of range")));
        }
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let n = pixels.len();
        let mut out = Tensor::zeros(&[n, c]);
        let base = batch * c * hw;
        for i in 0..n {
            if let Some(px) = pixels.flat_index(i) {
                for ch in 0..c {
                    out.data[i * c + ch] = self.nodes[x].value.data[base + ch * hw + px];
                }
            }
        }
        Ok(self.push(out, Op::GatherPixels { x, batch, pixels }))
    }

    /// Scatter `[N,C]` point features to a `[B,C,H,W]` map, filled only
    /// at batch sample `batch`. Colliding points are averaged.
    pub fn scatter_pixels(
        &mut self,
        x: Var,
        batch: usize,
        batch_size: usize,
        pixels: Rc<ProjectedPixels>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != pixels.len() {
            return Err(Error::shape(
                "scatter_pixels",
                format!("point features {:?} do not match {} points", xs, pixels.len()),
            ));
        }
        let c = xs[1];
        let (h, w) = (pixels.grid_height, pixels.grid_width);
        let counts = scatter_counts(&pixels);
        let mut out = Tensor::zeros(&[batch_size, c, h, w]);
        let base = batch * c * h * w;
        for i in 0..pixels.len() {
            if let Some(px) = pixels.flat_index(i) {
                let inv = E::from_f64(1.0 / counts[px] as f64);
                for ch in 0..c {
                    out.data[base + ch * h * w + px] += self.nodes[x].value.data[i * c + ch] * inv;
                }
            }
        }
        Ok(self.push(
            out,
            Op::ScatterPixels {
                x,
                batch,
                pixels,
                counts,
            },
        ))
    }

    /// Row lookup: `out[r] = x[indices[r]]` for `x: [N,C]`.
    pub fn gather_rows(&mut self, x: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("gather_rows", format!("rank must be 2, got {:?}", xs)));
        }
        let (n, c) = (xs[0], xs[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather_rows", format!("index {bad} out of {n} rows")));
        }
        let mut out = Tensor::zeros(&[indices.len(), c]);
        for (r, &i) in indices.iter().enumerate() {
            out.data[r * c..(r + 1) * c].copy_from_slice(&self.nodes[x].value.data[i * c..(i + 1) * c]);
        }
        Ok(self.push(out, Op::GatherRows { x, indices }))
    }

    /// Sum consecutive groups of `group` rows: `[N*K,C]` to `[N,C]`.
    pub fn sum_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || group == 0 || xs[0] % group != 0 {
            return Err(Error::shape(
                "sum_groups",
                format!("rows {:?} not divisible into groups of {group}", xs),
            ));
        }
        let (rows, c) = (xs[0], xs[1]);
        let n = rows / group;
        let mut out = Tensor::zeros(&[n, c]);
        for r in 0..rows {
            let dst = &mut out.data[(r / group) * c..(r / group + 1) * c];
            let src = &self.nodes[x].value.data[r * c..(r + 1) * c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(self.push(out, Op::SumGroups { x, group }))
    }

    // ---- backward ----

    fn add_grad(grads: &mut [Option<Tensor<E>>], v: Var, delta: Tensor<E>) {
        match &mut grads[v] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagate from a scalar root. Gradients of every reachable
    /// node become available through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::invalid("backward", "root must be a scalar"));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root] = Some(Tensor::scalar(E::one()));
        for i in (0..self.nodes.len()).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let nodes = &self.nodes;
            let grads = &mut self.grads;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    Self::add_grad(grads, *a, g.clone());
                    Self::add_grad(grads, *b, g.clone());
                }
                Op::Sub { a, b } => {
                    Self::add_grad(grads, *a, g.clone());
                    Self::add_grad(grads, *b, g.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    let da = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&nodes[*b].value.data)
                            .map(|(&gv, &bv)| gv * bv)
                            .collect(),
                    };
                    let db = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&nodes[*a].value.data)
                            .map(|(&gv, &av)| gv * av)
                            .collect(),
                    };
                    Self::add_grad(grads, *a, da);
                    Self::add_grad(grads, *b, db);
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    Self::add_grad(grads, *x, g.map(|v| v * c));
                }
                Op::Relu { x } => {
                    let dx = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&nodes[*x].value.data)
                            .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                            .collect(),
                    };
                    Self::add_grad(grads, *x, dx);
                }
                Op::SmoothL1 { x } => {
                    let dx = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&nodes[*x].value.data)
                            .map(|(&gv, &xv)| gv * xv.max(-E::one()).min(E::one()))
                            .collect(),
                    };
                    Self::add_grad(grads, *x, dx);
                }
                Op::SumAll { x } => {
                    Self::add_grad(grads, *x, Tensor::full(&nodes[*x].value.shape, g.item()));
                }
                Op::ConcatChannels { a, b } => {
                    let (sa, sb) = (&nodes[*a].value.shape, &nodes[*b].value.shape);
                    let (bsz, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    let mut da = Tensor::zeros(sa);
                    let mut db = Tensor::zeros(sb);
                    for bi in 0..bsz {
                        let srow = &g.data[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
                        da.data[bi * ca * hw..(bi + 1) * ca * hw].copy_from_slice(&srow[..ca * hw]);
                        db.data[bi * cb * hw..(bi + 1) * cb * hw]
                            .copy_from_slice(&srow[ca * hw..(ca + cb) * hw]);
                    }
                    Self::add_grad(grads, *a, da);
                    Self::add_grad(grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let xs = &nodes[*x].value.shape;
                    let ws = &nodes[*w].value.shape;
                    let (m, din, dout) = (xs[0], xs[1], ws[0]);
                    let dx = Tensor {
                        shape: xs.clone(),
                        data: matmul(&g.data, &nodes[*w].value.data, m, dout, din),
                    };
                    let dw = Tensor {
                        shape: ws.clone(),
                        data: matmul_tn(&g.data, &nodes[*x].value.data, dout, m, din),
                    };
                    Self::add_grad(grads, *x, dx);
                    Self::add_grad(grads, *w, dw);
                    if let Some(bv) = b {
                        let mut db = vec![E::zero(); dout];
                        for row in g.data.chunks(dout) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        Self::add_grad(
                            grads,
                            *bv,
                            Tensor {
                                shape: vec![dout],
                                data: db,
                            },
                        );
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let xs = &nodes[*x].value.shape;
                    let ws = &nodes[*w].value.shape;
                    let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (cout, k) = (ws[0], ws[2]);
                    let ckk = cin * k * k;
                    let (oh, ow) = (
                        conv_out(h, k, *stride, *padding),
                        conv_out(wd, k, *stride, *padding),
                    );
                    let l = oh * ow;
                    let mut dx = Tensor::zeros(xs);
                    let mut dw = Tensor::zeros(ws);
                    let mut db = vec![E::zero(); cout];
                    for bi in 0..bsz {
                        let go = &g.data[bi * cout * l..(bi + 1) * cout * l];
                        // im2col is recomputed here instead of cached at forward time.
                        let cols = im2col(
                            &nodes[*x].value.data[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                            cin,
                            h,
                            wd,
                            k,
                            *stride,
                            *padding,
                        );
                        let dwp = matmul_nt(go, &cols, cout, l, ckk);
                        for (d, s) in dw.data.iter_mut().zip(dwp) {
                            *d += s;
                        }
                        let dcols = matmul_tn(&nodes[*w].value.data, go, ckk, cout, l);
                        col2im_acc(
                            &dcols,
                            &mut dx.data[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                            cin,
                            h,
                            wd,
                            k,
                            *stride,
                            *padding,
                        );
                        if b.is_some() {
                            for co in 0..cout {
                                db[co] += go[co * l..(co + 1) * l].iter().copied().sum();
                            }
                        }
                    }
                    Self::add_grad(grads, *x, dx);
                    Self::add_grad(grads, *w, dw);
                    if let Some(bv) = b {
                        Self::add_grad(
                            grads,
                            *bv,
                            Tensor {
                                shape: vec![cout],
                                data: db,
                            },
                        );
                    }
                }
                Op::BatchNorm { x, gamma, beta, saved } => {
                    let c = nodes[*gamma].value.numel();
                    let gvals = &nodes[*gamma].value.data;
                    let mut dgamma = vec![E::zero(); c];
                    let mut dbeta = vec![E::zero(); c];
                    for_each_channel_pair(&g, &saved.xhat, |ch, gv, xh| {
                        dgamma[ch] += gv * xh;
                        dbeta[ch] += gv;
                    });
                    let mut dx = Tensor::zeros(&nodes[*x].value.shape);
                    if saved.training {
                        let m = E::from_f64(saved.count as f64);
                        let inv_m = E::one() / m;
                        map_channels_pair(&g, &saved.xhat, &mut dx, |ch, gv, xh| {
                            gvals[ch]
                                * saved.inv_std[ch]
                                * (gv - inv_m * dbeta[ch] - inv_m * xh * dgamma[ch])
                        });
                    } else {
                        map_channels_pair(&g, &saved.xhat, &mut dx, |ch, gv, _| {
                            gvals[ch] * saved.inv_std[ch] * gv
                        });
                    }
                    Self::add_grad(grads, *x, dx);
                    Self::add_grad(
                        grads,
                        *gamma,
                        Tensor {
                            shape: vec![c],
                            data: dgamma,
                        },
                    );
                    Self::add_grad(
                        grads,
                        *beta,
                        Tensor {
                            shape: vec![c],
                            data: dbeta,
                        },
                    );
                }
                Op::Upsample2x { x, rows, cols } => {
                    let xs = &nodes[*x].value.shape;
                    let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = Tensor::zeros(xs);
                    for plane in 0..bsz * c {
                        let gp = &g.data[plane * oh * ow..(plane + 1) * oh * ow];
                        let dp = &mut dx.data[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..oh {
                            let (y0, y1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
                            for ox in 0..ow {
                                let (x0, x1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                                let gv = gp[oy * ow + ox];
                                dp[y0 * w + x0] += gv * E::from_f64((1.0 - fy) * (1.0 - fx));
                                dp[y0 * w + x1] += gv * E::from_f64((1.0 - fy) * fx);
                                dp[y1 * w + x0] += gv * E::from_f64(fy * (1.0 - fx));
                                dp[y1 * w + x1] += gv * E::from_f64(fy * fx);
                            }
                        }
                    }
                    Self::add_grad(grads, *x, dx);
                }
                Op::GatherPixels { x, batch, pixels } => {
                    let xs = &nodes[*x].value.shape;
                    let (c, hw) = (xs[1], xs[2] * xs[3]);
                    let mut dx = Tensor::zeros(xs);
                    let base = batch * c * hw;
                    for i in 0..pixels.len() {
                        if let Some(px) = pixels.flat_index(i) {
                            for ch in 0..c {
                                dx.data[base + ch * hw + px] += g.data[i * c + ch];
                            }
                        }
                    }
                    Self::add_grad(grads, *x, dx);
                }
                Op::ScatterPixels {
                    x,
                    batch,
                    pixels,
                    counts,
                    ..
                } => {
                    let xs = &nodes[*x].value.shape;
                    let c = xs[1];
                    let (h, w) = (pixels.grid_height, pixels.grid_width);
                    let mut dx = Tensor::zeros(xs);
                    let base = batch * c * h * w;
                    for i in 0..pixels.len() {
                        if let Some(px) = pixels.flat_index(i) {
                            let inv = E::from_f64(1.0 / counts[px] as f64);
                            for ch in 0..c {
                                dx.data[i * c + ch] = g.data[base + ch * h * w + px] * inv;
                            }
                        }
                    }
                    Self::add_grad(grads, *x, dx);
                }
                Op::GatherRows { x, indices } => {
                    let xs = &nodes[*x].value.shape;
                    let c = xs[1];
                    let mut dx = Tensor::zeros(xs);
                    for (r, &idx) in indices.iter().enumerate() {
                        let src = &g.data[r * c..(r + 1) * c];
                        let dst = &mut dx.data[idx * c..(idx + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    Self::add_grad(grads, *x, dx);
                }
                Op::SumGroups { x, group } => {
                    let xs = &nodes[*x].value.shape;
                    let (rows, c) = (xs[0], xs[1]);
                    let mut dx = Tensor::zeros(xs);
                    for r in 0..rows {
                        let src = &g.data[(r / group) * c..(r / group + 1) * c];
                        dx.data[r * c..(r + 1) * c].copy_from_slice(src);
                    }
                    Self::add_grad(grads, *x, dx);
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn conv_out(extent: usize, k: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - k) / stride + 1
}

/// Lower one `[Cin,H,W]` image into a `[Cin*k*k, OH*OW]` patch matrix.
fn im2col<E: Element>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<E> {
    let (oh, ow) = (conv_out(h, k, stride, padding), conv_out(w, k, stride, padding));
    let l = oh * ow;
    let mut cols = vec![E::zero(); cin * k * k * l];
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[(ci * k * k + ky * k + kx) * l..(ci * k * k + ky * k + kx + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * ow + ox] = plane[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Transpose of `im2col`: accumulate patch-matrix gradients back into
/// the image layout.
fn col2im_acc<E: Element>(
    cols: &[E],
    x: &mut [E],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    let (oh, ow) = (conv_out(h, k, stride, padding), conv_out(w, k, stride, padding));
    let l = oh * ow;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[(ci * k * k + ky * k + kx) * l..(ci * k * k + ky * k + kx + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn interp_axis(extent: usize) -> Interp {
    let out = 2 * extent;
    let mut lo = Vec::with_capacity(out);
    let mut hi = Vec::with_capacity(out);
    let mut frac = Vec::with_capacity(out);
    for o in 0..out {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (extent - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(extent - 1);
        lo.push(i0);
        hi.push(i1);
        frac.push(src - i0 as f64);
    }
    Interp { lo, hi, frac }
}

/// Visit every element with its channel index (axis 1 of rank 2/4).
fn for_each_channel<E: Element>(t: &Tensor<E>, mut f: impl FnMut(usize, E)) {
    let c = t.shape[1];
    let inner: usize = t.shape[2..].iter().product();
    for (i, &v) in t.data.iter().enumerate() {
        f((i / inner) % c, v);
    }
}

fn for_each_channel_pair<E: Element>(a: &Tensor<E>, b: &Tensor<E>, mut f: impl FnMut(usize, E, E)) {
    let c = a.shape[1];
    let inner: usize = a.shape[2..].iter().product();
    for i in 0..a.data.len() {
        f((i / inner) % c, a.data[i], b.data[i]);
    }
}

fn map_channels<E: Element>(src: &Tensor<E>, dst: &mut Tensor<E>, f: impl Fn(usize, E) -> E) {
    let c = src.shape[1];
    let inner: usize = src.shape[2..].iter().product();
    for (i, (&s, d)) in src.data.iter().zip(dst.data.iter_mut()).enumerate() {
        *d = f((i / inner) % c, s);
    }
}

fn map_channels_pair<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    dst: &mut Tensor<E>,
    f: impl Fn(usize, E, E) -> E,
) {
    let c = a.shape[1];
    let inner: usize = a.shape[2..].iter().product();
    for i in 0..a.data.len() {
        dst.data[i] = f((i / inner) % c, a.data[i], b.data[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0; // center tap
        let w = tape.leaf(Tensor::new(vec![1, 1, 3, 3], kdata).unwrap());
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_with_named_dimension() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[2, 4, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels 3"), "{err}");
    }

    #[test]
    fn conv2d_stride1_preserves_extents_for_odd_k() {
        for k in [1usize, 3, 5] {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::zeros(&[1, 2, 6, 10]));
            let w = tape.leaf(Tensor::zeros(&[3, 2, k, k]));
            let y = tape.conv2d(x, w, None, 1, (k - 1) / 2).unwrap();
            assert_eq!(tape.shape(y), &[1, 3, 6, 10]);
        }
    }

    #[test]
    fn relu_definition_and_saturation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data, vec![0.0, 0.0, 2.0]);

        // All-negative input: zero output, zero gradient flow.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-3.0, -0.5]).unwrap());
        let y = tape.relu(x);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| v == 0.0));
        assert!(tape.grad(x).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 3, 5], 2.5));
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 6, 10]);
        assert!(tape.value(y).data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn upsample_row_matches_hand_evaluation() {
        // [a, b] -> [a, 0.75a + 0.25b, 0.25a + 0.75b, b]
        let (a, b) = (1.0, 3.0);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 1, 2], vec![a, b]).unwrap());
        let y = tape.upsample2x(x).unwrap();
        let row = &tape.value(y).data[..4];
        let want = [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b];
        for (got, want) in row.iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn linear_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(Tensor::new(vec![3, 3], eye).unwrap());
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn linear_rejects_dimension_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let w = tape.leaf(Tensor::zeros(&[4, 5]));
        assert!(tape.linear(x, w, None).is_err());
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 9.0]).unwrap());
        let z = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn concat_16_and_32_channels_yields_48() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[1, 16, 4, 4]));
        let b = tape.leaf(Tensor::zeros(&[1, 32, 4, 4]));
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 48, 4, 4]);
    }

    #[test]
    fn concat_backward_splits_gradient_exactly() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[1, 2, 2, 2], 1.0));
        let b = tape.leaf(Tensor::full(&[1, 3, 2, 2], 1.0));
        let y = tape.concat_channels(a, b).unwrap();
        let w = tape.leaf(Tensor::new(
            vec![1, 5, 2, 2],
            (0..20).map(|i| i as f64).collect(),
        ).unwrap());
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum_all(p);
        tape.backward(s).unwrap();
        let norm = |t: &Tensor<f64>| t.data.iter().map(|v| v * v).sum::<f64>();
        let routed = norm(tape.grad(a).unwrap()) + norm(tape.grad(b).unwrap());
        assert!((routed - norm(tape.grad(y).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(
            vec![4, 2],
            vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0],
        ).unwrap());
        let gamma = tape.leaf(Tensor::full(&[2], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[2]));
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        let y = tape
            .batchnorm(x, gamma, beta, &mut rm, &mut rv, 1e-5, 0.1, true)
            .unwrap();
        for ch in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| tape.value(y).data[r * 2 + ch]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3); // eps tolerance
        }
    }

    #[test]
    fn batchnorm_constant_channel_outputs_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[5, 1], 7.0));
        let gamma = tape.leaf(Tensor::full(&[1], 2.0));
        let beta = tape.leaf(Tensor::full(&[1], -3.0));
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let y = tape
            .batchnorm(x, gamma, beta, &mut rm, &mut rv, 1e-5, 0.1, true)
            .unwrap();
        assert!(tape.value(y).data.iter().all(|&v| (v + 3.0).abs() < 1e-9));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 5.0]).unwrap());
        let gamma = tape.leaf(Tensor::full(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        let mut rm = Tensor::full(&[1], 4.0);
        let mut rv = Tensor::full(&[1], 4.0);
        let y = tape
            .batchnorm(x, gamma, beta, &mut rm, &mut rv, 0.0, 0.1, false)
            .unwrap();
        assert!((tape.value(y).data[0] + 0.5).abs() < 1e-12);
        assert!((tape.value(y).data[1] - 0.5).abs() < 1e-12);
        // Eval mode must not touch the running buffers.
        assert_eq!(rm.data[0], 4.0);
        assert_eq!(rv.data[0], 4.0);
    }

    #[test]
    fn smooth_l1_branch_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.0, 0.5, 1.5]).unwrap());
        let y = tape.smooth_l1(x);
        assert_eq!(tape.value(y).data, vec![0.0, 0.125, 1.0]);
    }

    #[test]
    fn sum_groups_and_gather_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let g = tape.sum_groups(x, 2).unwrap();
        assert_eq!(tape.value(g).data, vec![4.0, 6.0, 12.0, 14.0]);
        let idx = Rc::new(vec![3usize, 0, 0]);
        let r = tape.gather_rows(x, idx).unwrap();
        assert_eq!(tape.value(r).data, vec![7.0, 8.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.2, 0.7]).unwrap());
            let w = tape.leaf(Tensor::new(vec![2, 2], vec![0.11, -0.5, 0.25, 0.9]).unwrap());
            let y = tape.linear(x, w, None).unwrap();
            let r = tape.relu(y);
            let s = tape.sum_all(r);
            tape.backward(s).unwrap();
            (
                tape.grad(x).unwrap().data.clone(),
                tape.grad(w).unwrap().data.clone(),
            )
        };
        assert_eq!(run(), run());
    }
}
