//! Depth-completion network built from stacked 2D-3D fuse blocks.
//!
//! Each block runs three parallel branches over a half-resolution
//! feature map: a stride-1 convolution, a downsample/upsample
//! convolution pair, and a point-domain branch that lifts features
//! onto the sparse 3D points, applies two continuous convolutions
//! over metric neighborhoods, and scatters back. Branch outputs are
//! summed and mixed by a final convolution, with a residual shortcut
//! whenever input and output widths agree.

use crate::contconv::ContConvLayer;
use crate::dataio::{sample_points, Frame};
use crate::error::{Error, Result};
use crate::geometry::{project, unproject, ProjectedPixels};
use crate::layers::{Conv2dLayer, ConvBnRelu};
use crate::neighbors::{precompute_table, NeighborTable};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

const DEPTH_STEM_CHANNELS: usize = 16;
const RGBD_STEM_CHANNELS: usize = 32;
const STEM_OUT: usize = DEPTH_STEM_CHANNELS + RGBD_STEM_CHANNELS;

/// Which branches of each fuse block are instantiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSet {
    pub s1: bool,
    pub s2: bool,
    pub cont: bool,
}

impl Default for BranchSet {
    fn default() -> Self {
        BranchSet {
            s1: true,
            s2: true,
            cont: true,
        }
    }
}

impl BranchSet {
    pub fn validate(&self) -> Result<()> {
        if !(self.s1 || self.s2 || self.cont) {
            return Err(Error::invalid(
                "branch_set",
                "at least one branch must stay enabled",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseNetConfig {
    /// Working width of the fuse blocks.
    pub channels: usize,
    /// Number of uniform blocks stacked after the adapter block that
    /// maps the stem output onto `channels`.
    pub blocks: usize,
    /// Neighborhood size of the continuous convolutions.
    pub k: usize,
    /// Cap on how many sparse points feed the 3D branch per frame.
    pub sample_budget: usize,
    /// Weight of the smooth-L1 term in the combined loss.
    pub gamma: f64,
    pub branches: BranchSet,
}

impl Default for FuseNetConfig {
    fn default() -> Self {
        FuseNetConfig {
            channels: 32,
            blocks: 6,
            k: 9,
            sample_budget: 10_000,
            gamma: 1.0,
            branches: BranchSet::default(),
        }
    }
}

impl FuseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "channels must be even and at least 2, got {}",
                self.channels
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.sample_budget == 0 {
            return Err(Error::Config("sample_budget must be positive".into()));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "gamma must be a non-negative number, got {}",
                self.gamma
            )));
        }
        self.branches.validate()
    }
}

/// Everything the 3D branch needs for one frame, computed once and
/// shared by all blocks: sampled points, their neighbor table, and
/// their pixel coordinates on the half-resolution feature grid.
pub struct FrameGeometry {
    pub table: NeighborTable,
    pub pixels: Rc<ProjectedPixels>,
    pub point_count: usize,
}

impl FrameGeometry {
    pub fn new(frame: &Frame, config: &FuseNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let sampled = sample_points(&frame.sparse, config.sample_budget, rng)?;
        if sampled.mask_count() < config.k {
            return Err(Error::Data(format!(
                "frame holds {} sparse points but the neighborhood needs {}",
                sampled.mask_count(),
                config.k
            )));
        }
        let points = unproject(&sampled, &frame.intrinsics)?;
        let table = precompute_table(&points, config.k)?;
        let pixels = project(&points, &frame.intrinsics, 0.5)?;
        Ok(FrameGeometry {
            point_count: points.len(),
            table,
            pixels: Rc::new(pixels),
        })
    }
}

pub struct FuseBlock {
    s1: Option<ConvBnRelu>,
    s2_down: Option<ConvBnRelu>,
    s2_flat: Option<ConvBnRelu>,
    cc1: Option<ContConvLayer>,
    cc2: Option<ContConvLayer>,
    fuse: ConvBnRelu,
    shortcut: bool,
}

impl FuseBlock {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c: usize,
        branches: BranchSet,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(FuseBlock {
            s1: branches
                .s1
                .then(|| ConvBnRelu::new(store, &format!("{name}.s1"), c_in, c, 3, 1, rng)),
            s2_down: branches
                .s2
                .then(|| ConvBnRelu::new(store, &format!("{name}.s2.down"), c_in, c, 3, 2, rng)),
            s2_flat: branches
                .s2
                .then(|| ConvBnRelu::new(store, &format!("{name}.s2.flat"), c, c, 3, 1, rng)),
            cc1: if branches.cont {
                Some(ContConvLayer::new(store, &format!("{name}.cc1"), c_in, c, rng)?)
            } else {
                None
            },
            cc2: if branches.cont {
                Some(ContConvLayer::new(store, &format!("{name}.cc2"), c, c, rng)?)
            } else {
                None
            },
            fuse: ConvBnRelu::new(store, &format!("{name}.fuse"), c, c, 3, 1, rng),
            shortcut: c_in == c,
        })
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &mut ParamStore<E>,
        x: Var,
        geom: &FrameGeometry,
    ) -> Result<Var> {
        let mut acc: Option<Var> = None;
        let push = |tape: &mut Tape<E>, acc: &mut Option<Var>, y: Var| -> Result<()> {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
            Ok(())
        };
        if let Some(s1) = &self.s1 {
            let y = s1.forward(tape, store, x)?;
            push(tape, &mut acc, y)?;
        }
        if let (Some(down), Some(flat)) = (&self.s2_down, &self.s2_flat) {
            let y = down.forward(tape, store, x)?;
            let y = flat.forward(tape, store, y)?;
            let y = tape.upsample2x(y)?;
            push(tape, &mut acc, y)?;
        }
        if let (Some(cc1), Some(cc2)) = (&self.cc1, &self.cc2) {
            let f = tape.gather_pixels(x, 0, geom.pixels.clone())?;
            let f = cc1.forward(tape, store, f, &geom.table)?;
            let f = cc2.forward(tape, store, f, &geom.table)?;
            let y = tape.scatter_pixels(f, 0, 1, geom.pixels.clone())?;
            push(tape, &mut acc, y)?;
        }
        let summed = acc.expect("branch set is validated non-empty");
        let fused = self.fuse.forward(tape, store, summed)?;
        if self.shortcut {
            tape.add(fused, x)
        } else {
            Ok(fused)
        }
    }

    pub fn set_training(&mut self, training: bool) {
        for c in [&mut self.s1, &mut self.s2_down, &mut self.s2_flat]
            .into_iter()
            .flatten()
        {
            c.set_training(training);
        }
        for cc in [&mut self.cc1, &mut self.cc2].into_iter().flatten() {
            cc.set_training(training);
        }
        self.fuse.set_training(training);
    }
}

pub struct FuseNet {
    pub config: FuseNetConfig,
    depth_stem_a: ConvBnRelu,
    depth_stem_b: ConvBnRelu,
    rgbd_stem_a: ConvBnRelu,
    rgbd_stem_b: ConvBnRelu,
    blocks: Vec<FuseBlock>,
    head_conv: ConvBnRelu,
    head_out: Conv2dLayer,
}

impl FuseNet {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        config: FuseNetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let depth_stem_a = ConvBnRelu::new(store, "stem.depth.a", 1, DEPTH_STEM_CHANNELS, 3, 2, rng);
        let depth_stem_b =
            ConvBnRelu::new(store, "stem.depth.b", DEPTH_STEM_CHANNELS, DEPTH_STEM_CHANNELS, 3, 1, rng);
        let rgbd_stem_a = ConvBnRelu::new(store, "stem.rgbd.a", 4, RGBD_STEM_CHANNELS, 3, 2, rng);
        let rgbd_stem_b =
            ConvBnRelu::new(store, "stem.rgbd.b", RGBD_STEM_CHANNELS, RGBD_STEM_CHANNELS, 3, 1, rng);
        // Adapter block maps the 48-channel stem output onto the
        // working width; the remaining blocks are uniform residual ones.
        let mut blocks = Vec::with_capacity(config.blocks + 1);
        blocks.push(FuseBlock::new(store, "block.0", STEM_OUT, c, config.branches, rng)?);
        for i in 0..config.blocks {
            blocks.push(FuseBlock::new(
                store,
                &format!("block.{}", i + 1),
                c,
                c,
                config.branches,
                rng,
            )?);
        }
        let head_conv = ConvBnRelu::new(store, "head.conv", c, c, 3, 1, rng);
        let head_out = Conv2dLayer::new(store, "head.out", c, 1, 3, 1, rng);
        Ok(FuseNet {
            config,
            depth_stem_a,
            depth_stem_b,
            rgbd_stem_a,
            rgbd_stem_b,
            blocks,
            head_conv,
            head_out,
        })
    }

    /// Full forward pass over one frame; returns a `[1,1,H,W]` depth
    /// prediction var still attached to the tape.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &mut ParamStore<E>,
        frame: &Frame,
        geom: &FrameGeometry,
    ) -> Result<Var> {
        let (h, w) = (frame.height(), frame.width());
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Data(format!(
                "frame extents {w}x{h} must be divisible by 4"
            )));
        }
        let mut rgb = frame.rgb.to_f64_tensor();
        rgb.shape.insert(0, 1);
        let rgb = tape.leaf(Tensor::from_f64_slice(&rgb.shape, &rgb.data)?);
        let depth_t = frame.sparse.to_tensor::<E>();
        let mut depth_shape = depth_t.shape.clone();
        depth_shape.insert(0, 1);
        let depth = tape.leaf(Tensor::new(depth_shape, depth_t.data)?);
        let rgbd = tape.concat_channels(rgb, depth)?;

        let d = self.depth_stem_a.forward(tape, store, depth)?;
        let d = self.depth_stem_b.forward(tape, store, d)?;
        let g = self.rgbd_stem_a.forward(tape, store, rgbd)?;
        let g = self.rgbd_stem_b.forward(tape, store, g)?;
        let mut x = tape.concat_channels(d, g)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, geom)?;
        }
        let y = tape.upsample2x(x)?;
        let y = self.head_conv.forward(tape, store, y)?;
        let out = self.head_out.forward(tape, store, y)?;
        tape.check_finite(out, "fusenet_forward")?;
        Ok(out)
    }

    pub fn set_training(&mut self, training: bool) {
        for s in [
            &mut self.depth_stem_a,
            &mut self.depth_stem_b,
            &mut self.rgbd_stem_a,
            &mut self.rgbd_stem_b,
            &mut self.head_conv,
        ] {
            s.set_training(training);
        }
        for b in &mut self.blocks {
            b.set_training(training);
        }
    }
}

/// Trainable parameter count of a configuration, without keeping the
/// model around.
pub fn param_count(config: &FuseNetConfig) -> Result<usize> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    FuseNet::new(&mut store, *config, &mut rng)?;
    Ok(store.trainable_numel())
}

use rand::SeedableRng as _;

// --- checkpoints -------------------------------------------------------
//
// Binary container: magic, format version, JSON-encoded config, then
// every store entry (including batch-norm running statistics) as
// named little-endian f32 blobs, and optionally the Adam moments so
// training resumes bit-identically.

const CKPT_MAGIC: &[u8; 8] = b"FUSENET\0";
const CKPT_VERSION: u32 = 1;

fn write_u64(w: &mut impl std::io::Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_blob(w: &mut impl std::io::Write, name: &str, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    write_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    write_u64(w, shape.len() as u64)?;
    for &d in shape {
        write_u64(w, d as u64)?;
    }
    write_u64(w, data.len() as u64)?;
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct CkptReader<R> {
    inner: R,
    path: String,
}

impl<R: std::io::Read> CkptReader<R> {
    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::Checkpoint(format!("{}: {}", self.path, detail.into()))
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::Checkpoint(format!("{}: truncated file ({e})", self.path)))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_len(&mut self, what: &str, cap: u64) -> Result<usize> {
        let v = self.read_u64()?;
        if v > cap {
            return Err(self.bad(format!("{what} length {v} is implausible")));
        }
        Ok(v as usize)
    }

    fn read_string(&mut self, what: &str) -> Result<String> {
        let len = self.read_len(what, 1 << 20)?;
        let mut buf = vec![0u8; len];
        self.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| self.bad(format!("{what} is not UTF-8")))
    }

    fn read_blob(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name = self.read_string("blob name")?;
        let rank = self.read_len("blob rank", 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.read_len("blob dim", 1 << 32)?);
        }
        let count = self.read_len("blob size", 1 << 32)?;
        let mut data = Vec::with_capacity(count);
        let mut b = [0u8; 4];
        for _ in 0..count {
            self.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        Ok((name, shape, data))
    }
}

/// Saved training state: model parameters plus optional optimizer
/// moments.
pub struct Checkpoint {
    pub config: FuseNetConfig,
    pub epoch: u64,
}

pub fn save_checkpoint<E: Element>(
    path: &Path,
    config: &FuseNetConfig,
    epoch: u64,
    store: &ParamStore<E>,
    adam: Option<&AdamState<E>>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(CKPT_MAGIC).map_err(io_err)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io_err)?;
    let config_json = serde_json::to_vec(config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    write_u64(&mut w, config_json.len() as u64).map_err(io_err)?;
    w.write_all(&config_json).map_err(io_err)?;
    write_u64(&mut w, epoch).map_err(io_err)?;
    write_u64(&mut w, store.len() as u64).map_err(io_err)?;
    for (name, value, _) in store.iter_named() {
        let data: Vec<f32> = value.data.iter().map(|v| v.as_f64() as f32).collect();
        write_blob(&mut w, name, &value.shape, &data).map_err(io_err)?;
    }
    match adam {
        Some(state) => {
            w.write_all(&[1u8]).map_err(io_err)?;
            write_u64(&mut w, state.step).map_err(io_err)?;
            write_u64(&mut w, state.m.len() as u64).map_err(io_err)?;
            for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
                let md: Vec<f32> = m.data.iter().map(|x| x.as_f64() as f32).collect();
                let vd: Vec<f32> = v.data.iter().map(|x| x.as_f64() as f32).collect();
                write_blob(&mut w, &format!("m.{i}"), &m.shape, &md).map_err(io_err)?;
                write_blob(&mut w, &format!("v.{i}"), &v.shape, &vd).map_err(io_err)?;
            }
        }
        None => w.write_all(&[0u8]).map_err(io_err)?,
    }
    w.flush().map_err(io_err)
}

/// Reads a checkpoint, rebuilding the model from its stored config and
/// loading every tensor by name. Returns the model, metadata, and the
/// optimizer state when one was saved.
pub fn load_checkpoint<E: Element>(
    path: &Path,
    store: &mut ParamStore<E>,
) -> Result<(FuseNet, Checkpoint, Option<AdamState<E>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = CkptReader {
        inner: std::io::BufReader::new(file),
        path: path.display().to_string(),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(r.bad("not a checkpoint file (bad magic)"));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let ver = u32::from_le_bytes(ver);
    if ver != CKPT_VERSION {
        return Err(r.bad(format!("unsupported version {ver}, expected {CKPT_VERSION}")));
    }
    let config_json = r.read_string("config")?;
    let config: FuseNetConfig = serde_json::from_str(&config_json)
        .map_err(|e| r.bad(format!("config is invalid: {e}")))?;
    let epoch = r.read_u64()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = FuseNet::new(store, config, &mut rng)?;
    let entry_count = r.read_len("entry count", 1 << 24)?;
    if entry_count != store.len() {
        return Err(r.bad(format!(
            "file holds {entry_count} tensors, model expects {}",
            store.len()
        )));
    }
    for _ in 0..entry_count {
        let (name, shape, data) = r.read_blob()?;
        let tensor = Tensor::new(shape, data.into_iter().map(|v| E::from_f64(v as f64)).collect())
            .map_err(|e| r.bad(format!("tensor `{name}`: {e}")))?;
        store.load_named(&name, tensor)?;
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let adam = match flag[0] {
        0 => None,
        1 => {
            let step = r.read_u64()?;
            let pairs = r.read_len("moment count", 1 << 24)?;
            if pairs != store.len() {
                return Err(r.bad(format!(
                    "optimizer state holds {pairs} entries, model expects {}",
                    store.len()
                )));
            }
            let mut m = Vec::with_capacity(pairs);
            let mut v = Vec::with_capacity(pairs);
            for _ in 0..pairs {
                let (_, ms, md) = r.read_blob()?;
                m.push(Tensor::new(ms, md.into_iter().map(|x| E::from_f64(x as f64)).collect())
                    .map_err(|e| r.bad(e.to_string()))?);
                let (_, vs, vd) = r.read_blob()?;
                v.push(Tensor::new(vs, vd.into_iter().map(|x| E::from_f64(x as f64)).collect())
                    .map_err(|e| r.bad(e.to_string()))?);
            }
            Some(AdamState { m, v, step })
        }
        other => return Err(r.bad(format!("bad optimizer flag {other}"))),
    };
    Ok((model, Checkpoint { config, epoch }, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_generate, SyntheticSceneConfig};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> FuseNetConfig {
        FuseNetConfig {
            channels: 8,
            blocks: 1,
            k: 4,
            sample_budget: 200,
            ..FuseNetConfig::default()
        }
    }

    fn small_frame() -> Frame {
        synth_generate(&SyntheticSceneConfig {
            height: 16,
            width: 32,
            box_count: 2,
            lidar_line_count: 8,
            ..SyntheticSceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn parameter_counts_by_configuration() {
        let count = |channels, blocks| {
            param_count(&FuseNetConfig {
                channels,
                blocks,
                ..FuseNetConfig::default()
            })
            .unwrap()
        };
        // Hand-derived from the layer inventory: stems 13104, adapter
        // block 51056, uniform 32-wide block 40640, head 9601.
        assert_eq!(count(32, 6), 317_601);
        assert_eq!(count(32, 9), 439_521);
        assert_eq!(count(32, 12), 561_441);
        assert_eq!(count(32, 15), 683_361);
        assert_eq!(count(64, 12), 2_125_313);
        // Three extra blocks cost exactly three block's worth.
        assert_eq!(count(32, 9) - count(32, 6), 3 * 40_640);
    }

    #[test]
    fn forward_produces_full_resolution_depth() {
        let frame = small_frame();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let net = FuseNet::new(&mut store, small_config(), &mut rng).unwrap();
        let geom = FrameGeometry::new(&frame, &net.config, &mut rng).unwrap();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &mut store, &frame, &geom).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 16, 32]);
        assert!(tape.value(out).is_finite());
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seed() {
        let frame = small_frame();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut store = ParamStore::<f32>::new();
            let net = FuseNet::new(&mut store, small_config(), &mut rng).unwrap();
            let geom = FrameGeometry::new(&frame, &net.config, &mut rng).unwrap();
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &mut store, &frame, &geom).unwrap();
            tape.value(out).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ablated_branch_sets_change_param_count_and_still_run() {
        let frame = small_frame();
        for branches in [
            BranchSet { s1: true, s2: false, cont: false },
            BranchSet { s1: false, s2: true, cont: false },
            BranchSet { s1: true, s2: true, cont: false },
            BranchSet { s1: false, s2: false, cont: true },
        ] {
            let config = FuseNetConfig { branches, ..small_config() };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut store = ParamStore::<f32>::new();
            let net = FuseNet::new(&mut store, config, &mut rng).unwrap();
            let geom = FrameGeometry::new(&frame, &net.config, &mut rng).unwrap();
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &mut store, &frame, &geom).unwrap();
            assert_eq!(tape.shape(out), &[1, 1, 16, 32]);
            assert!(param_count(&config).unwrap() < param_count(&small_config()).unwrap());
        }
        let empty = BranchSet { s1: false, s2: false, cont: false };
        assert!(FuseNetConfig { branches: empty, ..small_config() }.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let frame = small_frame();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        let mut net = FuseNet::new(&mut store, small_config(), &mut rng).unwrap();
        net.set_training(false);
        let geom = FrameGeometry::new(&frame, &net.config, &mut rng).unwrap();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &mut store, &frame, &geom).unwrap();
        let before = tape.value(out).data.clone();

        let adam = crate::optim::Adam::default().init_state(&store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &net.config, 17, &store, Some(&adam)).unwrap();

        let mut store2 = ParamStore::<f32>::new();
        let (mut net2, meta, adam2) = load_checkpoint(&path, &mut store2).unwrap();
        assert_eq!(meta.epoch, 17);
        assert_eq!(meta.config, net.config);
        assert!(adam2.is_some());
        net2.set_training(false);
        let mut tape2 = Tape::new();
        let out2 = net2.forward(&mut tape2, &mut store2, &frame, &geom).unwrap();
        assert_eq!(before, tape2.value(out2).data);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let mut store = ParamStore::<f32>::new();
        let err = match load_checkpoint(&path, &mut store) {
            Ok(_) => panic!("garbage file was accepted"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("bad.ckpt"));
    }

    #[test]
    fn rejects_frames_not_divisible_by_four() {
        let frame = synth_generate(&SyntheticSceneConfig {
            height: 18,
            width: 32,
            ..SyntheticSceneConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let net = FuseNet::new(&mut store, small_config(), &mut rng).unwrap();
        let geom = FrameGeometry::new(&frame, &net.config, &mut rng).unwrap();
        let mut tape = Tape::new();
        assert!(net.forward(&mut tape, &mut store, &frame, &geom).is_err());
    }
}
