//! Frame loading, KITTI-style 16-bit depth PNGs, cropping, point
//! sampling, and a deterministic synthetic scene generator for tests
//! and desk-scale runs.

use crate::error::{Error, Result};
use crate::geometry::{DepthImage, Intrinsics};
use crate::tensor::Tensor;
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// One training/evaluation sample: RGB in `[0,1]` as `[3,H,W]`, the
/// sparse depth input, dense(r) ground truth, and camera intrinsics.
pub struct Frame {
    pub rgb: Tensor<f64>,
    pub sparse: DepthImage,
    pub gt: DepthImage,
    pub intrinsics: Intrinsics,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.sparse.height
    }

    pub fn width(&self) -> usize {
        self.sparse.width
    }
}

// --- depth PNG codec -------------------------------------------------
//
// Depth maps are stored as 16-bit grayscale PNGs holding depth in
// 1/256 m units, with 0 marking a missing measurement.

pub fn load_depth_png(path: &Path) -> Result<DepthImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let gray = match img {
        DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::Image {
                path: path.display().to_string(),
                detail: format!(
                    "expected 16-bit grayscale depth, found {:?}",
                    other.color()
                ),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let values: Vec<f64> = gray.pixels().map(|p| p.0[0] as f64 / 256.0).collect();
    DepthImage::from_values(h, w, values)
}

pub fn save_depth_png(path: &Path, depth: &DepthImage) -> Result<()> {
    let mut buf = ImageBuffer::<Luma<u16>, Vec<u16>>::new(depth.width as u32, depth.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let v = if depth.mask[i] {
            (depth.values[i] * 256.0).round().clamp(1.0, u16::MAX as f64) as u16
        } else {
            0
        };
        px.0[0] = v;
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn load_rgb_png(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn save_rgb_png(path: &Path, rgb: &Tensor<f64>) -> Result<()> {
    if rgb.shape.len() != 3 || rgb.shape[0] != 3 {
        return Err(Error::shape(
            "save_rgb_png",
            format!("expected [3,H,W], got {:?}", rgb.shape),
        ));
    }
    let (h, w) = (rgb.shape[1], rgb.shape[2]);
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (rgb.data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

// --- dataset layout ---------------------------------------------------

/// Paths making up one stored frame.
#[derive(Clone, Debug)]
pub struct FramePaths {
    pub stem: String,
    pub rgb: PathBuf,
    pub sparse: PathBuf,
    pub gt: PathBuf,
}

/// Scans a dataset root laid out as `rgb/`, `sparse/`, `gt/`
/// subdirectories with matching PNG stems, plus `intrinsics.txt`.
/// Frames are returned sorted by stem; a stem missing from any of the
/// three subdirectories is an error.
pub fn discover_dataset(root: &Path) -> Result<(Vec<FramePaths>, Intrinsics)> {
    let intr = Intrinsics::load(&root.join("intrinsics.txt"))?;
    let rgb_dir = root.join("rgb");
    let mut stems: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(&rgb_dir).map_err(|e| Error::io(rgb_dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(rgb_dir.display().to_string(), e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    if stems.is_empty() {
        return Err(Error::Data(format!(
            "no PNG frames under {}",
            rgb_dir.display()
        )));
    }
    stems.sort();
    let mut frames = Vec::with_capacity(stems.len());
    for stem in stems {
        let paths = FramePaths {
            rgb: rgb_dir.join(format!("{stem}.png")),
            sparse: root.join("sparse").join(format!("{stem}.png")),
            gt: root.join("gt").join(format!("{stem}.png")),
            stem,
        };
        // Ground truth may be absent (prediction-only datasets); the
        // sparse input never may.
        if !paths.sparse.exists() {
            return Err(Error::Data(format!(
                "frame `{}` is missing {}",
                paths.stem,
                paths.sparse.display()
            )));
        }
        frames.push(paths);
    }
    Ok((frames, intr))
}

pub fn load_frame(paths: &FramePaths, intrinsics: &Intrinsics) -> Result<Frame> {
    let rgb = load_rgb_png(&paths.rgb)?;
    let sparse = load_depth_png(&paths.sparse)?;
    let (h, w) = (rgb.shape[1], rgb.shape[2]);
    let gt = if paths.gt.exists() {
        load_depth_png(&paths.gt)?
    } else {
        DepthImage::empty(h, w)
    };
    if sparse.height != h || sparse.width != w || gt.height != h || gt.width != w {
        return Err(Error::Data(format!(
            "frame `{}` has mismatched sizes: rgb {}x{}, sparse {}x{}, gt {}x{}",
            paths.stem, h, w, sparse.height, sparse.width, gt.height, gt.width
        )));
    }
    if intrinsics.width != w || intrinsics.height != h {
        return Err(Error::Data(format!(
            "frame `{}` is {}x{} but intrinsics describe {}x{}",
            paths.stem, w, h, intrinsics.width, intrinsics.height
        )));
    }
    Ok(Frame {
        rgb,
        sparse,
        gt,
        intrinsics: intrinsics.clone(),
    })
}

// --- cropping and sampling -------------------------------------------

/// Cuts a `crop_h` x `crop_w` window at a random offset, shifting the
/// principal point so projection stays consistent in the crop.
pub fn random_crop(frame: &Frame, crop_h: usize, crop_w: usize, rng: &mut impl Rng) -> Result<Frame> {
    let (h, w) = (frame.height(), frame.width());
    if crop_h == 0 || crop_w == 0 || crop_h > h || crop_w > w {
        return Err(Error::Data(format!(
            "crop {crop_w}x{crop_h} does not fit a {w}x{h} frame"
        )));
    }
    let dy = rng.gen_range(0..=h - crop_h);
    let dx = rng.gen_range(0..=w - crop_w);
    crop_at(frame, dy, dx, crop_h, crop_w)
}

pub fn crop_at(frame: &Frame, dy: usize, dx: usize, crop_h: usize, crop_w: usize) -> Result<Frame> {
    let (h, w) = (frame.height(), frame.width());
    if dy + crop_h > h || dx + crop_w > w {
        return Err(Error::Data(format!(
            "crop window ({dx},{dy})+{crop_w}x{crop_h} exceeds {w}x{h}"
        )));
    }
    let mut rgb = Tensor::zeros(&[3, crop_h, crop_w]);
    for c in 0..3 {
        for v in 0..crop_h {
            let src = c * h * w + (v + dy) * w + dx;
            let dst = c * crop_h * crop_w + v * crop_w;
            rgb.data[dst..dst + crop_w].copy_from_slice(&frame.rgb.data[src..src + crop_w]);
        }
    }
    let crop_depth = |img: &DepthImage| -> Result<DepthImage> {
        let mut values = Vec::with_capacity(crop_h * crop_w);
        let mut mask = Vec::with_capacity(crop_h * crop_w);
        for v in 0..crop_h {
            let src = (v + dy) * w + dx;
            values.extend_from_slice(&img.values[src..src + crop_w]);
            mask.extend_from_slice(&img.mask[src..src + crop_w]);
        }
        DepthImage::new(crop_h, crop_w, values, mask)
    };
    let intr = Intrinsics::new(
        frame.intrinsics.fx,
        frame.intrinsics.fy,
        frame.intrinsics.cx - dx as f64,
        frame.intrinsics.cy - dy as f64,
        crop_w,
        crop_h,
    )?;
    Ok(Frame {
        rgb,
        sparse: crop_depth(&frame.sparse)?,
        gt: crop_depth(&frame.gt)?,
        intrinsics: intr,
    })
}

/// Keeps at most `budget` valid pixels, chosen uniformly without
/// replacement; everything else becomes missing. When the image holds
/// no more than `budget` points it is returned unchanged.
pub fn sample_points(depth: &DepthImage, budget: usize, rng: &mut impl Rng) -> Result<DepthImage> {
    if budget == 0 {
        return Err(Error::invalid("sample_points", "budget must be positive"));
    }
    let valid: Vec<usize> = (0..depth.mask.len()).filter(|&i| depth.mask[i]).collect();
    if valid.len() <= budget {
        return Ok(depth.clone());
    }
    let mut chosen: Vec<usize> = valid
        .choose_multiple(rng, budget)
        .copied()
        .collect();
    chosen.sort_unstable();
    let mut values = vec![0.0; depth.values.len()];
    let mut mask = vec![false; depth.mask.len()];
    for i in chosen {
        values[i] = depth.values[i];
        mask[i] = true;
    }
    DepthImage::new(depth.height, depth.width, values, mask)
}

// --- synthetic scenes -------------------------------------------------

/// Configuration of the procedural scene generator. Scenes are a
/// ground plane, a back wall, and a few axis-aligned boxes, rendered
/// by exact ray casting so repeated runs are bit-identical.
#[derive(Clone, Debug)]
pub struct SyntheticSceneConfig {
    pub height: usize,
    pub width: usize,
    pub box_count: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Number of horizontal scan lines carrying sparse measurements.
    pub lidar_line_count: usize,
    /// Standard deviation of additive noise on sparse depth, meters.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            height: 64,
            width: 192,
            box_count: 6,
            min_depth: 1.0,
            max_depth: 20.0,
            lidar_line_count: 16,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

struct AaBox {
    lo: [f64; 3],
    hi: [f64; 3],
    albedo: [f64; 3],
}

/// Sum of twelve uniforms minus six: zero mean, unit variance, and no
/// transcendental functions, so results match bit-for-bit across
/// platforms.
fn gaussian_ish(rng: &mut impl Rng) -> f64 {
    let mut s = 0.0;
    for _ in 0..12 {
        s += rng.gen_range(0.0..1.0);
    }
    s - 6.0
}

pub fn synth_generate(config: &SyntheticSceneConfig) -> Result<Frame> {
    let (h, w) = (config.height, config.width);
    if h < 8 || w < 8 {
        return Err(Error::invalid(
            "synth_generate",
            format!("scene must be at least 8x8, got {w}x{h}"),
        ));
    }
    if !(config.min_depth > 0.0 && config.max_depth > config.min_depth) {
        return Err(Error::invalid(
            "synth_generate",
            format!(
                "depth range [{}, {}] is invalid",
                config.min_depth, config.max_depth
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fx = 0.6 * w as f64;
    let intr = Intrinsics::new(fx, fx, w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, w, h)?;
    // Camera at origin, x right, y down, z forward. Ground plane at
    // y = 1.5 m below the camera; back wall at max_depth.
    let ground_y = 1.5;
    let wall_z = config.max_depth;
    let boxes: Vec<AaBox> = (0..config.box_count)
        .map(|_| {
            let z0 = rng.gen_range(config.min_depth..0.8 * config.max_depth);
            let depth_extent = rng.gen_range(0.3..1.5);
            let half_w = rng.gen_range(0.2..1.2);
            let height_m = rng.gen_range(0.4..2.0);
            let cx = rng.gen_range(-0.35 * z0..0.35 * z0);
            AaBox {
                lo: [cx - half_w, ground_y - height_m, z0],
                hi: [cx + half_w, ground_y, z0 + depth_extent],
                albedo: [
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.2..1.0),
                ],
            }
        })
        .collect();
    let light = {
        // Fixed overhead-left light, normalized once.
        let l: [f64; 3] = [-0.4, -0.8, -0.45];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    let mut gt_values = vec![0.0; h * w];
    let mut rgb = Tensor::zeros(&[3, h, w]);
    for v in 0..h {
        for u in 0..w {
            let dir = [
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            ];
            // Nearest hit along the ray; t equals depth z since dz = 1.
            let mut t_hit = wall_z;
            let mut normal = [0.0, 0.0, -1.0];
            let mut albedo = [0.55, 0.55, 0.6];
            if dir[1] > 1e-9 {
                let t = ground_y / dir[1];
                if t < t_hit {
                    t_hit = t;
                    normal = [0.0, -1.0, 0.0];
                    albedo = [0.45, 0.4, 0.35];
                }
            }
            for b in &boxes {
                if let Some((t, n)) = ray_box(&dir, b) {
                    if t < t_hit {
                        t_hit = t;
                        normal = n;
                        albedo = b.albedo;
                    }
                }
            }
            let depth = t_hit.clamp(config.min_depth, config.max_depth);
            gt_values[v * w + u] = depth;
            let lambert = (normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2])
                .max(0.0);
            let shade = 0.25 + 0.75 * lambert;
            for c in 0..3 {
                rgb.data[c * h * w + v * w + u] = (albedo[c] * shade).clamp(0.0, 1.0);
            }
        }
    }
    let gt = DepthImage::from_values(h, w, gt_values)?;
    // Sparse input: a subset of rows ("scan lines") with every other
    // column, plus optional additive noise.
    let lines = config.lidar_line_count.clamp(1, h);
    let stride = (h / lines).max(1);
    let mut sparse_values = vec![0.0; h * w];
    let mut sparse_mask = vec![false; h * w];
    for v in (stride / 2..h).step_by(stride) {
        for u in (0..w).step_by(2) {
            let i = v * w + u;
            let mut d = gt.values[i];
            if config.noise_sigma > 0.0 {
                d += config.noise_sigma * gaussian_ish(&mut rng);
            }
            d = d.clamp(0.1, config.max_depth);
            sparse_values[i] = d;
            sparse_mask[i] = true;
        }
    }
    let sparse = DepthImage::new(h, w, sparse_values, sparse_mask)?;
    Ok(Frame {
        rgb,
        sparse,
        gt,
        intrinsics: intr,
    })
}

/// Slab-test intersection of a ray from the origin with an
/// axis-aligned box; returns entry distance and outward face normal.
fn ray_box(dir: &[f64; 3], b: &AaBox) -> Option<(f64, [f64; 3])> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut near_sign = -1.0;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if 0.0 < b.lo[a] || 0.0 > b.hi[a] {
                return None;
            }
            continue;
        }
        let mut t0 = b.lo[a] / dir[a];
        let mut t1 = b.hi[a] / dir[a];
        let mut sign = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            sign = 1.0;
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = a;
            near_sign = sign;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near <= 1e-9 {
        return None;
    }
    let mut normal = [0.0; 3];
    normal[near_axis] = near_sign;
    Some((t_near, normal))
}
