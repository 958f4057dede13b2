//! Pinhole projection between camera-frame points and image grids.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use std::path::Path;

/// Pinhole camera parameters. Camera frame: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Geometry(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Geometry("image extents must be positive".into()));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// One whitespace-separated record: `fx fy cx cy width height`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::Geometry(format!(
                "intrinsics file {} must hold 6 fields, found {}",
                path.display(),
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::Geometry(format!("bad intrinsics field `{}`", fields[i])))
        };
        Intrinsics::new(
            num(0)?,
            num(1)?,
            num(2)?,
            num(3)?,
            num(4)? as usize,
            num(5)? as usize,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = format!(
            "{} {} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        );
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Camera-frame 3D points in meters.
#[derive(Clone, Debug)]
pub struct PointSet {
    pub coords: Vec<[f64; 3]>,
}

impl PointSet {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Geometry("point set must hold at least one point".into()));
        }
        for (i, p) in coords.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Geometry(format!("point {i} has non-finite coordinates")));
            }
            if p[2] <= 0.0 {
                return Err(Error::Geometry(format!(
                    "point {i} has z={} but all points must lie in front of the camera",
                    p[2]
                )));
            }
        }
        Ok(PointSet { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// H×W depth map in meters with validity mask. Unobserved pixels carry 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || mask.len() != height * width {
            return Err(Error::Geometry(format!(
                "depth image buffers must be {}x{}",
                height, width
            )));
        }
        for i in 0..values.len() {
            if mask[i] {
                if !(values[i].is_finite() && values[i] > 0.0) {
                    return Err(Error::Geometry(format!(
                        "masked pixel {i} must hold a positive finite depth, got {}",
                        values[i]
                    )));
                }
            } else if values[i] != 0.0 {
                return Err(Error::Geometry(format!(
                    "unmasked pixel {i} must carry 0, got {}",
                    values[i]
                )));
            }
        }
        Ok(DepthImage {
            height,
            width,
            values,
            mask,
        })
    }

    /// Builds an image treating zero values as missing.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let mask = values.iter().map(|&v| v != 0.0).collect();
        DepthImage::new(height, width, values, mask)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        DepthImage {
            height,
            width,
            values: vec![0.0; height * width],
            mask: vec![false; height * width],
        }
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Row-major (u, v) coordinates of masked pixels.
    pub fn masked_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.mask_count());
        for v in 0..self.height {
            for u in 0..self.width {
                if self.mask[v * self.width + u] {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Depth values as a `[1, H, W]` tensor (zeros where unobserved).
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor {
            shape: vec![1, self.height, self.width],
            data: self.values.iter().map(|&v| E::from_f64(v)).collect(),
        }
    }
}

/// Integer pixel coordinates of projected points on a feature grid,
/// plus an in-bounds flag per point. Out-of-bounds points are retained,
/// never dropped; they contribute and receive zero image features.
#[derive(Clone, Debug)]
pub struct ProjectedPixels {
    pub u: Vec<i64>,
    pub v: Vec<i64>,
    pub in_bounds: Vec<bool>,
    /// Feature-grid extents the coordinates index into.
    pub grid_width: usize,
    pub grid_height: usize,
}

impl ProjectedPixels {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub(crate) fn flat_index(&self, i: usize) -> Option<usize> {
        if self.in_bounds[i] {
            Some(self.v[i] as usize * self.grid_width + self.u[i] as usize)
        } else {
            None
        }
    }
}

/// Back-project masked depth pixels to camera-frame points, row-major
/// pixel order: `((u-cx)z/fx, (v-cy)z/fy, z)`.
pub fn unproject(depth: &DepthImage, k: &Intrinsics) -> Result<PointSet> {
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::Geometry(format!(
            "depth extents {}x{} do not match intrinsics {}x{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    let mut coords = Vec::with_capacity(depth.mask_count());
    for (u, v) in depth.masked_pixels() {
        let z = depth.values[v * depth.width + u];
        coords.push([
            (u as f64 - k.cx) * z / k.fx,
            (v as f64 - k.cy) * z / k.fy,
            z,
        ]);
    }
    if coords.is_empty() {
        return Err(Error::Geometry("no masked pixels available to unproject".into()));
    }
    PointSet::new(coords)
}

/// Project points to integer pixels on a grid at `scale` times the full
/// image resolution. The nearest full-resolution pixel is found first,
/// then mapped to the feature grid by `floor(scale * pixel)`, matching
/// stride-2 downsampling geometry at scale 0.5.
pub fn project(points: &PointSet, k: &Intrinsics, scale: f64) -> Result<ProjectedPixels> {
    if scale <= 0.0 {
        return Err(Error::Geometry(format!("scale must be positive, got {scale}")));
    }
    let grid_width = (k.width as f64 * scale).round() as usize;
    let grid_height = (k.height as f64 * scale).round() as usize;
    let n = points.len();
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut in_bounds = Vec::with_capacity(n);
    for (i, p) in points.coords.iter().enumerate() {
        if p[2] <= 0.0 {
            return Err(Error::Geometry(format!("point {i} has non-positive depth {}", p[2])));
        }
        let u_full = (k.fx * p[0] / p[2] + k.cx).round();
        let v_full = (k.fy * p[1] / p[2] + k.cy).round();
        let uf = (scale * u_full).floor() as i64;
        let vf = (scale * v_full).floor() as i64;
        in_bounds.push(uf >= 0 && vf >= 0 && (uf as usize) < grid_width && (vf as usize) < grid_height);
        u.push(uf);
        v.push(vf);
    }
    Ok(ProjectedPixels {
        u,
        v,
        in_bounds,
        grid_width,
        grid_height,
    })
}

/// Nearest-pixel feature lookup: `[C,H,W]` map to `[N,C]` rows.
/// Out-of-bounds points receive zero features.
pub fn gather<E: Element>(feat: &Tensor<E>, pixels: &ProjectedPixels) -> Result<Tensor<E>> {
    if feat.rank() != 3 || feat.shape[1] != pixels.grid_height || feat.shape[2] != pixels.grid_width {
        return Err(Error::shape(
            "gather",
            format!(
                "feature map {:?} does not match grid {}x{}",
                feat.shape, pixels.grid_height, pixels.grid_width
            ),
        ));
    }
    let (c, h, w) = (feat.shape[0], feat.shape[1], feat.shape[2]);
    let n = pixels.len();
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        if let Some(px) = pixels.flat_index(i) {
            for ch in 0..c {
                out.data[i * c + ch] = feat.data[ch * h * w + px];
            }
        }
    }
    Ok(out)
}

/// Assign point features to projected pixels, producing a sparse
/// `[C,H,W]` map. Pixels hit by several points store the mean of their
/// rows; untouched pixels stay zero.
pub fn scatter<E: Element>(
    point_feats: &Tensor<E>,
    pixels: &ProjectedPixels,
) -> Result<Tensor<E>> {
    let n = pixels.len();
    if point_feats.rank() != 2 || point_feats.shape[0] != n {
        return Err(Error::shape(
            "scatter",
            format!("point features {:?} do not match {} points", point_feats.shape, n),
        ));
    }
    let c = point_feats.shape[1];
    let (h, w) = (pixels.grid_height, pixels.grid_width);
    let mut out = Tensor::zeros(&[c, h, w]);
    let counts = scatter_counts(pixels);
    for i in 0..n {
        if let Some(px) = pixels.flat_index(i) {
            let inv = E::from_f64(1.0 / counts[px] as f64);
            for ch in 0..c {
                out.data[ch * h * w + px] += point_feats.data[i * c + ch] * inv;
            }
        }
    }
    Ok(out)
}

/// Number of points landing on each grid pixel.
pub(crate) fn scatter_counts(pixels: &ProjectedPixels) -> Vec<u32> {
    let mut counts = vec![0u32; pixels.grid_width * pixels.grid_height];
    for i in 0..pixels.len() {
        if let Some(px) = pixels.flat_index(i) {
            counts[px] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 8.0, 6.0, 16, 12).unwrap()
    }

    #[test]
    fn unproject_principal_ray() {
        // Pixel at the principal point with depth 5 maps to (0, 0, 5).
        let k = k100();
        let mut d = DepthImage::empty(12, 16);
        d.values[6 * 16 + 8] = 5.0;
        d.mask[6 * 16 + 8] = true;
        let pts = unproject(&d, &k).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts.coords[0], [0.0, 0.0, 5.0]);
    }

    #[test]
    fn unproject_direct_formula() {
        let k = Intrinsics::new(100.0, 100.0, 0.0, 0.0, 200, 120).unwrap();
        let mut d = DepthImage::empty(120, 200);
        d.values[100] = 2.0; // pixel (u=100, v=0)
        d.mask[100] = true;
        let pts = unproject(&d, &k).unwrap();
        assert_eq!(pts.coords[0], [2.0, 0.0, 2.0]);
    }

    #[test]
    fn unproject_empty_mask_is_error() {
        let k = k100();
        let d = DepthImage::empty(12, 16);
        assert!(unproject(&d, &k).is_err());
    }

    #[test]
    fn project_principal_ray_in_bounds() {
        let k = k100();
        let pts = PointSet::new(vec![[0.0, 0.0, 5.0]]).unwrap();
        let px = project(&pts, &k, 1.0).unwrap();
        assert_eq!((px.u[0], px.v[0]), (8, 6));
        assert!(px.in_bounds[0]);
    }

    #[test]
    fn project_flags_out_of_bounds() {
        let k = k100();
        // u_full = 100*2/1 + 8 = 208, far past width 16.
        let pts = PointSet::new(vec![[2.0, 0.0, 1.0]]).unwrap();
        let px = project(&pts, &k, 1.0).unwrap();
        assert!(!px.in_bounds[0]);
        assert_eq!(px.len(), 1); // retained, not dropped
    }

    #[test]
    fn project_unproject_round_trip_exact() {
        let k = k100();
        let mut d = DepthImage::empty(12, 16);
        let picks = [(0usize, 0usize, 1.5), (15, 11, 7.25), (3, 9, 0.75), (8, 6, 2.0)];
        for &(u, v, z) in &picks {
            d.values[v * 16 + u] = z;
            d.mask[v * 16 + u] = true;
        }
        let pts = unproject(&d, &k).unwrap();
        let px = project(&pts, &k, 1.0).unwrap();
        let expected = d.masked_pixels();
        for i in 0..pts.len() {
            assert!(px.in_bounds[i]);
            assert_eq!((px.u[i] as usize, px.v[i] as usize), expected[i]);
        }
    }

    #[test]
    fn project_half_scale_uses_floor() {
        let k = k100();
        let mut d = DepthImage::empty(12, 16);
        for &(u, v) in &[(4usize, 4usize), (5, 5), (15, 11)] {
            d.values[v * 16 + u] = 3.0;
            d.mask[v * 16 + u] = true;
        }
        let pts = unproject(&d, &k).unwrap();
        let px = project(&pts, &k, 0.5).unwrap();
        assert_eq!(px.grid_width, 8);
        assert_eq!(px.grid_height, 6);
        assert_eq!((px.u[0], px.v[0]), (2, 2));
        assert_eq!((px.u[1], px.v[1]), (2, 2)); // (5,5) floors to the same cell
        assert_eq!((px.u[2], px.v[2]), (7, 5));
        assert!(px.in_bounds.iter().all(|&b| b));
    }

    #[test]
    fn gather_scatter_identity_on_injective_pixels() {
        let k = k100();
        let mut d = DepthImage::empty(12, 16);
        for &(u, v) in &[(1usize, 2usize), (9, 7), (14, 0)] {
            d.values[v * 16 + u] = 4.0;
            d.mask[v * 16 + u] = true;
        }
        let pts = unproject(&d, &k).unwrap();
        let px = project(&pts, &k, 1.0).unwrap();
        let feats = Tensor::<f64>::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let map = scatter(&feats, &px).unwrap();
        let back = gather(&map, &px).unwrap();
        assert_eq!(back, feats);
    }

    #[test]
    fn scatter_collision_stores_mean() {
        let px = ProjectedPixels {
            u: vec![3, 3],
            v: vec![2, 2],
            in_bounds: vec![true, true],
            grid_width: 8,
            grid_height: 6,
        };
        let feats = Tensor::<f64>::new(vec![2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap();
        let map = scatter(&feats, &px).unwrap();
        assert_eq!(map.data[2 * 8 + 3], 2.0);
        assert_eq!(map.data[48 + 2 * 8 + 3], 20.0);
    }

    #[test]
    fn scatter_empty_mask_is_zero_map() {
        let px = ProjectedPixels {
            u: vec![-1],
            v: vec![0],
            in_bounds: vec![false],
            grid_width: 4,
            grid_height: 4,
        };
        let feats = Tensor::<f64>::new(vec![1, 3], vec![5.0, 6.0, 7.0]).unwrap();
        let map = scatter(&feats, &px).unwrap();
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intrinsics_file_round_trip() {
        let dir = std::env::temp_dir().join("fusenet_intrinsics_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("calib.txt");
        let k = k100();
        k.save(&path).unwrap();
        assert_eq!(Intrinsics::load(&path).unwrap(), k);
    }
}
