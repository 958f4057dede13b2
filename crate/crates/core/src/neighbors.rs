//! Exact K-nearest-neighbor search over 3D points and the precomputed
//! neighbor table consumed by continuous convolution.

use crate::error::{Error, Result};
use crate::geometry::PointSet;

const LEAF_SIZE: usize = 12;

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Balanced binary space partition: split along the widest axis at the
/// median. Queries are exact.
pub struct KdTree {
    points: Vec<[f64; 3]>,
    /// Original point indices, permuted so each leaf owns a contiguous range.
    order: Vec<usize>,
    root: Node,
}

/// Squared-distance candidate with index tie-breaking: smaller distance
/// wins; equal distances prefer the smaller point index.
#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Candidate {
    fn worse_than(&self, other: &Candidate) -> bool {
        self.dist2 > other.dist2 || (self.dist2 == other.dist2 && self.index > other.index)
    }
}

/// Fixed-capacity set of the current best K candidates, worst last.
struct BestK {
    k: usize,
    items: Vec<Candidate>,
}

impl BestK {
    fn new(k: usize) -> Self {
        BestK {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn worst(&self) -> Option<&Candidate> {
        if self.items.len() == self.k {
            self.items.last()
        } else {
            None
        }
    }

    fn offer(&mut self, c: Candidate) {
        if let Some(w) = self.worst() {
            if c.worse_than(w) {
                return;
            }
        }
        let pos = self.items.partition_point(|x| c.worse_than(x) || *x == c);
        self.items.insert(pos, c);
        self.items.truncate(self.k);
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    /// Build from a point set. Construction is deterministic.
    pub fn build(points: &PointSet) -> Result<Self> {
        for (i, p) in points.coords.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Geometry(format!("point {i} has non-finite coordinates")));
            }
        }
        let pts = points.coords.clone();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let root = Self::build_node(&pts, &mut order, 0, pts.len());
        Ok(KdTree {
            points: pts,
            order,
            root,
        })
    }

    fn build_node(points: &[[f64; 3]], order: &mut [usize], start: usize, end: usize) -> Node {
        let span = &mut order[..]; // full slice; indices below are absolute
        let n = end - start;
        if n <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        // Widest-extent axis.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &idx in &span[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(points[idx][a]);
                hi[a] = hi[a].max(points[idx][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
            .unwrap();
        let mid = start + n / 2;
        // Median split; coordinate ties resolved by original index so the
        // tree is independent of prior permutation state.
        span[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let value = points[span[mid]][axis];
        let left = Box::new(Self::build_node(points, order, start, mid));
        let right = Box::new(Self::build_node(points, order, mid, end));
        Node::Split {
            axis,
            value,
            left,
            right,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of the exact K nearest points to `q`, sorted by ascending
    /// distance with ties broken by ascending index.
    pub fn query_knn(&self, q: &[f64; 3], k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.points.len() {
            return Err(Error::invalid(
                "query_knn",
                format!("K={k} outside 1..={}", self.points.len()),
            ));
        }
        let mut best = BestK::new(k);
        self.search(&self.root, q, &mut best);
        Ok(best.items.iter().map(|c| c.index).collect())
    }

    fn search(&self, node: &Node, q: &[f64; 3], best: &mut BestK) {
        match node {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    best.offer(Candidate {
                        dist2: dist2(&self.points[idx], q),
                        index: idx,
                    });
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[*axis] - value;
                let (near, far) = if delta < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                // Prune only on strictly greater distance so equal-distance
                // candidates with smaller indices are never missed.
                let prune = match best.worst() {
                    Some(w) => delta * delta > w.dist2,
                    None => false,
                };
                if !prune {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Exhaustive-scan oracle with the same distance and tie rule.
pub fn brute_force_knn(points: &PointSet, q: &[f64; 3], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(
            "brute_force_knn",
            format!("K={k} outside 1..={}", points.len()),
        ));
    }
    let mut all: Vec<(f64, usize)> = points
        .coords
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, q), i))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(all[..k].iter().map(|&(_, i)| i).collect())
}

/// Per-point cache of K nearest neighbor indices and 3D offsets
/// `x_i - x_k`, computed once per frame and shared by all blocks.
#[derive(Clone, Debug)]
pub struct NeighborTable {
    pub k: usize,
    /// `[N*K]` neighbor indices, row-major per point.
    pub indices: Vec<usize>,
    /// `[N*K*3]` offsets in meters.
    pub offsets: Vec<f64>,
}

impl NeighborTable {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn offset(&self, i: usize, kk: usize) -> [f64; 3] {
        let base = (i * self.k + kk) * 3;
        [
            self.offsets[base],
            self.offsets[base + 1],
            self.offsets[base + 2],
        ]
    }
}

/// Precompute the neighbor table. Each row starts with the point itself
/// (zero offset); the remaining entries follow the query order
/// (ascending distance, tie by index).
pub fn precompute_table(points: &PointSet, k: usize) -> Result<NeighborTable> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(
            "precompute_table",
            format!("K={k} outside 1..={n}"),
        ));
    }
    let tree = KdTree::build(points)?;
    let mut indices = Vec::with_capacity(n * k);
    let mut offsets = Vec::with_capacity(n * k * 3);
    for i in 0..n {
        let mut row = tree.query_knn(&points.coords[i], k)?;
        // Self is one of the K neighbors; force it to the front. With
        // duplicate points the query tie rule may rank another index
        // first, or exclude i altogether.
        if let Some(pos) = row.iter().position(|&j| j == i) {
            row.remove(pos);
        } else {
            row.pop();
        }
        row.insert(0, i);
        for &j in &row {
            indices.push(j);
            for a in 0..3 {
                offsets.push(points.coords[i][a] - points.coords[j][a]);
            }
        }
    }
    Ok(NeighborTable { k, indices, offsets })
}
