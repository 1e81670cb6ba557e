//! From (mask, detection, embedding) maps to labeled instances: threshold and
//! clean the mask, split it into 8-connected clumps, estimate each clump's
//! nucleus count from detection peaks, and split multi-nucleus clumps by
//! spectral clustering of their embedding vectors.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::maps::{Grid, InstanceLabelMap};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostConfig {
    pub threshold: f64,
    pub min_area: usize,
    /// Half-width `m` of the `(2m+1)^2` peak neighborhood.
    pub maxima_window: usize,
    pub maxima_min_dist: f64,
    pub maxima_height: f64,
    /// RBF bandwidth; `None` picks `1 / (2 sigma^2)` from the median pairwise distance.
    pub rbf_gamma: Option<f64>,
    pub max_clump_pixels: usize,
    pub seed: u64,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            min_area: 5,
            maxima_window: 3,
            maxima_min_dist: 4.0,
            maxima_height: 0.2,
            rbf_gamma: None,
            max_clump_pixels: 2000,
            seed: 0,
        }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("post.threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.max_clump_pixels < 2 {
            return Err(Error::Config("post.max_clump_pixels must be at least 2".into()));
        }
        if let Some(g) = self.rbf_gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("post.rbf_gamma must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

/// An 8-connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct Clump {
    /// `(x, y)` in row-major scan order.
    pub pixels: Vec<(usize, usize)>,
    pub component_id: usize,
    pub estimated_k: Option<usize>,
}

const NEIGHBORS8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

fn label_components(mask: &Grid<u8>) -> (Grid<usize>, Vec<Vec<(usize, usize)>>) {
    let (h, w) = mask.dims();
    let mut labels = Grid::new(h, w, 0usize);
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if *mask.get(y0, x0) == 0 || *labels.get(y0, x0) != 0 {
                continue;
            }
            let id = comps.len() + 1;
            let mut pixels = Vec::new();
            labels.set(y0, x0, id);
            stack.push((x0, y0));
            while let Some((x, y)) = stack.pop() {
                pixels.push((x, y));
                for (dx, dy) in NEIGHBORS8 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if *mask.get(ny, nx) != 0 && *labels.get(ny, nx) == 0 {
                        labels.set(ny, nx, id);
                        stack.push((nx, ny));
                    }
                }
            }
            pixels.sort_by_key(|&(x, y)| (y, x));
            comps.push(pixels);
        }
    }
    (labels, comps)
}

/// Keep pixels with `seg > threshold`, then drop 8-connected objects smaller than `min_area`.
pub fn binarize_mask(seg: &Grid<f64>, threshold: f64, min_area: usize) -> Grid<u8> {
    let raw = seg.map(|&v| u8::from(v > threshold));
    let (_, comps) = label_components(&raw);
    let mut out = raw;
    for c in comps.iter().filter(|c| c.len() < min_area) {
        for &(x, y) in c {
            out.set(y, x, 0);
        }
    }
    out
}

pub fn connected_components(mask: &Grid<u8>) -> Vec<Clump> {
    label_components(mask)
        .1
        .into_iter()
        .enumerate()
        .map(|(i, pixels)| Clump { pixels, component_id: i + 1, estimated_k: None })
        .collect()
}

/// Peaks of the detection map inside a clump: at least as high as every
/// clump pixel in the `(2m+1)^2` window, above `height`, and at least
/// `min_dist` away from any stronger accepted peak. Never less than 1.
pub fn count_local_maxima(det: &Grid<f64>, clump: &Clump, window: usize, min_dist: f64, height: f64) -> usize {
    let (h, w) = det.dims();
    let mut inside = Grid::new(h, w, false);
    for &(x, y) in &clump.pixels {
        inside.set(y, x, true);
    }
    let value = |x: usize, y: usize| if *inside.get(y, x) { *det.get(y, x) } else { 0.0 };
    let m = window as isize;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for &(x, y) in &clump.pixels {
        let v = value(x, y);
        if !(v > height) {
            continue;
        }
        let mut is_max = true;
        'scan: for dy in -m..=m {
            for dx in -m..=m {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                if value(nx as usize, ny as usize) > v {
                    is_max = false;
                    break 'scan;
                }
            }
        }
        if is_max {
            candidates.push((v, x, y));
        }
    }
    // strongest first; ties keep scan order
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for &(_, x, y) in &candidates {
        let far = accepted.iter().all(|&(ax, ay)| {
            let (dx, dy) = (ax as f64 - x as f64, ay as f64 - y as f64);
            (dx * dx + dy * dy).sqrt() >= min_dist
        });
        if far {
            accepted.push((x, y));
        }
    }
    accepted.len().max(1)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `1 / (2 sigma^2)` with `sigma` the median pairwise distance; 1 when all points coincide.
pub fn default_gamma(points: &[[f64; EMBED_DIM]]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let sigma = *d.select_nth_unstable_by(mid, f64::total_cmp).1;
    if sigma > 0.0 {
        1.0 / (2.0 * sigma * sigma)
    } else {
        1.0
    }
}

/// `A_ij = exp(-gamma |x_i - x_j|^2)`, diagonal included.
pub fn rbf_affinity(points: &[[f64; EMBED_DIM]], gamma: f64) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| (-gamma * sq_dist(&points[i], &points[j])).exp())
}

/// Normalized-cut spectral clustering into `k` groups. Labels lie in `0..k`.
pub fn spectral_cluster(points: &[[f64; EMBED_DIM]], k: usize, gamma: Option<f64>, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite embedding value".into()));
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let gamma = gamma.unwrap_or_else(|| default_gamma(points));
    let a = rbf_affinity(points, gamma);
    let inv_sqrt: Vec<f64> = a.row_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    // the k smallest eigenvalues of I - D^-1/2 A D^-1/2 are the k largest of the normalized affinity
    let m = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r: Vec<f64> = order[..k].iter().map(|&c| eig.eigenvectors[(i, c)]).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter_mut().for_each(|v| *v /= norm);
            }
            r
        })
        .collect();
    Ok(kmeans(&rows, k, seed))
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_ITERS: usize = 100;

/// Lloyd's algorithm with k-means++ seeding; best of several seeded restarts.
pub fn kmeans(rows: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (inertia, labels) = kmeans_once(rows, k, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b - 1e-12) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

fn kmeans_once(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let n = rows.len();
    let mut centers: Vec<Vec<f64>> = vec![rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows[next].clone());
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, centers.last().expect("just pushed")));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let c = nearest(r, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = rows[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = rows.iter().zip(&labels).map(|(r, &l)| sq_dist(r, &centers[l])).sum();
    (inertia, labels)
}

fn nearest(r: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(r, center);
        if d < bd {
            bd = d;
            best = c;
        }
    }
    best
}

fn embedding_at(emb: &Tensor, plane: usize, idx: usize) -> [f64; EMBED_DIM] {
    std::array::from_fn(|c| emb.data()[c * plane + idx])
}

/// Cluster one clump, returning a label per pixel (labels `0..k`).
fn split_clump(clump: &Clump, k: usize, emb: &Tensor, width: usize, cfg: &PostConfig) -> Vec<usize> {
    let n = clump.pixels.len();
    if k <= 1 || k > n {
        return vec![0; n];
    }
    let plane = emb.len() / EMBED_DIM;
    let points: Vec<[f64; EMBED_DIM]> =
        clump.pixels.iter().map(|&(x, y)| embedding_at(emb, plane, y * width + x)).collect();
    let cap = cfg.max_clump_pixels;
    let sample: Vec<usize> = if n > cap { (0..cap).map(|i| i * n / cap).collect() } else { (0..n).collect() };
    let sub: Vec<[f64; EMBED_DIM]> = sample.iter().map(|&i| points[i]).collect();
    let seed = cfg.seed ^ (clump.component_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let Ok(sub_labels) = spectral_cluster(&sub, k, cfg.rbf_gamma, seed) else {
        return vec![0; n];
    };
    if n <= cap {
        return sub_labels;
    }
    // remaining pixels join the cluster with the nearest mean embedding
    let mut means = vec![vec![0.0; EMBED_DIM]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in sub.iter().zip(&sub_labels) {
        counts[l] += 1;
        means[l].iter_mut().zip(p).for_each(|(m, v)| *m += v);
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        if c > 0 {
            m.iter_mut().for_each(|v| *v /= c as f64);
        } else {
            m.iter_mut().for_each(|v| *v = f64::INFINITY);
        }
    }
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &means)).collect();
    for (&i, &l) in sample.iter().zip(&sub_labels) {
        labels[i] = l;
    }
    labels
}

/// Full post-processing. `seg`, `det` are `[1, h, w]` (or `[h, w]`-sized) maps
/// and `emb` is `[6, h, w]`.
pub fn instance_segment(seg: &Tensor, det: &Tensor, emb: &Tensor, cfg: &PostConfig) -> Result<InstanceLabelMap> {
    cfg.validate()?;
    let &[c, h, w] = emb.shape() else {
        return Err(Error::Shape(format!("embedding must be [6, h, w], got {:?}", emb.shape())));
    };
    if c != EMBED_DIM || seg.len() != h * w || det.len() != h * w {
        return Err(Error::Shape(format!(
            "maps are not co-registered: seg {:?}, det {:?}, emb {:?}",
            seg.shape(),
            det.shape(),
            emb.shape()
        )));
    }
    let seg_grid = Grid::from_vec(h, w, seg.data().to_vec())?;
    let det_grid = Grid::from_vec(h, w, det.data().to_vec())?;
    let mask = binarize_mask(&seg_grid, cfg.threshold, cfg.min_area);
    let mut clumps = connected_components(&mask);
    for clump in &mut clumps {
        clump.estimated_k =
            Some(count_local_maxima(&det_grid, clump, cfg.maxima_window, cfg.maxima_min_dist, cfg.maxima_height));
    }
    let labels = exec::map_slice(&clumps, |c| split_clump(c, c.estimated_k.unwrap_or(1), emb, w, cfg));
    let mut out = InstanceLabelMap::empty(h, w);
    let mut next: u32 = 0;
    for (clump, lab) in clumps.iter().zip(&labels) {
        let k = lab.iter().copied().max().unwrap_or(0) + 1;
        let mut ids = vec![0u32; k];
        for (&(x, y), &l) in clump.pixels.iter().zip(lab) {
            if ids[l] == 0 {
                next += 1;
                ids[l] = next;
            }
            out.set(y, x, ids[l]);
        }
    }
    Ok(out)
}
