//! Brute-force reference implementations, written from the definitions and
//! sharing no code with the library. Also included by the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use spanet::maps::InstanceLabelMap;

/// Detection value at `(y, x)`: maximum over instances of `1 / (1 + beta d)`
/// for `d <= radius`, where `d` is the distance to the instance's mean pixel
/// coordinate rounded to the nearest pixel.
pub fn detection_value(m: &InstanceLabelMap, beta: f64, radius: f64, y: usize, x: usize) -> f64 {
    let (h, w) = m.dims();
    let mut sums: BTreeMap<u32, (f64, f64, f64)> = BTreeMap::new();
    for yy in 0..h {
        for xx in 0..w {
            let id = m.get(yy, xx);
            if id != 0 {
                let e = sums.entry(id).or_insert((0.0, 0.0, 0.0));
                e.0 += xx as f64;
                e.1 += yy as f64;
                e.2 += 1.0;
            }
        }
    }
    sums.values()
        .map(|&(sx, sy, n)| {
            let (cx, cy) = ((sx / n).round(), (sy / n).round());
            let d = (x as f64 - cx).hypot(y as f64 - cy);
            if d <= radius { 1.0 / (1.0 + beta * d) } else { 0.0 }
        })
        .fold(0.0, f64::max)
}

fn areas(m: &InstanceLabelMap) -> BTreeMap<u32, usize> {
    let mut a = BTreeMap::new();
    for &v in m.data() {
        if v != 0 {
            *a.entry(v).or_insert(0) += 1;
        }
    }
    a
}

fn pair_counts(gt: &InstanceLabelMap, pred: &InstanceLabelMap, g: u32, p: u32) -> (usize, usize) {
    let (mut i, mut u) = (0, 0);
    for (&a, &b) in gt.data().iter().zip(pred.data()) {
        let (ia, ib) = (a == g, b == p);
        i += usize::from(ia && ib);
        u += usize::from(ia || ib);
    }
    (i, u)
}

/// AJI by direct evaluation of its definition. A ground-truth instance that
/// overlaps no prediction contributes only its own area to the union.
pub fn aji(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> f64 {
    let (ga, pa) = (areas(gt), areas(pred));
    if ga.is_empty() && pa.is_empty() {
        return 1.0;
    }
    let (mut c, mut u) = (0usize, 0usize);
    let mut used = BTreeSet::new();
    for (&g, &area) in &ga {
        let mut best: Option<(f64, u32, usize, usize)> = None;
        for &p in pa.keys() {
            let (i, un) = pair_counts(gt, pred, g, p);
            if i == 0 {
                continue;
            }
            let j = i as f64 / un as f64;
            if best.is_none_or(|b| j > b.0) {
                best = Some((j, p, i, un));
            }
        }
        match best {
            Some((_, p, i, un)) => {
                c += i;
                u += un;
                used.insert(p);
            }
            None => u += area,
        }
    }
    u += pa.iter().filter(|(p, _)| !used.contains(*p)).map(|(_, a)| a).sum::<usize>();
    c as f64 / u as f64
}

/// F1, precision and recall. At an IoU threshold of at least 0.5 every
/// instance has at most one partner above it, so the matches are simply the
/// qualifying pairs.
pub fn f1(gt: &InstanceLabelMap, pred: &InstanceLabelMap, thr: f64) -> (f64, f64, f64) {
    assert!(thr >= 0.5);
    let (ga, pa) = (areas(gt), areas(pred));
    if ga.is_empty() && pa.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let mut tp = 0;
    for &g in ga.keys() {
        for &p in pa.keys() {
            let (i, u) = pair_counts(gt, pred, g, p);
            if i as f64 / u as f64 > thr {
                tp += 1;
            }
        }
    }
    let (fp, fn_) = (pa.len() - tp, ga.len() - tp);
    let r = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (r(2 * tp, 2 * tp + fp + fn_), r(tp, tp + fp), r(tp, tp + fn_))
}

/// Two-way partition minimizing the normalized cut under the RBF affinity
/// (self-affinity included in the degrees), found by enumeration. Labels put
/// point 0 in group 0.
pub fn min_ncut_partition(points: &[[f64; 6]], gamma: f64) -> Vec<usize> {
    let n = points.len();
    assert!((2..=16).contains(&n));
    let a: Vec<Vec<f64>> = points
        .iter()
        .map(|p| points.iter().map(|q| (-gamma * p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).exp()).collect())
        .collect();
    let mut best = (f64::INFINITY, 0u32);
    // point 0 stays in group 0; the other group must be non-empty
    for mask in 1..(1u32 << (n - 1)) {
        let side = |i: usize| i > 0 && mask & (1 << (i - 1)) != 0;
        let (mut cut, mut assoc_a, mut assoc_b) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if side(i) {
                    assoc_b += a[i][j];
                } else {
                    assoc_a += a[i][j];
                }
                if side(i) != side(j) && i < j {
                    cut += a[i][j];
                }
            }
        }
        let ncut = cut / assoc_a + cut / assoc_b;
        if ncut < best.0 {
            best = (ncut, mask);
        }
    }
    (0..n).map(|i| usize::from(i > 0 && best.1 & (1 << (i - 1)) != 0)).collect()
}

/// Relabel so the first occurrence of each label gets the next free index.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Element-wise mean of equally shaped vectors, summing in index order.
pub fn mean_of(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    (0..vectors[0].len()).map(|i| vectors.iter().map(|v| v[i]).sum::<f64>() / n).collect()
}

/// Learning rate of epoch `i` (1-based) from the cyclic schedule written out
/// by hand: position `t` in the cycle runs over `1/c, 2/c, ..., 1`.
pub fn cyclic_lr(i: usize, a1: f64, a2: f64, c: usize) -> f64 {
    let t = (((i - 1) % c) + 1) as f64 / c as f64;
    (1.0 - t) * a1 + t * a2
}
