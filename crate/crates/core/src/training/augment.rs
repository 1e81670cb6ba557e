use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::groundtruth::hsv_pixel;
use crate::maps::{Grid, InstanceLabelMap};
use crate::tensor::Tensor;

/// Probabilities of each augmentation; 0 disables an op.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rot90_prob: f64,
    pub hsv_prob: f64,
    pub hue_shift: f64,
    pub sat_val_shift: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub noise_prob: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rot90_prob: 0.5,
            hsv_prob: 0.5,
            hue_shift: 0.04,
            sat_val_shift: 0.1,
            blur_prob: 0.25,
            blur_sigma_max: 1.0,
            noise_prob: 0.25,
            noise_sigma: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { flip_prob: 0.0, rot90_prob: 0.0, hsv_prob: 0.0, blur_prob: 0.0, noise_prob: 0.0, ..Self::default() }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentPlan {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise quarter turns, 0..=3.
    pub rot90: u8,
    /// `(dh, ds, dv)` additive HSV shifts.
    pub hsv: Option<(f64, f64, f64)>,
    pub blur_sigma: Option<f64>,
    /// Seed of the noise field.
    pub noise_seed: Option<u64>,
    pub noise_sigma: f64,
}

fn gate(p: f64, rng: &mut ChaCha8Rng) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

fn symmetric(a: f64, rng: &mut ChaCha8Rng) -> f64 {
    if a > 0.0 {
        rng.random_range(-a..=a)
    } else {
        0.0
    }
}

impl AugmentPlan {
    pub fn draw(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        let flip_h = gate(cfg.flip_prob, rng);
        let flip_v = gate(cfg.flip_prob, rng);
        let rot90 = if gate(cfg.rot90_prob, rng) { rng.random_range(1..=3u8) } else { 0 };
        let hsv = if gate(cfg.hsv_prob, rng) {
            let dh = symmetric(cfg.hue_shift, rng);
            let ds = symmetric(cfg.sat_val_shift, rng);
            let dv = symmetric(cfg.sat_val_shift, rng);
            Some((dh, ds, dv))
        } else {
            None
        };
        let blur_sigma = if gate(cfg.blur_prob, rng) { Some(rng.random::<f64>() * cfg.blur_sigma_max) } else { None };
        let noise_seed = if gate(cfg.noise_prob, rng) { Some(rng.random::<u64>()) } else { None };
        Self { flip_h, flip_v, rot90, hsv, blur_sigma, noise_seed, noise_sigma: cfg.noise_sigma }
    }

    pub fn is_geometric_identity(&self) -> bool {
        !self.flip_h && !self.flip_v && self.rot90 == 0
    }

    /// Output `(h, w)` for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.rot90 % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    fn plane<T: Copy>(&self, data: &[T], h: usize, w: usize) -> Vec<T> {
        let mut cur = data.to_vec();
        if self.flip_h {
            for row in cur.chunks_mut(w) {
                row.reverse();
            }
        }
        if self.flip_v {
            cur = cur.chunks(w).rev().flatten().copied().collect();
        }
        let (mut ch, mut cw) = (h, w);
        for _ in 0..self.rot90 {
            // counter-clockwise: out[y][x] = in[x][cw - 1 - y], out is cw x ch
            let mut out = Vec::with_capacity(cur.len());
            for y in 0..cw {
                for x in 0..ch {
                    out.push(cur[x * cw + (cw - 1 - y)]);
                }
            }
            cur = out;
            std::mem::swap(&mut ch, &mut cw);
        }
        cur
    }

    /// Geometric part applied to every channel of a `[c, h, w]` tensor.
    pub fn apply_geometric(&self, t: &Tensor) -> Tensor {
        let &[c, h, w] = t.shape() else { panic!("expected a [c, h, w] tensor, got {:?}", t.shape()) };
        if self.is_geometric_identity() {
            return t.clone();
        }
        let (nh, nw) = self.output_dims(h, w);
        let data = t.data().chunks(h * w).flat_map(|p| self.plane(p, h, w)).collect();
        Tensor::from_vec(&[c, nh, nw], data).expect("plane sizes are preserved")
    }

    pub fn apply_labels(&self, m: &InstanceLabelMap) -> InstanceLabelMap {
        if self.is_geometric_identity() {
            return m.clone();
        }
        let (h, w) = m.dims();
        let (nh, nw) = self.output_dims(h, w);
        InstanceLabelMap::from_grid(Grid::from_vec(nh, nw, self.plane(m.data(), h, w)).expect("plane sizes are preserved"))
    }

    /// Photometric part on a `[3, h, w]` RGB tensor; results clamped to `[0, 1]`.
    pub fn apply_photometric(&self, rgb: &Tensor) -> Tensor {
        let &[_, h, w] = rgb.shape() else { panic!("expected a [3, h, w] tensor, got {:?}", rgb.shape()) };
        let mut out = rgb.clone();
        if let Some((dh, ds, dv)) = self.hsv {
            hsv_shift(&mut out, h * w, dh, ds, dv);
        }
        if let Some(sigma) = self.blur_sigma {
            out = gaussian_blur(&out, h, w, sigma);
        }
        if let Some(seed) = self.noise_seed {
            let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let normal = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
            out.data_mut().iter_mut().for_each(|v| *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0));
        }
        out
    }
}

/// Draw a plan and apply it to a paired sample. Instances only see the geometric part.
pub fn augment(
    rgb: &Tensor,
    instances: &InstanceLabelMap,
    rng: &mut ChaCha8Rng,
    cfg: &AugmentConfig,
) -> (Tensor, InstanceLabelMap) {
    let plan = AugmentPlan::draw(cfg, rng);
    (plan.apply_photometric(&plan.apply_geometric(rgb)), plan.apply_labels(instances))
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn hsv_shift(rgb: &mut Tensor, plane: usize, dh: f64, ds: f64, dv: f64) {
    let d = rgb.data_mut();
    for i in 0..plane {
        let (h, s, v) = hsv_pixel(d[i], d[plane + i], d[2 * plane + i]);
        let (r, g, b) = hsv_to_rgb((h + dh).rem_euclid(1.0), (s + ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0));
        d[i] = r.clamp(0.0, 1.0);
        d[plane + i] = g.clamp(0.0, 1.0);
        d[2 * plane + i] = b.clamp(0.0, 1.0);
    }
}

/// Separable Gaussian with clamped borders; identity for tiny sigma.
fn gaussian_blur(t: &Tensor, h: usize, w: usize, sigma: f64) -> Tensor {
    if sigma < 1e-3 {
        return t.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= norm);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = t.clone();
    let mut tmp = vec![0.0; h * w];
    for (src, dst) in t.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-r..=r).map(|i| k[(i + r) as usize] * src[y * w + clamp(x as isize + i, w)]).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = (-r..=r).map(|i| k[(i + r) as usize] * tmp[clamp(y as isize + i, h) * w + x]).sum();
            }
        }
    }
    out
}
