//! Training targets and auxiliary inputs derived from an instance label map.

use crate::error::{Error, Result};
use crate::maps::{Grid, InstanceLabelMap};
use crate::tensor::Tensor;

pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_RADIUS: f64 = 8.0;

/// Per-pixel centroid proximity in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMap(pub Grid<f64>);

impl DetectionMap {
    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        *self.0.get(y, x)
    }
}

/// The anchor pixel of an instance: its mean pixel coordinate rounded to the grid.
pub fn centroid_anchor(centroid: (f64, f64)) -> (f64, f64) {
    (centroid.0.round(), centroid.1.round())
}

/// Inverse-distance peak of one nucleus at distance `d` from its anchor.
pub fn detection_profile(d: f64, beta: f64, radius: f64) -> f64 {
    if d <= radius {
        1.0 / (1.0 + beta * d)
    } else {
        0.0
    }
}

/// Per-pixel maximum over nuclei of `1 / (1 + beta * d)` inside radius `radius`.
pub fn detection_gt(instances: &InstanceLabelMap, beta: f64, radius: f64) -> Result<DetectionMap> {
    if !(beta > 0.0 && radius > 0.0) {
        return Err(Error::InvalidArgument(format!("beta and radius must be positive, got {beta}, {radius}")));
    }
    let (h, w) = instances.dims();
    let mut grid = Grid::new(h, w, 0.0);
    let reach = radius.floor() as isize;
    for g in instances.geometry() {
        let (cx, cy) = centroid_anchor(g.centroid);
        let (cxi, cyi) = (cx as isize, cy as isize);
        for y in (cyi - reach).max(0)..=(cyi + reach).min(h as isize - 1) {
            for x in (cxi - reach).max(0)..=(cxi + reach).min(w as isize - 1) {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let v = detection_profile(d, beta, radius);
                let cell = &mut grid.data_mut()[y as usize * w + x as usize];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Ok(DetectionMap(grid))
}

/// `h x w x 6` positional target with its foreground mask.
///
/// Channel order: bbox center (x, y), top-left (x, y), bottom-right (x, y),
/// each divided by the image width (x) or height (y).
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTensor {
    pub height: usize,
    pub width: usize,
    /// `[6, h, w]`
    pub values: Tensor,
    pub mask: Grid<bool>,
}

impl PositionalTensor {
    pub fn vector_at(&self, y: usize, x: usize) -> [f64; 6] {
        let plane = self.height * self.width;
        std::array::from_fn(|c| self.values.data()[c * plane + y * self.width + x])
    }
}

pub fn positional_vector(g: &crate::maps::InstanceGeometry, height: usize, width: usize) -> [f64; 6] {
    let (w, h) = (width as f64, height as f64);
    let (cx, cy) = g.bbox_center();
    [
        cx / w,
        cy / h,
        g.top_left.0 as f64 / w,
        g.top_left.1 as f64 / h,
        g.bottom_right.0 as f64 / w,
        g.bottom_right.1 as f64 / h,
    ]
}

pub fn positional_gt(instances: &InstanceLabelMap) -> PositionalTensor {
    let (h, w) = instances.dims();
    let plane = h * w;
    let mut values = Tensor::zeros(&[6, h, w]);
    let mut mask = Grid::new(h, w, false);
    let geometry = instances.geometry();
    let vectors: std::collections::BTreeMap<u32, [f64; 6]> =
        geometry.iter().map(|g| (g.id, positional_vector(g, h, w))).collect();
    let vd = values.data_mut();
    for (i, &id) in instances.data().iter().enumerate() {
        if id == 0 {
            continue;
        }
        let p = vectors[&id];
        for (c, v) in p.iter().enumerate() {
            vd[c * plane + i] = *v;
        }
        mask.data_mut()[i] = true;
    }
    PositionalTensor { height: h, width: w, values, mask }
}

pub fn binary_mask(instances: &InstanceLabelMap) -> Grid<u8> {
    instances.grid().map(|&v| u8::from(v > 0))
}

/// `(M_x, M_y)` with `M_x = x / (W - 1)`, `M_y = y / (H - 1)`; constant 0 along a unit axis.
pub fn coordinate_maps(height: usize, width: usize) -> (Grid<f64>, Grid<f64>) {
    let sx = if width > 1 { 1.0 / (width - 1) as f64 } else { 0.0 };
    let sy = if height > 1 { 1.0 / (height - 1) as f64 } else { 0.0 };
    let mut mx = Grid::new(height, width, 0.0);
    let mut my = Grid::new(height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            mx.set(y, x, x as f64 * sx);
            my.set(y, x, y as f64 * sy);
        }
    }
    (mx, my)
}

/// Hexcone RGB to HSV on one pixel; hue scaled to `[0, 1)`.
pub fn hsv_pixel(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn check_chw(t: &Tensor, channels: usize, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [c, h, w] if *c == channels => Ok((*h, *w)),
        s => Err(Error::Shape(format!("{what}: expected {channels} x H x W, got {s:?}"))),
    }
}

/// `[3, h, w]` RGB in `[0, 1]` to `[3, h, w]` HSV in `[0, 1]`.
pub fn rgb_to_hsv(rgb: &Tensor) -> Result<Tensor> {
    let (h, w) = check_chw(rgb, 3, "rgb_to_hsv")?;
    let plane = h * w;
    let d = rgb.data();
    let mut out = Tensor::zeros(&[3, h, w]);
    let o = out.data_mut();
    for i in 0..plane {
        let (hh, s, v) = hsv_pixel(d[i], d[plane + i], d[2 * plane + i]);
        o[i] = hh;
        o[plane + i] = s;
        o[2 * plane + i] = v;
    }
    Ok(out)
}

/// Embedding-network input: `[R, G, B, H, S, V, M_seg, M_x, M_y]`.
pub fn build_instance_input(rgb: &Tensor, seg_pred: &Tensor) -> Result<Tensor> {
    let (h, w) = check_chw(rgb, 3, "build_instance_input rgb")?;
    let (sh, sw) = check_chw(seg_pred, 1, "build_instance_input seg")?;
    if (sh, sw) != (h, w) {
        return Err(Error::Shape(format!("rgb is {h}x{w} but segmentation is {sh}x{sw}")));
    }
    let hsv = rgb_to_hsv(rgb)?;
    let (mx, my) = coordinate_maps(h, w);
    let mut data = Vec::with_capacity(9 * h * w);
    data.extend_from_slice(rgb.data());
    data.extend_from_slice(hsv.data());
    data.extend_from_slice(seg_pred.data());
    data.extend_from_slice(mx.data());
    data.extend_from_slice(my.data());
    Tensor::from_vec(&[9, h, w], data)
}
