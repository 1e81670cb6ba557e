//! Dataset layout, image and label-map files, patch extraction and the
//! synthetic nuclei generator.
//!
//! A dataset directory holds `images/<id>.png` (8-bit RGB), `masks/<id>.png`
//! (16-bit single-channel instance ids, 0 = background) and an optional
//! `meta.csv` with columns `id,organ,split`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{Grid, InstanceLabelMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, h, w]` RGB in `[0, 1]`.
    pub image: Tensor,
    pub instances: InstanceLabelMap,
    pub organ: Option<String>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, instances: InstanceLabelMap, organ: Option<String>) -> Result<Self> {
        let id = id.into();
        let (h, w) = instances.dims();
        if image.shape() != [3, h, w] {
            return Err(Error::data(&id, format!("image is {:?} but mask is {h}x{w}", image.shape())));
        }
        Ok(Self { id, image, instances, organ })
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn write_rgb(t: &Tensor, path: &Path) -> Result<()> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::Shape(format!("expected [3, h, w] image, got {:?}", t.shape())));
    };
    let d = t.data();
    let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|c| to_u8(d[c * h * w + i])))
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Single-channel map in `[0, 1]` as an 8-bit grayscale image.
pub fn write_gray(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Shape(format!("{} values for a {height}x{width} image", values.len())));
    }
    let buf = ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(width as u32, height as u32, values.iter().map(|&v| to_u8(v)).collect())
        .expect("buffer matches dims");
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_instance_map(path: &Path) -> Result<InstanceLabelMap> {
    let id = path.display().to_string();
    match decode(path)? {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            InstanceLabelMap::from_vec(h, w, buf.into_raw().into_iter().map(u32::from).collect())
        }
        other => Err(Error::data(id, format!("instance map must be 16-bit single-channel, found {:?}", other.color()))),
    }
}

pub fn write_instance_map(map: &InstanceLabelMap, path: &Path) -> Result<()> {
    let (h, w) = map.dims();
    let raw = map
        .data()
        .iter()
        .map(|&v| {
            u16::try_from(v).map_err(|_| Error::data(path.display().to_string(), format!("instance id {v} exceeds 65535")))
        })
        .collect::<Result<Vec<u16>>>()?;
    let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
    buf.save(path).map_err(|e| image_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaRow {
    pub id: String,
    pub organ: String,
    pub split: String,
}

pub fn read_meta(path: &Path) -> Result<Vec<MetaRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e: csv::Error| Error::data(path.display().to_string(), e.to_string())))
        .collect()
}

pub fn write_meta(rows: &[MetaRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Stems of the `.png` files in `dir`, sorted.
pub fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Load every `images/<id>.png` with its `masks/<id>.png`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images = root.join("images");
    if !images.is_dir() {
        log::warn!("{} has no images directory; dataset is empty", root.display());
        return Ok(Vec::new());
    }
    let ids = png_ids(&images)?;
    if ids.is_empty() {
        log::warn!("{} contains no images", images.display());
    }
    let meta_path = root.join("meta.csv");
    let organs: BTreeMap<String, String> = if meta_path.is_file() {
        read_meta(&meta_path)?.into_iter().map(|r| (r.id, r.organ)).collect()
    } else {
        BTreeMap::new()
    };
    ids.iter()
        .map(|id| {
            let mask_path = root.join("masks").join(format!("{id}.png"));
            if !mask_path.is_file() {
                return Err(Error::data(id, "missing mask"));
            }
            let image = read_rgb(&images.join(format!("{id}.png")))?;
            let instances = read_instance_map(&mask_path).map_err(|e| match e {
                Error::Data { reason, .. } => Error::data(id, reason),
                other => other,
            })?;
            Sample::new(id.clone(), image, instances, organs.get(id).cloned())
        })
        .collect()
}

/// Window origins along one axis: every `stride`, with the last window anchored to the border.
pub fn window_starts(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + size < dim {
        starts.push(s);
        s += stride.max(1);
    }
    starts.push(dim - size);
    starts.dedup();
    starts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub y0: usize,
    pub x0: usize,
    pub image: Tensor,
    /// Ids relabeled to `1..=K` within the patch.
    pub instances: InstanceLabelMap,
}

fn crop_image(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let &[c, h, w] = t.shape() else { unreachable!("checked by Sample") };
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&t.data()[row + x0..row + x0 + size]);
        }
    }
    Tensor::from_vec(&[c, size, size], out).expect("sizes agree")
}

/// Sliding-window crops covering the whole sample, plus `random_crops` extra windows.
pub fn extract_patches(
    sample: &Sample,
    size: usize,
    stride: usize,
    random_crops: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Patch>> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(Error::Config(format!("patch size {size} is not a positive multiple of 8")));
    }
    let (h, w) = sample.instances.dims();
    if h < size || w < size {
        return Err(Error::data(&sample.id, format!("{h}x{w} image is smaller than the {size}px patch")));
    }
    let mut origins = Vec::new();
    for &y in &window_starts(h, size, stride) {
        for &x in &window_starts(w, size, stride) {
            origins.push((y, x));
        }
    }
    for _ in 0..random_crops {
        origins.push((rng.random_range(0..=h - size), rng.random_range(0..=w - size)));
    }
    Ok(origins
        .into_iter()
        .map(|(y0, x0)| Patch {
            y0,
            x0,
            image: crop_image(&sample.image, y0, x0, size),
            instances: sample.instances.crop(y0, x0, size, size).relabel_contiguous(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of nuclei to place.
    pub n_nuclei: (usize, usize),
    /// Semi-axis range in pixels.
    pub radius: (f64, f64),
    /// Fraction of nuclei placed to overlap an earlier one.
    pub clump_fraction: f64,
    pub texture_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            n_nuclei: (6, 12),
            radius: (5.0, 9.0),
            clump_fraction: 0.3,
            texture_noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::Config(format!("canvas {}x{} must be a positive multiple of 8", self.height, self.width)));
        }
        if !(self.radius.0 >= 2.0 && self.radius.1 >= self.radius.0) {
            return Err(Error::Config(format!("radius range {:?} must satisfy 2 <= min <= max", self.radius)));
        }
        if 2.0 * self.radius.1 + 4.0 > self.height.min(self.width) as f64 {
            return Err(Error::Config("nuclei do not fit on the canvas".into()));
        }
        if self.n_nuclei.0 > self.n_nuclei.1 {
            return Err(Error::Config(format!("nuclei range {:?} is empty", self.n_nuclei)));
        }
        if !(0.0..=1.0).contains(&self.clump_fraction) || !(self.texture_noise >= 0.0) {
            return Err(Error::Config("clump_fraction must lie in [0, 1] and texture_noise be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthReport {
    pub requested: usize,
    pub placed: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn pixels(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let r = self.a.max(self.b).ceil() as isize + 1;
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let (x0, y0) = (self.cx.round() as isize, self.cy.round() as isize);
        let mut out = Vec::new();
        for y in (y0 - r).max(0)..=(y0 + r).min(h as isize - 1) {
            for x in (x0 - r).max(0)..=(x0 + r).min(w as isize - 1) {
                let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
                let u = (dx * c + dy * s) / self.a;
                let v = (-dx * s + dy * c) / self.b;
                if u * u + v * v <= 1.0 {
                    out.push((x as usize, y as usize));
                }
            }
        }
        out
    }
}

const MAX_TRIES: usize = 200;
/// Clearance kept between nuclei that are not meant to touch.
const MARGIN: isize = 2;

fn clear_of(labels: &InstanceLabelMap, px: &[(usize, usize)], allowed: &[u32]) -> bool {
    let (h, w) = labels.dims();
    px.iter().all(|&(x, y)| {
        (-MARGIN..=MARGIN).all(|dy| {
            (-MARGIN..=MARGIN).all(|dx| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    return true;
                }
                let v = labels.get(ny as usize, nx as usize);
                v == 0 || allowed.contains(&v)
            })
        })
    })
}

/// Render a seeded synthetic tile: elliptical nuclei, some overlapping an
/// earlier neighbor by 20-50% (later ones on top), darker than a textured
/// background with a dark rim, plus noise. The image is quantized to 8 bits
/// so it survives a PNG round trip unchanged.
pub fn generate_synthetic(cfg: &SynthConfig, id: impl Into<String>) -> Result<(Sample, SynthReport)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let requested = rng.random_range(cfg.n_nuclei.0..=cfg.n_nuclei.1);
    let clumped = (cfg.clump_fraction * requested as f64).round() as usize;
    let mut labels = InstanceLabelMap::empty(h, w);
    let mut placed: Vec<(Ellipse, usize)> = Vec::new(); // (shape, group)
    let rmax = cfg.radius.1;
    for i in 0..requested {
        let wants_partner = i >= requested - clumped && !placed.is_empty();
        let new_id = placed.len() as u32 + 1;
        for _ in 0..MAX_TRIES {
            let a = rng.random_range(cfg.radius.0..=rmax);
            let b = rng.random_range(cfg.radius.0..=rmax);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (ellipse, group, allowed) = if wants_partner {
                let p = rng.random_range(0..placed.len());
                let (pe, group) = placed[p];
                let dist = (0.5 * (pe.a + pe.b) + 0.5 * (a + b)) * rng.random_range(0.35..0.95);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let e = Ellipse { cx: pe.cx + dist * phi.cos(), cy: pe.cy + dist * phi.sin(), a, b, theta };
                let members: Vec<u32> =
                    placed.iter().enumerate().filter(|(_, (_, g))| *g == group).map(|(j, _)| j as u32 + 1).collect();
                (e, group, Some((p as u32 + 1, members)))
            } else {
                let e = Ellipse {
                    cx: rng.random_range(rmax + 2.0..w as f64 - rmax - 2.0),
                    cy: rng.random_range(rmax + 2.0..h as f64 - rmax - 2.0),
                    a,
                    b,
                    theta,
                };
                (e, placed.len(), None)
            };
            let px = ellipse.pixels(h, w);
            if px.is_empty() || px.iter().any(|&(x, y)| x == 0 || y == 0 || x + 1 == w || y + 1 == h) {
                continue;
            }
            let ok = match &allowed {
                None => clear_of(&labels, &px, &[]),
                Some((partner, members)) => {
                    let on_partner = px.iter().filter(|&&(x, y)| labels.get(y, x) == *partner).count();
                    let on_other = px.iter().filter(|&&(x, y)| ![0, *partner].contains(&labels.get(y, x))).count();
                    let partner_area = labels.data().iter().filter(|&&v| v == *partner).count();
                    let frac = on_partner as f64 / px.len().min(partner_area).max(1) as f64;
                    on_other == 0 && (0.2..=0.5).contains(&frac) && clear_of(&labels, &px, members)
                }
            };
            if ok {
                for &(x, y) in &px {
                    labels.set(y, x, new_id);
                }
                placed.push((ellipse, group));
                break;
            }
        }
    }
    let report = SynthReport { requested, placed: placed.len() };
    if report.placed < requested {
        log::warn!("synthetic tile placed {} of {} nuclei", report.placed, requested);
    }
    let image = render(&labels, placed.len(), cfg, &mut rng);
    // occlusion can hide a nucleus entirely; keep ids contiguous
    let instances = labels.relabel_contiguous();
    Ok((Sample::new(id, image, instances, None)?, report))
}

fn render(labels: &InstanceLabelMap, n: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = labels.dims();
    let plane = h * w;
    let bg = [0.93 + rng.random_range(-0.02..0.02), 0.80 + rng.random_range(-0.03..0.03), 0.88];
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.02..0.12), rng.random_range(0.02..0.12), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let tints: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let k = rng.random_range(0.8..1.2);
            [0.45 * k, 0.25 * k, 0.58 * k]
        })
        .collect();
    let noise = Normal::new(0.0, cfg.texture_noise.max(1e-12)).expect("finite sigma");
    let grid: &Grid<u32> = labels.grid();
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let id = *grid.get(y, x);
            let color = if id == 0 {
                let t: f64 = waves.iter().map(|&(fx, fy, p)| (fx * x as f64 + fy * y as f64 + p).sin()).sum::<f64>();
                [bg[0] + 0.015 * t, bg[1] + 0.015 * t, bg[2] + 0.015 * t]
            } else {
                let rim = [(0isize, -1isize), (-1, 0), (1, 0), (0, 1)].iter().any(|&(dx, dy)| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize || *grid.get(ny as usize, nx as usize) != id
                });
                let base = tints[(id - 1) as usize];
                let k = if rim { 0.65 } else { 1.0 };
                [base[0] * k, base[1] * k, base[2] * k]
            };
            for c in 0..3 {
                let v = color[c] + if cfg.texture_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                data[c * plane + i] = f64::from(to_u8(v)) / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("sizes agree")
}

/// `<root>/<images|masks>/<id>.png`.
pub fn sample_paths(root: &Path, id: &str) -> (PathBuf, PathBuf) {
    (root.join("images").join(format!("{id}.png")), root.join("masks").join(format!("{id}.png")))
}

pub fn write_sample(sample: &Sample, root: &Path) -> Result<()> {
    for d in ["images", "masks"] {
        std::fs::create_dir_all(root.join(d)).map_err(|e| Error::io(root.join(d), e))?;
    }
    let (img, mask) = sample_paths(root, &sample.id);
    write_rgb(&sample.image, &img)?;
    write_instance_map(&sample.instances, &mask)
}
