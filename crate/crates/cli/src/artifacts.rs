//! Output files that only the command line produces: the embedding container,
//! the overlay figure and run-directory bookkeeping.
//!
//! Embedding container:
//!
//! ```text
//! spanet-emb-v1\n
//! height=<H> width=<W> channels=<C> dtype=f32le layout=hwc\n
//! <H * W * C little-endian f32 values>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use spanet::data::write_rgb;
use spanet::maps::InstanceLabelMap;
use spanet::Tensor;

use crate::error::{CliError, Result};

pub const EMBEDDING_FORMAT: &str = "spanet-emb-v1";

/// Write a `[c, h, w]` tensor as an HWC f32 container.
pub fn write_embedding(t: &Tensor, path: &Path) -> Result<()> {
    let &[c, h, w] = t.shape() else {
        return Err(CliError::Data(format!("embedding must be [c, h, w], got {:?}", t.shape())));
    };
    let mut out = Vec::with_capacity(64 + 4 * c * h * w);
    write!(out, "{EMBEDDING_FORMAT}\nheight={h} width={w} channels={c} dtype=f32le layout=hwc\n").expect("in-memory write");
    let d = t.data();
    for i in 0..h * w {
        for ch in 0..c {
            out.extend_from_slice(&(d[ch * h * w + i] as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}

/// Read a container back as a `[c, h, w]` tensor.
pub fn read_embedding(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |what: &str| CliError::Data(format!("{}: {what}", path.display()));
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| CliError::io(path, e))?;
    if line.trim_end() != EMBEDDING_FORMAT {
        return Err(bad("not an embedding container"));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| CliError::io(path, e))?;
    let field = |name: &str| -> Result<String> {
        line.split_whitespace()
            .find_map(|kv| kv.strip_prefix(&format!("{name}=")).map(str::to_string))
            .ok_or_else(|| bad(&format!("header lacks `{name}`")))
    };
    let num = |name: &str| -> Result<usize> { field(name)?.parse().map_err(|_| bad(&format!("bad `{name}`"))) };
    let (h, w, c) = (num("height")?, num("width")?, num("channels")?);
    if field("dtype")? != "f32le" || field("layout")? != "hwc" {
        return Err(bad("unsupported dtype or layout"));
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| CliError::io(path, e))?;
    if raw.len() != 4 * h * w * c {
        return Err(bad("payload size does not match the header"));
    }
    let mut data = vec![0.0; c * h * w];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let (i, ch) = (k / c, k % c);
        data[ch * h * w + i] = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
    }
    Ok(Tensor::from_vec(&[c, h, w], data)?)
}

/// Distinct, stable color per instance id (golden-ratio hue walk).
pub fn instance_color(id: u32) -> [f64; 3] {
    let h = (f64::from(id) * 0.618_033_988_749_895).fract();
    let h6 = h * 6.0;
    let x = 1.0 - ((h6 % 2.0) - 1.0).abs();
    match h6 as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Input image with every instance boundary drawn in its own color.
pub fn overlay(rgb: &Tensor, instances: &InstanceLabelMap) -> Tensor {
    let (h, w) = instances.dims();
    let mut out = rgb.clone();
    let plane = h * w;
    let d = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let id = instances.get(y, x);
            if id == 0 {
                continue;
            }
            let edge = [(0isize, -1isize), (-1, 0), (1, 0), (0, 1)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize || instances.get(ny as usize, nx as usize) != id
            });
            if edge {
                let c = instance_color(id);
                for ch in 0..3 {
                    d[ch * plane + y * w + x] = c[ch];
                }
            }
        }
    }
    out
}

pub fn write_overlay(rgb: &Tensor, instances: &InstanceLabelMap, path: &Path) -> Result<()> {
    Ok(write_rgb(&overlay(rgb, instances), path)?)
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Prepare an output directory: refuse a non-empty one unless `force`, in
/// which case the listed entries are removed first.
pub fn prepare_out_dir(out: &Path, force: bool, owned: &[&str]) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out).map_err(|e| CliError::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Config(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
        for name in owned {
            let p = out.join(name);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
            } else if p.exists() {
                std::fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
            }
        }
    }
    create_dir(out)
}
