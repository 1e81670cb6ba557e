//! Named parameter storage, normalization statistics and the checkpoint file.
//!
//! Checkpoint layout (`spanet-ckpt-v1`):
//!
//! ```text
//! spanet-ckpt-v1\n
//! <header byte length, decimal>\n
//! <JSON header: config text, metadata, tensor index>
//! <tensor payload: little-endian f64, in index order>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "spanet-ckpt-v1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub config_hash: String,
    pub epoch: usize,
    /// Index of the learning-rate cycle this snapshot closes (0 for averaged weights).
    pub cycle: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights {
    pub params: BTreeMap<String, Tensor>,
    /// Normalization running statistics; never touched by the optimizer.
    pub buffers: BTreeMap<String, Tensor>,
    pub meta: WeightsMeta,
}

/// Per-layer batch statistics observed during a forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

pub fn running_mean_key(prefix: &str) -> String {
    format!("{prefix}.running_mean")
}

pub fn running_var_key(prefix: &str) -> String {
    format!("{prefix}.running_var")
}

impl ModelWeights {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::Checkpoint(format!("missing buffer `{name}`")))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// True if both hold the same parameter names and shapes.
    pub fn same_layout(&self, other: &ModelWeights) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn add_params(&mut self, other: &ModelWeights) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        for (a, b) in self.params.values_mut().zip(other.params.values()) {
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale_params(&mut self, alpha: f64) {
        self.params.values_mut().for_each(|t| t.scale(alpha));
    }

    /// Exponential moving update of running statistics from one training batch.
    pub fn apply_momentum_stats(&mut self, stats: &[BatchStats], momentum: f64) {
        for s in stats {
            let unbiased = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            if let Some(rm) = self.buffers.get_mut(&running_mean_key(&s.prefix)) {
                rm.data_mut()
                    .iter_mut()
                    .zip(&s.mean)
                    .for_each(|(r, m)| *r = (1.0 - momentum) * *r + momentum * m);
            }
            if let Some(rv) = self.buffers.get_mut(&running_var_key(&s.prefix)) {
                rv.data_mut()
                    .iter_mut()
                    .zip(&s.var)
                    .for_each(|(r, v)| *r = (1.0 - momentum) * *r + momentum * v * unbiased);
            }
        }
    }

    pub fn save(&self, path: &Path, config_text: &str) -> Result<()> {
        let mut file =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut file, config_text).map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, out: &mut impl Write, config_text: &str) -> std::io::Result<()> {
        let mut index = Vec::new();
        let mut offset = 0usize;
        for (kind, map) in [("param", &self.params), ("buffer", &self.buffers)] {
            for (name, t) in map {
                index.push(TensorEntry {
                    name: name.clone(),
                    kind: kind.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
            }
        }
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            config: config_text.to_string(),
            meta: self.meta.clone(),
            tensors: index,
        };
        let json = serde_json::to_string(&header).map_err(std::io::Error::other)?;
        writeln!(out, "{CHECKPOINT_FORMAT}")?;
        writeln!(out, "{}", json.len())?;
        out.write_all(json.as_bytes())?;
        for map in [&self.params, &self.buffers] {
            for t in map.values() {
                for v in t.data() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Load a checkpoint, returning the embedded config text alongside the weights.
    pub fn load(path: &Path) -> Result<(String, ModelWeights)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn read_from(input: &mut impl BufRead) -> std::result::Result<(String, ModelWeights), String> {
        let mut line = String::new();
        input.read_line(&mut line).map_err(|e| e.to_string())?;
        if line.trim_end() != CHECKPOINT_FORMAT {
            return Err(format!("unknown format tag `{}`", line.trim_end()));
        }
        line.clear();
        input.read_line(&mut line).map_err(|e| e.to_string())?;
        let len: usize = line.trim().parse().map_err(|_| "bad header length".to_string())?;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json).map_err(|e| e.to_string())?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| e.to_string())?;
        let mut payload = Vec::new();
        input.read_to_end(&mut payload).map_err(|e| e.to_string())?;
        let mut weights = ModelWeights { meta: header.meta, ..Default::default() };
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * 8;
            let bytes = payload
                .get(start..start + n * 8)
                .ok_or_else(|| format!("truncated payload for `{}`", entry.name))?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(&entry.shape, data).map_err(|e| e.to_string())?;
            match entry.kind.as_str() {
                "param" => weights.params.insert(entry.name, t),
                "buffer" => weights.buffers.insert(entry.name, t),
                other => return Err(format!("unknown tensor kind `{other}`")),
            };
        }
        Ok((header.config, weights))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: String,
    meta: WeightsMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
    offset: usize,
}
