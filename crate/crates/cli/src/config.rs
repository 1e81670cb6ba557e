//! Run configuration: every tunable with its default, overridable from a TOML
//! file (dotted keys or tables). Unknown keys are rejected.

use std::path::Path;

use spanet::config::FlatConfig;
use spanet::data::SynthConfig;
use spanet::networks::NetworkConfig;
use spanet::postproc::PostConfig;
use spanet::training::{AugmentConfig, SwaSchedule, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SegDet,
    Instance,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::SegDet => "segdet",
            Stage::Instance => "instance",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "segdet" => Ok(Stage::SegDet),
            "instance" => Ok(Stage::Instance),
            other => Err(format!("unknown stage `{other}` (expected segdet or instance)")),
        }
    }
}

const SEGDET_NET: &str = "segdet.net";
const INSTANCE_NET: &str = "instance.net";

/// All keys with their defaults.
pub fn default_flat() -> FlatConfig {
    let mut f = FlatConfig::new();
    f.set("seed", 0i64);

    let s = SynthConfig::default();
    f.set("synth.height", s.height as i64);
    f.set("synth.width", s.width as i64);
    f.set("synth.n_min", s.n_nuclei.0 as i64);
    f.set("synth.n_max", s.n_nuclei.1 as i64);
    f.set("synth.radius_min", s.radius.0);
    f.set("synth.radius_max", s.radius.1);
    f.set("synth.clump_fraction", s.clump_fraction);
    f.set("synth.texture_noise", s.texture_noise);
    f.set("synth.train_count", 20i64);
    f.set("synth.test_count", 6i64);

    f.merge(&NetworkConfig::default_dual().to_flat().with_prefix(SEGDET_NET));
    f.merge(&NetworkConfig::default_single().to_flat().with_prefix(INSTANCE_NET));

    let t = TrainConfig::segdet_default();
    f.set("train.patch_size", t.patch_size as i64);
    f.set("train.stride", t.patch_size as i64);
    f.set("train.random_crops", 0i64);
    f.set("train.momentum", t.momentum);
    f.set("train.weight_decay", t.weight_decay);
    f.set("train.alpha1", t.schedule.alpha1);
    f.set("train.alpha2", t.schedule.alpha2);
    f.set("train.cycle_len", t.schedule.cycle_len as i64);
    f.set("train.total_epochs", t.schedule.total_epochs as i64);
    f.set("train.segdet_batch_size", t.batch_size as i64);
    f.set("train.instance_batch_size", TrainConfig::instance_default().batch_size as i64);

    let a = AugmentConfig::default();
    f.set("augment.flip_prob", a.flip_prob);
    f.set("augment.rot90_prob", a.rot90_prob);
    f.set("augment.hsv_prob", a.hsv_prob);
    f.set("augment.hue_shift", a.hue_shift);
    f.set("augment.sat_val_shift", a.sat_val_shift);
    f.set("augment.blur_prob", a.blur_prob);
    f.set("augment.blur_sigma_max", a.blur_sigma_max);
    f.set("augment.noise_prob", a.noise_prob);
    f.set("augment.noise_sigma", a.noise_sigma);

    f.set("gt.det_beta", t.det_beta);
    f.set("gt.det_radius", t.det_radius);

    let p = PostConfig::default();
    f.set("post.threshold", p.threshold);
    f.set("post.min_area", p.min_area as i64);
    f.set("post.maxima_window", p.maxima_window as i64);
    f.set("post.maxima_min_dist", p.maxima_min_dist);
    f.set("post.maxima_height", p.maxima_height);
    // 0 selects the median-distance bandwidth
    f.set("post.rbf_gamma", 0.0);
    f.set("post.max_clump_pixels", p.max_clump_pixels as i64);
    f
}

/// A validated, fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    flat: FlatConfig,
}

impl RunConfig {
    pub fn defaults() -> Result<Self> {
        Self::from_flat(default_flat())
    }

    /// Defaults, then the file at `path`, then `seed`.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut overrides = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                FlatConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => FlatConfig::new(),
        };
        if let Some(s) = seed {
            overrides.set("seed", s as i64);
        }
        Self::with_overrides(&overrides)
    }

    pub fn with_overrides(overrides: &FlatConfig) -> Result<Self> {
        let mut flat = default_flat();
        flat.overlay_known(overrides).map_err(|e| CliError::Config(e.to_string()))?;
        Self::from_flat(flat)
    }

    fn from_flat(mut flat: FlatConfig) -> Result<Self> {
        // rewrite network sections from their parsed form so stale per-level keys disappear
        for prefix in [SEGDET_NET, INSTANCE_NET] {
            let net = NetworkConfig::from_flat(&flat.section(prefix)).map_err(|e| CliError::Config(format!("{prefix}: {e}")))?;
            let mut kept = FlatConfig::new();
            for (k, v) in flat.iter().filter(|(k, _)| !k.starts_with(&format!("{prefix}."))) {
                kept.set(k, v.clone());
            }
            kept.merge(&net.to_flat().with_prefix(prefix));
            flat = kept;
        }
        let cfg = Self { flat };
        cfg.segdet_net()?;
        cfg.instance_net()?;
        cfg.synth(0)?;
        cfg.train(Stage::SegDet)?.validate().map_err(cfg_err)?;
        cfg.train(Stage::Instance)?.validate().map_err(cfg_err)?;
        cfg.post()?.validate().map_err(cfg_err)?;
        Ok(cfg)
    }

    pub fn flat(&self) -> &FlatConfig {
        &self.flat
    }

    pub fn canonical_text(&self) -> String {
        self.flat.canonical_text()
    }

    pub fn hash(&self) -> String {
        self.flat.hash()
    }

    pub fn seed(&self) -> u64 {
        self.flat.get_u64("seed").unwrap_or(0)
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.flat.get_usize(key).map_err(cfg_err)
    }

    fn f64(&self, key: &str) -> Result<f64> {
        self.flat.get_f64(key).map_err(cfg_err)
    }

    pub fn segdet_net(&self) -> Result<NetworkConfig> {
        let net = NetworkConfig::from_flat(&self.flat.section(SEGDET_NET)).map_err(cfg_err)?;
        if net.heads != spanet::networks::HeadKind::Dual || net.in_channels != 3 || net.out_channels != 1 {
            return Err(CliError::Config("segdet.net must be a dual-head network with 3 inputs and 1 output".into()));
        }
        Ok(net)
    }

    pub fn instance_net(&self) -> Result<NetworkConfig> {
        let net = NetworkConfig::from_flat(&self.flat.section(INSTANCE_NET)).map_err(cfg_err)?;
        if net.heads != spanet::networks::HeadKind::Single || net.in_channels != 9 || net.out_channels != 6 {
            return Err(CliError::Config("instance.net must be a single-head network with 9 inputs and 6 outputs".into()));
        }
        Ok(net)
    }

    pub fn synth_counts(&self) -> Result<(usize, usize)> {
        Ok((self.usize("synth.train_count")?, self.usize("synth.test_count")?))
    }

    /// Generator settings for tile `index` of the run.
    pub fn synth(&self, tile_seed: u64) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            height: self.usize("synth.height")?,
            width: self.usize("synth.width")?,
            n_nuclei: (self.usize("synth.n_min")?, self.usize("synth.n_max")?),
            radius: (self.f64("synth.radius_min")?, self.f64("synth.radius_max")?),
            clump_fraction: self.f64("synth.clump_fraction")?,
            texture_noise: self.f64("synth.texture_noise")?,
            seed: tile_seed,
        };
        cfg.validate().map_err(cfg_err)?;
        Ok(cfg)
    }

    pub fn patch_stride(&self) -> Result<(usize, usize)> {
        Ok((self.usize("train.stride")?, self.usize("train.random_crops")?))
    }

    pub fn train(&self, stage: Stage) -> Result<TrainConfig> {
        let batch_key = match stage {
            Stage::SegDet => "train.segdet_batch_size",
            Stage::Instance => "train.instance_batch_size",
        };
        Ok(TrainConfig {
            patch_size: self.usize("train.patch_size")?,
            batch_size: self.usize(batch_key)?,
            momentum: self.f64("train.momentum")?,
            weight_decay: self.f64("train.weight_decay")?,
            schedule: SwaSchedule {
                alpha1: self.f64("train.alpha1")?,
                alpha2: self.f64("train.alpha2")?,
                cycle_len: self.usize("train.cycle_len")?,
                total_epochs: self.usize("train.total_epochs")?,
            },
            augment: AugmentConfig {
                flip_prob: self.f64("augment.flip_prob")?,
                rot90_prob: self.f64("augment.rot90_prob")?,
                hsv_prob: self.f64("augment.hsv_prob")?,
                hue_shift: self.f64("augment.hue_shift")?,
                sat_val_shift: self.f64("augment.sat_val_shift")?,
                blur_prob: self.f64("augment.blur_prob")?,
                blur_sigma_max: self.f64("augment.blur_sigma_max")?,
                noise_prob: self.f64("augment.noise_prob")?,
                noise_sigma: self.f64("augment.noise_sigma")?,
            },
            seed: self.seed(),
            det_beta: self.f64("gt.det_beta")?,
            det_radius: self.f64("gt.det_radius")?,
        })
    }

    pub fn post(&self) -> Result<PostConfig> {
        let gamma = self.f64("post.rbf_gamma")?;
        Ok(PostConfig {
            threshold: self.f64("post.threshold")?,
            min_area: self.usize("post.min_area")?,
            maxima_window: self.usize("post.maxima_window")?,
            maxima_min_dist: self.f64("post.maxima_min_dist")?,
            maxima_height: self.f64("post.maxima_height")?,
            rbf_gamma: (gamma > 0.0).then_some(gamma),
            max_clump_pixels: self.usize("post.max_clump_pixels")?,
            seed: self.seed(),
        })
    }
}

fn cfg_err(e: spanet::Error) -> CliError {
    CliError::Config(e.to_string())
}
