//! SpaNet: an encoder-decoder of multi-scale dense units with the network
//! input re-injected (area-downscaled) after every transition, in a
//! single-head (positional embedding) and a dual-head (mask + detection) form.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NormMode, Tape, Var};
use crate::blocks::{ConvBlock, Dtb, Msdu, MsduConfig, TransitionConfig, Utb};
use crate::config::{usize_list, FlatConfig};
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One head with `out_channels` maps.
    Single,
    /// Segmentation head and detection head, one map each.
    Dual,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Single => "single",
            HeadKind::Dual => "dual",
        }
    }
}

/// Kernel sizes and dilation rates per encoder depth (0 = full resolution).
pub const DEFAULT_KERNELS: [[usize; 4]; 4] = [[3, 3, 5, 7], [3, 3, 5, 5], [3, 3, 3, 5], [3, 5, 3, 3]];
pub const DEFAULT_DILATIONS: [[usize; 4]; 4] = [[1, 4, 6, 8], [1, 2, 4, 6], [1, 2, 4, 4], [1, 1, 4, 6]];

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub levels: usize,
    pub stem_channels: usize,
    /// Encoder MSDUs, bottleneck, then decoder MSDUs: `2 * levels - 1` entries.
    pub msdu: Vec<MsduConfig>,
    pub reduce_rate: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub heads: HeadKind,
}

impl NetworkConfig {
    /// Per-depth MSDU settings mirrored into encoder + bottleneck + decoder order.
    pub fn uniform(
        levels: usize,
        stem_channels: usize,
        growth_rate: usize,
        branch_channels: usize,
        repetitions: usize,
        reduce_rate: f64,
    ) -> Self {
        let depth_of = |i: usize| if i < levels { i } else { 2 * levels - 2 - i };
        let msdu = (0..2 * levels - 1)
            .map(|i| {
                let d = depth_of(i).min(DEFAULT_KERNELS.len() - 1);
                MsduConfig {
                    growth_rate,
                    branch_channels,
                    kernels: DEFAULT_KERNELS[d],
                    dilations: DEFAULT_DILATIONS[d],
                    repetitions,
                }
            })
            .collect();
        Self {
            levels,
            stem_channels,
            msdu,
            reduce_rate,
            in_channels: 9,
            out_channels: 6,
            heads: HeadKind::Single,
        }
    }

    /// Embedding network: 9 input channels, 6 output channels.
    pub fn default_single() -> Self {
        Self::uniform(4, 32, 24, 96, 4, 0.5)
    }

    /// Mask + detection network on RGB input.
    pub fn default_dual() -> Self {
        Self { in_channels: 3, out_channels: 1, heads: HeadKind::Dual, ..Self::default_single() }
    }

    pub fn with_io(mut self, in_channels: usize, out_channels: usize, heads: HeadKind) -> Self {
        self.in_channels = in_channels;
        self.out_channels = out_channels;
        self.heads = heads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.msdu.len() != 2 * self.levels - 1 {
            return Err(Error::Config(format!(
                "{} levels need {} MSDU configs, got {}",
                self.levels,
                2 * self.levels - 1,
                self.msdu.len()
            )));
        }
        let g = self.msdu[0].growth_rate;
        if self.msdu.iter().any(|m| m.growth_rate != g) {
            return Err(Error::Config("all MSDUs share one growth rate".into()));
        }
        for m in &self.msdu {
            m.validate()?;
        }
        TransitionConfig { reduce_rate: self.reduce_rate }.validate()?;
        if self.stem_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.heads == HeadKind::Dual && self.out_channels != 1 {
            return Err(Error::Config("dual-head networks emit one map per head".into()));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut f = FlatConfig::new();
        f.set("levels", self.levels as i64);
        f.set("stem_channels", self.stem_channels as i64);
        f.set("reduce_rate", self.reduce_rate);
        f.set("in_channels", self.in_channels as i64);
        f.set("out_channels", self.out_channels as i64);
        f.set("heads", self.heads.as_str());
        f.set("growth_rate", self.msdu[0].growth_rate as i64);
        let list = |g: &dyn Fn(&MsduConfig) -> usize| usize_list(&self.msdu.iter().map(g).collect::<Vec<_>>());
        f.set("branch_channels", list(&|m| m.branch_channels));
        f.set("repetitions", list(&|m| m.repetitions));
        for (i, m) in self.msdu.iter().enumerate() {
            f.set(&format!("msdu{i}.kernels"), usize_list(&m.kernels));
            f.set(&format!("msdu{i}.dilations"), usize_list(&m.dilations));
        }
        f
    }

    pub fn from_flat(f: &FlatConfig) -> Result<Self> {
        let levels = f.get_usize("levels")?;
        if levels < 2 {
            return Err(Error::Config(format!("levels must be >= 2, got {levels}")));
        }
        let n = 2 * levels - 1;
        let growth_rate = f.get_usize("growth_rate")?;
        let per_level = |key: &str| -> Result<Vec<usize>> {
            let v = f.get_usize_list(key)?;
            if v.len() != n {
                return Err(Error::Config(format!("`{key}` needs {n} entries, got {}", v.len())));
            }
            Ok(v)
        };
        let branch = per_level("branch_channels")?;
        let reps = per_level("repetitions")?;
        let four = |key: String| -> Result<[usize; 4]> {
            let v = f.get_usize_list(&key)?;
            v.try_into().map_err(|_| Error::Config(format!("`{key}` needs 4 entries")))
        };
        let msdu = (0..n)
            .map(|i| {
                Ok(MsduConfig {
                    growth_rate,
                    branch_channels: branch[i],
                    kernels: four(format!("msdu{i}.kernels"))?,
                    dilations: four(format!("msdu{i}.dilations"))?,
                    repetitions: reps[i],
                })
            })
            .collect::<Result<_>>()?;
        let heads = match f.get_str("heads")? {
            "single" => HeadKind::Single,
            "dual" => HeadKind::Dual,
            other => return Err(Error::Config(format!("unknown head kind `{other}`"))),
        };
        let cfg = Self {
            levels,
            stem_channels: f.get_usize("stem_channels")?,
            msdu,
            reduce_rate: f.get_f64("reduce_rate")?,
            in_channels: f.get_usize("in_channels")?,
            out_channels: f.get_usize("out_channels")?,
            heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn canonical_text(&self) -> String {
        self.to_flat().canonical_text()
    }

    pub fn hash(&self) -> String {
        self.to_flat().hash()
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        Self::from_flat(&FlatConfig::parse(text)?)
    }
}

/// Named outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct NetOutput {
    /// One var per head (`[seg, det]` for dual-head networks).
    pub heads: Vec<Var>,
    /// The input of every MSDU, encoder first, then bottleneck, then decoder.
    pub msdu_inputs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct SpaNet {
    cfg: NetworkConfig,
    stem: ConvBlock,
    encoder: Vec<(Msdu, Dtb)>,
    bottleneck: Msdu,
    /// Deepest first.
    decoder: Vec<(Utb, Msdu)>,
    heads: Vec<Conv2d>,
}

/// Build the single-head embedding network.
pub fn build_spanet(cfg: &NetworkConfig) -> Result<SpaNet> {
    if cfg.heads != HeadKind::Single {
        return Err(Error::Config("build_spanet expects a single-head config".into()));
    }
    SpaNet::new(cfg.clone())
}

/// Build the dual-head (mask + detection) network.
pub fn build_dual_head(cfg: &NetworkConfig) -> Result<SpaNet> {
    if cfg.heads != HeadKind::Dual {
        return Err(Error::Config("build_dual_head expects a dual-head config".into()));
    }
    if cfg.in_channels != 3 {
        return Err(Error::Config(format!("dual-head network takes RGB input, got {} channels", cfg.in_channels)));
    }
    SpaNet::new(cfg.clone())
}

pub fn count_parameters(model: &SpaNet) -> usize {
    model.num_params()
}

impl SpaNet {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let t = TransitionConfig { reduce_rate: cfg.reduce_rate };
        let levels = cfg.levels;
        let stem = ConvBlock::new("stem", cfg.in_channels, cfg.stem_channels, 3, 1);
        let mut c = cfg.stem_channels;
        let mut encoder = Vec::new();
        let mut skip_channels = Vec::new();
        for l in 0..levels - 1 {
            let msdu = Msdu::new(&format!("enc{l}.msdu"), c, &cfg.msdu[l])?;
            c = msdu.out_channels();
            skip_channels.push(c);
            let dtb = Dtb::new(&format!("enc{l}.down"), c, &t)?;
            c = dtb.out_channels() + cfg.in_channels;
            encoder.push((msdu, dtb));
        }
        let bottleneck = Msdu::new("mid.msdu", c, &cfg.msdu[levels - 1])?;
        c = bottleneck.out_channels();
        let mut decoder = Vec::new();
        for (i, l) in (0..levels - 1).rev().enumerate() {
            let utb = Utb::new(&format!("dec{l}.up"), c, &t)?;
            c = utb.out_channels() + skip_channels[l] + cfg.in_channels;
            let msdu = Msdu::new(&format!("dec{l}.msdu"), c, &cfg.msdu[levels + i])?;
            c = msdu.out_channels();
            decoder.push((utb, msdu));
        }
        let heads = match cfg.heads {
            HeadKind::Single => vec![Conv2d::new("head", c, cfg.out_channels, 1, 1)],
            HeadKind::Dual => vec![
                Conv2d::new("head_seg", c, cfg.out_channels, 1, 1),
                Conv2d::new("head_det", c, cfg.out_channels, 1, 1),
            ],
        };
        Ok(Self { cfg, stem, encoder, bottleneck, decoder, heads })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn heads(&self) -> &[Conv2d] {
        &self.heads
    }

    pub fn stem(&self) -> &ConvBlock {
        &self.stem
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params()
            + self.encoder.iter().map(|(m, d)| m.num_params() + d.num_params()).sum::<usize>()
            + self.bottleneck.num_params()
            + self.decoder.iter().map(|(u, m)| u.num_params() + m.num_params()).sum::<usize>()
            + self.heads.iter().map(Conv2d::num_params).sum::<usize>()
    }

    /// Freshly initialized weights, deterministic in `seed`.
    pub fn init_weights(&self, seed: u64) -> ModelWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::default();
        self.stem.init(&mut w, &mut rng);
        for (m, d) in &self.encoder {
            m.init(&mut w, &mut rng);
            d.init(&mut w, &mut rng);
        }
        self.bottleneck.init(&mut w, &mut rng);
        for (u, m) in &self.decoder {
            u.init(&mut w, &mut rng);
            m.init(&mut w, &mut rng);
        }
        for h in &self.heads {
            h.init(&mut w, &mut rng);
        }
        w.meta.config_hash = self.cfg.hash();
        w
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected N x {} x H x W input, got {:?}",
                self.cfg.in_channels, shape
            )));
        }
        let m = self.cfg.size_multiple();
        if shape[2] == 0 || shape[3] == 0 || !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "spatial size {}x{} is not divisible by {m}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<NetOutput> {
        self.check_input_shape(tape.value(x).shape())?;
        let levels = self.cfg.levels;
        let mut scaled = vec![x];
        for l in 1..levels {
            let s = tape.avg_pool2(scaled[l - 1]);
            scaled.push(s);
        }
        let mut msdu_inputs = Vec::with_capacity(2 * levels - 1);
        let mut skips = Vec::with_capacity(levels - 1);
        let mut h = self.stem.forward(tape, x)?;
        for (l, (msdu, dtb)) in self.encoder.iter().enumerate() {
            msdu_inputs.push(h);
            h = msdu.forward(tape, h)?;
            skips.push(h);
            h = dtb.forward(tape, h)?;
            h = tape.concat(&[h, scaled[l + 1]])?;
        }
        msdu_inputs.push(h);
        h = self.bottleneck.forward(tape, h)?;
        for (i, (utb, msdu)) in self.decoder.iter().enumerate() {
            let l = levels - 2 - i;
            h = utb.forward(tape, h)?;
            h = tape.concat(&[h, skips[l], scaled[l]])?;
            msdu_inputs.push(h);
            h = msdu.forward(tape, h)?;
        }
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let y = head.forward(tape, h)?;
            heads.push(tape.sigmoid(y));
        }
        Ok(NetOutput { heads, msdu_inputs })
    }

    /// Inference with stored normalization statistics. Returns one tensor per head.
    pub fn predict(&self, weights: &ModelWeights, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new(weights, NormMode::Running);
        let x = tape.input(input.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(out.heads.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Upper bound, in input pixels, on how far any output pixel's dependence reaches.
    pub fn receptive_radius(&self) -> usize {
        let msdu_radius = |m: &Msdu| -> usize {
            m.msbs
                .iter()
                .map(|msb| {
                    let branch = msb
                        .branches
                        .iter()
                        .map(|b| b.conv.dilation * (b.conv.kernel - 1) / 2)
                        .max()
                        .unwrap_or(0);
                    branch + 1
                })
                .sum()
        };
        let mut r = 1; // stem
        let mut scale = 1;
        for (m, _) in &self.encoder {
            r += scale * msdu_radius(m);
            r += 2 * scale; // pooling window at the next scale
            scale *= 2;
        }
        r += scale * msdu_radius(&self.bottleneck);
        for (_, m) in &self.decoder {
            scale /= 2;
            r += 2 * scale;
            r += scale * msdu_radius(m);
        }
        r
    }
}
