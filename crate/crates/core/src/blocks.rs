//! The structuring blocks: multi-scale block (MSB), multi-scale dense unit
//! (MSDU), down-transition (DTB) and up-transition (UTB).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, ConvTranspose2x2};
use crate::weights::ModelWeights;

pub const BRANCHES: usize = 4;

/// Effective extent of a dilated kernel: `k + (k - 1)(d - 1)`.
pub fn receptive_field(kernel: usize, dilation: usize) -> usize {
    kernel + (kernel - 1) * (dilation - 1)
}

fn check_branches(kernels: &[usize; BRANCHES], dilations: &[usize; BRANCHES]) -> Result<()> {
    if let Some(k) = kernels.iter().find(|&&k| k == 0 || k % 2 == 0) {
        return Err(Error::Config(format!("kernel sizes must be odd and positive, got {k}")));
    }
    if dilations.contains(&0) {
        return Err(Error::Config("dilation rates must be >= 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsbConfig {
    /// Feature maps per parallel branch (F).
    pub channels: usize,
    pub kernels: [usize; BRANCHES],
    pub dilations: [usize; BRANCHES],
}

impl MsbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("MSB channel count must be positive".into()));
        }
        check_branches(&self.kernels, &self.dilations)
    }

    pub fn receptive_fields(&self) -> [usize; BRANCHES] {
        std::array::from_fn(|i| receptive_field(self.kernels[i], self.dilations[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsduConfig {
    pub growth_rate: usize,
    /// Width of the entry conv and of each branch inside every MSB.
    pub branch_channels: usize,
    pub kernels: [usize; BRANCHES],
    pub dilations: [usize; BRANCHES],
    pub repetitions: usize,
}

impl MsduConfig {
    pub fn validate(&self) -> Result<()> {
        if self.growth_rate == 0 {
            return Err(Error::Config("growth rate must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("MSDU repetitions must be >= 1".into()));
        }
        self.msb().validate()
    }

    pub fn msb(&self) -> MsbConfig {
        MsbConfig { channels: self.branch_channels, kernels: self.kernels, dilations: self.dilations }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionConfig {
    pub reduce_rate: f64,
}

impl TransitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reduce_rate > 0.0 && self.reduce_rate < 1.0) {
            return Err(Error::Config(format!("reduce rate must lie in (0, 1), got {}", self.reduce_rate)));
        }
        Ok(())
    }

    /// `floor(p * C)`
    pub fn reduced(&self, channels: usize) -> usize {
        (self.reduce_rate * channels as f64 + 1e-9).floor() as usize
    }
}

fn check_input(tape: &Tape, x: Var, channels: usize, what: &str) -> Result<()> {
    let (_, c, h, w) = tape.value(x).dims4();
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("{what}: input has zero spatial extent ({h}x{w})")));
    }
    if c != channels {
        return Err(Error::Shape(format!("{what}: expected {channels} input channels, got {c}")));
    }
    Ok(())
}

/// Conv -> batch norm -> ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            conv: Conv2d::new(format!("{name}.conv"), in_channels, out_channels, kernel, dilation),
            norm: BatchNorm2d::new(format!("{name}.norm"), out_channels),
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.norm.num_params()
    }

    pub fn init(&self, w: &mut ModelWeights, rng: &mut impl Rng) {
        self.conv.init(w, rng);
        self.norm.init(w);
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.norm.forward(tape, y)?;
        Ok(tape.relu(y))
    }
}

/// 1x1 entry block, four parallel dilated blocks, channel concat, 3x3 exit block.
#[derive(Debug, Clone)]
pub struct Msb {
    pub in_channels: usize,
    pub out_channels: usize,
    pub entry: ConvBlock,
    pub branches: Vec<ConvBlock>,
    pub exit: ConvBlock,
}

impl Msb {
    /// `out_channels` is F for a standalone MSB and g inside an MSDU.
    pub fn new(name: &str, in_channels: usize, cfg: &MsbConfig, out_channels: usize) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(Error::Config(format!("{name}: input channel count must be positive")));
        }
        let f = cfg.channels;
        let branches = (0..BRANCHES)
            .map(|i| ConvBlock::new(&format!("{name}.branch{i}"), f, f, cfg.kernels[i], cfg.dilations[i]))
            .collect();
        Ok(Self {
            in_channels,
            out_channels,
            entry: ConvBlock::new(&format!("{name}.entry"), in_channels, f, 1, 1),
            branches,
            exit: ConvBlock::new(&format!("{name}.exit"), BRANCHES * f, out_channels, 3, 1),
        })
    }

    pub fn standalone(name: &str, in_channels: usize, cfg: &MsbConfig) -> Result<Self> {
        Self::new(name, in_channels, cfg, cfg.channels)
    }

    pub fn num_params(&self) -> usize {
        self.entry.num_params()
            + self.branches.iter().map(ConvBlock::num_params).sum::<usize>()
            + self.exit.num_params()
    }

    pub fn init(&self, w: &mut ModelWeights, rng: &mut impl Rng) {
        self.entry.init(w, rng);
        self.branches.iter().for_each(|b| b.init(w, rng));
        self.exit.init(w, rng);
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_input(tape, x, self.in_channels, "MSB")?;
        let e = self.entry.forward(tape, x)?;
        let outs = self.branches.iter().map(|b| b.forward(tape, e)).collect::<Result<Vec<_>>>()?;
        let cat = tape.concat(&outs)?;
        self.exit.forward(tape, cat)
    }
}

/// `b` repetitions of (MSB, concatenate onto the running stack).
#[derive(Debug, Clone)]
pub struct Msdu {
    pub in_channels: usize,
    pub growth_rate: usize,
    pub msbs: Vec<Msb>,
}

impl Msdu {
    pub fn new(name: &str, in_channels: usize, cfg: &MsduConfig) -> Result<Self> {
        cfg.validate()?;
        let msb_cfg = cfg.msb();
        let msbs = (0..cfg.repetitions)
            .map(|i| {
                Msb::new(&format!("{name}.msb{i}"), in_channels + i * cfg.growth_rate, &msb_cfg, cfg.growth_rate)
            })
            .collect::<Result<_>>()?;
        Ok(Self { in_channels, growth_rate: cfg.growth_rate, msbs })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.msbs.len() * self.growth_rate
    }

    pub fn num_params(&self) -> usize {
        self.msbs.iter().map(Msb::num_params).sum()
    }

    pub fn init(&self, w: &mut ModelWeights, rng: &mut impl Rng) {
        self.msbs.iter().for_each(|m| m.init(w, rng));
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_input(tape, x, self.in_channels, "MSDU")?;
        let mut stack = x;
        for msb in &self.msbs {
            let y = msb.forward(tape, stack)?;
            stack = tape.concat(&[stack, y])?;
        }
        Ok(stack)
    }
}

/// 1x1 conv block to `floor(p * C)` maps, then 2x2 average pooling with stride 2.
#[derive(Debug, Clone)]
pub struct Dtb {
    pub in_channels: usize,
    pub block: ConvBlock,
}

impl Dtb {
    pub fn new(name: &str, in_channels: usize, cfg: &TransitionConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.reduced(in_channels);
        if out == 0 {
            return Err(Error::Config(format!("{name}: floor(p*C) = 0 for p={}, C={in_channels}", cfg.reduce_rate)));
        }
        Ok(Self { in_channels, block: ConvBlock::new(&format!("{name}.reduce"), in_channels, out, 1, 1) })
    }

    pub fn out_channels(&self) -> usize {
        self.block.conv.out_channels
    }

    pub fn num_params(&self) -> usize {
        self.block.num_params()
    }

    pub fn init(&self, w: &mut ModelWeights, rng: &mut impl Rng) {
        self.block.init(w, rng);
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_input(tape, x, self.in_channels, "DTB")?;
        let (_, _, h, w) = tape.value(x).dims4();
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("DTB: input {h}x{w} is too small to downsample")));
        }
        let y = self.block.forward(tape, x)?;
        Ok(tape.avg_pool2(y))
    }
}

/// 2x2 stride-2 transposed conv to `floor(p * C)` maps, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct Utb {
    pub in_channels: usize,
    pub up: ConvTranspose2x2,
    pub norm: BatchNorm2d,
}

impl Utb {
    pub fn new(name: &str, in_channels: usize, cfg: &TransitionConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.reduced(in_channels);
        if out == 0 {
            return Err(Error::Config(format!("{name}: floor(p*C) = 0 for p={}, C={in_channels}", cfg.reduce_rate)));
        }
        Ok(Self {
            in_channels,
            up: ConvTranspose2x2::new(format!("{name}.up"), in_channels, out),
            norm: BatchNorm2d::new(format!("{name}.norm"), out),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.up.out_channels
    }

    pub fn num_params(&self) -> usize {
        self.up.num_params() + self.norm.num_params()
    }

    pub fn init(&self, w: &mut ModelWeights, rng: &mut impl Rng) {
        self.up.init(w, rng);
        self.norm.init(w);
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_input(tape, x, self.in_channels, "UTB")?;
        let y = self.up.forward(tape, x)?;
        let y = self.norm.forward(tape, y)?;
        Ok(tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::NormMode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn msb_cfg(f: usize) -> MsbConfig {
        MsbConfig { channels: f, kernels: [3, 3, 5, 7], dilations: [1, 4, 6, 8] }
    }

    #[test]
    fn receptive_fields_of_pinned_configs() {
        assert_eq!(msb_cfg(8).receptive_fields(), [3, 9, 25, 49]);
        let deep = MsbConfig { channels: 8, kernels: [3, 5, 3, 3], dilations: [1, 1, 4, 6] };
        assert_eq!(deep.receptive_fields(), [3, 5, 9, 13]);
        assert_eq!(receptive_field(7, 8), 49);
        assert_eq!(receptive_field(3, 1), 3);
        assert_eq!(receptive_field(3, 6), 13);
    }

    #[test]
    fn msb_preserves_shape() {
        let msb = Msb::standalone("m", 16, &msb_cfg(8)).unwrap();
        let mut w = ModelWeights::default();
        msb.init(&mut w, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new(&w, NormMode::Batch);
        let x = tape.input(Tensor::full(&[1, 16, 64, 64], 0.5));
        let y = msb.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8, 64, 64]);
    }

    #[test]
    fn msb_rejects_bad_inputs() {
        assert!(Msb::standalone("m", 0, &msb_cfg(4)).is_err());
        let bad = MsbConfig { channels: 4, kernels: [3, 4, 5, 7], dilations: [1, 1, 1, 1] };
        assert!(Msb::standalone("m", 2, &bad).is_err());
        let msb = Msb::standalone("m", 2, &msb_cfg(2)).unwrap();
        let mut w = ModelWeights::default();
        msb.init(&mut w, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new(&w, NormMode::Running);
        let x = tape.input(Tensor::zeros(&[1, 2, 0, 4]));
        assert!(msb.forward(&mut tape, x).is_err());
    }

    #[test]
    fn msdu_channel_arithmetic_and_dense_carry() {
        let cfg = MsduConfig {
            growth_rate: 12,
            branch_channels: 4,
            kernels: [3, 3, 5, 7],
            dilations: [1, 4, 6, 8],
            repetitions: 4,
        };
        let msdu = Msdu::new("u", 32, &cfg).unwrap();
        assert_eq!(msdu.out_channels(), 80);
        let mut w = ModelWeights::default();
        msdu.init(&mut w, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data: Vec<f64> = (0..32 * 16 * 16).map(|_| rng.random::<f64>()).collect();
        // plane 5 is a constant coordinate-like plane
        data[5 * 256..6 * 256].fill(0.25);
        let input = Tensor::from_vec(&[1, 32, 16, 16], data).unwrap();
        let mut tape = Tape::new(&w, NormMode::Running);
        let x = tape.input(input.clone());
        let y = msdu.forward(&mut tape, x).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 80, 16, 16]);
        assert_eq!(out.channels(0, 32), input);
        assert!(out.channels(5, 1).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn msdu_rejects_zero_repetitions() {
        let cfg = MsduConfig { growth_rate: 2, branch_channels: 2, kernels: [3; 4], dilations: [1; 4], repetitions: 0 };
        assert!(Msdu::new("u", 4, &cfg).is_err());
    }

    #[test]
    fn transition_shapes() {
        let mut w = ModelWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dtb = Dtb::new("d", 64, &TransitionConfig { reduce_rate: 0.5 }).unwrap();
        dtb.init(&mut w, &mut rng);
        let dtb2 = Dtb::new("d2", 80, &TransitionConfig { reduce_rate: 0.25 }).unwrap();
        dtb2.init(&mut w, &mut rng);
        let utb = Utb::new("u", 128, &TransitionConfig { reduce_rate: 0.5 }).unwrap();
        utb.init(&mut w, &mut rng);
        let mut tape = Tape::new(&w, NormMode::Running);
        let x = tape.input(Tensor::zeros(&[1, 64, 32, 32]));
        let y = dtb.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 32, 16, 16]);
        let x = tape.input(Tensor::zeros(&[1, 80, 64, 64]));
        let y = dtb2.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 20, 32, 32]);
        let x = tape.input(Tensor::zeros(&[1, 128, 32, 32]));
        let y = utb.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 64, 64, 64]);
        assert!(Dtb::new("z", 1, &TransitionConfig { reduce_rate: 0.5 }).is_err());
        assert!(Utb::new("z", 3, &TransitionConfig { reduce_rate: 0.2 }).is_err());
        assert!(TransitionConfig { reduce_rate: 1.0 }.validate().is_err());
    }
}
