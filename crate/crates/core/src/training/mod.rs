//! SWA training: cyclic learning rate, SGD with momentum, snapshot
//! averaging, normalization recalibration and paired augmentation.

mod augment;
mod schedule;
mod swa;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig, AugmentPlan};
pub use schedule::{cyclic_lr, SwaSchedule};
pub use swa::{recalibrate_norm_stats, swa_average, SwaAccumulator};

use crate::autograd::{NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::groundtruth::{build_instance_input, detection_gt, positional_gt, PositionalTensor};
use crate::layers::BatchNorm2d;
use crate::losses::{masked_smooth_l1_grad_scaled, masked_smooth_l1_sum, mse, mse_grad, smooth_jaccard, smooth_jaccard_grad};
use crate::maps::InstanceLabelMap;
use crate::networks::{HeadKind, SpaNet};
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: SwaSchedule,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Detection target profile.
    pub det_beta: f64,
    pub det_radius: f64,
}

impl TrainConfig {
    pub fn segdet_default() -> Self {
        Self {
            patch_size: 256,
            batch_size: 2,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: SwaSchedule::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            det_beta: crate::groundtruth::DEFAULT_BETA,
            det_radius: crate::groundtruth::DEFAULT_RADIUS,
        }
    }

    pub fn instance_default() -> Self {
        Self { batch_size: 4, ..Self::segdet_default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(8) {
            return Err(Error::Config(format!("patch size {} is not a positive multiple of 8", self.patch_size)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu v + (g + wd w)`, `w -= lr v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, weights: &mut ModelWeights, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, w) in weights.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape()));
            for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * wi;
            }
            w.axpy(-lr, v);
        }
    }
}

/// Mean of each named loss over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: Vec<(String, f64)>,
}

impl EpochLog {
    pub fn loss(&self, name: &str) -> Option<f64> {
        self.losses.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} lr={:e}", self.epoch, self.lr)?;
        for (name, v) in &self.losses {
            write!(f, " {name}={v:.6}")?;
        }
        Ok(())
    }
}

pub enum TrainEvent<'a> {
    Epoch(&'a EpochLog),
    /// Weights at the end of a cycle, before averaging.
    Snapshot(&'a ModelWeights),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Averaged, recalibrated weights.
    pub weights: ModelWeights,
    pub log: Vec<EpochLog>,
    pub snapshots: usize,
}

/// RGB patch with its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    /// `[3, h, w]`
    pub rgb: Tensor,
    pub instances: InstanceLabelMap,
}

/// A patch ready for the embedding network: RGB, the mask predicted by the
/// segmentation network, and the instances.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceItem {
    pub rgb: Tensor,
    /// `[1, h, w]`
    pub seg: Tensor,
    pub instances: InstanceLabelMap,
}

fn check_items<'a>(shapes: impl Iterator<Item = (&'a [usize], (usize, usize))>, patch: usize) -> Result<usize> {
    let mut n = 0;
    for (i, (shape, dims)) in shapes.enumerate() {
        if shape != [3, patch, patch] || dims != (patch, patch) {
            return Err(Error::data(
                format!("patch {i}"),
                format!("expected {patch}x{patch} RGB with matching instances, got {shape:?} / {dims:?}"),
            ));
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    Ok(n)
}

struct StepLosses {
    seeds: Vec<(Var, Tensor)>,
    values: Vec<(&'static str, f64)>,
}

/// Shared epoch loop. `make_batch` builds (input, targets) from item indices,
/// drawing augmentation from the rng; `losses` turns network outputs into
/// gradient seeds and named loss values.
fn run<T>(
    net: &SpaNet,
    cfg: &TrainConfig,
    n_items: usize,
    make_batch: impl Fn(&[usize], &mut ChaCha8Rng) -> Result<(Tensor, T)>,
    losses: impl Fn(&Tape, &[Var], &T) -> Result<StepLosses>,
    recalibration: &[Tensor],
    observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sched = cfg.schedule;
    let mut weights = net.init_weights(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut acc = SwaAccumulator::default();
    let mut log = Vec::with_capacity(sched.total_epochs);
    let mut order: Vec<usize> = (0..n_items).collect();
    for epoch in 1..=sched.total_epochs {
        let lr = cyclic_lr(epoch, &sched);
        order.shuffle(&mut rng);
        let mut sums: Vec<(&'static str, f64)> = Vec::new();
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (input, targets) = make_batch(idx, &mut rng)?;
            let mut tape = Tape::new(&weights, NormMode::Batch);
            let x = tape.input(input);
            let out = net.forward(&mut tape, x)?;
            let step = losses(&tape, &out.heads, &targets)?;
            let total: f64 = step.values.iter().map(|(_, v)| v).sum();
            if !total.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}")));
            }
            let grads = tape.backward(step.seeds)?;
            if grads.params.values().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch}")));
            }
            let stats = tape.into_batch_stats();
            sgd.step(&mut weights, &grads.params, lr);
            weights.apply_momentum_stats(&stats, BatchNorm2d::MOMENTUM);
            if sums.is_empty() {
                sums = step.values.iter().map(|&(n, _)| (n, 0.0)).collect();
                sums.push(("total", 0.0));
            }
            for (s, (_, v)) in sums.iter_mut().zip(&step.values) {
                s.1 += v;
            }
            sums.last_mut().expect("total slot").1 += total;
            batches += 1;
        }
        let entry = EpochLog {
            epoch,
            lr,
            losses: sums.into_iter().map(|(n, s)| (n.to_string(), s / batches as f64)).collect(),
        };
        log::info!("{entry}");
        observer(TrainEvent::Epoch(&entry))?;
        log.push(entry);
        if sched.is_cycle_end(epoch) {
            weights.meta.epoch = epoch;
            weights.meta.cycle = epoch / sched.cycle_len;
            observer(TrainEvent::Snapshot(&weights))?;
            acc.add(&weights)?;
        }
    }
    let mut avg = acc.average()?;
    avg.meta.epoch = sched.total_epochs;
    let weights = recalibrate_norm_stats(net, &avg, recalibration)?;
    Ok(TrainOutcome { weights, log, snapshots: acc.count() })
}

fn batched(inputs: Vec<Tensor>, batch_size: usize) -> Result<Vec<Tensor>> {
    inputs
        .chunks(batch_size)
        .map(|c| Tensor::stack(&c.iter().collect::<Vec<_>>()))
        .collect()
}

fn plane_of(t: &Tensor, b: usize) -> &[f64] {
    let (_, c, h, w) = t.dims4();
    &t.data()[b * c * h * w..(b + 1) * c * h * w]
}

struct SegDetTargets {
    masks: Vec<Vec<f64>>,
    dets: Vec<Vec<f64>>,
}

/// Train the dual-head network on `(rgb, instances)` patches. Loss per
/// sample is smooth Jaccard on the mask plus MSE on the detection map,
/// averaged over the batch.
pub fn train_segdet(
    net: &SpaNet,
    items: &[TrainItem],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    if net.config().heads != HeadKind::Dual || net.config().in_channels != 3 {
        return Err(Error::Config("segmentation stage needs a dual-head RGB network".into()));
    }
    let n = check_items(items.iter().map(|it| (it.rgb.shape(), it.instances.dims())), cfg.patch_size)?;
    let make_batch = |idx: &[usize], rng: &mut ChaCha8Rng| -> Result<(Tensor, SegDetTargets)> {
        let mut inputs = Vec::with_capacity(idx.len());
        let mut masks = Vec::with_capacity(idx.len());
        let mut dets = Vec::with_capacity(idx.len());
        for &i in idx {
            let (rgb, inst) = augment(&items[i].rgb, &items[i].instances, rng, &cfg.augment);
            masks.push(inst.data().iter().map(|&v| f64::from(u8::from(v > 0))).collect());
            dets.push(detection_gt(&inst, cfg.det_beta, cfg.det_radius)?.0.into_data());
            inputs.push(rgb);
        }
        let input = Tensor::stack(&inputs.iter().collect::<Vec<_>>())?;
        Ok((input, SegDetTargets { masks, dets }))
    };
    let losses = |tape: &Tape, heads: &[Var], t: &SegDetTargets| -> Result<StepLosses> {
        let (seg, det) = (tape.value(heads[0]), tape.value(heads[1]));
        let nb = t.masks.len();
        let inv = 1.0 / nb as f64;
        let mut seg_grad = Vec::with_capacity(seg.len());
        let mut det_grad = Vec::with_capacity(det.len());
        let (mut jac, mut sq) = (0.0, 0.0);
        for b in 0..nb {
            let (sp, dp) = (plane_of(seg, b), plane_of(det, b));
            jac += smooth_jaccard(sp, &t.masks[b])?.value * inv;
            sq += mse(dp, &t.dets[b])?.value * inv;
            seg_grad.extend(smooth_jaccard_grad(sp, &t.masks[b])?.into_iter().map(|g| g * inv));
            det_grad.extend(mse_grad(dp, &t.dets[b])?.into_iter().map(|g| g * inv));
        }
        Ok(StepLosses {
            seeds: vec![
                (heads[0], Tensor::from_vec(seg.shape(), seg_grad)?),
                (heads[1], Tensor::from_vec(det.shape(), det_grad)?),
            ],
            values: vec![("seg_jaccard", jac), ("det_mse", sq)],
        })
    };
    let recal = batched(items.iter().map(|it| it.rgb.clone()).collect(), cfg.batch_size)?;
    run(net, cfg, n, make_batch, losses, &recal, observer)
}

/// Mask predictions of a trained dual-head network for a set of patches.
pub fn predict_masks(net: &SpaNet, weights: &ModelWeights, items: &[TrainItem], batch_size: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let input = Tensor::stack(&chunk.iter().map(|it| &it.rgb).collect::<Vec<_>>())?;
        let heads = net.predict(weights, &input)?;
        for b in 0..chunk.len() {
            out.push(heads[0].item(b));
        }
    }
    Ok(out)
}

/// Train the single-head embedding network. The mask channel of each input
/// is the segmentation network's prediction, transformed together with the
/// RGB patch by the geometric augmentations.
pub fn train_instance(
    net: &SpaNet,
    items: &[InstanceItem],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    if net.config().heads != HeadKind::Single || net.config().in_channels != 9 || net.config().out_channels != 6 {
        return Err(Error::Config("instance stage needs a single-head 9-in 6-out network".into()));
    }
    let n = check_items(items.iter().map(|it| (it.rgb.shape(), it.instances.dims())), cfg.patch_size)?;
    for (i, it) in items.iter().enumerate() {
        if it.seg.shape() != [1, cfg.patch_size, cfg.patch_size] {
            return Err(Error::data(format!("patch {i}"), format!("mask prediction shape {:?}", it.seg.shape())));
        }
    }
    let make_batch = |idx: &[usize], rng: &mut ChaCha8Rng| -> Result<(Tensor, Vec<PositionalTensor>)> {
        let mut inputs = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            let plan = AugmentPlan::draw(&cfg.augment, rng);
            let rgb = plan.apply_photometric(&plan.apply_geometric(&items[i].rgb));
            let seg = plan.apply_geometric(&items[i].seg);
            let inst = plan.apply_labels(&items[i].instances);
            inputs.push(build_instance_input(&rgb, &seg)?);
            targets.push(positional_gt(&inst));
        }
        Ok((Tensor::stack(&inputs.iter().collect::<Vec<_>>())?, targets))
    };
    let losses = |tape: &Tape, heads: &[Var], targets: &Vec<PositionalTensor>| -> Result<StepLosses> {
        let pred = tape.value(heads[0]);
        let preds: Vec<Tensor> = (0..targets.len()).map(|b| pred.item(b)).collect();
        let mut sum = 0.0;
        let mut count = 0;
        for (p, t) in preds.iter().zip(targets) {
            let (s, c) = masked_smooth_l1_sum(p, t)?;
            sum += s;
            count += c;
        }
        let scale = if count > 0 { 1.0 / (6 * count) as f64 } else { 0.0 };
        let mut grad = Vec::with_capacity(pred.len());
        for (p, t) in preds.iter().zip(targets) {
            grad.extend(masked_smooth_l1_grad_scaled(p, t, scale)?.into_data());
        }
        Ok(StepLosses {
            seeds: vec![(heads[0], Tensor::from_vec(pred.shape(), grad)?)],
            values: vec![("embedding_l1", sum * scale)],
        })
    };
    let recal = batched(
        items.iter().map(|it| build_instance_input(&it.rgb, &it.seg)).collect::<Result<Vec<_>>>()?,
        cfg.batch_size,
    )?;
    run(net, cfg, n, make_batch, losses, &recal, observer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_matches_hand_update() {
        let mut w = ModelWeights::default();
        w.params.insert("p".into(), Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::from_vec(&[2], vec![0.5, 0.25]).unwrap());
        let mut sgd = Sgd::new(0.9, 0.1);
        sgd.step(&mut w, &g, 0.1);
        // v = g + 0.1 w = [0.6, 0.05]
        assert!((w.params["p"].data()[0] - 0.94).abs() < 1e-15);
        assert!((w.params["p"].data()[1] + 2.005).abs() < 1e-15);
        sgd.step(&mut w, &g, 0.1);
        // v = 0.9 [0.6, 0.05] + [0.5, 0.25] + 0.1 [0.94, -2.005]
        let v0 = 0.54 + 0.5 + 0.094;
        assert!((w.params["p"].data()[0] - (0.94 - 0.1 * v0)).abs() < 1e-15);
    }

    #[test]
    fn defaults_follow_the_regime() {
        assert_eq!(TrainConfig::segdet_default().batch_size, 2);
        assert_eq!(TrainConfig::instance_default().batch_size, 4);
        assert!(TrainConfig { patch_size: 100, ..TrainConfig::segdet_default() }.validate().is_err());
    }

    #[test]
    fn log_line_format() {
        let l = EpochLog { epoch: 3, lr: 0.5, losses: vec![("a".into(), 0.25)] };
        assert_eq!(l.to_string(), "epoch=3 lr=5e-1 a=0.250000");
    }
}
