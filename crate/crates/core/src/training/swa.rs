use crate::autograd::{NormMode, Tape};
use crate::error::{Error, Result};
use crate::networks::SpaNet;
use crate::tensor::Tensor;
use crate::weights::{running_mean_key, running_var_key, BatchStats, ModelWeights};

/// Running sum of weight snapshots.
#[derive(Debug, Default)]
pub struct SwaAccumulator {
    sum: Option<ModelWeights>,
    count: usize,
}

impl SwaAccumulator {
    pub fn add(&mut self, snapshot: &ModelWeights) -> Result<()> {
        match &mut self.sum {
            None => self.sum = Some(snapshot.clone()),
            Some(sum) => {
                if sum.meta.config_hash != snapshot.meta.config_hash || !sum.same_layout(snapshot) {
                    return Err(Error::Config("snapshots come from different network configs".into()));
                }
                sum.add_params(snapshot)?;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Element-wise mean of the parameters. Normalization buffers are carried
    /// from the first snapshot and must be recalibrated.
    pub fn average(&self) -> Result<ModelWeights> {
        let mut avg = self.sum.clone().ok_or_else(|| Error::InvalidArgument("no snapshots to average".into()))?;
        if self.count > 1 {
            avg.scale_params(1.0 / self.count as f64);
        }
        avg.meta.cycle = 0;
        Ok(avg)
    }
}

pub fn swa_average(snapshots: &[ModelWeights]) -> Result<ModelWeights> {
    let mut acc = SwaAccumulator::default();
    for s in snapshots {
        acc.add(s)?;
    }
    let mut avg = acc.average()?;
    if let Some(last) = snapshots.last() {
        avg.meta.epoch = last.meta.epoch;
    }
    Ok(avg)
}

/// Recompute normalization statistics with one sweep over `batches`
/// (equal-weight average of per-batch moments). Parameters are untouched.
pub fn recalibrate_norm_stats(net: &SpaNet, weights: &ModelWeights, batches: &[Tensor]) -> Result<ModelWeights> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("recalibration needs at least one batch".into()));
    }
    let mut totals: Vec<BatchStats> = Vec::new();
    for batch in batches {
        let mut tape = Tape::new(weights, NormMode::Batch);
        let x = tape.input(batch.clone());
        net.forward(&mut tape, x)?;
        let stats = tape.into_batch_stats();
        if totals.is_empty() {
            totals = stats
                .iter()
                .map(|s| BatchStats { prefix: s.prefix.clone(), mean: vec![0.0; s.mean.len()], var: vec![0.0; s.var.len()], count: 0 })
                .collect();
        }
        for (t, s) in totals.iter_mut().zip(&stats) {
            let unbiased = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            t.mean.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b);
            t.var.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b * unbiased);
        }
    }
    let n = batches.len() as f64;
    let mut out = weights.clone();
    for t in totals {
        let c = t.mean.len();
        out.buffers.insert(running_mean_key(&t.prefix), Tensor::from_vec(&[c], t.mean.iter().map(|m| m / n).collect())?);
        out.buffers.insert(running_var_key(&t.prefix), Tensor::from_vec(&[c], t.var.iter().map(|v| v / n).collect())?);
    }
    Ok(out)
}
