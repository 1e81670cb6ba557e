//! Central finite-difference checks of the tape's analytic gradients.
//!
//! The checked objective is `sum(output * r)` for a fixed random tensor `r`,
//! so every output element contributes with a distinct weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NormMode, Tape, Var};
use crate::blocks::{Dtb, Msb, MsbConfig, Msdu, MsduConfig, TransitionConfig, Utb};
use crate::groundtruth::positional_gt;
use crate::losses::{mse, mse_grad, masked_smooth_l1, masked_smooth_l1_grad, smooth_jaccard, smooth_jaccard_grad};
use crate::maps::InstanceLabelMap;
use crate::weights::ModelWeights;
use crate::{Result, Tensor};

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Name of the worst element: `input[i]` or `<param>[i]`.
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = rel_err(analytic, numeric);
        if err > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = err;
            self.worst = name();
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Compare analytic and numeric gradients of `f` with respect to every input
/// element and every parameter element in `weights`.
pub fn check_gradients<F>(weights: &ModelWeights, input: &Tensor, mode: NormMode, step: f64, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let objective = |w: &ModelWeights, x: &Tensor, r: &Tensor| -> Result<f64> {
        let mut tape = Tape::new(w, mode);
        let v = tape.input(x.clone());
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).dot(r))
    };
    let mut tape = Tape::new(weights, mode);
    let xv = tape.input_tracked(input.clone());
    let y = f(&mut tape, xv)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = tape.value(y).shape().to_vec();
    let r = Tensor::from_vec(&out_shape, (0..out_shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let grads = tape.backward(vec![(y, r.clone())])?;

    let mut report = GradReport::default();
    let gin = grads.inputs.get(&xv).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let up = objective(weights, &x, &r)?;
        x.data_mut()[i] = orig - step;
        let down = objective(weights, &x, &r)?;
        x.data_mut()[i] = orig;
        report.record(|| format!("input[{i}]"), gin.data()[i], (up - down) / (2.0 * step));
    }

    let mut w = weights.clone();
    for (name, p) in &weights.params {
        let g = grads.params.get(name).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
        for i in 0..p.len() {
            let slot = |w: &mut ModelWeights, v: f64| w.params.get_mut(name).expect("same layout").data_mut()[i] = v;
            let orig = p.data()[i];
            slot(&mut w, orig + step);
            let up = objective(&w, input, &r)?;
            slot(&mut w, orig - step);
            let down = objective(&w, input, &r)?;
            slot(&mut w, orig);
            report.record(|| format!("{name}[{i}]"), g.data()[i], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Numeric gradient of a scalar function of a slice, by central differences.
pub fn numeric_grad(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sizes agree")
}

/// Move every parameter and running statistic off its initial value.
/// Zero-initialized biases would otherwise put some activations exactly on
/// the rectifier's kink, where the derivative is undefined.
pub fn jitter_weights(w: &mut ModelWeights, rng: &mut ChaCha8Rng) {
    for t in w.params.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    for (name, t) in w.buffers.iter_mut() {
        let var = name.ends_with("var");
        t.data_mut().iter_mut().for_each(|v| *v = if var { rng.random_range(0.5..1.5) } else { rng.random_range(-0.2..0.2) });
    }
}

/// Gradient checks of MSB, MSDU, DTB and UTB on small random inputs
/// (at most 8x8 spatially), one report per block.
pub fn block_suite(mode: NormMode, step: f64, seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let msb_cfg = MsbConfig { channels: 2, kernels: [3, 3, 5, 7], dilations: [1, 2, 2, 1] };
    let msdu_cfg =
        MsduConfig { growth_rate: 2, branch_channels: 2, kernels: [3, 3, 3, 5], dilations: [1, 2, 1, 1], repetitions: 2 };
    let tr = TransitionConfig { reduce_rate: 0.5 };
    let mut out = Vec::new();

    let msb = Msb::standalone("msb", 2, &msb_cfg)?;
    let mut w = ModelWeights::default();
    msb.init(&mut w, &mut rng);
    jitter_weights(&mut w, &mut rng);
    let x = random_tensor(&[2, 2, 6, 6], &mut rng);
    out.push(("msb", check_gradients(&w, &x, mode, step, seed, |t, v| msb.forward(t, v))?));

    let msdu = Msdu::new("msdu", 3, &msdu_cfg)?;
    let mut w = ModelWeights::default();
    msdu.init(&mut w, &mut rng);
    jitter_weights(&mut w, &mut rng);
    let x = random_tensor(&[2, 3, 6, 6], &mut rng);
    out.push(("msdu", check_gradients(&w, &x, mode, step, seed, |t, v| msdu.forward(t, v))?));

    let dtb = Dtb::new("dtb", 4, &tr)?;
    let mut w = ModelWeights::default();
    dtb.init(&mut w, &mut rng);
    jitter_weights(&mut w, &mut rng);
    let x = random_tensor(&[2, 4, 8, 8], &mut rng);
    out.push(("dtb", check_gradients(&w, &x, mode, step, seed, |t, v| dtb.forward(t, v))?));

    let utb = Utb::new("utb", 4, &tr)?;
    let mut w = ModelWeights::default();
    utb.init(&mut w, &mut rng);
    jitter_weights(&mut w, &mut rng);
    let x = random_tensor(&[2, 4, 4, 4], &mut rng);
    out.push(("utb", check_gradients(&w, &x, mode, step, seed, |t, v| utb.forward(t, v))?));
    Ok(out)
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Gradient checks of the three losses on random 8x8 inputs; returns the
/// worst relative error per loss.
pub fn loss_suite(step: f64, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 64;
    let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let target: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
    let jac = max_rel(
        &smooth_jaccard_grad(&pred, &target)?,
        &numeric_grad(&pred, step, |p| smooth_jaccard(p, &target).map_or(f64::NAN, |l| l.value)),
    );
    let soft: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let sq = max_rel(&mse_grad(&pred, &soft)?, &numeric_grad(&pred, step, |p| mse(p, &soft).map_or(f64::NAN, |l| l.value)));

    let ids: Vec<u32> = (0..n).map(|i| if (i / 8) % 4 == 0 { 0 } else { 1 + (i % 8 / 3) as u32 }).collect();
    let target = positional_gt(&InstanceLabelMap::from_vec(8, 8, ids)?);
    // mix of quadratic and linear huber branches, none near the knee
    let emb: Vec<f64> = (0..6 * n)
        .map(|i| {
            let t = target.values.data()[i];
            let e: f64 = rng.random_range(0.05..0.8) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            if i % 5 == 0 { t + 1.5 * e.signum() + e * 0.1 } else { t + e }
        })
        .collect();
    let pred_t = Tensor::from_vec(&[6, 8, 8], emb.clone())?;
    let l1 = max_rel(
        masked_smooth_l1_grad(&pred_t, &target)?.data(),
        &numeric_grad(&emb, step, |p| {
            let t = Tensor::from_vec(&[6, 8, 8], p.to_vec()).expect("sizes agree");
            masked_smooth_l1(&t, &target).map_or(f64::NAN, |l| l.value)
        }),
    );
    Ok(vec![("smooth_jaccard", jac), ("mse", sq), ("masked_smooth_l1", l1)])
}
