//! Aggregated Jaccard Index and IoU-matched instance F1, with a per-image
//! report.
//!
//! Report text format (percentages, two decimals):
//!
//! ```text
//! # spanet-metrics-v1
//! id,aji,f1,precision,recall
//! img_000,71.23,88.89,88.89,88.89
//! mean,71.23,88.89,88.89,88.89
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::InstanceLabelMap;

pub const REPORT_FORMAT: &str = "# spanet-metrics-v1";
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Pixel overlap tables of two label maps.
struct Overlap {
    gt_area: BTreeMap<u32, usize>,
    pred_area: BTreeMap<u32, usize>,
    inter: BTreeMap<(u32, u32), usize>,
}

impl Overlap {
    fn new(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<Self> {
        if gt.dims() != pred.dims() {
            return Err(Error::Shape(format!("ground truth is {:?} but prediction is {:?}", gt.dims(), pred.dims())));
        }
        let mut o = Overlap { gt_area: BTreeMap::new(), pred_area: BTreeMap::new(), inter: BTreeMap::new() };
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g != 0 {
                *o.gt_area.entry(g).or_default() += 1;
            }
            if p != 0 {
                *o.pred_area.entry(p).or_default() += 1;
            }
            if g != 0 && p != 0 {
                *o.inter.entry((g, p)).or_default() += 1;
            }
        }
        Ok(o)
    }

    fn union(&self, g: u32, p: u32, i: usize) -> usize {
        self.gt_area[&g] + self.pred_area[&p] - i
    }
}

/// AJI: every ground-truth instance is paired with the prediction of highest
/// Jaccard (lowest id on ties); unused predictions join the union.
pub fn aji(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<f64> {
    let o = Overlap::new(gt, pred)?;
    if o.gt_area.is_empty() && o.pred_area.is_empty() {
        return Ok(1.0);
    }
    let mut best: BTreeMap<u32, (u32, usize, usize)> = BTreeMap::new();
    for (&(g, p), &i) in &o.inter {
        let u = o.union(g, p, i);
        match best.get(&g) {
            // i/u > bi/bu, compared exactly; pred ids arrive ascending so ties keep the lower id
            Some(&(_, bi, bu)) if (i as u128) * (bu as u128) <= (bi as u128) * (u as u128) => {}
            _ => {
                best.insert(g, (p, i, u));
            }
        }
    }
    let (mut c, mut u) = (0usize, 0usize);
    let mut used = std::collections::BTreeSet::new();
    for (&g, &area) in &o.gt_area {
        match best.get(&g) {
            Some(&(p, bi, bu)) => {
                c += bi;
                u += bu;
                used.insert(p);
            }
            None => u += area,
        }
    }
    u += o.pred_area.iter().filter(|(p, _)| !used.contains(*p)).map(|(_, a)| a).sum::<usize>();
    Ok(c as f64 / u as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Greedy one-to-one matching by descending IoU; a pair matches iff IoU > threshold.
pub fn f1_instances(gt: &InstanceLabelMap, pred: &InstanceLabelMap, iou_threshold: f64) -> Result<F1Score> {
    let o = Overlap::new(gt, pred)?;
    let (ng, np) = (o.gt_area.len(), o.pred_area.len());
    if ng == 0 && np == 0 {
        return Ok(F1Score { f1: 1.0, precision: 1.0, recall: 1.0 });
    }
    let mut pairs: Vec<(f64, u32, u32)> = o
        .inter
        .iter()
        .map(|(&(g, p), &i)| (i as f64 / o.union(g, p, i) as f64, g, p))
        .filter(|&(iou, _, _)| iou > iou_threshold)
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = std::collections::BTreeSet::new();
    let mut pred_used = std::collections::BTreeSet::new();
    for (_, g, p) in pairs {
        if !gt_used.contains(&g) && !pred_used.contains(&p) {
            gt_used.insert(g);
            pred_used.insert(p);
        }
    }
    let tp = gt_used.len();
    let (fp, fn_) = (np - tp, ng - tp);
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(F1Score { f1: ratio(2 * tp, 2 * tp + fp + fn_), precision: ratio(tp, tp + fp), recall: ratio(tp, tp + fn_) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub aji: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    /// Arithmetic means over images, id `mean`.
    pub aggregate: ImageMetrics,
}

pub fn evaluate(pairs: &[(String, InstanceLabelMap, InstanceLabelMap)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let per_image = pairs
        .iter()
        .map(|(id, gt, pred)| {
            let f = f1_instances(gt, pred, DEFAULT_IOU_THRESHOLD)?;
            Ok(ImageMetrics { id: id.clone(), aji: aji(gt, pred)?, f1: f.f1, precision: f.precision, recall: f.recall })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let aggregate = ImageMetrics {
        id: "mean".into(),
        aji: mean(|m| m.aji),
        f1: mean(|m| m.f1),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
    };
    Ok(MetricsReport { per_image, aggregate })
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{REPORT_FORMAT}\nid,aji,f1,precision,recall\n");
        for m in self.per_image.iter().chain(std::iter::once(&self.aggregate)) {
            writeln!(
                s,
                "{},{:.2},{:.2},{:.2},{:.2}",
                m.id,
                100.0 * m.aji,
                100.0 * m.f1,
                100.0 * m.precision,
                100.0 * m.recall
            )
            .expect("writing to a string");
        }
        s
    }

    /// Parse the text form; values come back as fractions rounded to the printed precision.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_FORMAT) || lines.next() != Some("id,aji,f1,precision,recall") {
            return Err(Error::Config("not a metrics report".into()));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Config(format!("malformed report row `{line}`")));
            }
            let v = |i: usize| -> Result<f64> {
                f[i].parse::<f64>().map(|x| x / 100.0).map_err(|_| Error::Config(format!("bad number in `{line}`")))
            };
            rows.push(ImageMetrics { id: f[0].to_string(), aji: v(1)?, f1: v(2)?, precision: v(3)?, recall: v(4)? });
        }
        let aggregate = rows.pop().filter(|r| r.id == "mean").ok_or_else(|| Error::Config("report lacks a mean row".into()))?;
        Ok(Self { per_image: rows, aggregate })
    }
}
