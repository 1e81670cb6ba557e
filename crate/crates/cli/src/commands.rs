use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spanet::data::{
    extract_patches, generate_synthetic, load_dataset, png_ids, read_instance_map, read_rgb, write_gray,
    write_instance_map, write_meta, write_sample, MetaRow,
};
use spanet::groundtruth::build_instance_input;
use spanet::metrics::{evaluate, MetricsReport};
use spanet::networks::{build_dual_head, build_spanet, HeadKind, NetworkConfig, SpaNet};
use spanet::postproc::instance_segment;
use spanet::training::{predict_masks, train_instance, train_segdet, InstanceItem, TrainEvent, TrainItem, TrainOutcome};
use spanet::weights::ModelWeights;
use spanet::Tensor;

use crate::artifacts::{create_dir, prepare_out_dir, write_embedding, write_overlay, write_text};
use crate::config::{RunConfig, Stage};
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG: &str = "train.log";
pub const SWA_CHECKPOINT: &str = "swa.ckpt";
pub const METRICS_FILE: &str = "metrics.txt";

pub fn cycle_checkpoint_name(cycle: usize) -> String {
    format!("cycle_{cycle:02}.ckpt")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    write_text(path, &(text + "\n"))
}

fn write_run_files(out: &Path, cfg: &RunConfig, manifest: &impl Serialize) -> Result<()> {
    write_text(&out.join(CONFIG_FILE), &cfg.canonical_text())?;
    write_json(&out.join(MANIFEST_FILE), manifest)
}

/// Per-tile generator seed, a splitmix64 step over (run seed, split, index).
pub fn tile_seed(seed: u64, split: u64, index: u64) -> u64 {
    let mut z = seed ^ split.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub format: &'static str,
    pub config_hash: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Nuclei that could not be placed, summed over all tiles.
    pub unplaced: usize,
}

/// Write `out/train` and `out/test` datasets of synthetic tiles.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<SynthSummary> {
    prepare_out_dir(out, force, &["train", "test", CONFIG_FILE, MANIFEST_FILE])?;
    let (n_train, n_test) = cfg.synth_counts()?;
    let mut summary = SynthSummary {
        format: "spanet-synth-v1",
        config_hash: cfg.hash(),
        train: Vec::new(),
        test: Vec::new(),
        unplaced: 0,
    };
    for (split, count, tag) in [("train", n_train, 0u64), ("test", n_test, 1u64)] {
        let dir = out.join(split);
        create_dir(&dir)?;
        let mut rows = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{split}_{i:03}");
            let (sample, report) = generate_synthetic(&cfg.synth(tile_seed(cfg.seed(), tag, i as u64))?, &id)?;
            summary.unplaced += report.requested - report.placed;
            write_sample(&sample, &dir)?;
            let split_name = if tag == 0 { "train" } else { "test_seen" };
            rows.push(MetaRow { id: id.clone(), organ: "synthetic".into(), split: split_name.into() });
            if tag == 0 { &mut summary.train } else { &mut summary.test }.push(id);
        }
        write_meta(&rows, &dir.join("meta.csv"))?;
    }
    write_run_files(out, cfg, &summary)?;
    log::info!("wrote {} train and {} test tiles to {}", n_train, n_test, out.display());
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub format: &'static str,
    pub stage: &'static str,
    pub config_hash: String,
    pub network_hash: String,
    pub patches: usize,
    pub epochs: usize,
    pub snapshots: usize,
    pub final_losses: Vec<(String, f64)>,
}

fn load_patches(cfg: &RunConfig, data: &Path) -> Result<Vec<TrainItem>> {
    let samples = load_dataset(data)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("no training samples under {}", data.display())));
    }
    let t = cfg.train(Stage::SegDet)?;
    let (stride, random_crops) = cfg.patch_stride()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let mut items = Vec::new();
    for s in &samples {
        for p in extract_patches(s, t.patch_size, stride, random_crops, &mut rng)? {
            items.push(TrainItem { rgb: p.image, instances: p.instances });
        }
    }
    Ok(items)
}

/// Load a checkpoint and rebuild its network, checking the head layout.
pub fn load_network(path: &Path, heads: HeadKind) -> Result<(SpaNet, ModelWeights)> {
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let (text, weights) = ModelWeights::load(path)?;
    let net_cfg = NetworkConfig::from_canonical_text(&text)?;
    let net = match heads {
        HeadKind::Dual => build_dual_head(&net_cfg),
        HeadKind::Single => build_spanet(&net_cfg),
    }
    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if weights.meta.config_hash != net_cfg.hash() || weights.num_params() != net.num_params() {
        return Err(CliError::Config(format!("{}: weights do not match the stored network config", path.display())));
    }
    Ok((net, weights))
}

/// Train one stage on the dataset at `data` (a directory with `images/` and `masks/`).
pub fn cmd_train(
    cfg: &RunConfig,
    stage: Stage,
    data: &Path,
    segdet_ckpt: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<TrainSummary> {
    let segdet = match (stage, segdet_ckpt) {
        (Stage::Instance, None) => {
            return Err(CliError::Config("the instance stage needs a trained segdet checkpoint (--segdet)".into()));
        }
        (Stage::Instance, Some(p)) => Some(load_network(p, HeadKind::Dual)?),
        (Stage::SegDet, _) => None,
    };
    let train_cfg = cfg.train(stage)?;
    let net_cfg = match stage {
        Stage::SegDet => cfg.segdet_net()?,
        Stage::Instance => cfg.instance_net()?,
    };
    let net = SpaNet::new(net_cfg.clone())?;
    let items = load_patches(cfg, data)?;
    let cycles = train_cfg.schedule.cycles();
    let owned = owned_train_files(cycles);
    prepare_out_dir(out, force, &owned.iter().map(String::as_str).collect::<Vec<_>>())?;
    let net_text = net_cfg.canonical_text();
    let log_path = out.join(TRAIN_LOG);
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut observer = |ev: TrainEvent<'_>| -> spanet::Result<()> {
        match ev {
            TrainEvent::Epoch(l) => writeln!(log_file, "{l}")
                .and_then(|_| log_file.flush())
                .map_err(|e| spanet::Error::Io { path: log_path.clone(), source: e }),
            TrainEvent::Snapshot(w) => w.save(&out.join(cycle_checkpoint_name(w.meta.cycle)), &net_text),
        }
    };
    log::info!("training {} on {} patches ({} parameters)", stage.as_str(), items.len(), net.num_params());
    let outcome: TrainOutcome = match segdet {
        None => train_segdet(&net, &items, &train_cfg, &mut observer)?,
        Some((seg_net, seg_weights)) => {
            let masks = predict_masks(&seg_net, &seg_weights, &items, train_cfg.batch_size)?;
            let inst: Vec<InstanceItem> = items
                .iter()
                .zip(masks)
                .map(|(it, seg)| InstanceItem { rgb: it.rgb.clone(), seg, instances: it.instances.clone() })
                .collect();
            train_instance(&net, &inst, &train_cfg, &mut observer)?
        }
    };
    outcome.weights.save(&out.join(SWA_CHECKPOINT), &net_text)?;
    let summary = TrainSummary {
        format: "spanet-train-v1",
        stage: stage.as_str(),
        config_hash: cfg.hash(),
        network_hash: net_cfg.hash(),
        patches: items.len(),
        epochs: outcome.log.len(),
        snapshots: outcome.snapshots,
        final_losses: outcome.log.last().map(|l| l.losses.clone()).unwrap_or_default(),
    };
    write_run_files(out, cfg, &summary)?;
    Ok(summary)
}

fn owned_train_files(cycles: usize) -> Vec<String> {
    let mut v: Vec<String> = [TRAIN_LOG, SWA_CHECKPOINT, CONFIG_FILE, MANIFEST_FILE].map(String::from).to_vec();
    v.extend((1..=cycles).map(cycle_checkpoint_name));
    v
}

/// Replicate the last row and column so both sides become multiples of `m`.
pub fn pad_to_multiple(t: &Tensor, m: usize) -> (Tensor, usize, usize) {
    let &[c, h, w] = t.shape() else { panic!("expected [c, h, w]") };
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return (t.clone(), 0, 0);
    }
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let row = &t.data()[ch * h * w + y.min(h - 1) * w..][..w];
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(row[w - 1], pw - w));
        }
    }
    (Tensor::from_vec(&[c, ph, pw], data).expect("sizes agree"), ph - h, pw - w)
}

/// Top-left `h x w` window of a `[c, H, W]` tensor.
pub fn crop_top_left(t: &Tensor, h: usize, w: usize) -> Tensor {
    let &[c, ph, pw] = t.shape() else { panic!("expected [c, h, w]") };
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            data.extend_from_slice(&t.data()[ch * ph * pw + y * pw..][..w]);
        }
    }
    Tensor::from_vec(&[c, h, w], data).expect("sizes agree")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferRecord {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferSummary {
    pub format: &'static str,
    pub config_hash: String,
    pub segdet_hash: String,
    pub instance_hash: String,
    pub images: Vec<InferRecord>,
}

/// Expand directories (or their `images/` subdirectory) into sorted PNG paths.
pub fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let dir = if p.join("images").is_dir() { p.join("images") } else { p.clone() };
            out.extend(png_ids(&dir)?.into_iter().map(|id| dir.join(format!("{id}.png"))));
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::Data(format!("input {} does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::Data("no input images".into()));
    }
    Ok(out)
}

pub const INFER_DIRS: [&str; 5] = ["instances", "seg", "det", "emb", "overlay"];

/// Segment every input image and write instance maps plus intermediate maps.
pub fn cmd_infer(
    cfg: &RunConfig,
    segdet_ckpt: &Path,
    instance_ckpt: &Path,
    inputs: &[PathBuf],
    out: &Path,
    force: bool,
) -> Result<InferSummary> {
    let (seg_net, seg_w) = load_network(segdet_ckpt, HeadKind::Dual)?;
    let (inst_net, inst_w) = load_network(instance_ckpt, HeadKind::Single)?;
    if inst_net.config().in_channels != 9 || inst_net.config().out_channels != 6 {
        return Err(CliError::Config(format!("{} is not an embedding network", instance_ckpt.display())));
    }
    let post = cfg.post()?;
    let images = collect_images(inputs)?;
    let mut owned: Vec<&str> = INFER_DIRS.to_vec();
    owned.extend([CONFIG_FILE, MANIFEST_FILE]);
    prepare_out_dir(out, force, &owned)?;
    for d in INFER_DIRS {
        create_dir(&out.join(d))?;
    }
    let multiple = seg_net.config().size_multiple().max(inst_net.config().size_multiple());
    let mut records = Vec::with_capacity(images.len());
    let mut seen = BTreeSet::new();
    for path in &images {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        if !seen.insert(id.clone()) {
            return Err(CliError::Data(format!("duplicate image id `{id}`")));
        }
        let rgb = read_rgb(path)?;
        let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
        let (padded, pad_bottom, pad_right) = pad_to_multiple(&rgb, multiple);
        let (ph, pw) = (h + pad_bottom, w + pad_right);
        let heads = seg_net.predict(&seg_w, &padded.clone().reshape(&[1, 3, ph, pw])?)?;
        let seg_full = heads[0].item(0);
        let inst_in = build_instance_input(&padded, &seg_full)?.reshape(&[1, 9, ph, pw])?;
        let emb_full = inst_net.predict(&inst_w, &inst_in)?[0].item(0);
        let seg = crop_top_left(&seg_full, h, w);
        let det = crop_top_left(&heads[1].item(0), h, w);
        let emb = crop_top_left(&emb_full, h, w);
        let instances = instance_segment(&seg, &det, &emb, &post)?;
        write_instance_map(&instances, &out.join("instances").join(format!("{id}.png")))?;
        write_gray(seg.data(), h, w, &out.join("seg").join(format!("{id}.png")))?;
        write_gray(det.data(), h, w, &out.join("det").join(format!("{id}.png")))?;
        write_embedding(&emb, &out.join("emb").join(format!("{id}.emb")))?;
        write_overlay(&rgb, &instances, &out.join("overlay").join(format!("{id}.png")))?;
        log::info!("{id}: {} instances", instances.instance_count());
        records.push(InferRecord { id, height: h, width: w, pad_bottom, pad_right, instances: instances.instance_count() });
    }
    let summary = InferSummary {
        format: "spanet-infer-v1",
        config_hash: cfg.hash(),
        segdet_hash: seg_w.meta.config_hash.clone(),
        instance_hash: inst_w.meta.config_hash.clone(),
        images: records,
    };
    write_run_files(out, cfg, &summary)?;
    Ok(summary)
}

fn label_dir(root: &Path, sub: &str) -> PathBuf {
    if root.join(sub).is_dir() {
        root.join(sub)
    } else {
        root.to_path_buf()
    }
}

/// Compare predicted instance maps against ground-truth masks with matching ids.
/// `pred` may be an inference output directory or its `instances/` folder;
/// `gt` may be a dataset directory or its `masks/` folder.
pub fn cmd_eval(pred: &Path, gt: &Path, out: Option<&Path>) -> Result<MetricsReport> {
    let pred_dir = label_dir(pred, "instances");
    let gt_dir = label_dir(gt, "masks");
    let pred_ids: BTreeSet<String> = png_ids(&pred_dir)?.into_iter().collect();
    let gt_ids: BTreeSet<String> = png_ids(&gt_dir)?.into_iter().collect();
    let missing: Vec<&String> = gt_ids.difference(&pred_ids).collect();
    let extra: Vec<&String> = pred_ids.difference(&gt_ids).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CliError::Data(format!("unmatched ids: no prediction for {missing:?}; no ground truth for {extra:?}")));
    }
    if gt_ids.is_empty() {
        return Err(CliError::Data(format!("no label maps in {}", gt_dir.display())));
    }
    let pairs = gt_ids
        .iter()
        .map(|id| {
            let file = format!("{id}.png");
            Ok((id.clone(), read_instance_map(&gt_dir.join(&file))?, read_instance_map(&pred_dir.join(&file))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&pairs)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join(METRICS_FILE), &report.to_text())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamsSummary {
    pub instance: usize,
    pub segdet: usize,
}

pub fn cmd_params(cfg: &RunConfig) -> Result<ParamsSummary> {
    Ok(ParamsSummary {
        instance: build_spanet(&cfg.instance_net()?)?.num_params(),
        segdet: build_dual_head(&cfg.segdet_net()?)?.num_params(),
    })
}
