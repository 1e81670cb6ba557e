use spanet::data::{generate_synthetic, SynthConfig};
use spanet::networks::{HeadKind, NetworkConfig, SpaNet};
use spanet::training::{
    cyclic_lr, predict_masks, train_instance, train_segdet, AugmentConfig, InstanceItem, SwaSchedule, TrainConfig, TrainEvent,
    TrainItem,
};
use spanet::Error;

fn items(n: u64) -> Vec<TrainItem> {
    (0..n)
        .map(|s| {
            let cfg = SynthConfig { height: 32, width: 32, n_nuclei: (2, 3), radius: (3.0, 5.0), seed: s, ..Default::default() };
            let (sample, _) = generate_synthetic(&cfg, "t").unwrap();
            TrainItem { rgb: sample.image, instances: sample.instances }
        })
        .collect()
}

fn tiny(in_ch: usize, out_ch: usize, heads: HeadKind) -> SpaNet {
    SpaNet::new(NetworkConfig::uniform(2, 4, 4, 4, 1, 0.5).with_io(in_ch, out_ch, heads)).unwrap()
}

fn cfg(epochs: usize, cycle: usize) -> TrainConfig {
    TrainConfig {
        patch_size: 32,
        batch_size: 2,
        schedule: SwaSchedule { cycle_len: cycle, total_epochs: epochs, ..Default::default() },
        seed: 3,
        ..TrainConfig::segdet_default()
    }
}

#[test]
fn segdet_training_logs_snapshots_and_is_deterministic() {
    let net = tiny(3, 1, HeadKind::Dual);
    let data = items(4);
    let c = cfg(4, 2);
    let mut lrs = Vec::new();
    let mut snaps = Vec::new();
    let a = train_segdet(&net, &data, &c, &mut |ev| {
        match ev {
            TrainEvent::Epoch(l) => lrs.push((l.epoch, l.lr)),
            TrainEvent::Snapshot(w) => snaps.push((w.meta.epoch, w.meta.cycle)),
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(lrs.len(), 4);
    for (e, lr) in lrs {
        assert_eq!(lr, cyclic_lr(e, &c.schedule));
    }
    assert_eq!(snaps, vec![(2, 1), (4, 2)]);
    assert_eq!(a.snapshots, 2);
    assert_eq!(a.weights.meta.cycle, 0);
    assert!(a.log.iter().all(|l| l.loss("seg_jaccard").is_some() && l.loss("det_mse").is_some()));
    let b = train_segdet(&net, &data, &c, &mut |_| Ok(())).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.log, b.log);
    let other = train_segdet(&net, &data, &TrainConfig { seed: 4, ..c }, &mut |_| Ok(())).unwrap();
    assert_ne!(a.weights, other.weights);
}

#[test]
fn instance_training_runs_on_predicted_masks() {
    let seg_net = tiny(3, 1, HeadKind::Dual);
    let data = items(4);
    let seg_w = seg_net.init_weights(0);
    let masks = predict_masks(&seg_net, &seg_w, &data, 3).unwrap();
    assert_eq!(masks.len(), 4);
    let inst: Vec<_> = data
        .iter()
        .zip(masks)
        .map(|(it, seg)| InstanceItem { rgb: it.rgb.clone(), seg, instances: it.instances.clone() })
        .collect();
    let net = tiny(9, 6, HeadKind::Single);
    let c = TrainConfig { augment: AugmentConfig::none(), ..cfg(5, 5) };
    let out = train_instance(&net, &inst, &c, &mut |_| Ok(())).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|l| l.loss("embedding_l1").unwrap()).collect();
    // over one cycle on a fixed set the loss trends down: negative
    // least-squares slope and a lower final value
    let n = losses.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = losses.iter().sum::<f64>() / n;
    let slope: f64 = losses.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    assert!(slope < 0.0 && losses[4] < losses[0], "{losses:?}");
    assert!(train_instance(&tiny(3, 1, HeadKind::Dual), &inst, &c, &mut |_| Ok(())).is_err());
}

#[test]
fn wrong_network_or_patch_size_is_rejected() {
    let data = items(2);
    assert!(matches!(
        train_segdet(&tiny(9, 6, HeadKind::Single), &data, &cfg(2, 1), &mut |_| Ok(())),
        Err(Error::Config(_))
    ));
    let c = TrainConfig { patch_size: 64, ..cfg(2, 1) };
    assert!(train_segdet(&tiny(3, 1, HeadKind::Dual), &data, &c, &mut |_| Ok(())).is_err());
    assert!(train_segdet(&tiny(3, 1, HeadKind::Dual), &[], &cfg(2, 1), &mut |_| Ok(())).is_err());
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let c = TrainConfig {
        schedule: SwaSchedule { alpha1: 1e200, alpha2: 1e199, cycle_len: 2, total_epochs: 2 },
        ..cfg(2, 2)
    };
    let r = train_segdet(&tiny(3, 1, HeadKind::Dual), &items(4), &c, &mut |_| Ok(()));
    assert!(matches!(r, Err(Error::Divergence(_))), "{r:?}");
}

#[test]
fn observer_errors_abort_training() {
    let r = train_segdet(&tiny(3, 1, HeadKind::Dual), &items(2), &cfg(2, 1), &mut |_| Err(Error::Config("stop".into())));
    assert!(matches!(r, Err(Error::Config(m)) if m == "stop"));
}
