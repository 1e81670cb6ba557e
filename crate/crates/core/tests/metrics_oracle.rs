mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanet::maps::InstanceLabelMap;
use spanet::metrics::{aji, evaluate, f1_instances, MetricsReport};

/// Every 2x2 labeling with ids drawn from 0..=3.
fn all_2x2() -> Vec<InstanceLabelMap> {
    (0..256u32).map(|code| InstanceLabelMap::from_vec(2, 2, (0..4).map(|k| (code >> (2 * k)) & 3).collect()).unwrap()).collect()
}

#[test]
fn aji_and_f1_match_definitions_on_enumerated_maps() {
    let maps = all_2x2();
    let mut cases = 0;
    for gt in &maps {
        for pred in &maps {
            assert_eq!(aji(gt, pred).unwrap(), oracles::aji(gt, pred), "{gt:?} {pred:?}");
            let s = f1_instances(gt, pred, 0.5).unwrap();
            assert_eq!((s.f1, s.precision, s.recall), oracles::f1(gt, pred, 0.5), "{gt:?} {pred:?}");
            cases += 1;
        }
    }
    assert_eq!(cases, 65536);
}

#[test]
fn aji_and_f1_match_definitions_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2000 {
        let mut draw = || InstanceLabelMap::from_vec(4, 5, (0..20).map(|_| rng.random_range(0..4)).collect()).unwrap();
        let (gt, pred) = (draw(), draw());
        assert_eq!(aji(&gt, &pred).unwrap(), oracles::aji(&gt, &pred));
        for thr in [0.5, 0.7] {
            let s = f1_instances(&gt, &pred, thr).unwrap();
            assert_eq!((s.f1, s.precision, s.recall), oracles::f1(&gt, &pred, thr));
        }
    }
}

#[test]
fn documented_examples() {
    let one = |data: Vec<u32>| InstanceLabelMap::from_vec(1, data.len(), data).unwrap();
    assert_eq!(aji(&one(vec![1, 1]), &one(vec![1, 0])).unwrap(), 0.5);
    let mut gt = vec![1u32; 100];
    gt.extend([0; 10]);
    let mut pred = gt.clone();
    pred[100..].fill(2);
    assert!((aji(&one(gt.clone()), &one(pred)).unwrap() - 100.0 / 110.0).abs() < 1e-15);
    let two = one(vec![1, 1, 0, 2, 2]);
    let s = f1_instances(&two, &one(vec![1, 1, 0, 0, 0]), 0.5).unwrap();
    assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    let s = f1_instances(&one(vec![1, 0]), &one(vec![0, 0]), 0.5).unwrap();
    assert_eq!((s.f1, s.precision, s.recall), (0.0, 0.0, 0.0));
}

#[test]
fn report_mean_is_the_mean_of_rows_and_round_trips() {
    let maps = all_2x2();
    let pairs: Vec<_> = (0..7).map(|i| (format!("img_{i}"), maps[i * 31 + 5].clone(), maps[i * 17 + 40].clone())).collect();
    let r = evaluate(&pairs).unwrap();
    let mean = r.per_image.iter().map(|m| m.aji).sum::<f64>() / 7.0;
    assert!((r.aggregate.aji - mean).abs() < 1e-12);
    let text = r.to_text();
    assert!(text.starts_with("# spanet-metrics-v1\nid,aji,f1,precision,recall\n"));
    let back = MetricsReport::from_text(&text).unwrap();
    assert_eq!(back.per_image.len(), 7);
    assert_eq!(back.to_text(), text);
    let self_pairs: Vec<_> = pairs.iter().map(|(id, g, _)| (id.clone(), g.clone(), g.clone())).collect();
    let r = evaluate(&self_pairs).unwrap();
    assert_eq!((r.aggregate.aji, r.aggregate.f1), (1.0, 1.0));
    assert!(evaluate(&[]).is_err());
}
