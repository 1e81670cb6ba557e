use spanet::data::{generate_synthetic, SynthConfig};
use spanet::groundtruth::{detection_gt, positional_gt, DEFAULT_BETA, DEFAULT_RADIUS};
use spanet::metrics::aji;
use spanet::postproc::{instance_segment, PostConfig};
use spanet::Tensor;

#[test]
fn ideal_maps_reproduce_ground_truth() {
    let t0 = std::time::Instant::now();
    let mut total = 0.0;
    let n = 100;
    let mut worst = (1.0, 0);
    for seed in 0..n {
        let (s, _) = generate_synthetic(&SynthConfig { seed, ..Default::default() }, "x").unwrap();
        let (h, w) = s.instances.dims();
        let seg = Tensor::from_vec(&[1, h, w], s.instances.data().iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let det = detection_gt(&s.instances, DEFAULT_BETA, DEFAULT_RADIUS).unwrap();
        let det = Tensor::from_vec(&[1, h, w], det.0.into_data()).unwrap();
        let emb = positional_gt(&s.instances).values;
        let out = instance_segment(&seg, &det, &emb, &PostConfig::default()).unwrap();
        let a = aji(&s.instances, &out).unwrap();
        if a < worst.0 { worst = (a, seed); }
        total += a;
    }
    eprintln!("mean {} worst {:?} in {:?}", total / n as f64, worst, t0.elapsed());
    assert!(total / n as f64 >= 0.99);
}
