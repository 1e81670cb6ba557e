mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanet::postproc::{default_gamma, spectral_cluster};

/// Two tight clouds around distinct random centres.
fn two_clouds(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 6]> {
    let centre = |rng: &mut ChaCha8Rng| -> [f64; 6] { std::array::from_fn(|_| rng.random_range(0.0..1.0)) };
    let (a, mut b) = (centre(rng), centre(rng));
    while a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() < 0.25 {
        b = centre(rng);
    }
    let split = rng.random_range(1..n);
    (0..n)
        .map(|i| {
            let c = if i < split { a } else { b };
            std::array::from_fn(|k| c[k] + rng.random_range(-0.02..0.02))
        })
        .collect()
}

#[test]
fn spectral_partition_equals_exhaustive_min_ncut() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut cases = 0;
    for n in 2..=12 {
        for _ in 0..20 {
            let mut pts = two_clouds(n, &mut rng);
            // interleave so the split point is not an index boundary
            for i in (1..pts.len()).rev() {
                pts.swap(i, rng.random_range(0..=i));
            }
            let gamma = default_gamma(&pts);
            let want = oracles::min_ncut_partition(&pts, gamma);
            let got = spectral_cluster(&pts, 2, Some(gamma), cases).unwrap();
            assert_eq!(oracles::canonical_labels(&got), want, "n={n} points={pts:?}");
            let auto = spectral_cluster(&pts, 2, None, cases).unwrap();
            assert_eq!(oracles::canonical_labels(&auto), want);
            cases += 1;
        }
    }
    assert_eq!(cases, 220);
}

#[test]
fn identical_points_form_one_cluster() {
    let pts = vec![[0.3; 6]; 5];
    assert_eq!(spectral_cluster(&pts, 1, None, 0).unwrap(), vec![0; 5]);
    assert!(spectral_cluster(&pts, 6, None, 0).is_err());
    assert!(spectral_cluster(&pts, 0, None, 0).is_err());
}
