use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trep_core::sampling::{make_context_pair, sample_crops, Crop};
use trep_core::Tensor;

#[test]
fn short_series_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_crops(1, &mut rng).is_err());
    assert!(sample_crops(0, &mut rng).is_err());
}

#[test]
fn minimal_length_gives_unit_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let c = sample_crops(2, &mut rng).unwrap();
        assert!(c.is_valid(2));
        assert!(c.overlap_len() >= 1);
    }
}

#[test]
fn views_share_overlap_values() {
    let batch = Tensor::from_fn(&[2, 30, 2], |i| i as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let p = make_context_pair(&batch, &mut rng).unwrap();
        let (l, off) = (p.crop.overlap_len(), p.crop.overlap_offset());
        let a = p.view1.narrow(1, off, l).unwrap();
        let b = p.view2.narrow(1, 0, l).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn overlap_start_and_end_cover_the_series() {
    // Monte-Carlo: each view spans at least two steps, so the overlap can
    // start anywhere in [0, t-2] and end anywhere in [2, t]; the overlap is
    // sometimes the whole series.
    let t = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut starts = vec![0usize; t];
    let mut ends = vec![0usize; t + 1];
    let mut full = 0;
    let n = 20_000;
    for _ in 0..n {
        let c = sample_crops(t, &mut rng).unwrap();
        starts[c.a2] += 1;
        ends[c.b1] += 1;
        if c == Crop::full(t) {
            full += 1;
        }
    }
    assert!(starts[..t - 1].iter().all(|&s| s > 0));
    assert_eq!(starts[t - 1], 0);
    assert!(ends[2..].iter().all(|&e| e > 0));
    assert_eq!(ends[1], 0);
    assert!(full > 0 && full < n / 10);
}

proptest! {
    #[test]
    fn crops_always_valid(seed in 0u64..100_000, t in 2usize..400) {
        let c = sample_crops(t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(c.is_valid(t));
        prop_assert!(c.a1 <= c.a2 && c.a2 < c.b1 && c.b1 <= c.b2 && c.b2 <= t);
        prop_assert!(c.overlap_len() >= 1);
    }
}
