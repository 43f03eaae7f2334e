use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trep_core::data::{load_csv, save_csv, synth, SynthSpec};
use trep_core::{Dataset, Labels, Tensor};

fn random_dataset(n: usize, t: usize, c: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Tensor::from_fn(&[n, t, c], |_| rng.random_range(-1e3..1e3) * rng.random::<f64>());
    let missing = (0..n * t).map(|_| rng.random::<f64>() < 0.2).collect();
    let labels = (0..n).map(|i| (i % 3) as i64 - 1).collect();
    Dataset::new(values, Some(missing), Some(Labels::Instance(labels))).unwrap()
}

#[test]
fn csv_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let d = random_dataset(4, 9, 3, 1);
    save_csv(&d, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back.values.shape(), d.values.shape());
    assert_eq!(back.missing, d.missing);
    assert_eq!(back.labels, d.labels);
    for (a, b) in back.values.data().iter().zip(d.values.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    let spikes = synth(&SynthSpec::SpikeAnomalies { t: 200, spikes: 3, spike_sigma: 8.0, period: 20.0, noise: 0.1 }, 3)
        .unwrap();
    save_csv(&spikes, &path).unwrap();
    assert_eq!(load_csv(&path).unwrap(), spikes);
}

#[test]
fn nan_cells_mark_the_step_missing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "instance_id,t,c0,c1\n0,0,1.5,2\n0,1,NaN,3\n0,2,4,\n0,3,5,6\n").unwrap();
    let d = load_csv(&path).unwrap();
    assert_eq!(d.values.shape(), &[1, 4, 2]);
    assert_eq!(d.missing, vec![false, true, true, false]);
    assert_eq!(d.values.data(), &[1.5, 2.0, 0.0, 0.0, 0.0, 0.0, 5.0, 6.0]);
}

#[test]
fn rows_are_sorted_by_instance_and_time() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "t,instance_id,c0,label\n1,7,4,2\n0,7,3,2\n1,2,2,0\n0,2,1,0\n").unwrap();
    let d = load_csv(&path).unwrap();
    assert_eq!(d.values.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(d.instance_labels(), Some(&[0, 2][..]));
}

#[test]
fn ragged_instances_name_the_offender() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "instance_id,t,c0\n0,0,1\n0,1,1\n5,0,1\n").unwrap();
    let err = load_csv(&path).unwrap_err();
    assert!(matches!(err, trep_core::Error::Format(ref m) if m.contains('5')), "{err}");
}

fn brute_stats(d: &Dataset, ch: usize) -> (f64, f64) {
    let c = d.c();
    let xs: Vec<f64> =
        (0..d.n() * d.t()).filter(|&k| !d.missing[k]).map(|k| d.values.data()[k * c + ch]).collect();
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

#[test]
fn statistics_skip_missing_entries() {
    let d = random_dataset(5, 30, 2, 4);
    let stats = d.channel_stats();
    for ch in 0..2 {
        let (m, s) = brute_stats(&d, ch);
        assert!((stats.mean[ch] - m).abs() <= 1e-9 * m.abs().max(1.0));
        assert!((stats.std[ch] - s).abs() <= 1e-9 * s.max(1.0));
    }
    let mut z = d.clone();
    z.zscore();
    for ch in 0..2 {
        let (m, s) = brute_stats(&z, ch);
        assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
    }
    assert!((0..150).filter(|&k| d.missing[k]).all(|k| z.values.data()[2 * k] == 0.0));
}

#[test]
fn mask_fraction_is_binomial_and_seeded() {
    let base = synth(&SynthSpec::MulticlassSines { n: 100, t: 128, classes: 3, channels: 2, noise: 0.1 }, 1).unwrap();
    let mut a = base.clone();
    a.mask_fraction(0.5, 9).unwrap();
    let cells = a.missing.len() as f64;
    let frac = a.missing.iter().filter(|&&m| m).count() as f64 / cells;
    assert!((frac - 0.5).abs() <= 0.02, "masked fraction {frac}");
    let mut b = base.clone();
    b.mask_fraction(0.5, 9).unwrap();
    assert_eq!(a, b);
    let mut same = base.clone();
    same.mask_fraction(0.0, 9).unwrap();
    assert_eq!(same, base);
    assert!(base.clone().mask_fraction(1.0, 0).is_err());
}

#[test]
fn ar1_lag_one_autocorrelation() {
    for seed in 0..3 {
        let d = synth(&SynthSpec::Ar1 { n: 1, t: 2000, rho: 0.9, noise: 1.0 }, seed).unwrap();
        let x = d.values.data();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        let c1: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        let r = c1 / c0;
        assert!((r - 0.9).abs() <= 0.05, "seed {seed}: lag-1 autocorrelation {r}");
    }
}

#[test]
fn regime_shift_labels_one_changepoint() {
    let d = synth(&SynthSpec::RegimeShift { n: 3, t: 100, changepoint: Some(40), noise: 0.1 }, 2).unwrap();
    let flags = d.timestep_labels().unwrap();
    for i in 0..3 {
        let row = &flags[i * 100..(i + 1) * 100];
        assert!(row[..40].iter().all(|&f| !f) && row[40..].iter().all(|&f| f));
    }
    let before = &d.values.data()[..40];
    let after = &d.values.data()[40..100];
    let sd = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    };
    assert!(sd(after) > sd(before));
}

#[test]
fn synth_is_seeded() {
    let spec = SynthSpec::MulticlassSines { n: 9, t: 32, classes: 3, channels: 1, noise: 0.2 };
    assert_eq!(synth(&spec, 4).unwrap(), synth(&spec, 4).unwrap());
    assert_ne!(synth(&spec, 4).unwrap(), synth(&spec, 5).unwrap());
    let labels = synth(&spec, 4).unwrap().instance_labels().unwrap().to_vec();
    for c in 0..3 {
        assert_eq!(labels.iter().filter(|&&l| l == c).count(), 3);
    }
}

#[test]
fn difference_and_segment_shapes() {
    let d = random_dataset(2, 20, 1, 6);
    let d1 = d.difference(1).unwrap();
    assert_eq!(d1.values.shape(), &[2, 19, 1]);
    for k in 0..19 {
        if !d1.missing[k] {
            assert_eq!(d1.values.data()[k], d.values.data()[k + 1] - d.values.data()[k]);
        }
    }
    let s = d.segment(6).unwrap();
    assert_eq!(s.values.shape(), &[6, 6, 1]);
    assert_eq!(s.instance_labels().unwrap(), &[-1, -1, -1, 0, 0, 0]);
    assert_eq!(&s.values.data()[6..12], &d.values.data()[6..12]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zscore_is_affine_invariant(seed in 0u64..1000, scale in 0.1f64..50.0, shift in -100.0f64..100.0) {
        let d = random_dataset(3, 12, 2, seed);
        let mut moved = d.clone();
        let miss = moved.missing.clone();
        for (k, row) in moved.values.data_mut().chunks_mut(2).enumerate() {
            if !miss[k] {
                row.iter_mut().for_each(|x| *x = *x * scale + shift);
            }
        }
        let (mut a, mut b) = (d, moved);
        a.zscore();
        b.zscore();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }
}
