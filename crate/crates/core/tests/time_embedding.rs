use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trep_core::time_embedding::{jsd, normalize_simplex, scaled_times};
use trep_core::{ParamStore, Tape, TeKind, TimeEmbeddingConfig};

fn setup(kind: TeKind, dim: usize, seed: u64) -> (TimeEmbeddingConfig, ParamStore) {
    let cfg = TimeEmbeddingConfig { kind, dim, hidden: 8 };
    let mut store = ParamStore::new();
    cfg.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (cfg, store)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn time2vec_matches_scalar_formula() {
    let (cfg, store) = setup(TeKind::Time2vec, 5, 1);
    let times = scaled_times(3, 4, 10.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let tau = cfg.embed(&mut tape, &p, &times).unwrap();
    let (w, ph) = (store.get("te.omega").unwrap().data(), store.get("te.phi").unwrap().data());
    for (r, &t) in times.iter().enumerate() {
        let raw: Vec<f64> = (0..5).map(|j| if j == 0 { w[j] * t + ph[j] } else { (w[j] * t + ph[j]).sin() }).collect();
        let s: Vec<f64> = raw.iter().map(|&x| sigmoid(x)).collect();
        let total: f64 = s.iter().sum();
        for j in 0..5 {
            assert!((tape.value(tau).data()[r * 5 + j] - s[j] / total).abs() < 1e-14);
        }
    }
}

#[test]
fn rbf_and_mlp_match_scalar_formulas() {
    let (cfg, store) = setup(TeKind::Rbf, 4, 2);
    let times = [0.0, 0.3, 0.95];
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let raw = cfg.raw(&mut tape, &p, &times).unwrap();
    let (c, g) = (store.get("te.centers").unwrap().data(), store.get("te.log_bw").unwrap().data());
    for (r, &t) in times.iter().enumerate() {
        for j in 0..4 {
            let want = (-g[j].exp() * (t - c[j]).powi(2)).exp();
            assert!((tape.value(raw).data()[r * 4 + j] - want).abs() < 1e-14);
        }
    }

    let (cfg, store) = setup(TeKind::Mlp, 3, 3);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let raw = cfg.raw(&mut tape, &p, &[0.4]).unwrap();
    let (w1, b1) = (store.get("te.w1").unwrap().data(), store.get("te.b1").unwrap().data());
    let (w2, b2) = (store.get("te.w2").unwrap().data(), store.get("te.b2").unwrap().data());
    let h: Vec<f64> = (0..8).map(|i| (w1[i] * 0.4 + b1[i]).max(0.0)).collect();
    for o in 0..3 {
        let want: f64 = (0..8).map(|i| w2[o * 8 + i] * h[i]).sum::<f64>() + b2[o];
        assert!((tape.value(raw).data()[o] - want).abs() < 1e-13);
    }
}

#[test]
fn jsd_reference_values() {
    assert!(jsd(&[0.5, 0.5], &[0.5, 0.5]).unwrap().abs() < 1e-15);
    assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    // p=(1,0), q=(1/2,1/2): m=(3/4,1/4)
    let want = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln();
    assert!((jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - want).abs() < 1e-15);
    assert!(jsd(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
    assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
}

#[test]
fn time_scale_controls_indices() {
    assert_eq!(scaled_times(2, 3, 4.0), vec![0.5, 0.75, 1.0]);
}

proptest! {
    #[test]
    fn simplex_output(v in proptest::collection::vec(-30.0f64..30.0, 2..64)) {
        let p = normalize_simplex(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn jsd_symmetric_and_bounded(
        a in proptest::collection::vec(-10.0f64..10.0, 8),
        b in proptest::collection::vec(-10.0f64..10.0, 8),
    ) {
        let (p, q) = (normalize_simplex(&a), normalize_simplex(&b));
        let (pq, qp) = (jsd(&p, &q).unwrap(), jsd(&q, &p).unwrap());
        prop_assert!((pq - qp).abs() <= 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-9).contains(&pq));
        prop_assert!(jsd(&p, &p).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn every_kind_embeds_onto_simplex(seed in 0u64..1000, k in 2usize..12, start in 0usize..500) {
        for kind in [TeKind::Time2vec, TeKind::Mlp, TeKind::Rbf] {
            let (cfg, store) = setup(kind, k, seed);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let tau = cfg.embed_range(&mut tape, &p, start, 6, 128.0).unwrap();
            for r in tape.value(tau).data().chunks(k) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(r.iter().all(|&x| x > 0.0 && x < 1.0));
            }
        }
    }
}
