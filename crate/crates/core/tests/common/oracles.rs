//! Scalar transcriptions of the pretext losses and small fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trep_core::tasks::{init_head_params, DivSample, PredSample};
use trep_core::{ParamStore, Tensor};

pub fn simplex_rows(l: usize, k: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..l * k).map(|_| rng.random_range(0.05..1.0)).collect();
    for row in data.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::new(vec![l, k], data).unwrap()
}

pub fn heads(f: usize, k: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_head_params(f, k, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    store
}

pub fn row(t: &Tensor, b: usize, s: usize) -> Vec<f64> {
    let (l, f) = (t.shape()[1], t.shape()[2]);
    t.data()[(b * l + s) * f..(b * l + s + 1) * f].to_vec()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits[k] - lse
}

/// Scalar transcription of the instance-wise contrast.
pub fn oracle_instance(z: &Tensor, z2: &Tensor) -> f64 {
    let (b, l) = (z.shape()[0], z.shape()[1]);
    let mut total = 0.0;
    for t in 0..l {
        for i in 0..b {
            let anchor = row(z, i, t);
            let mut logits = Vec::new();
            for j in 0..b {
                logits.push(dot(&anchor, &row(z2, j, t)));
            }
            for j in (0..b).filter(|&j| j != i) {
                logits.push(dot(&anchor, &row(z, j, t)));
            }
            total -= log_softmax_at(&logits, i);
        }
    }
    total / (b * l) as f64
}

/// Scalar transcription of the temporal contrast.
pub fn oracle_temporal(z: &Tensor, z2: &Tensor) -> f64 {
    let (b, l) = (z.shape()[0], z.shape()[1]);
    let mut total = 0.0;
    for i in 0..b {
        for t in 0..l {
            let anchor = row(z, i, t);
            let mut logits = Vec::new();
            for s in 0..l {
                logits.push(dot(&anchor, &row(z2, i, s)));
            }
            for s in (0..l).filter(|&s| s != t) {
                logits.push(dot(&anchor, &row(z, i, s)));
            }
            total -= log_softmax_at(&logits, t);
        }
    }
    total / (b * l) as f64
}

pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        s += 0.5 * a * (a / m).ln() + 0.5 * b * (b / m).ln();
    }
    s
}

/// `W2 relu(W1 v + b1) + b2` with weights stored `[out, in]`.
pub fn mlp(store: &ParamStore, prefix: &str, v: &[f64]) -> Vec<f64> {
    let w1 = store.get(&format!("{prefix}.w1")).unwrap();
    let b1 = store.get(&format!("{prefix}.b1")).unwrap();
    let w2 = store.get(&format!("{prefix}.w2")).unwrap();
    let b2 = store.get(&format!("{prefix}.b2")).unwrap();
    let hidden: Vec<f64> = (0..w1.shape()[0])
        .map(|o| (dot(&w1.data()[o * v.len()..(o + 1) * v.len()], v) + b1.data()[o]).max(0.0))
        .collect();
    (0..w2.shape()[0])
        .map(|o| dot(&w2.data()[o * hidden.len()..(o + 1) * hidden.len()], &hidden) + b2.data()[o])
        .collect()
}

pub fn oracle_divergence(z: &Tensor, z2: &Tensor, tau: &Tensor, store: &ParamStore, samples: &[DivSample]) -> f64 {
    let k = tau.shape()[1];
    let tau_row = |t: usize| tau.data()[t * k..(t + 1) * k].to_vec();
    let mut total = 0.0;
    for s in samples {
        let d: Vec<f64> = row(z, s.i, s.t).iter().zip(row(z2, s.j, s.tp)).map(|(a, b)| a - b).collect();
        let g = mlp(store, "g1", &d)[0];
        total += (g - jsd(&tau_row(s.t), &tau_row(s.tp))).powi(2);
    }
    total / samples.len() as f64
}

pub fn oracle_prediction(
    z: &Tensor,
    z2: &Tensor,
    tau: &Tensor,
    store: &ParamStore,
    samples: &[PredSample],
    times: &[usize],
) -> f64 {
    let (l, f, k) = (z.shape()[1], z.shape()[2], tau.shape()[1]);
    let ctx = |c: usize| if c == 0 { z } else { z2 };
    let mut total = 0.0;
    for s in samples {
        for &t in times {
            let target_t = (t as isize + s.delta).clamp(0, l as isize - 1) as usize;
            let mut input = row(ctx(s.c1), s.instance, t);
            input.extend_from_slice(&tau.data()[target_t * k..(target_t + 1) * k]);
            let pred = mlp(store, "g2", &input);
            let target = row(ctx(s.c2), s.instance, target_t);
            total += pred.iter().zip(&target).map(|(p, y)| (p - y).powi(2)).sum::<f64>();
        }
    }
    total / (samples.len() * times.len() * f) as f64
}
