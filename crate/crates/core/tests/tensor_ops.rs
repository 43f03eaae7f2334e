mod common;

use common::{fd_max_rel_error, probe, rand_tensor};
use proptest::prelude::*;
use trep_core::tensor::{adam_step, AdamState};
use trep_core::{Error, Tape, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Direct nested-loop dilated cross-correlation.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize, padding: usize) -> Vec<f64> {
    let (bs, cin, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let lout = l + 2 * padding - dilation * (k - 1);
    let mut out = vec![0.0; bs * cout * lout];
    for bi in 0..bs {
        for co in 0..cout {
            for t in 0..lout {
                let mut s = b.data()[co];
                for ci in 0..cin {
                    for kk in 0..k {
                        let src = t as isize + (kk * dilation) as isize - padding as isize;
                        if src >= 0 && (src as usize) < l {
                            s += w.data()[(co * cin + ci) * k + kk]
                                * x.data()[(bi * cin + ci) * l + src as usize];
                        }
                    }
                }
                out[(bi * cout + co) * lout + t] = s;
            }
        }
    }
    out
}

#[test]
fn conv1d_zero_input_gives_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 6]));
    let w = tape.constant(rand_tensor(&[4, 3, 3], 1));
    let b = tape.constant(Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
    let y = tape.conv1d(x, w, b, 2, 2).unwrap();
    let v = tape.value(y);
    assert_eq!(v.shape(), &[2, 4, 6]);
    for (i, val) in v.data().iter().enumerate() {
        let co = (i / 6) % 4;
        assert_eq!(*val, [0.5, -1.0, 2.0, 0.0][co]);
    }
}

#[test]
fn conv1d_identity_kernel() {
    let mut tape = Tape::new();
    let xt = rand_tensor(&[2, 3, 5], 2);
    let mut wt = Tensor::zeros(&[3, 3, 1]);
    for c in 0..3 {
        wt.data_mut()[c * 3 + c] = 1.0;
    }
    let x = tape.constant(xt.clone());
    let w = tape.constant(wt);
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv1d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &xt);
}

#[test]
fn conv1d_matches_nested_loop_oracle() {
    let x = rand_tensor(&[1, 2, 5], 3);
    let w = rand_tensor(&[3, 2, 3], 4);
    let b = rand_tensor(&[3], 5);
    for padding in [0, 2] {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv1d(xv, wv, bv, 2, padding).unwrap();
        let oracle = conv_oracle(&x, &w, &b, 2, padding);
        assert_eq!(tape.value(y).len(), oracle.len());
        for (a, o) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - o).abs() <= 1e-12);
        }
    }
}

#[test]
fn conv1d_channel_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 5]));
    let w = tape.constant(Tensor::zeros(&[3, 4, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.conv1d(x, w, b, 1, 1), Err(Error::Dimension(_))));
}

#[test]
fn conv1d_gradients() {
    let ins = [rand_tensor(&[2, 3, 7], 10), rand_tensor(&[4, 3, 3], 11), rand_tensor(&[4], 12)];
    let err = fd_max_rel_error(&ins, H, |t, v| {
        let y = t.conv1d(v[0], v[1], v[2], 2, 2).unwrap();
        probe(t, y)
    });
    assert!(err < TOL, "conv1d rel err {err}");
}

#[test]
fn elementwise_reference_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let g = tape.gelu(x);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(g).data(), &[0.0, 0.0]);
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn gelu_gradient_at_point_seven() {
    let ins = [Tensor::new(vec![1], vec![0.7]).unwrap()];
    let mut tape = Tape::new();
    let x = tape.param(ins[0].clone());
    let y = tape.gelu(x);
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    let analytic = tape.grad(x).unwrap()[0];
    let f = |v: f64| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
    let numeric = (f(0.7 + H) - f(0.7 - H)) / (2.0 * H);
    assert!((analytic - numeric).abs() / numeric.abs() < 1e-6);
}

#[test]
fn unary_gradients() {
    let ins = [rand_tensor(&[3, 4], 20)];
    for which in 0..5 {
        let err = fd_max_rel_error(&ins, H, |t, v| {
            let y = match which {
                0 => t.gelu(v[0]),
                1 => t.sigmoid(v[0]),
                2 => t.exp(v[0]).unwrap(),
                3 => t.sin(v[0]),
                _ => t.square(v[0]),
            };
            probe(t, y)
        });
        assert!(err < TOL, "unary {which}: {err}");
    }
    // log and relu away from their kinks
    let pos = [Tensor::from_fn(&[5], |i| 0.3 + i as f64 * 0.4)];
    let err = fd_max_rel_error(&pos, H, |t, v| {
        let y = t.log(v[0]).unwrap();
        probe(t, y)
    });
    assert!(err < TOL);
    let mixed = [Tensor::new(vec![4], vec![-1.5, -0.2, 0.3, 1.7]).unwrap()];
    let err = fd_max_rel_error(&mixed, H, |t, v| {
        let y = t.relu(v[0]);
        probe(t, y)
    });
    assert!(err < TOL);
}

#[test]
fn log_domain_violation_reports_location() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
    match tape.log(x) {
        Err(Error::Numeric { op, detail }) => {
            assert_eq!(op, "log");
            assert!(detail.contains("flat index 1"));
        }
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn binary_gradients_with_scalar_broadcast() {
    let ins = [rand_tensor(&[2, 3], 30), rand_tensor(&[2, 3], 31), rand_tensor(&[], 32)];
    let err = fd_max_rel_error(&ins, H, |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let b = t.mul(a, v[2]).unwrap();
        let c = t.sub(b, v[0]).unwrap();
        let d = t.mul(c, v[1]).unwrap();
        let e = t.scale(d, 0.3);
        probe(t, e)
    });
    assert!(err < TOL, "{err}");
    let den = [rand_tensor(&[4], 33), Tensor::new(vec![4], vec![1.5, -2.0, 0.7, 3.0]).unwrap()];
    let err = fd_max_rel_error(&den, H, |t, v| {
        let q = t.div(v[0], v[1]).unwrap();
        probe(t, q)
    });
    assert!(err < TOL);
}

#[test]
fn incompatible_shapes_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_identity_and_gradients() {
    let mut tape = Tape::new();
    let bt = rand_tensor(&[3, 4], 40);
    let i = tape.constant(Tensor::eye(3));
    let b = tape.constant(bt.clone());
    let y = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(y), &bt);

    let ins = [rand_tensor(&[3, 5], 41), rand_tensor(&[5, 2], 42)];
    let err = fd_max_rel_error(&ins, H, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        probe(t, y)
    });
    assert!(err < TOL);
}

#[test]
fn linear_and_bmm_gradients() {
    let ins = [rand_tensor(&[4, 3], 50), rand_tensor(&[2, 3], 51), rand_tensor(&[2], 52)];
    let err = fd_max_rel_error(&ins, H, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        probe(t, y)
    });
    assert!(err < TOL);
    let ins = [rand_tensor(&[2, 3, 4], 53), rand_tensor(&[2, 5, 4], 54)];
    let err = fd_max_rel_error(&ins, H, |t, v| {
        let y = t.bmm_nt(v[0], v[1]).unwrap();
        probe(t, y)
    });
    assert!(err < TOL);
}

#[test]
fn structural_gradients() {
    let ins = [rand_tensor(&[2, 3, 4], 60), rand_tensor(&[2, 2, 4], 61)];
    let err = fd_max_rel_error(&ins, H, |t, v| {
        let p = t.permute(v[0], &[2, 0, 1]).unwrap();
        let r = t.reshape(p, &[4, 6]).unwrap();
        let n = t.narrow(r, 1, 1, 4).unwrap();
        let c = t.concat(&[v[0], v[1]], 1).unwrap();
        let s = t.index_select(c, &[1, 1, 0]).unwrap();
        let rep = t.repeat(n, 2);
        let a = probe(t, rep);
        let b = probe(t, s);
        t.add(a, b).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn permute_moves_entries() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
    let y = tape.permute(x, &[1, 0]).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 2]);
    assert_eq!(tape.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
}

#[test]
fn maxpool_values_and_routing() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.maxpool1d(x, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0]);

    // ties go to the first index; partial window kept
    let z = tape.param(Tensor::new(vec![1, 1, 5], vec![3.0, 3.0, 1.0, 1.0, 7.0]).unwrap());
    let p = tape.maxpool1d(z, 2).unwrap();
    assert_eq!(tape.value(p).data(), &[3.0, 1.0, 7.0]);
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(z).unwrap(), &[1.0, 0.0, 1.0, 0.0, 1.0]);

    assert!(matches!(tape.maxpool1d(z, 0), Err(Error::Parameter(_))));
}

#[test]
fn pool_gradients() {
    let ins = [rand_tensor(&[2, 3, 7], 70)];
    for k in [2, 3] {
        let err = fd_max_rel_error(&ins, H, |t, v| {
            let a = t.maxpool1d(v[0], k).unwrap();
            let b = t.avg_pool(v[0], 2, k).unwrap();
            let c = t.avg_pool(v[0], 1, 2).unwrap();
            let (a, b, c) = (probe(t, a), probe(t, b), probe(t, c));
            let ab = t.add(a, b).unwrap();
            t.add(ab, c).unwrap()
        });
        assert!(err < TOL);
    }
}

#[test]
fn avgpool_of_simplex_rows_stays_on_simplex() {
    // rows of a [L,K] embedding on the simplex, pooled over time
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (l, k) = (rng.random_range(1..20), rng.random_range(2..6));
        let mut data = Vec::new();
        for _ in 0..l {
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|x| x / s));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![l, k], data).unwrap());
        let p = tape.avg_pool(x, 0, 2).unwrap();
        assert_eq!(tape.shape(p)[0], l.div_ceil(2));
        for row in tape.value(p).data().chunks(k) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn fused_op_gradients() {
    let pos = |seed| {
        let t = rand_tensor(&[3, 4], seed);
        Tensor::from_fn(&[3, 4], |i| t.data()[i].abs() + 0.1)
    };
    let ins = [pos(80), pos(81)];
    let err = fd_max_rel_error(&ins, H, |t, v| {
        let p = t.normalize_last(v[0]).unwrap();
        let q = t.normalize_last(v[1]).unwrap();
        let j = t.jsd_rows(p, q).unwrap();
        probe(t, j)
    });
    assert!(err < TOL, "jsd {err}");

    let ins = [rand_tensor(&[3, 5], 82)];
    let allowed = vec![
        true, true, false, true, true, //
        true, true, true, true, true, //
        false, true, true, true, false,
    ];
    let err = fd_max_rel_error(&ins, H, |t, v| {
        let n = t.masked_nll(v[0], &[0, 4, 2], allowed.clone()).unwrap();
        probe(t, n)
    });
    assert!(err < TOL, "nll {err}");

    let times = [0.0, 0.25, 0.5, 1.0];
    let ins = [rand_tensor(&[3], 83), rand_tensor(&[3], 84)];
    let err = fd_max_rel_error(&ins, H, |t, v| {
        let e = t.time2vec(&times, v[0], v[1]).unwrap();
        let r = t.rbf_features(&times, v[0], v[1]).unwrap();
        let (a, b) = (probe(t, e), probe(t, r));
        t.add(a, b).unwrap()
    });
    assert!(err < TOL, "time features {err}");
}

#[test]
fn backward_sum_of_squares() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(w, w).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
    // a second backward accumulates
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(tape.grad(w).is_none());
}

#[test]
fn detached_tensor_receives_no_grad() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let d = tape.detach(w);
    let p = tape.mul(w, d).unwrap();
    let l = tape.sum(p);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    assert!(tape.grad(d).is_none());
}

#[test]
fn detached_values_replay_in_order() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    tape.detach(w);
    let recorded = tape.detached_values().to_vec();
    assert_eq!(recorded[0].data(), &[1.0, 2.0]);

    let mut replay = Tape::with_detached(recorded);
    let moved = replay.param(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());
    let d = replay.detach(moved);
    assert_eq!(replay.value(d).data(), &[1.0, 2.0]);
    // once exhausted, detach copies the live value again
    let e = replay.detach(moved);
    assert_eq!(replay.value(e).data(), &[5.0, 6.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn adam_minimises_quadratic() {
    let mut w = Tensor::new(vec![2], vec![1.5, -1.0]).unwrap();
    let mut st = AdamState::new([&w], 0.05);
    for _ in 0..500 {
        let g: Vec<f64> = w.data().iter().map(|x| 2.0 * x).collect();
        adam_step(&mut [&mut w], &[g], &mut st).unwrap();
    }
    assert!(w.max_abs() < 1e-2);
}

proptest! {
    #[test]
    fn pool_output_length_is_ceil(len in 1usize..40, k in 1usize..9) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, len]));
        let a = tape.maxpool1d(x, k).unwrap();
        let b = tape.avgpool1d(x, k).unwrap();
        prop_assert_eq!(tape.shape(a)[2], len.div_ceil(k));
        prop_assert_eq!(tape.shape(b)[2], len.div_ceil(k));
    }

    #[test]
    fn conv_forward_is_deterministic(seed in 0u64..1000) {
        let x = rand_tensor(&[2, 3, 9], seed);
        let w = rand_tensor(&[2, 3, 3], seed + 1);
        let b = rand_tensor(&[2], seed + 2);
        let run = || {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv1d(xv, wv, bv, 4, 4).unwrap();
            t.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
