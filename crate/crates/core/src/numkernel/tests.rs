use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks d(loss)/d(input) for every input coordinate against central
/// differences. `build` maps input vars to a scalar loss.
fn check_inputs(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let h = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = relative_error(analytic[j], numeric);
            assert!(
                err < 1e-6 || (analytic[j] - numeric).abs() < 1e-9,
                "input {i} coord {j}: analytic {} numeric {numeric}",
                analytic[j]
            );
        }
    }
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, v: Var) -> Var {
    let n = g.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let shape = g.shape(v).to_vec();
    let p = g.mul_const(v, &w, &shape).unwrap();
    g.sum(p)
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
    let y = g.softmax(x, None).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn matmul_by_identity_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_tensor(&[2, 3, 4], &mut rng);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let i = g.constant(eye);
    let y = g.matmul(x, i).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn l2_normalize_gives_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_tensor(&[5, 7], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(a);
    let y = g.l2_normalize(x).unwrap();
    for row in g.value(y).data().chunks(7) {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sum_loss_gives_unit_gradient() {
    let mut reg = ParamRegistry::new();
    let id = reg.register("theta", Tensor::from_vec(vec![1.5, -2.0, 0.25])).unwrap();
    let mut g = Graph::new();
    let p = g.bind(&reg);
    let loss = g.sum(p.get(id));
    g.backward_into(loss, &mut reg).unwrap();
    assert_eq!(reg.grad(id).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn squared_norm_gives_twice_theta_and_accumulates() {
    let mut reg = ParamRegistry::new();
    let theta = vec![1.5, -2.0, 0.25];
    let id = reg.register("theta", Tensor::from_vec(theta.clone())).unwrap();
    for round in 1..=2 {
        let mut g = Graph::new();
        let p = g.bind(&reg);
        let sq = g.mul(p.get(id), p.get(id)).unwrap();
        let loss = g.sum(sq);
        g.backward_into(loss, &mut reg).unwrap();
        let expect: Vec<f64> = theta.iter().map(|t| 2.0 * t * round as f64).collect();
        assert_eq!(reg.grad(id).data(), expect.as_slice());
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(KernelError::NonScalarLoss(_))));
}

#[test]
fn fully_masked_softmax_row_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap());
    let mask = [false, true, true, true];
    assert!(matches!(g.softmax(x, Some(&mask)), Err(KernelError::FullyMasked)));
    let q = g.constant(Tensor::zeros(&[1, 1, 2]));
    let k = g.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(
        g.attention(q, k, k, 1, Some(&[true, true]), false),
        Err(KernelError::FullyMasked)
    ));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(KernelError::Shape(_))));
    let c = g.constant(Tensor::zeros(&[4]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn layer_norm_standardises_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&[6, 9], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let gamma = g.constant(Tensor::full(&[9], 1.0));
    let beta = g.constant(Tensor::zeros(&[9]));
    let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
    for row in g.value(y).data().chunks(9) {
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-8);
    }
    // with eps the variance shrinks to var / (var + eps)
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    for (row, src) in g.value(y).data().chunks(9).zip(a.data().chunks(9)) {
        let m0 = src.iter().sum::<f64>() / 9.0;
        let v0 = src.iter().map(|v| (v - m0) * (v - m0)).sum::<f64>() / 9.0;
        let var = row.iter().map(|v| v * v).sum::<f64>() / 9.0;
        assert!((var - v0 / (v0 + 1e-5)).abs() < 1e-12);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = random_tensor(&[3, 2], &mut rng);
    let x = random_tensor(&[4, 3], &mut rng);
    let grad_of = |which: u8| -> Vec<f64> {
        let mut g = Graph::new();
        let wv = g.input(w.clone());
        let xv = g.constant(x.clone());
        let y = g.matmul(xv, wv).unwrap();
        let r = g.relu(y);
        let l1 = g.sum(r);
        let sq = g.mul(y, y).unwrap();
        let l2 = g.mean(sq);
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => {
                let a = g.reshape(l1, &[1]).unwrap();
                let b = g.reshape(l2, &[1]).unwrap();
                let s = g.concat(&[a, b], 0).unwrap();
                g.sum(s)
            }
        };
        g.backward(loss).unwrap().get(wv).unwrap().to_vec()
    };
    let a = grad_of(0);
    let b = grad_of(1);
    let both = grad_of(2);
    for i in 0..a.len() {
        assert!((a[i] + b[i] - both[i]).abs() < 1e-12);
    }
}

#[test]
fn elementwise_and_layout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&[2, 3, 4], &mut rng);
    let b = random_tensor(&[4], &mut rng);
    let c = random_tensor(&[2, 3], &mut rng);
    check_inputs(vec![a.clone(), b.clone(), c.clone()], |g, v| {
        let x = g.add(v[0], v[1]).unwrap();
        let x = g.mul(x, v[2]).unwrap(); // prefix broadcast
        let x = g.mul(x, v[1]).unwrap(); // suffix broadcast
        let s = g.sin(x);
        let e = g.exp(s);
        let p = g.permute(e, &[2, 0, 1]).unwrap();
        let sl = g.slice(p, 0, 1, 2).unwrap();
        let cat = g.concat(&[sl, p], 0).unwrap();
        let sp = g.softplus(cat);
        let lg = g.log(sp);
        let sg = g.sigmoid(lg);
        let sc = g.scale(sg, -1.7);
        let sa = g.add_scalar(sc, 0.3);
        weighted_sum(g, sa)
    });
}

#[test]
fn matmul_gradients_all_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_tensor(&[2, 3, 4], &mut rng);
    let w = random_tensor(&[4, 5], &mut rng);
    let wt = random_tensor(&[5, 4], &mut rng);
    let bb = random_tensor(&[2, 4, 2], &mut rng);
    let bt = random_tensor(&[2, 6, 4], &mut rng);
    check_inputs(vec![a, w, wt, bb, bt], |g, v| {
        let y1 = g.matmul(v[0], v[1]).unwrap();
        let y2 = g.matmul_t(v[0], v[2]).unwrap();
        let y3 = g.matmul(v[0], v[3]).unwrap();
        let y4 = g.matmul_t(v[0], v[4]).unwrap();
        let c = g.concat(&[y1, y2, y3, y4], 2).unwrap();
        weighted_sum(g, c)
    });
}

#[test]
fn normalisation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&[3, 5], &mut rng);
    let gamma = random_tensor(&[5], &mut rng);
    let beta = random_tensor(&[5], &mut rng);
    let mask = vec![
        false, true, false, false, true, //
        true, true, false, true, true, //
        false, false, false, false, false,
    ];
    check_inputs(vec![x, gamma, beta], move |g, v| {
        let ln = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let l2 = g.l2_normalize(ln).unwrap();
        let sm = g.softmax(l2, Some(&mask)).unwrap();
        let ls = g.log_softmax(ln, Some(&mask)).unwrap();
        let lse = g.logsumexp(l2).unwrap();
        let lse = g.reshape(lse, &[3, 1]).unwrap();
        let c = g.concat(&[sm, ls, lse], 1).unwrap();
        let sl = g.sum_last(c).unwrap();
        let p = g.pick(c, &[0, 6, 10]).unwrap();
        let c2 = g.concat(&[sl, p], 0).unwrap();
        weighted_sum(g, c2)
    });
}

#[test]
fn masked_entries_carry_no_probability() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 3], vec![5.0, 1.0, -2.0, 0.0, 3.0, 3.0]).unwrap());
    let mask = [false, true, false, true, false, false];
    let y = g.softmax(x, Some(&mask)).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[3], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    assert!((v[4] + v[5] - 1.0).abs() < 1e-15);
}

#[test]
fn gather_relu_clamp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let table = random_tensor(&[4, 3], &mut rng);
    check_inputs(vec![table], |g, v| {
        let rows = g.gather(v[0], &[2, 0, 2, 3]).unwrap();
        let r = g.relu(rows);
        let c = g.clamp_min(rows, -0.2);
        let s = g.add(r, c).unwrap();
        weighted_sum(g, s)
    });
}

#[test]
fn attention_gradients_with_mask_and_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random_tensor(&[2, 3, 4], &mut rng);
    let k = random_tensor(&[2, 3, 4], &mut rng);
    let v = random_tensor(&[2, 3, 4], &mut rng);
    let mask = vec![false, true, false, false, false, true];
    check_inputs(vec![q.clone(), k.clone(), v.clone()], move |g, x| {
        let a = g.attention(x[0], x[1], x[2], 2, Some(&mask), false).unwrap();
        let b = g.attention(x[0], x[1], x[2], 2, None, true).unwrap();
        let c = g.concat(&[a, b], 2).unwrap();
        weighted_sum(g, c)
    });
}

#[test]
fn attention_matches_unfused_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let q = random_tensor(&[1, 2, 2], &mut rng);
    let k = random_tensor(&[1, 3, 2], &mut rng);
    let v = random_tensor(&[1, 3, 2], &mut rng);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let fused = g.attention(qv, kv, vv, 1, None, false).unwrap();
    let s = g.matmul_t(qv, kv).unwrap();
    let s = g.scale(s, 1.0 / 2f64.sqrt());
    let p = g.softmax(s, None).unwrap();
    let o = g.matmul(p, vv).unwrap();
    for (a, b) in g.value(fused).data().iter().zip(g.value(o).data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn time2vec_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = random_tensor(&[4], &mut rng);
    let b = random_tensor(&[4], &mut rng);
    let tau = vec![0.5, 3.0, 23.9];
    check_inputs(vec![w, b], move |g, v| {
        let t = g.time2vec(&tau, v[0], v[1]).unwrap();
        weighted_sum(g, t)
    });
}

proptest! {
    #[test]
    fn masked_softmax_rows_sum_to_one(
        vals in proptest::collection::vec(-30.0f64..30.0, 12),
        mask in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let mut mask = mask;
        for r in 0..3 {
            mask[r * 4] = false; // keep one key per row
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = g.softmax(x, Some(&mask)).unwrap();
        for (r, row) in g.value(y).data().chunks(4).enumerate() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for j in 0..4 {
                if mask[r * 4 + j] {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }
}
