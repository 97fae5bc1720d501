use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::rng::Rng;

fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for t in 0..k {
                s += a.at(i, t) * b.at(t, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

#[test]
fn matmul_identity_and_known_product() {
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
    let n = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
    let expected = triple_loop(&m, &n);
    assert_eq!(expected, Tensor::from_rows(&[vec![19.0, 22.0], vec![43.0, 50.0]]));
    assert_eq!(m.matmul(&n).unwrap(), expected);
}

#[test]
fn matmul_matches_triple_loop_on_random_shapes() {
    let mut rng = Rng::new(11);
    for _ in 0..20 {
        let (r, k, c) = (
            rng.range_inclusive(1, 17),
            rng.range_inclusive(1, 17),
            rng.range_inclusive(1, 17),
        );
        let a = rng.normal_tensor(&[r, k]);
        let b = rng.normal_tensor(&[k, c]);
        let got = a.matmul(&b).unwrap();
        let want = triple_loop(&a, &b);
        assert!(got.zip_map(&want, |x, y| x - y).max_abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_is_structured() {
    let mut g = Graph::inference();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
}

#[test]
fn matmul_backward_of_sum_is_broadcast_transpose() {
    let mut rng = Rng::new(5);
    let mut store = ParamStore::new();
    let a = store.add("a", Group::Other, rng.normal_tensor(&[3, 4])).unwrap();
    let b_val = rng.normal_tensor(&[4, 2]);
    let mut g = Graph::new(&[Group::Other]);
    let an = g.param(&store, a);
    let bn = g.constant(b_val.clone());
    let p = g.matmul(an, bn).unwrap();
    let l = g.sum(p);
    g.backward(l, &mut store).unwrap();
    // d/da_ij sum(a·b) = Σ_c b_jc
    for i in 0..3 {
        for j in 0..4 {
            let want: f64 = b_val.row(j).iter().sum();
            assert!((store.grad(a).at(i, j) - want).abs() < 1e-12);
        }
    }
    let fd = grad_check(&mut store, &[Group::Other], 1e-5, |g, s| {
        let an = g.param(s, a);
        let bn = g.constant(b_val.clone());
        let p = g.matmul(an, bn)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(fd.max_rel_error < 1e-6, "{fd:?}");
}

#[test]
fn softmax_examples() {
    let s = softmax_rows(&Tensor::from_rows(&[vec![0.0; 4]])).unwrap();
    assert!(s.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    let s = softmax_rows(&Tensor::from_rows(&[vec![1f64.ln(), 3f64.ln()]])).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]])).unwrap();
    assert!(s.all_finite());
    assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::from_rows(&[vec![0.0, -2.0]]));
    let t = g.tanh(x);
    assert_eq!(g.value(t).data()[0], 0.0);
    let l = g.leaky_relu(x, 0.02);
    assert!((g.value(l).data()[1] + 0.04).abs() < 1e-15);

    let mut store = ParamStore::new();
    let p = store
        .add("x", Group::Other, Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]))
        .unwrap();
    let mut g = Graph::new(&[Group::Other]);
    let x = g.param(&store, p);
    let sq = g.square(x);
    let l = g.sum(sq);
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.grad(p).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn log_of_nonpositive_is_domain_error() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
    assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut store = ParamStore::new();
    let p = store.add("x", Group::Other, Tensor::zeros(&[2, 2])).unwrap();
    let mut g = Graph::new(&[Group::Other]);
    let x = g.param(&store, p);
    let y = g.tanh(x);
    assert!(matches!(g.backward(y, &mut store), Err(Error::Contract(_))));
}

#[test]
fn constant_loss_has_exactly_zero_gradient() {
    let mut rng = Rng::new(2);
    let mut store = ParamStore::new();
    let p = store.add("x", Group::Other, rng.normal_tensor(&[3, 3])).unwrap();
    let mut g = Graph::new(&[Group::Other]);
    let x = g.param(&store, p);
    let z = g.scale(x, 0.0);
    let l = g.sum(z);
    g.backward(l, &mut store).unwrap();
    assert!(store.grad(p).data().iter().all(|&v| v == 0.0));
    let fd = grad_check(&mut store, &[Group::Other], 1e-5, |g, s| {
        let x = g.param(s, p);
        let c = g.constant(Tensor::full(&[3, 3], 2.5));
        let z = g.scale(x, 0.0);
        let y = g.add(z, c)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert_eq!(fd.max_rel_error, 0.0);
}

#[test]
fn quadratic_loss_gradcheck() {
    let mut rng = Rng::new(9);
    let mut store = ParamStore::new();
    let p = store.add("w", Group::Other, rng.normal_tensor(&[3, 3])).unwrap();
    let target = rng.normal_tensor(&[3, 3]);
    let fd = grad_check(&mut store, &[Group::Other], 1e-5, |g, s| {
        let w = g.param(s, p);
        let t = g.constant(target.clone());
        let d = g.sub(w, t)?;
        let sq = g.square(d);
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(fd.max_rel_error < 1e-6, "{fd:?}");
}

#[test]
fn every_op_matches_finite_differences_on_ten_seeds() {
    for r in op_suite(10).unwrap() {
        assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
    }
}

#[test]
fn backward_is_additive() {
    let mut rng = Rng::new(4);
    let mut store = ParamStore::new();
    let p = store.add("x", Group::Other, rng.normal_tensor(&[4, 3])).unwrap();
    let run = |store: &mut ParamStore| {
        let mut g = Graph::new(&[Group::Other]);
        let x = g.param(store, p);
        let t = g.tanh(x);
        let y = g.softmax_rows(t).unwrap();
        let l = g.log(y).unwrap();
        let s = g.sum(l);
        g.backward(s, store).unwrap();
    };
    run(&mut store);
    let once = store.grad(p).clone();
    run(&mut store);
    let twice = store.grad(p).clone();
    assert_eq!(twice, once.scale(2.0));
}

#[test]
fn graph_replay_is_bit_identical() {
    let mut rng = Rng::new(8);
    let mut store = ParamStore::new();
    let p = store.add("x", Group::Other, rng.normal_tensor(&[5, 5])).unwrap();
    let run = |store: &mut ParamStore| {
        store.zero_grad();
        let mut g = Graph::new(&[Group::Other]);
        let x = g.param(store, p);
        let m = g.matmul(x, x).unwrap();
        let y = g.log_softmax_rows(m).unwrap();
        let l = g.mean(y);
        g.backward(l, store).unwrap();
        (g.value(l).item().to_bits(), store.grad(p).clone())
    };
    let (a, ga) = run(&mut store);
    let (b, gb) = run(&mut store);
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn untrainable_groups_get_no_gradient() {
    let mut store = ParamStore::new();
    let f = store.add("f", Group::Feature, Tensor::full(&[2, 2], 1.0)).unwrap();
    let o = store.add("o", Group::Other, Tensor::full(&[2, 2], 1.0)).unwrap();
    let mut g = Graph::new(&[Group::Feature, Group::Other]);
    let fnode = g.param(&store, f);
    let onode = g.param(&store, o);
    let y = g.mul(fnode, onode).unwrap();
    let l = g.sum(y);
    g.backward(l, &mut store).unwrap();
    assert!(store.grad(f).data().iter().all(|&v| v == 0.0));
    assert!(store.grad(o).data().iter().all(|&v| v == 1.0));
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_normalised(
        rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 5), 1..6)
    ) {
        let s = softmax_rows(&Tensor::from_rows(&rows)).unwrap();
        for r in 0..s.rows() {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| p > 0.0));
        }
    }
}
