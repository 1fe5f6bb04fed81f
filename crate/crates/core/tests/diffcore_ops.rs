use approx::assert_abs_diff_eq;
use modaux::diffcore::{
    finite_difference_check, Adam, BatchNorm1d, Graph, ParamStore, Session, Tensor, FD_STEP,
};
use modaux::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

#[test]
fn tensor_rejects_bad_construction() {
    assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(matches!(
        Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]),
        Err(Error::NonFinite { .. })
    ));
    assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let y = g.matmul(a, eye).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);

    let col = g.constant(t(&[2, 1], &[5., 6.]));
    let y = g.matmul(a, col).unwrap();
    assert_eq!(g.value(y).data(), &[17., 39.]);

    let p = g.constant(Tensor::zeros(&[3, 2]));
    let q = g.constant(Tensor::zeros(&[3, 2]));
    match g.matmul(p, q) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![3, 2]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
    let k = g.constant(t(&[1, 1, 1, 1], &[1.]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);

    let x = g.constant(Tensor::ones(&[64, 16, 16]));
    let k = g.constant(Tensor::ones(&[12, 64, 1, 1]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[12, 16, 16]);

    let x = g.constant(Tensor::ones(&[1, 3, 3]));
    let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.]);

    let small = g.constant(Tensor::ones(&[1, 2, 2]));
    assert!(g.conv2d(small, k, None, 1, 0).is_err());
}

#[test]
fn conv2d_output_extent_formula() {
    let mut g = Graph::<f64>::new();
    for (h, k, stride, pad) in [(7, 3, 2, 1), (8, 3, 1, 0), (9, 5, 2, 2), (6, 1, 3, 0)] {
        let x = g.constant(Tensor::ones(&[2, 1, h, h]));
        let w = g.constant(Tensor::ones(&[1, 1, k, k]));
        let y = g.conv2d(x, w, None, stride, pad).unwrap();
        let expect = (h + 2 * pad - k) / stride + 1;
        assert_eq!(g.shape(y), &[2, 1, expect, expect]);
    }
}

#[test]
fn pool_and_upsample_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::ones(&[64, 32, 32]));
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.shape(y), &[64, 16, 16]);

    let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.]);

    let x = g.constant(t(&[1, 1, 1], &[5.]));
    let y = g.upsample2(x).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2]);
    assert_eq!(g.value(y).data(), &[5., 5., 5., 5.]);

    let odd = g.constant(Tensor::<f64>::ones(&[1, 3, 4]));
    assert!(g.max_pool2(odd).is_err());
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[-1., 2.]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0., 2.]);

    let x = g.constant(Tensor::<f64>::zeros(&[4]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);

    let x = g.constant(Tensor::<f64>::zeros(&[1]));
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5]);
}

#[test]
fn softmax_slices_sum_to_one_on_any_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-8.0..8.0)).collect();
    for axis in 0..3 {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 4, 5], &data));
        let y = g.softmax(x, axis).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
        let shape = [3usize, 4, 5];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..shape[axis])
                    .map(|j| v[o * shape[axis] * inner + j * inner + i])
                    .sum();
                assert!((s - 1.0).abs() <= 1e-9, "axis {axis}: slice sums to {s}");
            }
        }
    }
}

#[test]
fn batchnorm_examples() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm1d::new(&mut store, "bn", 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    {
        let mut s = Session::new(&mut store, true, &mut rng);
        let x = s.graph.constant(t(&[2, 1], &[1., 3.]));
        let y = bn.forward(&mut s, x).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let v = s.graph.value(y).data();
        assert_abs_diff_eq!(v[0], -expect, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], expect, epsilon = 1e-12);
    }
    // running stats moved by momentum 0.1 toward mean 2 and unbiased variance 2
    let rs = store.running_stats(bn.stats);
    assert_abs_diff_eq!(rs.mean[0], 0.2, epsilon = 1e-12);
    assert_abs_diff_eq!(rs.var[0], 0.9 + 0.2, epsilon = 1e-12);

    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm1d::new(&mut store, "bn", 2).unwrap();
    let mut s = Session::new(&mut store, false, &mut rng);
    let x = s.graph.constant(t(&[3, 2], &[0.5, -1., 2., 3., -4., 0.]));
    let y = bn.forward(&mut s, x).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in s.graph.value(y).data().iter().zip(s.graph.value(x).data()) {
        assert_abs_diff_eq!(*a, b * scale, epsilon = 1e-12);
    }

    let mut s = Session::new(&mut store, true, &mut rng);
    let one = s.graph.constant(t(&[1, 2], &[1., 2.]));
    assert!(bn.forward(&mut s, one).is_err());
}

#[test]
fn batchnorm_on_standardized_input_is_near_identity() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm1d::new(&mut store, "bn", 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = Session::new(&mut store, true, &mut rng);
    let x = s.graph.constant(t(&[4, 1], &[-1., 1., -1., 1.]));
    let y = bn.forward(&mut s, x).unwrap();
    for (a, b) in s.graph.value(y).data().iter().zip([-1., 1., -1., 1.]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
    }
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::ones(&[1000]));
    let y = g.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    let y = g.dropout(x, 0.7, false, &mut rng).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());

    let big = g.constant(Tensor::<f64>::ones(&[1_000_000]));
    let y = g.dropout(big, 0.5, true, &mut rng).unwrap();
    let mean = g.value(y).data().iter().sum::<f64>() / 1e6;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn concat_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::ones(&[64, 16, 16]));
    let b = g.constant(Tensor::ones(&[64, 16, 16]));
    let y = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.shape(y), &[128, 16, 16]);
    let single = g.concat(&[a], 0).unwrap();
    assert_eq!(single, a);
    let vs: Vec<_> = (0..3).map(|_| g.constant(Tensor::ones(&[512]))).collect();
    let y = g.concat(&vs, 0).unwrap();
    assert_eq!(g.shape(y), &[1536]);
    let bad = g.constant(Tensor::ones(&[64, 8, 16]));
    assert!(g.concat(&[a, bad], 0).is_err());
}

#[test]
fn concat_then_split_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for axis in 0..3 {
        let mut g = Graph::new();
        let mut parts = Vec::new();
        let mut sizes = Vec::new();
        for i in 0..3 {
            let mut shape = vec![2, 3, 4];
            shape[axis] = i + 1;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            parts.push(g.constant(t(&shape, &data)));
            sizes.push(i + 1);
        }
        let joined = g.concat(&parts, axis).unwrap();
        let back = g.split(joined, axis, &sizes).unwrap();
        for (p, b) in parts.iter().zip(back) {
            assert_eq!(g.value(*p), g.value(b));
        }
    }
}

#[test]
fn mse_examples() {
    let mut g = Graph::new();
    let p = g.constant(t(&[2], &[0., 0.]));
    let q = g.constant(t(&[2], &[1., 3.]));
    let l = g.mse_loss(p, p).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
    let l = g.mse_loss(p, q).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 5.0);
    let a = g.constant(t(&[1], &[2.]));
    let b = g.constant(t(&[1], &[5.]));
    let l = g.mse_loss(a, b).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 9.0);
    let three = g.constant(Tensor::zeros(&[3]));
    assert!(g.mse_loss(p, three).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::<f64>::zeros(&[1, 3]));
    let l = g.cross_entropy(z, &[1]).unwrap();
    assert_abs_diff_eq!(g.value(l).item().unwrap(), 3f64.ln(), epsilon = 1e-15);

    let sharp = g.constant(t(&[1, 3], &[60., 0., 0.]));
    let l = g.cross_entropy(sharp, &[0]).unwrap();
    assert!(g.value(l).item().unwrap() < 1e-20);

    let x = g.constant(t(&[1, 2], &[2., 0.]));
    let l = g.cross_entropy(x, &[0]).unwrap();
    let expect = (1.0 + (-2.0f64).exp()).ln();
    assert_abs_diff_eq!(g.value(l).item().unwrap(), expect, epsilon = 1e-15);
    assert_abs_diff_eq!(expect, 0.1269, epsilon = 1e-4);

    assert!(matches!(
        g.cross_entropy(x, &[2]),
        Err(Error::OutOfRange { .. })
    ));

    // segmentation layout: uniform logits over K classes per pixel
    let seg = g.constant(Tensor::<f64>::zeros(&[2, 4, 3, 3]));
    let targets = vec![3; 18];
    let l = g.cross_entropy(seg, &targets).unwrap();
    assert_abs_diff_eq!(g.value(l).item().unwrap(), 4f64.ln(), epsilon = 1e-15);
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(&[3], &[0.3, -0.2, 0.9])).unwrap();
    let unused = store.add("unused", t(&[2], &[1., 1.])).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let _ = g.param(&store, unused);
    let x = g.constant(t(&[3], &[4., 5., 6.]));
    let prod = g.mul(wv, x).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.grad(w).unwrap().data(), &[4., 5., 6.]);
    assert!(
        store.grad(unused).is_none(),
        "disconnected parameter gets no gradient"
    );

    // repeated backward without reset accumulates
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.grad(w).unwrap().data(), &[8., 10., 12.]);

    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(&[1], &[3.])).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let zero = g.constant(Tensor::zeros(&[1]));
    let loss = g.mse_loss(wv, zero).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.grad(w).unwrap().data(), &[6.]);

    let vec_out = g.constant(Tensor::zeros(&[2]));
    assert!(g.backward(vec_out).is_err());
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut store = ParamStore::<f32>::new();
    store.add("a", Tensor::zeros(&[1])).unwrap();
    assert!(matches!(
        store.add("a", Tensor::zeros(&[1])),
        Err(Error::DuplicateParameter(_))
    ));
}

#[test]
fn optimizer_examples() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(&[2], &[1.5, -2.0])).unwrap();
    let mut adam = Adam::new(0.1).unwrap();
    assert!(matches!(
        adam.step(&mut store),
        Err(Error::MissingGradients)
    ));
    store.accumulate_grad(w, &[0.0, 0.0]);
    adam.step(&mut store).unwrap();
    assert_eq!(store.value(w).data(), &[1.5, -2.0]);
    assert!(store.grad(w).is_none(), "step clears gradients");

    // f(w) = w^2 from w = 1
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(&[1], &[1.0])).unwrap();
    let mut adam = Adam::new(0.1).unwrap();
    store.accumulate_grad(w, &[2.0]);
    adam.step(&mut store).unwrap();
    assert!(store.value(w).data()[0].abs() < 1.0);

    // f(w) = (w - 3)^2, 200 steps
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(&[1], &[0.0])).unwrap();
    let mut adam = Adam::new(0.1).unwrap();
    for _ in 0..200 {
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let target = g.constant(t(&[1], &[3.0]));
        let loss = g.mse_loss(wv, target).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        adam.step(&mut store).unwrap();
    }
    let end = store.value(w).data()[0];
    assert!((end - 3.0).abs() < 0.01, "ended at {end}");
    assert_eq!(adam.step_count(0), 200);
}

#[test]
fn gradient_check_spec_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut rand = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t(shape, &v)
    };
    let a = rand(&[4, 3]);
    let b = rand(&[3, 2]);
    let r = finite_difference_check(|g, v| g.matmul(v[0], v[1]), &[a, b], FD_STEP).unwrap();
    assert!(r.passes(1e-4), "matmul {r:?}");

    let away: Vec<f64> = rand(&[10])
        .data()
        .iter()
        .map(|v| {
            if v.abs() < 0.1 {
                v.signum() * 0.1 + v
            } else {
                *v
            }
        })
        .collect();
    let r = finite_difference_check(|g, v| g.relu(v[0]), &[t(&[10], &away)], FD_STEP).unwrap();
    assert!(r.passes(1e-4), "relu {r:?}");

    let logits = rand(&[5, 4]);
    let r = finite_difference_check(
        |g, v| {
            let p = g.softmax(v[0], 1)?;
            let _ = p;
            g.cross_entropy(v[0], &[0, 3, 1, 2, 2])
        },
        &[logits],
        FD_STEP,
    )
    .unwrap();
    assert!(r.passes(1e-4), "cross entropy {r:?}");
}

#[test]
fn eval_forward_is_bit_deterministic() {
    let mut store = ParamStore::<f32>::new();
    let mut init = ChaCha8Rng::seed_from_u64(1);
    let lin = modaux::diffcore::Linear::new(&mut store, "l", 4, 3, &mut init).unwrap();
    let bn = BatchNorm1d::new(&mut store, "bn", 3).unwrap();
    let run = |store: &mut ParamStore<f32>, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Session::new(store, false, &mut rng);
        let x = s.graph.constant(
            Tensor::from_f64(vec![2, 4], &[0.1, 0.2, 0.3, 0.4, -1., 2., -3., 4.]).unwrap(),
        );
        let h = lin.forward(&mut s, x).unwrap();
        let h = bn.forward(&mut s, h).unwrap();
        let h = s.dropout(h, 0.5).unwrap();
        s.graph.value(h).clone()
    };
    let a = run(&mut store, 1);
    let b = run(&mut store, 999);
    assert_eq!(a.data(), b.data());
}

#[test]
fn every_op_passes_finite_differences() {
    let checks = modaux::diffcore::op_suite(10, 2024).unwrap();
    assert!(checks.len() >= 30);
    for c in &checks {
        assert!(c.worst.passes(1e-4), "{}: {:?}", c.op, c.worst);
    }
}
