use modaux::diffcore::{Graph, Tensor};
use proptest::prelude::*;

fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        (Just(shape), prop::collection::vec(-15.0f64..15.0, n))
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution((shape, data) in shape_and_data(), axis_pick in 0usize..3) {
        let axis = axis_pick % shape.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(shape.clone(), &data).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let v = g.value(y).data();
        prop_assert!(v.iter().all(|&p| p > 0.0 && (p < 1.0 || shape[axis] == 1)));
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..shape[axis]).map(|j| v[(o * shape[axis] + j) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn cross_entropy_nonnegative_and_uniform_is_ln_k(
        n in 1usize..6,
        k in 2usize..8,
        seed in any::<u64>(),
    ) {
        let logits: Vec<f64> = (0..n * k).map(|i| ((seed.wrapping_add(i as u64) % 97) as f64 - 48.0) / 7.0).collect();
        let targets: Vec<usize> = (0..n).map(|i| (seed as usize).wrapping_add(i) % k).collect();
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(vec![n, k], &logits).unwrap());
        let l = g.cross_entropy(z, &targets).unwrap();
        prop_assert!(g.value(l).item().unwrap() >= 0.0);
        let u = g.constant(Tensor::full(&[n, k], 0.37));
        let l = g.cross_entropy(u, &targets).unwrap();
        prop_assert!((g.value(l).item().unwrap() - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn concat_split_roundtrip(
        rows in 1usize..4,
        widths in prop::collection::vec(1usize..4, 1..4),
        seed in any::<u32>(),
    ) {
        let mut g = Graph::<f64>::new();
        let mut parts = Vec::new();
        let mut counter = seed as f64;
        for &w in &widths {
            let data: Vec<f64> = (0..rows * w).map(|_| { counter = (counter * 1.37 + 0.11) % 13.0; counter }).collect();
            parts.push(g.constant(Tensor::from_f64(vec![rows, w], &data).unwrap()));
        }
        let joined = g.concat(&parts, 1).unwrap();
        prop_assert_eq!(g.shape(joined)[1], widths.iter().sum::<usize>());
        let back = g.split(joined, 1, &widths).unwrap();
        for (p, b) in parts.iter().zip(back) {
            prop_assert_eq!(g.value(*p), g.value(b));
        }
    }
}
