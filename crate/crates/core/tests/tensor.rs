use adaring_core::tensor::{contract, cosine_similarity, dot, norm, tensorize, vectorize, Shape, Tensor, TensorError};
use proptest::prelude::*;

fn arb_tensor(dims: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = dims.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |v| Tensor::from_vec(&dims, v).unwrap())
}

fn arb_dims() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..=4)
}

#[test]
fn tensorize_examples() {
    let t = tensorize(&[1.0, 2.0, 3.0, 4.0], &Shape::new(vec![2, 2]).unwrap()).unwrap();
    assert_eq!((t.at(&[0, 1]), t.at(&[1, 0])), (2.0, 3.0));
    let s = tensorize(&[5.0], &Shape::new(vec![1, 1, 1]).unwrap()).unwrap();
    assert_eq!(s.at(&[0, 0, 0]), 5.0);
    assert!(matches!(
        tensorize(&[1.0, 2.0, 3.0], &Shape::new(vec![2, 2]).unwrap()),
        Err(TensorError::ShapeMismatch { .. })
    ));
    assert_eq!(vectorize(&Tensor::zeros(&[3, 3]).unwrap()), vec![0.0; 9]);
}

#[test]
fn contract_nested_loop_oracle() {
    let a = Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
    let b = Tensor::from_vec(&[4, 3, 2], (0..24).map(|v| (v as f64 * 0.91).cos()).collect()).unwrap();
    let c = contract(&a, &b, &[(2, 0), (1, 1)]).unwrap();
    assert_eq!(c.dims(), &[2, 2]);
    for i in 0..2 {
        for m in 0..2 {
            let mut s = 0.0;
            for j in 0..3 {
                for k in 0..4 {
                    s += a.at(&[i, j, k]) * b.at(&[k, j, m]);
                }
            }
            assert!((c.at(&[i, m]) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn contract_errors() {
    let a = Tensor::ones(&[2, 3]).unwrap();
    assert!(matches!(
        contract(&a, &a, &[(1, 0)]),
        Err(TensorError::ExtentMismatch { .. })
    ));
    assert!(matches!(
        contract(&a, &a, &[(2, 0)]),
        Err(TensorError::InvalidAxis { .. })
    ));
}

#[test]
fn contract_with_zeros_is_zero() {
    let a = Tensor::ones(&[3, 4]).unwrap();
    let z = Tensor::zeros(&[4, 2]).unwrap();
    assert_eq!(contract(&a, &z, &[(1, 0)]).unwrap(), Tensor::zeros(&[3, 2]).unwrap());
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!(matches!(
        cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
        Err(TensorError::ZeroNorm)
    ));
}

proptest! {
    #[test]
    fn tensorize_round_trip(dims in arb_dims(), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64).sin()).collect();
        let t = tensorize(&v, &Shape::new(dims).unwrap()).unwrap();
        prop_assert_eq!(vectorize(&t), v);
    }

    #[test]
    fn matmul_matches_triple_loop(a in arb_tensor(vec![5, 7]), b in arb_tensor(vec![7, 3])) {
        let c = contract(&a, &b, &[(1, 0)]).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                prop_assert!((c.at(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contract_is_bilinear(
        a in arb_tensor(vec![2, 3, 4]),
        a2 in arb_tensor(vec![2, 3, 4]),
        b in arb_tensor(vec![4, 3, 2]),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let axes = [(2, 0), (1, 1)];
        let mixed = a.scale(alpha).add(&a2.scale(beta)).unwrap();
        let lhs = contract(&mixed, &b, &axes).unwrap();
        let rhs = contract(&a, &b, &axes).unwrap().scale(alpha)
            .add(&contract(&a2, &b, &axes).unwrap().scale(beta)).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn contract_is_deterministic(a in arb_tensor(vec![3, 4]), b in arb_tensor(vec![4, 2])) {
        let c1 = contract(&a, &b, &[(1, 0)]).unwrap();
        let c2 = contract(&a, &b, &[(1, 0)]).unwrap();
        prop_assert_eq!(c1.to_le_bytes(), c2.to_le_bytes());
    }

    #[test]
    fn cosine_matches_formula(u in prop::collection::vec(-1.0f64..1.0, 8), v in prop::collection::vec(-1.0f64..1.0, 8)) {
        prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
        let c = cosine_similarity(&u, &v).unwrap();
        prop_assert!((c - dot(&u, &v) / (norm(&u) * norm(&v))).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}
