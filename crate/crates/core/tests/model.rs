use adaring_core::autodiff::{check_program, Graph, ScalarProgram};
use adaring_core::model::{Branch, Combinator, DualEncoderModel, ModelConfig};
use adaring_core::tensor::{norm, Tensor};
use adaring_core::Result;
use proptest::prelude::*;

const GOLDEN_VISUAL: [f64; 6] = [
    -0.1856917088612709,
    -0.047274247556185464,
    -0.08327058308156268,
    0.18671878089012087,
    -0.09465276979129612,
    0.12142725906834817,
];
const GOLDEN_TEXTUAL: [f64; 6] = [
    -0.1381614614094098,
    -0.01727963194990278,
    -0.2422002485473374,
    -0.15729781464535797,
    -0.2188217505547926,
    0.2171950721648157,
];

#[test]
fn default_embeddings_match_recorded_values() {
    let model = DualEncoderModel::new(&ModelConfig::default()).unwrap();
    let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.1).sin()).collect();
    let v = model.encode_image(&x).unwrap();
    let t = model.encode_text(&x).unwrap();
    for (got, want) in v.iter().zip(GOLDEN_VISUAL).chain(t.iter().zip(GOLDEN_TEXTUAL)) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn swapped_branch_labels_with_equal_seeds() {
    let cfg = ModelConfig {
        visual_seed: 5,
        textual_seed: 5,
        ..ModelConfig::default()
    };
    let model = DualEncoderModel::new(&cfg).unwrap();
    let x: Vec<f64> = (0..32).map(|i| (i as f64).cos()).collect();
    assert_eq!(model.encode_image(&x).unwrap(), model.encode_text(&x).unwrap());
}

// cos(W x, c) as a function of W and x
struct LinearCosine {
    c: Tensor,
}

impl ScalarProgram for LinearCosine {
    fn eval<G: Graph>(&self, g: &mut G, inputs: &[G::Value]) -> Result<G::Value> {
        let wx = g.contract(&inputs[1], &inputs[0], &[(1, 1)])?;
        let c = g.constant(&self.c);
        let cos = g.cosine_similarity(&wx, &c)?;
        g.mean(&cos)
    }
}

#[test]
fn linear_cosine_gradients() {
    let w = Tensor::from_vec(&[4, 3], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
    let x = Tensor::from_vec(&[1, 3], vec![0.4, -1.2, 0.9]).unwrap();
    let c = Tensor::from_vec(&[1, 4], vec![0.3, 0.1, -0.8, 0.5]).unwrap();
    let r = check_program("linear_cosine", &LinearCosine { c }, &[w, x], 1e-5, 1e-4).unwrap();
    assert!(r.pass, "{}", r.max_rel_err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gates_stay_open(
        w in prop::collection::vec(-1.0f64..1.0, 16),
        b in prop::collection::vec(-3.0f64..3.0, 2),
        x in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let comb = Combinator {
            weight: Tensor::from_vec(&[2, 8], w).unwrap(),
            bias: Tensor::from_vec(&[2], b).unwrap(),
        };
        let (gf, gc) = comb.gates(&x).unwrap();
        prop_assert!(gf > 0.0 && gf < 1.0 && gc > 0.0 && gc < 1.0);
    }

    #[test]
    fn embeddings_are_unit_norm(x in prop::collection::vec(-2.0f64..2.0, 32)) {
        prop_assume!(norm(&x) > 1e-3);
        let model = DualEncoderModel::new(&ModelConfig::default()).unwrap();
        for b in [Branch::Visual, Branch::Textual] {
            let e = model.encode_batch(b, &Tensor::from_vec(&[1, 32], x.clone()).unwrap()).unwrap();
            prop_assert!((norm(e.data()) - 1.0).abs() < 1e-12);
        }
    }
}
