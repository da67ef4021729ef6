use glimpse::gradcheck::{check_inputs, op_cases, run_op_case, seeded_inputs, weighted_sum, CheckOutcome};
use glimpse::rng::Seed;
use glimpse::tensor::{Graph, OpKind, Tensor};
use proptest::prelude::*;

const INSTANCES: u64 = 20;

fn run(case: &glimpse::gradcheck::OpCase, instance: u64, fault: Option<OpKind>) -> CheckOutcome {
    run_op_case(case, instance, fault).unwrap()
}

#[test]
fn every_differentiable_op_has_a_case() {
    let covered: Vec<OpKind> = op_cases().iter().map(|c| c.kind).collect();
    for k in OpKind::DIFFERENTIABLE {
        assert!(covered.contains(&k), "no gradient case for {k}");
    }
}

#[test]
fn every_op_matches_finite_differences_on_seeded_instances() {
    for case in op_cases() {
        for i in 0..INSTANCES {
            let out = run(&case, i, None);
            assert!(out.passed(), "{} instance {i}: {out:?}", case.kind);
            assert!(out.entries > 0);
        }
    }
}

#[test]
fn injected_fault_is_caught_for_every_op() {
    for case in op_cases() {
        let out = run(&case, 0, Some(case.kind));
        assert!(!out.passed(), "fault in {} went unnoticed", case.kind);
    }
}

#[test]
fn composite_graph_matches_finite_differences() {
    let x = seeded_inputs(&[(4, 4), (4, 4), (1, 4)], Seed::new(77));
    let out = check_inputs("composite", &x, None, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.gelu(h);
        let h = g.layer_norm(h, 1e-5);
        let a = g.attention(h, h, h, 2, 2)?;
        let s = g.softmax_rows(a);
        let c = g.concat_cols(&[s, h])?;
        g.cross_entropy(c, &[1, 7, 3, 0])
    })
    .unwrap();
    assert!(out.passed(), "{out:?}");
}

#[test]
fn backward_is_linear_in_the_output() {
    let mut rng = Seed::new(31).rng();
    let x = Tensor::randn(3, 3, 1.0, &mut rng);
    let w = Tensor::randn(3, 3, 1.0, &mut rng);

    let grad_of = |which: u8| -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let wv = g.constant(w.clone());
        let f = {
            let y = g.matmul(xv, wv).unwrap();
            let s = g.softmax_rows(y);
            let p = g.mul(s, xv).unwrap();
            g.sum(p)
        };
        let h = {
            let y = g.gelu(xv);
            weighted_sum(&mut g, y, 9).unwrap()
        };
        let out = match which {
            0 => f,
            1 => h,
            _ => g.add(f, h).unwrap(),
        };
        g.backward(out).unwrap();
        g.grad(xv).unwrap().to_vec()
    };
    let (gf, gh, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gs.len() {
        assert!((gs[i] - (gf[i] + gh[i])).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in prop::collection::vec(prop::collection::vec(-1e4f64..1e4, 1..12), 1..6)
    ) {
        let width = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| {
            let mut r = r.clone();
            r.resize(width, 0.0);
            r
        }).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(rows.len(), width, data).unwrap());
        let y = g.softmax_rows(x);
        let out = g.value(y);
        for r in 0..out.rows() {
            let s: f64 = out.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(out.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn forward_ops_stay_finite(seed in 0u64..10_000) {
        let mut rng = Seed::new(seed).rng();
        let x = Tensor::randn(4, 4, 50.0, &mut rng);
        let mut g = Graph::new();
        let v = g.variable(x);
        let a = g.attention(v, v, v, 2, 2).unwrap();
        let s = g.sigmoid(a);
        let e = g.gelu(s);
        let n = g.layer_norm(e, 1e-5);
        let loss = g.cross_entropy(n, &[0, 1, 2, 3]).unwrap();
        g.backward(loss).unwrap();
        prop_assert!(g.value(loss).is_finite());
        prop_assert!(g.grad(v).unwrap().iter().all(|x| x.is_finite()));
    }
}
