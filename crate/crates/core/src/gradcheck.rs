//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever calls the forward pass, so it is independent of
//! every backward rule it audits.

use rayon::prelude::*;

use crate::error::Result;
use crate::fusion::{FusionModule, FusionVariant, GateMode, TokenSeq};
use crate::rng::Seed;
use crate::tensor::{Graph, OpKind, ParameterSet, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient is
/// zero are judged by absolute error instead.
pub const FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Where the worst entry sits, as `tensor[index]`.
    pub worst: String,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights, so that
/// checks do not degenerate on outputs whose plain sum is constant (softmax
/// rows, normalized rows).
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(y);
    let w = Tensor::uniform(r, c, 1.0, &mut Seed::new(seed).child("probe").rng());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Checks gradients with respect to free input tensors.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], fault: Option<OpKind>, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).values()[0])
    };

    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| g.grad(*v).map_or(vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();

    let mut outcome = CheckOutcome {
        name: name.to_string(),
        entries: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut xs = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..xs[ti].len() {
            let orig = xs[ti].values()[i];
            xs[ti].values_mut()[i] = orig + STEP;
            let up = eval(&xs)?;
            xs[ti].values_mut()[i] = orig - STEP;
            let down = eval(&xs)?;
            xs[ti].values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(grad[i], numeric);
            outcome.entries += 1;
            if err > outcome.max_rel_err || outcome.worst.is_empty() {
                outcome.max_rel_err = err.max(outcome.max_rel_err);
                outcome.worst = format!("input{ti}[{i}]");
            }
        }
    }
    Ok(outcome)
}

/// Checks gradients with respect to every entry of every parameter in `ps`.
pub fn check_params<F>(name: &str, ps: &ParameterSet, fault: Option<OpKind>, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    let out = f(&mut g, ps)?;
    g.backward(out)?;
    let mut with_grads = ps.clone();
    with_grads.zero_grad();
    g.store_grads(&mut with_grads)?;

    let mut outcome = CheckOutcome {
        name: name.to_string(),
        entries: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut probe = ps.clone();
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for pname in &names {
        let len = ps.get(pname).map_or(0, Tensor::len);
        let grad: Vec<f64> = with_grads
            .get(pname)
            .and_then(Tensor::grad)
            .map_or(vec![0.0; len], <[f64]>::to_vec);
        for (i, &a) in grad.iter().enumerate() {
            let orig = ps.get(pname).expect("listed").values()[i];
            let mut eval = |v: f64| -> Result<f64> {
                probe.get_mut(pname).expect("listed").values_mut()[i] = v;
                let mut g = Graph::new();
                let out = f(&mut g, &probe)?;
                Ok(g.value(out).values()[0])
            };
            let up = eval(orig + STEP)?;
            let down = eval(orig - STEP)?;
            probe.get_mut(pname).expect("listed").values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(a, numeric);
            outcome.entries += 1;
            if err > outcome.max_rel_err || outcome.worst.is_empty() {
                outcome.max_rel_err = err.max(outcome.max_rel_err);
                outcome.worst = format!("{pname}[{i}]");
            }
        }
    }
    Ok(outcome)
}
pub type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// A finite-difference case for one operator.
pub struct OpCase {
    pub kind: OpKind,
    pub shapes: &'static [(usize, usize)],
    pub f: OpFn,
}

/// One case per differentiable operator, each reduced to a scalar.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            kind: OpKind::MatMul,
            shapes: &[(3, 4), (4, 2)],
            f: |g, x| {
                let y = g.matmul(x[0], x[1])?;
                weighted_sum(g, y, 1)
            },
        },
        OpCase {
            kind: OpKind::Add,
            shapes: &[(2, 3), (2, 3)],
            f: |g, x| {
                let y = g.add(x[0], x[1])?;
                weighted_sum(g, y, 2)
            },
        },
        OpCase {
            kind: OpKind::Sub,
            shapes: &[(2, 3), (2, 3)],
            f: |g, x| {
                let y = g.sub(x[0], x[1])?;
                weighted_sum(g, y, 3)
            },
        },
        OpCase {
            kind: OpKind::Mul,
            shapes: &[(2, 3), (2, 3)],
            f: |g, x| {
                let y = g.mul(x[0], x[1])?;
                weighted_sum(g, y, 4)
            },
        },
        OpCase {
            kind: OpKind::Scale,
            shapes: &[(3, 2)],
            f: |g, x| {
                let y = g.scale(x[0], -1.7);
                weighted_sum(g, y, 5)
            },
        },
        OpCase {
            kind: OpKind::AddRow,
            shapes: &[(3, 4), (1, 4)],
            f: |g, x| {
                let y = g.add_row(x[0], x[1])?;
                weighted_sum(g, y, 6)
            },
        },
        OpCase {
            kind: OpKind::MulRow,
            shapes: &[(3, 4), (1, 4)],
            f: |g, x| {
                let y = g.mul_row(x[0], x[1])?;
                weighted_sum(g, y, 7)
            },
        },
        OpCase {
            kind: OpKind::ConcatCols,
            shapes: &[(2, 3), (2, 1), (2, 2)],
            f: |g, x| {
                let y = g.concat_cols(x)?;
                weighted_sum(g, y, 8)
            },
        },
        OpCase {
            kind: OpKind::StackTokens,
            shapes: &[(4, 3), (2, 3)],
            f: |g, x| {
                let y = g.stack_tokens(&[(x[0], 2), (x[1], 1)], 2)?;
                weighted_sum(g, y, 9)
            },
        },
        OpCase {
            kind: OpKind::MeanTokens,
            shapes: &[(6, 2)],
            f: |g, x| {
                let y = g.mean_tokens(x[0], 2, 3)?;
                weighted_sum(g, y, 10)
            },
        },
        OpCase {
            kind: OpKind::SoftmaxRows,
            shapes: &[(3, 5)],
            f: |g, x| {
                let y = g.softmax_rows(x[0]);
                weighted_sum(g, y, 11)
            },
        },
        OpCase {
            kind: OpKind::Sigmoid,
            shapes: &[(2, 4)],
            f: |g, x| {
                let y = g.sigmoid(x[0]);
                weighted_sum(g, y, 12)
            },
        },
        OpCase {
            kind: OpKind::Gelu,
            shapes: &[(2, 4)],
            f: |g, x| {
                let y = g.gelu(x[0]);
                weighted_sum(g, y, 13)
            },
        },
        OpCase {
            kind: OpKind::LayerNorm,
            shapes: &[(3, 5)],
            f: |g, x| {
                let y = g.layer_norm(x[0], 1e-5);
                weighted_sum(g, y, 14)
            },
        },
        OpCase {
            kind: OpKind::Attention,
            shapes: &[(4, 4), (6, 4), (6, 4)],
            f: |g, x| {
                let y = g.attention(x[0], x[1], x[2], 2, 2)?;
                weighted_sum(g, y, 15)
            },
        },
        OpCase {
            kind: OpKind::Sum,
            shapes: &[(3, 3)],
            f: |g, x| {
                let sq = g.mul(x[0], x[0])?;
                Ok(g.sum(sq))
            },
        },
        OpCase {
            kind: OpKind::CrossEntropy,
            shapes: &[(4, 3)],
            f: |g, x| g.cross_entropy(x[0], &[0, 2, 1, 2]),
        },
    ]
}

pub fn seeded_inputs(shapes: &[(usize, usize)], seed: Seed) -> Vec<Tensor> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| Tensor::randn(r, c, 1.0, &mut seed.index(i as u64).rng()))
        .collect()
}

/// Checks `case` on its `instance`-th seeded input draw.
pub fn run_op_case(case: &OpCase, instance: u64, fault: Option<OpKind>) -> Result<CheckOutcome> {
    let seed = Seed::new(0xfd).child(case.kind.name()).index(instance);
    check_inputs(case.kind.name(), &seeded_inputs(case.shapes, seed), fault, case.f)
}

/// Checks a fusion variant's parameters at D=8 with two heads on a batch of
/// two samples (two visual tokens, one text token each).
pub fn check_fusion_variant(variant: FusionVariant, layers: usize, fault: Option<OpKind>) -> Result<CheckOutcome> {
    let d = 8;
    let m = FusionModule {
        variant,
        layers,
        heads: 2,
        gate: GateMode::Vector,
    };
    let mut rng = Seed::new(3).child(variant.key()).rng();
    let mut ps = ParameterSet::new();
    m.init(&mut ps, "fuse", d, &mut rng);
    let xv = Tensor::randn(4, d, 1.0, &mut rng);
    let xt = Tensor::randn(2, d, 1.0, &mut rng);
    let name = format!("fusion {} (layers={layers})", variant.label());
    check_params(&name, &ps, fault, |g, ps| {
        let v = g.constant(xv.clone());
        let t = g.constant(xt.clone());
        let (v, t) = (TokenSeq::new(g, v, 2)?, TokenSeq::new(g, t, 2)?);
        let y = m.apply(g, ps, "fuse", &v, &t)?;
        weighted_sum(g, y, 5)
    })
}

/// Outcome of the whole suite, grouped for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub ops: Vec<CheckOutcome>,
    pub fusion: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().chain(&self.fusion).all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.ops.iter().chain(&self.fusion).filter(|o| !o.passed()).collect()
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for o in self.ops.iter().chain(&self.fusion) {
            s.push_str(&format!(
                "{} {:<38} entries={:<5} max_rel_err={:.3e} worst={}\n",
                if o.passed() { "PASS" } else { "FAIL" },
                o.name,
                o.entries,
                o.max_rel_err,
                o.worst
            ));
        }
        s.push_str(&format!(
            "{} operators, {} fusion variants, {} failures\n",
            self.ops.len(),
            self.fusion.len() / 2,
            self.failures().len()
        ));
        s
    }
}

/// Every operator on `instances` seeded draws plus every fusion variant with
/// bare and encoder attention, optionally with a gradient fault planted in
/// one operator.
pub fn suite(instances: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut ops = Vec::new();
    for case in op_cases() {
        let mut worst: Option<CheckOutcome> = None;
        let mut entries = 0;
        for i in 0..instances.max(1) {
            let o = run_op_case(&case, i, fault)?;
            entries += o.entries;
            if worst.as_ref().is_none_or(|w| o.max_rel_err > w.max_rel_err) {
                worst = Some(o);
            }
        }
        let mut w = worst.expect("at least one instance");
        w.entries = entries;
        ops.push(w);
    }
    let fusion = FusionVariant::ALL
        .par_iter()
        .flat_map_iter(|&v| [0, 1].map(|layers| check_fusion_variant(v, layers, fault)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { ops, fusion })
}

