use nemgan_core::autodiff::{grad_check, GradCheckOptions, NormOrder, Tape, Var};
use nemgan_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 100;
const KINK_MARGIN: f64 = 1e-3;

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > KINK_MARGIN) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts `out` with fixed random weights so every output coordinate
/// contributes to the gradient.
fn contract(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

struct Case {
    inputs: Vec<(Vec<usize>, f64, f64, Vec<f64>)>,
    out_shape: Vec<usize>,
}

impl Case {
    fn unary(shape: &[usize], lo: f64, hi: f64, kinks: &[f64], out_shape: &[usize]) -> Self {
        Case {
            inputs: vec![(shape.to_vec(), lo, hi, kinks.to_vec())],
            out_shape: out_shape.to_vec(),
        }
    }
}

fn run<F>(name: &str, case: Case, seed: u64, mut op: F)
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default();
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        let params: Vec<Tensor> = case
            .inputs
            .iter()
            .map(|(s, lo, hi, k)| draw(&mut rng, s, *lo, *hi, k))
            .collect();
        let weights = draw(&mut rng, &case.out_shape, -1.0, 1.0, &[]);
        let report = grad_check(
            |tape, vars| {
                let out = op(tape, vars)?;
                contract(tape, out, &weights)
            },
            &params,
            &opts,
        )
        .unwrap();
        worst = worst.max(report.max_relative_error);
    }
    assert!(worst < 1e-4, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul() {
    let case = Case {
        inputs: vec![
            (vec![3, 4], -1.0, 1.0, vec![]),
            (vec![4, 2], -1.0, 1.0, vec![]),
        ],
        out_shape: vec![3, 2],
    };
    run("matmul", case, 1, |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn elementwise_binary() {
    let pair = || Case {
        inputs: vec![
            (vec![3, 4], -2.0, 2.0, vec![]),
            (vec![3, 4], -2.0, 2.0, vec![]),
        ],
        out_shape: vec![3, 4],
    };
    run("add", pair(), 2, |t, v| t.add(v[0], v[1]));
    run("sub", pair(), 3, |t, v| t.sub(v[0], v[1]));
    run("mul", pair(), 4, |t, v| t.mul(v[0], v[1]));
}

#[test]
fn add_row_broadcast() {
    let case = Case {
        inputs: vec![
            (vec![3, 4], -2.0, 2.0, vec![]),
            (vec![1, 4], -2.0, 2.0, vec![]),
        ],
        out_shape: vec![3, 4],
    };
    run("add_row", case, 5, |t, v| t.add_row(v[0], v[1]));
}

#[test]
fn pointwise_activations() {
    let s = [3, 4];
    run("scale", Case::unary(&s, -2.0, 2.0, &[], &s), 6, |t, v| {
        t.scale(v[0], -1.7)
    });
    run("relu", Case::unary(&s, -2.0, 2.0, &[0.0], &s), 7, |t, v| {
        t.relu(v[0])
    });
    run("tanh", Case::unary(&s, -3.0, 3.0, &[], &s), 8, |t, v| {
        t.tanh(v[0])
    });
    run("sigmoid", Case::unary(&s, -6.0, 6.0, &[], &s), 9, |t, v| {
        t.sigmoid(v[0])
    });
    run("ln", Case::unary(&s, 0.1, 3.0, &[], &s), 10, |t, v| {
        t.ln(v[0])
    });
    run(
        "clamp",
        Case::unary(&s, -1.0, 1.0, &[-0.5, 0.5], &s),
        11,
        |t, v| t.clamp(v[0], -0.5, 0.5),
    );
    run(
        "hard_sigmoid",
        Case::unary(&s, -0.2, 0.2, &[-0.05, 0.05], &s),
        12,
        |t, v| t.hard_sigmoid(v[0], 10.0),
    );
}

#[test]
fn softmax_rows() {
    run(
        "softmax",
        Case::unary(&[3, 5], -3.0, 3.0, &[], &[3, 5]),
        13,
        |t, v| t.softmax(v[0]),
    );
}

#[test]
fn reductions() {
    let s = [3, 4];
    run("mean", Case::unary(&s, -2.0, 2.0, &[], &[1]), 14, |t, v| {
        t.mean(v[0])
    });
    run("sum", Case::unary(&s, -2.0, 2.0, &[], &[1]), 15, |t, v| {
        t.sum(v[0])
    });
    run(
        "mean_rows",
        Case::unary(&s, -2.0, 2.0, &[], &[1, 4]),
        16,
        |t, v| t.mean_rows(v[0]),
    );
}

#[test]
fn norms() {
    let s = [3, 4];
    run(
        "row_norm_l1",
        Case::unary(&s, -2.0, 2.0, &[0.0], &[3, 1]),
        17,
        |t, v| t.row_norm(v[0], NormOrder::L1),
    );
    run(
        "row_norm_l2",
        Case::unary(&s, -2.0, 2.0, &[], &[3, 1]),
        18,
        |t, v| t.row_norm(v[0], NormOrder::L2),
    );
    run(
        "normalize_rows",
        Case::unary(&s, 0.1, 2.0, &[], &s),
        19,
        |t, v| t.normalize_rows(v[0]),
    );
}

#[test]
fn cross_entropies() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let targets = draw(&mut rng, &[5, 1], 0.0, 1.0, &[]);
    run(
        "bce_with_logits",
        Case::unary(&[5, 1], -8.0, 8.0, &[], &[1]),
        21,
        |t, v| t.bce_with_logits(v[0], &targets),
    );
    let labels = [0usize, 3, 1, 1, 2];
    run(
        "ce_with_logits",
        Case::unary(&[5, 4], -4.0, 4.0, &[], &[1]),
        22,
        |t, v| t.ce_with_logits(v[0], &labels),
    );
}
