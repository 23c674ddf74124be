use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taco_tensor::{grad_check, AttentionLayout, Axis, Graph, ParamGroup, RowMask, Tensor, Var};

const STEP: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn check(groups: Vec<ParamGroup>, f: impl Fn(&mut Graph, &[Vec<Var>]) -> taco_tensor::Result<Var>, tol: f64) {
    let report = grad_check(f, &groups, STEP, tol).unwrap();
    assert!(report.passed(), "{report:?}");
}

/// Projects any tensor to a scalar with fixed weights so every output
/// coordinate contributes a distinct amount.
fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).len();
    let shape = g.value(x).shape().to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect()).unwrap();
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn linear_layer_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let groups = vec![
        ParamGroup::new("x", vec![uniform(&mut rng, &[3, 4])]),
        ParamGroup::new("w", vec![uniform(&mut rng, &[4, 4]), uniform(&mut rng, &[4])]),
    ];
    check(
        groups,
        |g, p| {
            let y = g.matmul(p[0][0], p[1][0])?;
            let y = g.add_bias(y, p[1][1])?;
            Ok(weighted_sum(g, y))
        },
        1e-6,
    );
}

#[test]
fn softmax_cross_entropy_head_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let groups = vec![ParamGroup::new("head", vec![uniform(&mut rng, &[5, 3]), uniform(&mut rng, &[3, 4])])];
    check(
        groups,
        |g, p| {
            let logits = g.matmul(p[0][0], p[0][1])?;
            g.cross_entropy(logits, &[0, 3, 1, 2, 3])
        },
        1e-4,
    );
}

#[test]
fn frozen_group_reports_exact_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let groups = vec![
        ParamGroup::new("live", vec![uniform(&mut rng, &[2, 2])]),
        ParamGroup::new("frozen", vec![uniform(&mut rng, &[2, 2])]).frozen(),
    ];
    let report = grad_check(
        |g, p| {
            let y = g.matmul(p[0][0], p[1][0])?;
            Ok(weighted_sum(g, y))
        },
        &groups,
        STEP,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.groups[1].max_rel_error, 0.0);
    assert_eq!(report.groups[1].max_abs_error, 0.0);
    assert!(report.passed());
}

fn unary_case(seed: u64, op: fn(&mut Graph, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = vec![ParamGroup::new("x", vec![uniform(&mut rng, &[3, 5])])];
    check(
        groups,
        move |g, p| {
            let y = op(g, p[0][0]);
            Ok(weighted_sum(g, y))
        },
        1e-4,
    );
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    for seed in 0..5 {
        unary_case(seed, |g, x| g.gelu(x));
        unary_case(seed, |g, x| g.softmax(x));
        unary_case(seed, |g, x| g.scale(x, -1.7));
        unary_case(seed, |g, x| g.mul(x, x).unwrap());
        unary_case(seed, |g, x| g.scale_rows(x, vec![0.5, -2.0, 1.25]).unwrap());
        unary_case(seed, |g, x| g.slice_last(x, 2).unwrap());
        unary_case(seed, |g, x| g.slice_rows(x, 1, 3).unwrap());
        unary_case(seed, |g, x| g.gather_rows(x, vec![2, 0, 2]).unwrap());
        unary_case(seed, |g, x| g.concat_rows(x, x).unwrap());
        unary_case(seed, |g, x| g.reshape(x, &[5, 3]).unwrap());
        unary_case(seed, |g, x| g.mean(x));
    }
}

#[test]
fn layer_norm_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let groups = vec![ParamGroup::new(
            "ln",
            vec![uniform(&mut rng, &[4, 6]), uniform(&mut rng, &[6]), uniform(&mut rng, &[6])],
        )];
        check(
            groups,
            |g, p| {
                let y = g.layer_norm(p[0][0], p[0][1], p[0][2])?;
                Ok(weighted_sum(g, y))
            },
            1e-4,
        );
    }
}

fn attention_case(seed: u64, axis: Axis, mask: RowMask) {
    let (rows, cols, heads, dim) = (4, 3, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rows, cols, dim];
    let groups = vec![ParamGroup::new(
        "qkv",
        vec![uniform(&mut rng, &shape), uniform(&mut rng, &shape), uniform(&mut rng, &shape)],
    )];
    let layout = AttentionLayout { rows, cols, heads, dim, axis };
    check(
        groups,
        move |g, p| {
            let y = g.attention(p[0][0], p[0][1], p[0][2], layout, mask.clone())?;
            Ok(weighted_sum(g, y))
        },
        1e-4,
    );
}

#[test]
fn attention_matches_finite_differences() {
    for seed in 0..4 {
        attention_case(seed, Axis::Rows, RowMask::Full);
        attention_case(seed, Axis::Cols, RowMask::Full);
        attention_case(seed, Axis::Rows, RowMask::Prefix { context: 2 });
        let mut allowed = vec![true; 16];
        allowed[2] = false; // row 0 cannot see row 2
        allowed[13] = false;
        attention_case(seed, Axis::Rows, RowMask::Explicit { n: 4, allowed });
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let x = g.leaf(uniform(&mut rng, &[4, 3, 8]), true);
        let layout = AttentionLayout { rows: 4, cols: 3, heads: 2, dim: 8, axis: Axis::Rows };
        let y = g.attention(x, x, x, layout, RowMask::Full).unwrap();
        let y = g.gelu(y);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        (
            g.value(s).item().to_bits(),
            grads.get(x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
        let mut g = Graph::new();
        let n = values.len();
        let x = g.constant(Tensor::new(vec![n], values).unwrap());
        let y = g.softmax(x);
        let p = g.value(y).data();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0 || n == 1));
    }

    #[test]
    fn random_primitive_inputs_match_finite_differences(seed in 0u64..1000, which in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = vec![
            ParamGroup::new("a", vec![uniform(&mut rng, &[2, 3])]),
            ParamGroup::new("b", vec![uniform(&mut rng, &[3, 3]), uniform(&mut rng, &[3])]),
        ];
        let f = |g: &mut Graph, p: &[Vec<Var>]| {
            let y = match which {
                0 => g.matmul(p[0][0], p[1][0])?,
                1 => g.add_bias(p[0][0], p[1][1])?,
                2 => g.gelu(p[0][0]),
                3 => g.softmax(p[0][0]),
                4 => g.layer_norm(p[0][0], p[1][1], p[1][1])?,
                _ => g.cross_entropy(p[0][0], &[2, 0])?,
            };
            Ok(weighted_sum(g, y))
        };
        let mut report = grad_check(f, &groups, STEP, 1e-4).unwrap();
        // Three-wide layer norms can have third derivatives large enough that
        // the O(h^2) truncation of the central difference alone exceeds the
        // tolerance. A tenfold smaller step must then agree.
        if which == 4 && !report.passed() {
            report = grad_check(f, &groups, STEP / 10.0, 1e-4).unwrap();
        }
        prop_assert!(report.passed(), "{:?}", report);
    }
}
