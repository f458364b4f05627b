use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{central_gradient, relative_error};
use super::*;
use crate::error::GraphError;

type Build = fn(&Tape, &[NodeId]) -> NodeId;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Max relative error between reverse-mode and central differences over all inputs.
fn check(build: Build, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = build(&tape, &ids);
    let grads = tape.backward(root).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let f = |x: &[f64]| {
            let t = Tape::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    if j == k {
                        t.input(Tensor::new(v.shape().to_vec(), x.to_vec()).unwrap())
                    } else {
                        t.input(v.clone())
                    }
                })
                .collect();
            let r = build(&t, &ids);
            t.scalar_value(r)
        };
        let fd = central_gradient(f, input.data(), 1e-6);
        let rev = grads.wrt(ids[k]);
        worst = worst.max(relative_error(rev.data(), &fd, 1e-6));
    }
    worst
}

fn weighted_sum(tape: &Tape, x: NodeId) -> NodeId {
    // Non-uniform weights so every output entry carries a distinct cotangent.
    let shape = tape.shape(x);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap();
    let wc = tape.constant(w);
    let p = tape.mul(x, wc).unwrap();
    tape.sum(p)
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases: Vec<(&str, Build, Vec<Vec<usize>>, (f64, f64))> = vec![
        ("matmul", |t, x| { let y = t.matmul(x[0], x[1]).unwrap(); weighted_sum(t, y) }, vec![vec![3, 4], vec![4, 2]], (-2.0, 2.0)),
        ("matvec", |t, x| { let y = t.matmul(x[0], x[1]).unwrap(); weighted_sum(t, y) }, vec![vec![3, 4], vec![4]], (-2.0, 2.0)),
        ("add", |t, x| { let y = t.add(x[0], x[1]).unwrap(); weighted_sum(t, y) }, vec![vec![5], vec![5]], (-2.0, 2.0)),
        ("sub", |t, x| { let y = t.sub(x[0], x[1]).unwrap(); weighted_sum(t, y) }, vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0)),
        ("mul", |t, x| { let y = t.mul(x[0], x[1]).unwrap(); weighted_sum(t, y) }, vec![vec![5], vec![5]], (-2.0, 2.0)),
        ("add_row", |t, x| { let y = t.add_row(x[0], x[1]).unwrap(); weighted_sum(t, y) }, vec![vec![3, 4], vec![4]], (-2.0, 2.0)),
        ("mul_scalar", |t, x| { let y = t.mul_scalar(x[0], x[1]).unwrap(); weighted_sum(t, y) }, vec![vec![4], vec![]], (-2.0, 2.0)),
        ("scale", |t, x| { let y = t.scale(x[0], -1.7); weighted_sum(t, y) }, vec![vec![4]], (-2.0, 2.0)),
        ("add_const", |t, x| { let y = t.add_const(x[0], 0.4); let y = t.square(y); weighted_sum(t, y) }, vec![vec![4]], (-2.0, 2.0)),
        ("tanh", |t, x| { let y = t.tanh(x[0]); weighted_sum(t, y) }, vec![vec![6]], (-2.0, 2.0)),
        ("exp", |t, x| { let y = t.exp(x[0]); weighted_sum(t, y) }, vec![vec![6]], (-2.0, 2.0)),
        ("square", |t, x| { let y = t.square(x[0]); weighted_sum(t, y) }, vec![vec![6]], (-2.0, 2.0)),
        ("relu", |t, x| { let y = t.relu(x[0]); weighted_sum(t, y) }, vec![vec![8]], (-2.0, 2.0)),
        ("elu", |t, x| { let y = t.elu(x[0]); weighted_sum(t, y) }, vec![vec![8]], (-2.0, 2.0)),
        ("recip", |t, x| { let y = t.recip(x[0]); weighted_sum(t, y) }, vec![vec![6]], (0.5, 2.0)),
        ("clamp", |t, x| { let y = t.clamp(x[0], -1.0, 1.0); weighted_sum(t, y) }, vec![vec![8]], (-2.0, 2.0)),
        ("minimum", |t, x| { let y = t.minimum(x[0], x[1]).unwrap(); weighted_sum(t, y) }, vec![vec![8], vec![8]], (-2.0, 2.0)),
        ("sum", |t, x| { let y = t.sum(x[0]); t.square(y) }, vec![vec![2, 3]], (-2.0, 2.0)),
        ("mean", |t, x| { let y = t.mean(x[0]); t.square(y) }, vec![vec![2, 3]], (-2.0, 2.0)),
        ("concat0", |t, x| { let y = t.concat(&[x[0], x[1], x[2]], 0).unwrap(); weighted_sum(t, y) }, vec![vec![3], vec![], vec![2]], (-2.0, 2.0)),
        ("concat_rows", |t, x| { let y = t.concat(&[x[0], x[1]], 0).unwrap(); weighted_sum(t, y) }, vec![vec![2, 3], vec![1, 3]], (-2.0, 2.0)),
        ("concat_cols", |t, x| { let y = t.concat(&[x[0], x[1]], 1).unwrap(); weighted_sum(t, y) }, vec![vec![2, 3], vec![2, 2]], (-2.0, 2.0)),
        ("slice_vec", |t, x| { let y = t.slice(x[0], 0, 1, 4).unwrap(); weighted_sum(t, y) }, vec![vec![6]], (-2.0, 2.0)),
        ("slice_rows", |t, x| { let y = t.slice(x[0], 0, 1, 3).unwrap(); weighted_sum(t, y) }, vec![vec![4, 3]], (-2.0, 2.0)),
        ("slice_cols", |t, x| { let y = t.slice(x[0], 1, 1, 3).unwrap(); weighted_sum(t, y) }, vec![vec![4, 3]], (-2.0, 2.0)),
        ("element", |t, x| { let y = t.element(x[0], 4).unwrap(); t.square(y) }, vec![vec![2, 3]], (-2.0, 2.0)),
        ("transpose", |t, x| { let y = t.transpose(x[0]); weighted_sum(t, y) }, vec![vec![2, 3]], (-2.0, 2.0)),
        ("reshape", |t, x| { let y = t.reshape(x[0], &[3, 2]).unwrap(); weighted_sum(t, y) }, vec![vec![6]], (-2.0, 2.0)),
    ];
    for (name, build, shapes, (lo, hi)) in cases {
        for trial in 0..5 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, lo, hi)).collect();
            let err = check(build, &inputs);
            assert!(err < 1e-5, "{name} trial {trial}: relative error {err:e}");
        }
    }
}

#[test]
fn random_six_op_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let build: Build = |t, x| {
        let a = t.matmul(x[0], x[1]).unwrap();
        let b = t.tanh(a);
        let c = t.mul(b, x[2]).unwrap();
        let d = t.exp(c);
        let e = t.sub(d, x[2]).unwrap();
        let f = t.square(e);
        t.mean(f)
    };
    for _ in 0..20 {
        let inputs = vec![
            random_tensor(&mut rng, &[3, 4], -2.0, 2.0),
            random_tensor(&mut rng, &[4], -2.0, 2.0),
            random_tensor(&mut rng, &[3], -2.0, 2.0),
        ];
        assert!(check(build, &inputs) < 1e-5);
    }
}

#[test]
fn elementary_values() {
    let t = Tape::new();
    let z = t.scalar(0.0);
    assert_eq!(t.scalar_value(t.tanh(z)), 0.0);
    let m = t.scalar(-2.5);
    assert_eq!(t.scalar_value(t.relu(m)), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mv = random_tensor(&mut rng, &[3, 3], -2.0, 2.0);
    let i3 = t.constant(Tensor::eye(3));
    let mm = t.constant(mv.clone());
    assert_eq!(t.value(t.matmul(i3, mm).unwrap()), mv);
}

#[test]
fn sum_gradient_is_ones() {
    let t = Tape::new();
    let x = t.input(Tensor::vector(vec![0.1, -3.0, 2.0, 7.0, 0.0]));
    let s = t.sum(x);
    assert_eq!(t.backward(s).unwrap().wrt(x).data(), &[1.0; 5]);
}

#[test]
fn quadratic_form_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random_tensor(&mut rng, &[4, 3], -2.0, 2.0);
    let xv = random_tensor(&mut rng, &[3], -2.0, 2.0);
    let t = Tape::new();
    let wn = t.constant(w.clone());
    let x = t.input(xv.clone());
    let wx = t.matmul(wn, x).unwrap();
    let sq = t.square(wx);
    let s = t.sum(sq);
    let half = t.scale(s, 0.5);
    let g = t.backward(half).unwrap().wrt(x);
    let expected = w.transpose().matmul(&w.matmul(&xv).unwrap()).unwrap();
    assert!(relative_error(g.data(), expected.data(), 1e-12) < 1e-13);
}

#[test]
fn backward_is_linear_in_cotangent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xv = random_tensor(&mut rng, &[2, 3], -2.0, 2.0);
    let run = |factor: f64| {
        let t = Tape::new();
        let x = t.param("x", xv.clone());
        let y = t.tanh(x);
        let y = t.square(y);
        let s = t.sum(y);
        let r = t.scale(s, factor);
        t.backward(r).unwrap().by_name("x").unwrap()
    };
    let g1 = run(1.0);
    let g3 = run(3.0);
    for (a, b) in g1.data().iter().zip(g3.data()) {
        assert!((3.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
    }
}

#[test]
fn replay_is_bitwise_deterministic() {
    let build = || {
        let t = Tape::new();
        let a = t.input(Tensor::vector(vec![0.3, -0.7, 1.1]));
        let m = t.constant(Tensor::matrix(2, 3, vec![0.5, 1.5, -2.0, 0.25, 0.0, 3.0]));
        let y = t.matmul(m, a).unwrap();
        let y = t.exp(y);
        let y = t.tanh(y);
        t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}

#[test]
fn non_scalar_root_is_rejected() {
    let t = Tape::new();
    let x = t.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(GraphError::NonScalarRoot { .. })));
}

#[test]
fn shape_mismatch_names_op() {
    let t = Tape::new();
    let a = t.input(Tensor::vector(vec![1.0, 2.0]));
    let b = t.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let err = t.add(a, b).unwrap_err();
    assert!(err.to_string().contains("add"));
    let m = t.input(Tensor::zeros(&[2, 2]));
    assert!(t.matmul(m, b).is_err());
}

#[test]
fn unreachable_leaf_has_zero_gradient() {
    let t = Tape::new();
    let used = t.param("used", Tensor::vector(vec![1.0, 2.0]));
    let _unused = t.param("unused", Tensor::zeros(&[2, 2]));
    let s = t.sum(used);
    let g = t.backward(s).unwrap();
    assert_eq!(g.by_name("unused").unwrap(), Tensor::zeros(&[2, 2]));
    assert_eq!(g.named().len(), 2);
}

#[test]
fn detach_blocks_gradient() {
    let t = Tape::new();
    let x = t.input(Tensor::scalar(2.0));
    let y = t.square(x);
    let yd = t.detach(y);
    let z = t.mul(yd, x).unwrap();
    // d/dx (stop(x²)·x) = x² = 4
    assert_eq!(t.backward(z).unwrap().wrt(x).item(), 4.0);
}

#[test]
fn reaches_follows_differentiable_paths_only() {
    let tape = Tape::new();
    let a = tape.input(Tensor::scalar(1.0));
    let b = tape.input(Tensor::scalar(2.0));
    let d = tape.detach(a);
    let y = tape.add(d, b).unwrap();
    assert!(tape.reaches(y, b));
    assert!(!tape.reaches(y, a));
    assert!(!tape.reaches(b, y));
}
