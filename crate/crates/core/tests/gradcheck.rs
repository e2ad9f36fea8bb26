//! Finite-difference verification of every differentiable primitive:
//! 100 random inputs per primitive, relative error at most 1e-5 against
//! central differences with h = 1e-5.

use purbench_core::autodiff::{finite_diff_grad, NodeRef, Tape};
use purbench_core::rng::StreamRng;
use purbench_core::tensor::Tensor;

const TRIALS: usize = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// Checks d(loss)/d(inputs[i]) for every variable input of the expression
/// built by `build` (which must end in a scalar node).
fn gradcheck<F>(name: &str, build: F, inputs: &[Tensor])
where
    F: Fn(&mut Tape, &[NodeRef]) -> NodeRef,
{
    let mut tape = Tape::new();
    let refs: Vec<NodeRef> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let root = build(&mut tape, &refs);
    let grads = tape.backward(root, Tensor::scalar(1.0)).unwrap();

    for (i, x) in inputs.iter().enumerate() {
        let fd = finite_diff_grad(
            |probe| {
                let mut t2 = Tape::new();
                let refs2: Vec<NodeRef> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| t2.var(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let root2 = build(&mut t2, &refs2);
                t2.value(root2).as_scalar()
            },
            x,
            H,
        )
        .unwrap();
        let ad = grads.get(refs[i]).unwrap();
        for (k, (a, f)) in ad.data().iter().zip(fd.data()).enumerate() {
            assert!(
                (a - f).abs() <= TOL * a.abs().max(1.0),
                "{name} input {i} coord {k}: ad {a} vs fd {f}"
            );
        }
    }
}

fn vec_in(rng: &mut StreamRng, n: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::vector((0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect())
}

fn mat_in(rng: &mut StreamRng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn elementwise_binary_primitives() {
    let mut rng = StreamRng::new(11, "gc");
    for _ in 0..TRIALS {
        let n = rng.int_range(1, 6);
        let a = vec_in(&mut rng, n, -2.0, 2.0);
        let b = vec_in(&mut rng, n, -2.0, 2.0);
        gradcheck(
            "add",
            |t, r| {
                let s = t.add(r[0], r[1]).unwrap();
                t.sum(s).unwrap()
            },
            &[a.clone(), b.clone()],
        );
        gradcheck(
            "sub",
            |t, r| {
                let s = t.sub(r[0], r[1]).unwrap();
                t.sum(s).unwrap()
            },
            &[a.clone(), b.clone()],
        );
        gradcheck(
            "mul",
            |t, r| {
                let s = t.mul(r[0], r[1]).unwrap();
                t.sum(s).unwrap()
            },
            &[a, b],
        );
    }
}

#[test]
fn elementwise_unary_primitives() {
    let mut rng = StreamRng::new(13, "gc");
    for trial in 0..TRIALS {
        let n = rng.int_range(1, 6);
        let x = vec_in(&mut rng, n, -2.0, 2.0);
        let k = rng.normal();
        gradcheck(
            "scale",
            |t, r| {
                let s = t.scale(r[0], k).unwrap();
                t.sum(s).unwrap()
            },
            &[x.clone()],
        );
        gradcheck(
            "tanh",
            |t, r| {
                let s = t.tanh(r[0]).unwrap();
                t.sum(s).unwrap()
            },
            &[x.clone()],
        );
        gradcheck(
            "exp",
            |t, r| {
                let s = t.exp(r[0]).unwrap();
                t.sum(s).unwrap()
            },
            &[x.clone()],
        );
        gradcheck(
            "square",
            |t, r| {
                let s = t.square(r[0]).unwrap();
                t.sum(s).unwrap()
            },
            &[x.clone()],
        );
        gradcheck(
            "mean",
            |t, r| t.mean(r[0]).unwrap(),
            &[x.clone()],
        );
        gradcheck("sum", |t, r| t.sum(r[0]).unwrap(), &[x]);

        // Positive-domain primitives.
        let pos = vec_in(&mut rng, n, 0.2, 3.0);
        gradcheck(
            "log",
            |t, r| {
                let s = t.log(r[0]).unwrap();
                t.sum(s).unwrap()
            },
            &[pos.clone()],
        );
        gradcheck(
            "sqrt",
            |t, r| {
                let s = t.sqrt(r[0]).unwrap();
                t.sum(s).unwrap()
            },
            &[pos],
        );

        // Relu away from the kink.
        let away = Tensor::vector(
            (0..n)
                .map(|_| {
                    let v = rng.normal();
                    if v.abs() < 0.05 {
                        0.5 + trial as f64 * 0.001
                    } else {
                        v
                    }
                })
                .collect(),
        );
        gradcheck(
            "relu",
            |t, r| {
                let s = t.relu(r[0]).unwrap();
                t.sum(s).unwrap()
            },
            &[away],
        );
    }
}

#[test]
fn matmul_and_bias_primitives() {
    let mut rng = StreamRng::new(17, "gc");
    for _ in 0..TRIALS {
        let (m, k, n) = (
            rng.int_range(1, 4),
            rng.int_range(1, 4),
            rng.int_range(1, 4),
        );
        let a = mat_in(&mut rng, m, k);
        let b = mat_in(&mut rng, k, n);
        gradcheck(
            "matmul(mat,mat)",
            |t, r| {
                let s = t.matmul(r[0], r[1]).unwrap();
                t.sum(s).unwrap()
            },
            &[a, b.clone()],
        );

        let xv = vec_in(&mut rng, k, -2.0, 2.0);
        gradcheck(
            "matmul(vec,mat)",
            |t, r| {
                let s = t.matmul(r[0], r[1]).unwrap();
                t.sum(s).unwrap()
            },
            &[xv, b],
        );

        let mval = mat_in(&mut rng, m, n);
        let bias = vec_in(&mut rng, n, -1.0, 1.0);
        gradcheck(
            "bias_add(mat,vec)",
            |t, r| {
                let s = t.bias_add(r[0], r[1]).unwrap();
                t.sum(s).unwrap()
            },
            &[mval, bias.clone()],
        );

        let v = vec_in(&mut rng, n, -1.0, 1.0);
        gradcheck(
            "bias_add(vec,vec)",
            |t, r| {
                let s = t.bias_add(r[0], r[1]).unwrap();
                t.sum(s).unwrap()
            },
            &[v, bias],
        );
    }
}

#[test]
fn concat_and_cross_entropy_primitives() {
    let mut rng = StreamRng::new(19, "gc");
    for _ in 0..TRIALS {
        let (la, lb) = (rng.int_range(1, 5), rng.int_range(1, 5));
        let a = vec_in(&mut rng, la, -2.0, 2.0);
        let b = vec_in(&mut rng, lb, -2.0, 2.0);
        gradcheck(
            "concat",
            |t, r| {
                let s = t.concat(r[0], r[1]).unwrap();
                let sq = t.square(s).unwrap();
                t.sum(sq).unwrap()
            },
            &[a, b],
        );

        let kk = rng.int_range(2, 6);
        let logits = vec_in(&mut rng, kk, -3.0, 3.0);
        let y = rng.below(kk);
        gradcheck(
            "cross_entropy",
            |t, r| t.cross_entropy(r[0], y).unwrap(),
            &[logits],
        );
    }
}
