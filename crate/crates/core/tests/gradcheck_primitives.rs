//! Reverse-mode gradients of every primitive against central differences.

use nasda::autodiff::{Tape, Var};
use nasda::gradcheck::check_gradients;
use nasda::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

/// Contracts `out` with a fixed random tensor so every output element matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Tensor::randn(tape.shape(out), 1.0, &mut rng);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn run<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var], u64) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let report = check_gradients(|tape, v| f(tape, v, seed), &inputs).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn add_sub_mul() {
    let mk = |r: &mut ChaCha8Rng| vec![randn(&[3, 4], r), randn(&[3, 4], r)];
    run("add", mk, |t, v, s| {
        let o = t.add(v[0], v[1])?;
        project(t, o, s)
    });
    run("sub", mk, |t, v, s| {
        let o = t.sub(v[0], v[1])?;
        project(t, o, s)
    });
    run("mul", mk, |t, v, s| {
        let o = t.mul(v[0], v[1])?;
        project(t, o, s)
    });
}

#[test]
fn unary_ops() {
    let mk = |r: &mut ChaCha8Rng| vec![randn(&[2, 5], r)];
    run("scale", mk, |t, v, s| {
        let o = t.scale(v[0], -1.7);
        project(t, o, s)
    });
    run("neg", mk, |t, v, s| {
        let o = t.neg(v[0]);
        project(t, o, s)
    });
    run("exp", mk, |t, v, s| {
        let o = t.exp(v[0]);
        project(t, o, s)
    });
    run("relu", mk, |t, v, s| {
        let o = t.relu(v[0]);
        project(t, o, s)
    });
    run("sum", mk, |t, v, _| Ok(t.sum(v[0])));
    run("mean", mk, |t, v, _| Ok(t.mean(v[0])));
    run("sum_rows", mk, |t, v, s| {
        let o = t.sum_rows(v[0])?;
        project(t, o, s)
    });
}

#[test]
fn matmul_and_linear() {
    run(
        "matmul",
        |r| vec![randn(&[3, 4], r), randn(&[4, 2], r)],
        |t, v, s| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o, s)
        },
    );
    run(
        "linear",
        |r| vec![randn(&[5, 3], r), randn(&[4, 3], r), randn(&[4], r)],
        |t, v, s| {
            let o = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, o, s)
        },
    );
}

#[test]
fn softmax_family() {
    let mk = |r: &mut ChaCha8Rng| vec![randn(&[3, 5], r)];
    run("softmax", mk, |t, v, s| {
        let o = t.softmax(v[0])?;
        project(t, o, s)
    });
    run("log_softmax", mk, |t, v, s| {
        let o = t.log_softmax(v[0])?;
        project(t, o, s)
    });
}

#[test]
fn convolutions() {
    for (stride, pad, dil) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 2, 2)] {
        run(
            "conv2d",
            |r| vec![randn(&[2, 3, 6, 5], r), randn(&[4, 3, 3, 3], r)],
            |t, v, s| {
                let o = t.conv2d(v[0], v[1], stride, pad, dil, 1)?;
                project(t, o, s)
            },
        );
    }
    run(
        "conv2d_tiny_input",
        |r| vec![randn(&[2, 2, 2, 2], r), randn(&[2, 1, 5, 5], r)],
        |t, v, s| {
            let o = t.conv2d(v[0], v[1], 1, 4, 2, 2)?;
            project(t, o, s)
        },
    );
    run(
        "separable_conv2d",
        |r| vec![randn(&[2, 3, 6, 6], r), randn(&[3, 1, 5, 5], r), randn(&[4, 3, 1, 1], r)],
        |t, v, s| {
            let o = t.separable_conv2d(v[0], v[1], v[2], 2, 2, 1)?;
            project(t, o, s)
        },
    );
}

#[test]
fn max_pool() {
    for stride in [1, 2] {
        run(
            "max_pool3",
            |r| vec![randn(&[2, 2, 5, 6], r)],
            |t, v, s| {
                let o = t.max_pool3(v[0], stride)?;
                project(t, o, s)
            },
        );
    }
}

#[test]
fn batch_norm() {
    run(
        "batch_norm",
        |r| vec![randn(&[3, 2, 3, 3], r)],
        |t, v, s| {
            let o = t.batch_norm(v[0], None, None)?;
            project(t, o, s)
        },
    );
    run(
        "batch_norm_affine",
        |r| vec![randn(&[3, 2, 3, 3], r), randn(&[2], r), randn(&[2], r)],
        |t, v, s| {
            let o = t.batch_norm(v[0], Some(v[1]), Some(v[2]))?;
            project(t, o, s)
        },
    );
}

#[test]
fn structural_ops() {
    run(
        "concat_channels",
        |r| vec![randn(&[2, 1, 3, 3], r), randn(&[2, 3, 3, 3], r)],
        |t, v, s| {
            let o = t.concat_channels(&[v[0], v[1]])?;
            project(t, o, s)
        },
    );
    run(
        "global_avg_pool",
        |r| vec![randn(&[2, 3, 4, 4], r)],
        |t, v, s| {
            let o = t.global_avg_pool(v[0])?;
            project(t, o, s)
        },
    );
    run(
        "weighted_sum",
        |r| vec![randn(&[2, 3], r), randn(&[2, 3], r), randn(&[4], r)],
        |t, v, s| {
            let o = t.weighted_sum(&[(v[0], 3), (v[1], 1)], v[2])?;
            project(t, o, s)
        },
    );
    run(
        "pick",
        |r| vec![randn(&[4, 3], r)],
        |t, v, s| {
            let o = t.pick(v[0], &[2, 0, 1, 2])?;
            project(t, o, s)
        },
    );
    run(
        "gather_rows",
        |r| vec![randn(&[4, 3], r)],
        |t, v, s| {
            let o = t.gather_rows(v[0], &[3, 0, 3, 1])?;
            project(t, o, s)
        },
    );
}

#[test]
fn l1_distance() {
    run(
        "l1_rows",
        |r| {
            // Keep |a − b| away from the kink.
            let a = randn(&[3, 4], r);
            let mut b = a.clone();
            for v in b.data_mut() {
                *v += if r.random_bool(0.5) { 0.5 } else { -0.5 };
            }
            vec![a, b]
        },
        |t, v, s| {
            let o = t.l1_rows(v[0], v[1])?;
            project(t, o, s)
        },
    );
}

#[test]
fn determinism() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&[2, 3, 6, 6], &mut rng);
        let w = randn(&[4, 3, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.parameter(x);
        let wv = tape.parameter(w);
        let c = tape.conv2d(xv, wv, 1, 1, 1, 1).unwrap();
        let b = tape.batch_norm(c, None, None).unwrap();
        let p = tape.max_pool3(b, 2).unwrap();
        let l = project(&mut tape, p, 3).unwrap();
        let mut g = tape.backward(l).unwrap();
        (tape.value(l).item(), g.collect(&[xv, wv]))
    };
    let (a, ga) = build();
    let (b, gb) = build();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}
