//! Central finite-difference gradient checks for every differentiable op,
//! run in both binary32 (rel err < 1e-3) and binary64 (rel err < 1e-6) on
//! randomized small tensors.

use holo_core::rng::sub_rng;
use holo_core::tape::{mlp_forward, Activation, BinaryOp, MlpLayer, Tape, UnaryOp, Value};
use holo_core::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Inputs plus a graph builder mapping leaves to one output tensor.
struct Case<T: Scalar> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    build: Box<dyn Fn(&Tape<T>, &[Value]) -> Value>,
}

fn loss_of<T: Scalar>(case: &Case<T>, inputs: &[Tensor<T>]) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Value> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = (case.build)(&tape, &leaves);
    // the op runs in T; only the final reduction is accumulated in f64 so the
    // finite-difference quotient is not dominated by summation rounding
    tape.value(out).data().iter().map(|v| v.to_f64_c()).sum()
}

/// Central-difference check of every input element of every case input.
fn check_case<T: Scalar>(case: &Case<T>, h_rel: f64, tol: f64) {
    let tape = Tape::new();
    let leaves: Vec<Value> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let out = (case.build)(&tape, &leaves);
    let loss = tape.sum_all(out);
    let grads = tape.backward(loss).unwrap_or_else(|e| {
        panic!("{}: backward failed: {e}", case.name);
    });
    for (i, input) in case.inputs.iter().enumerate() {
        let g = grads
            .get(leaves[i])
            .unwrap_or_else(|| panic!("{}: missing grad for input {i}", case.name));
        for j in 0..input.numel() {
            let x = input.data()[j].to_f64_c();
            let h = h_rel * x.abs().max(1.0);
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] = T::of(x + h);
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] = T::of(x - h);
            let fd = (loss_of(case, &plus) - loss_of(case, &minus)) / (2.0 * h);
            let ad = g.data()[j].to_f64_c();
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(0.1);
            assert!(
                rel < tol,
                "{} input {i} element {j}: ad={ad:.6e} fd={fd:.6e} rel={rel:.3e}",
                case.name
            );
        }
    }
}

fn rt<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// |x| in [lo, hi] with random sign, keeping clear of the origin.
fn rt_signed<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(lo..hi);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        T::of(mag * sign)
    })
}

fn cases<T: Scalar>(trial: u64) -> Vec<Case<T>> {
    let mut rng = sub_rng(99, "gradcheck", trial);
    let mut out: Vec<Case<T>> = Vec::new();

    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let b = match op {
            BinaryOp::Div => rt_signed(&mut rng, &[3, 4], 0.5, 1.5),
            _ => rt_signed(&mut rng, &[3, 4], 0.1, 1.0),
        };
        out.push(Case {
            name,
            inputs: vec![rt_signed(&mut rng, &[3, 4], 0.1, 1.0), b],
            build: Box::new(move |t, v| t.binary(op, v[0], v[1]).unwrap()),
        });
        // broadcast variant: [2,3,4] against trailing [4]
        let b = match op {
            BinaryOp::Div => rt_signed(&mut rng, &[4], 0.5, 1.5),
            _ => rt_signed(&mut rng, &[4], 0.1, 1.0),
        };
        out.push(Case {
            name: match op {
                BinaryOp::Add => "add-broadcast",
                BinaryOp::Sub => "sub-broadcast",
                BinaryOp::Mul => "mul-broadcast",
                BinaryOp::Div => "div-broadcast",
            },
            inputs: vec![rt_signed(&mut rng, &[2, 3, 4], 0.1, 1.0), b],
            build: Box::new(move |t, v| t.binary(op, v[0], v[1]).unwrap()),
        });
    }

    let unary: [(&'static str, UnaryOp, Tensor<T>); 11] = [
        ("exp", UnaryOp::Exp, rt_signed(&mut rng, &[3, 4], 0.1, 1.0)),
        ("log", UnaryOp::Log, rt(&mut rng, &[3, 4], 0.3, 3.0)),
        ("abs", UnaryOp::Abs, rt_signed(&mut rng, &[3, 4], 0.2, 1.0)),
        ("square", UnaryOp::Square, rt_signed(&mut rng, &[3, 4], 0.1, 1.0)),
        ("sqrt", UnaryOp::Sqrt, rt(&mut rng, &[3, 4], 0.3, 3.0)),
        ("neg", UnaryOp::Neg, rt_signed(&mut rng, &[3, 4], 0.1, 1.0)),
        ("sin", UnaryOp::Sin, rt_signed(&mut rng, &[3, 4], 0.1, 2.0)),
        ("cos", UnaryOp::Cos, rt_signed(&mut rng, &[3, 4], 0.1, 2.0)),
        ("tanh", UnaryOp::Tanh, rt_signed(&mut rng, &[3, 4], 0.1, 1.5)),
        ("relu", UnaryOp::Relu, rt_signed(&mut rng, &[3, 4], 0.2, 1.0)),
        ("softplus", UnaryOp::Softplus, rt_signed(&mut rng, &[3, 4], 0.1, 2.0)),
    ];
    for (name, op, input) in unary {
        out.push(Case {
            name,
            inputs: vec![input],
            build: Box::new(move |t, v| t.unary(op, v[0])),
        });
    }

    out.push(Case {
        name: "atan2",
        inputs: vec![
            rt_signed(&mut rng, &[3, 4], 0.3, 1.5),
            rt_signed(&mut rng, &[3, 4], 0.3, 1.5),
        ],
        build: Box::new(|t, v| t.atan2(v[0], v[1]).unwrap()),
    });

    out.push(Case {
        name: "mean_all",
        inputs: vec![rt_signed(&mut rng, &[4, 4], 0.1, 1.0)],
        build: Box::new(|t, v| t.mean_all(v[0])),
    });
    out.push(Case {
        name: "reshape",
        inputs: vec![rt_signed(&mut rng, &[2, 6], 0.1, 1.0)],
        build: Box::new(|t, v| {
            let r = t.reshape(v[0], &[3, 4]).unwrap();
            t.square(r)
        }),
    });
    out.push(Case {
        name: "concat0-index0-narrow0",
        inputs: vec![
            rt_signed(&mut rng, &[2, 3], 0.1, 1.0),
            rt_signed(&mut rng, &[3, 3], 0.1, 1.0),
        ],
        build: Box::new(|t, v| {
            let cat = t.concat0(&[v[0], v[1]]).unwrap();
            let mid = t.narrow0(cat, 1, 3).unwrap();
            let row = t.index0(mid, 1).unwrap();
            t.square(row)
        }),
    });

    out.push(Case {
        name: "conv2d",
        inputs: vec![
            rt_signed(&mut rng, &[2, 5, 5], 0.1, 1.0),
            rt_signed(&mut rng, &[3, 2, 3, 3], 0.1, 0.8),
            rt_signed(&mut rng, &[3], 0.1, 0.5),
        ],
        build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2]).unwrap()),
    });
    out.push(Case {
        name: "channel_linear",
        inputs: vec![
            rt_signed(&mut rng, &[3, 4, 4], 0.1, 1.0),
            rt_signed(&mut rng, &[2, 3], 0.1, 0.8),
            rt_signed(&mut rng, &[2], 0.1, 0.5),
        ],
        build: Box::new(|t, v| t.channel_linear(v[0], v[1], Some(v[2])).unwrap()),
    });
    out.push(Case {
        name: "linear1d",
        inputs: vec![
            rt_signed(&mut rng, &[5], 0.1, 1.0),
            rt_signed(&mut rng, &[3, 5], 0.1, 0.8),
            rt_signed(&mut rng, &[3], 0.1, 0.5),
        ],
        build: Box::new(|t, v| t.linear1d(v[0], v[1], v[2]).unwrap()),
    });

    // bilinear: fractional coords clear of integer lattice lines
    let coords = Tensor::from_fn(&[2, 4, 4], |i| {
        let base = rng.gen_range(0..3) as f64;
        T::of(base + rng.gen_range(0.2..0.8) + if i == 0 { 0.0 } else { 0.0 })
    });
    out.push(Case {
        name: "bilinear_sample",
        inputs: vec![rt_signed(&mut rng, &[2, 4, 4], 0.1, 1.0), coords],
        build: Box::new(|t, v| t.bilinear_sample(v[0], v[1]).unwrap()),
    });

    out.push(Case {
        name: "avg_pool2",
        inputs: vec![rt_signed(&mut rng, &[2, 4, 4], 0.1, 1.0)],
        build: Box::new(|t, v| t.avg_pool2(v[0]).unwrap()),
    });
    out.push(Case {
        name: "upsample2",
        inputs: vec![rt_signed(&mut rng, &[2, 3, 3], 0.1, 1.0)],
        build: Box::new(|t, v| t.upsample2(v[0]).unwrap()),
    });
    out.push(Case {
        name: "diff_x",
        inputs: vec![rt_signed(&mut rng, &[4, 5], 0.1, 1.0)],
        build: Box::new(|t, v| {
            let d = t.diff_x(v[0]).unwrap();
            t.square(d)
        }),
    });
    out.push(Case {
        name: "diff_y",
        inputs: vec![rt_signed(&mut rng, &[5, 4], 0.1, 1.0)],
        build: Box::new(|t, v| {
            let d = t.diff_y(v[0]).unwrap();
            t.square(d)
        }),
    });
    out.push(Case {
        name: "softmax0",
        inputs: vec![rt_signed(&mut rng, &[3, 4], 0.2, 1.5)],
        build: Box::new(|t, v| {
            let s = t.softmax0(v[0]).unwrap();
            t.square(s)
        }),
    });
    for inverse in [false, true] {
        out.push(Case {
            name: if inverse { "ifft2" } else { "fft2" },
            inputs: vec![rt_signed(&mut rng, &[2, 4, 4], 0.1, 1.0)],
            build: Box::new(move |t, v| {
                let f = t.fft2(v[0], inverse).unwrap();
                t.square(f)
            }),
        });
    }

    // 2-layer MLP end to end
    out.push(Case {
        name: "mlp2",
        inputs: vec![
            rt_signed(&mut rng, &[3], 0.1, 1.0),
            rt_signed(&mut rng, &[4, 3], 0.1, 0.8),
            rt_signed(&mut rng, &[4], 0.1, 0.4),
            rt_signed(&mut rng, &[2, 4], 0.1, 0.8),
            rt_signed(&mut rng, &[2], 0.1, 0.4),
        ],
        build: Box::new(|t, v| {
            mlp_forward(
                t,
                v[0],
                &[
                    MlpLayer {
                        weight: v[1],
                        bias: v[2],
                        activation: Activation::Tanh,
                    },
                    MlpLayer {
                        weight: v[3],
                        bias: v[4],
                        activation: Activation::None,
                    },
                ],
            )
            .unwrap()
        }),
    });
    out
}

/// Runs `trials` rounds of every case at the given dtype tolerance.
fn run_all<T: Scalar>(trials: u64, h_rel: f64, tol: f64) {
    for trial in 0..trials {
        for case in cases::<T>(trial) {
            check_case(&case, h_rel, tol);
        }
    }
}

#[test]
fn gradcheck_f64_all_ops() {
    run_all::<f64>(10, 1e-5, 1e-6);
}

#[test]
fn gradcheck_f32_all_ops() {
    run_all::<f32>(10, 1e-2, 1e-3);
}

/// 100-trial sweeps in both precisions (the full acceptance workload).
#[test]
fn gradcheck_hundred_trials_both_precisions() {
    run_all::<f64>(100, 1e-5, 1e-6);
    run_all::<f32>(100, 1e-2, 1e-3);
}

/// Directional-derivative check of a composite graph: the backward of a
/// sum-of-elements loss dotted with a random direction matches directional
/// finite differences to 1e-3.
#[test]
fn directional_derivative_composite_graph() {
    for trial in 0..20u64 {
        let mut rng = sub_rng(7, "gradcheck-dir", trial);
        let x0 = Tensor::<f64>::rand_uniform(&[2, 6, 6], 0.2, 1.0, &mut rng);
        let w0 = Tensor::<f64>::rand_uniform(&[2, 2, 3, 3], -0.5, 0.5, &mut rng);
        let b0 = Tensor::<f64>::rand_uniform(&[2], -0.2, 0.2, &mut rng);

        let eval = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, want_grad: bool| {
            let tape = Tape::<f64>::new();
            let (xv, wv, bv) = (
                tape.leaf(x.clone(), want_grad),
                tape.leaf(w.clone(), want_grad),
                tape.leaf(b.clone(), want_grad),
            );
            let y = tape.conv2d(xv, wv, bv).unwrap();
            let y = tape.relu(y);
            let y = tape.avg_pool2(y).unwrap();
            let f = tape.tanh(y);
            let e = tape.exp(tape.scale(f, 0.3).unwrap());
            let loss = tape.sum_all(e);
            let l = tape.value(loss).data()[0];
            if want_grad {
                let g = tape.backward(loss).unwrap();
                (
                    l,
                    Some((
                        g.get(xv).unwrap().clone(),
                        g.get(wv).unwrap().clone(),
                        g.get(bv).unwrap().clone(),
                    )),
                )
            } else {
                (l, None)
            }
        };
        let (_, grads) = eval(&x0, &w0, &b0, true);
        let (gx, gw, gb) = grads.unwrap();

        let dx = Tensor::<f64>::rand_uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let dw = Tensor::<f64>::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let db = Tensor::<f64>::rand_uniform(&[2], -1.0, 1.0, &mut rng);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        let analytic = dot(&gx, &dx) + dot(&gw, &dw) + dot(&gb, &db);

        let h = 1e-6;
        let shift = |t: &Tensor<f64>, d: &Tensor<f64>, s: f64| {
            let mut o = t.clone();
            for (a, b) in o.data_mut().iter_mut().zip(d.data()) {
                *a += s * b;
            }
            o
        };
        let (lp, _) = eval(&shift(&x0, &dx, h), &shift(&w0, &dw, h), &shift(&b0, &db, h), false);
        let (lm, _) = eval(
            &shift(&x0, &dx, -h),
            &shift(&w0, &dw, -h),
            &shift(&b0, &db, -h),
            false,
        );
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        assert!(rel < 1e-3, "trial {trial}: fd={fd:.8e} ad={analytic:.8e} rel={rel:.3e}");
    }
}
