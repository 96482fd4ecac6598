use std::rc::Rc;

use numcore::{gradcheck, CustomOp, GradcheckOptions, Graph, NumError, Tensor, Var, MASK_BLOCK};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn eval(f: impl Fn(&mut Graph, &[Var]) -> Result<Var, NumError>, inputs: &[Tensor]) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).clone()
}

#[test]
fn matmul_identity_and_selector() {
    let i2 = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let m = rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    assert_eq!(eval(|g, v| g.matmul(v[0], v[1]), &[i2, m.clone()]).data(), m.data());

    let sel = rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
    let col = rows(&[&[5.0], &[7.0]]);
    assert_eq!(eval(|g, v| g.matmul(v[0], v[1]), &[sel, col]).data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[3, 4]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]).with_grad();
    let b = rand_tensor(&mut rng, &[4, 2]);
    let mut g = Graph::new();
    let (va, vb) = (g.leaf(a), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let grad = g.grad(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let want = b.data()[k * 2] + b.data()[k * 2 + 1];
            assert!((grad[i * 4 + k] - want).abs() < 1e-14);
        }
    }
    let report = gradcheck(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            Ok(g.sum(c))
        },
        &[rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])],
        &GradcheckOptions::new(1e-5, 1e-6),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn softmax_examples() {
    let s = eval(|g, v| Ok(g.softmax_lastdim(v[0])), &[rows(&[&[0.0, 0.0, 0.0]])]);
    for p in s.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = eval(|g, v| Ok(g.softmax_lastdim(v[0])), &[rows(&[&[2f64.ln(), 0.0]])]);
    assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 5]);
    let r = gradcheck(|g, v| Ok(g.softmax_lastdim(v[0])), &[x], &GradcheckOptions::new(1e-5, 1e-6)).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn fully_masked_softmax_row_is_uniform_with_zero_gradient() {
    let x = rows(&[&[MASK_BLOCK, MASK_BLOCK + 3.0, MASK_BLOCK - 1.0, MASK_BLOCK], &[0.1, 0.2, 0.3, 0.4]]).with_grad();
    let mut g = Graph::new();
    let v = g.leaf(x);
    let s = g.softmax_lastdim(v);
    assert_eq!(&g.value(s).data()[..4], &[0.25; 4]);
    let w = g.constant(rows(&[&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]]));
    let p = g.mul(s, w).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    let grad = g.grad(v).unwrap();
    assert_eq!(&grad[..4], &[0.0; 4]);
    assert!(grad[4..].iter().any(|&d| d != 0.0));
}

#[test]
fn layernorm_examples() {
    let ln = |g: &mut Graph, v: &[Var]| g.layernorm(v[0], v[1], v[2], 1e-5);
    let out = eval(ln, &[rows(&[&[3.0; 4]]), Tensor::ones(&[4]), Tensor::zeros(&[4])]);
    assert!(out.data().iter().all(|&v| v == 0.0));
    let out = eval(ln, &[rows(&[&[1.0, -1.0]]), Tensor::ones(&[2]), Tensor::zeros(&[2])]);
    assert!((out.data()[0] - 1.0).abs() < 1e-4 && (out.data()[1] + 1.0).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        rand_tensor(&mut rng, &[2, 8]),
        rand_tensor(&mut rng, &[8]),
        rand_tensor(&mut rng, &[8]),
    ];
    let r = gradcheck(ln, &inputs, &GradcheckOptions::new(1e-5, 1e-6)).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn layernorm_rejects_nonpositive_eps() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 2]));
    let gain = g.constant(Tensor::ones(&[2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    assert!(g.layernorm(x, gain, bias, 0.0).is_err());
}

#[test]
fn backward_examples() {
    let x = rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_grad());
    let s = g.sum(v);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[1.0; 4]);

    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_grad());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    g.backward(half).unwrap();
    assert_eq!(g.grad(v).unwrap(), x.data());

    // A second sweep adds on top of the first.
    g.backward(half).unwrap();
    let doubled: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(v).unwrap(), doubled.as_slice());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let v = g.leaf(Tensor::ones(&[2, 2]).with_grad());
    assert!(matches!(g.backward(v), Err(NumError::NonScalarLoss { .. })));
}

#[test]
fn layout_and_elementwise_ops_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let opts = GradcheckOptions::new(1e-5, 1e-6);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let r4 = rand_tensor(&mut rng, &[4]);
    let table = rand_tensor(&mut rng, &[5, 4]);

    let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, NumError>>, Vec<Tensor>)> = vec![
        ("add", Box::new(|g, v| g.add(v[0], v[1])), vec![a.clone(), b.clone()]),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1])), vec![a.clone(), b.clone()]),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![a.clone(), b.clone()]),
        ("add_row", Box::new(|g, v| g.add_row(v[0], v[1])), vec![a.clone(), r4.clone()]),
        ("mul_row", Box::new(|g, v| g.mul_row(v[0], v[1])), vec![a.clone(), r4.clone()]),
        ("silu", Box::new(|g, v| Ok(g.silu(v[0]))), vec![a.clone()]),
        ("transpose", Box::new(|g, v| g.transpose(v[0])), vec![a.clone()]),
        ("reshape", Box::new(|g, v| g.reshape(v[0], &[2, 6])), vec![a.clone()]),
        ("mean", Box::new(|g, v| Ok(g.mean(v[0]))), vec![a.clone()]),
        ("mse", Box::new(|g, v| g.mse(v[0], v[1])), vec![a.clone(), b.clone()]),
        (
            "concat_rows",
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
            vec![a.clone(), b.clone()],
        ),
        (
            "concat_cols",
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
            vec![a.clone(), b.clone()],
        ),
        ("slice_rows", Box::new(|g, v| g.slice_rows(v[0], 1, 3)), vec![a.clone()]),
        ("slice_cols", Box::new(|g, v| g.slice_cols(v[0], 1, 3)), vec![a.clone()]),
        ("gather_rows", Box::new(|g, v| g.gather_rows(v[0], &[4, 0, 4, 2])), vec![table]),
    ];
    for (name, f, inputs) in cases {
        let r = gradcheck(f, &inputs, &opts).unwrap();
        assert!(r.passed, "{name}: {r:?}");
    }
}

#[test]
fn rope_is_a_rotation_and_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (l, heads, dk) = (3, 2, 4);
    let x = rand_tensor(&mut rng, &[l, heads * dk]);
    let angles: Vec<f64> = (0..l * dk / 2).map(|_| rng.random_range(-3.0..3.0)).collect();
    let cos = Rc::new(angles.iter().map(|a| a.cos()).collect::<Vec<_>>());
    let sin = Rc::new(angles.iter().map(|a| a.sin()).collect::<Vec<_>>());
    let (c2, s2) = (cos.clone(), sin.clone());
    let out = eval(move |g, v| g.rope(v[0], c2.clone(), s2.clone(), heads), &[x.clone()]);
    // Rotations preserve per-pair norms.
    for (xp, yp) in x.data().chunks(2).zip(out.data().chunks(2)) {
        let (nx, ny) = (xp[0].hypot(xp[1]), yp[0].hypot(yp[1]));
        assert!((nx - ny).abs() < 1e-14);
    }
    let r = gradcheck(
        move |g, v| g.rope(v[0], cos.clone(), sin.clone(), heads),
        &[x],
        &GradcheckOptions::new(1e-5, 1e-6),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

/// Unfused composition of the same attention from primitive ops.
fn composed_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[f64]>) -> Var {
    let h = g.shape(q)[1];
    let (lq, lk) = (g.shape(q)[0], g.shape(k)[0]);
    let dk = h / heads;
    let bias = mask.map(|m| {
        let b: Vec<f64> = m.iter().map(|&x| if x == 0.0 { MASK_BLOCK } else { 0.0 }).collect();
        g.constant(Tensor::new(vec![lq, lk], b).unwrap())
    });
    let mut outs = Vec::new();
    for hd in 0..heads {
        let qh = g.slice_cols(q, hd * dk, (hd + 1) * dk).unwrap();
        let kh = g.slice_cols(k, hd * dk, (hd + 1) * dk).unwrap();
        let vh = g.slice_cols(v, hd * dk, (hd + 1) * dk).unwrap();
        let kt = g.transpose(kh).unwrap();
        let s = g.matmul(qh, kt).unwrap();
        let mut s = g.scale(s, 1.0 / (dk as f64).sqrt());
        if let Some(b) = bias {
            s = g.add(s, b).unwrap();
        }
        let p = g.softmax_lastdim(s);
        outs.push(g.matmul(p, vh).unwrap());
    }
    g.concat_cols(&outs).unwrap()
}

#[test]
fn fused_attention_matches_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (lq, lk, h, heads) = (5, 7, 8, 2);
    let q = rand_tensor(&mut rng, &[lq, h]);
    let k = rand_tensor(&mut rng, &[lk, h]);
    let v = rand_tensor(&mut rng, &[lk, h]);
    let mask: Vec<f64> = (0..lq * lk).map(|i| f64::from(u8::from((i * 7 + 3) % 3 != 0))).collect();
    for m in [None, Some(mask.as_slice())] {
        let fused = eval(|g, x| g.attention(x[0], x[1], x[2], heads, m), &[q.clone(), k.clone(), v.clone()]);
        let comp = eval(
            |g, x| Ok(composed_attention(g, x[0], x[1], x[2], heads, m)),
            &[q.clone(), k.clone(), v.clone()],
        );
        assert!(fused.max_abs_diff(&comp) < 1e-12);
        let r = gradcheck(
            |g, x| g.attention(x[0], x[1], x[2], heads, m),
            &[q.clone(), k.clone(), v.clone()],
            &GradcheckOptions::new(1e-5, 1e-6),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}

struct WrongSquare;

impl CustomOp for WrongSquare {
    fn name(&self) -> &str {
        "wrong_square"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumError> {
        let x = inputs[0];
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        // Missing the factor 2.
        vec![inputs[0].data().iter().zip(g).map(|(x, g)| x * g).collect()]
    }
}

#[test]
fn gradcheck_flags_a_wrong_backward_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let op: Rc<dyn CustomOp> = Rc::new(WrongSquare);
    let r = gradcheck(|g, v| g.custom(op.clone(), v), &[x], &GradcheckOptions::new(1e-5, 1e-6)).unwrap();
    assert!(!r.passed);
    assert!(r.max_rel_err > 0.1);
}

#[test]
fn gradcheck_reports_non_finite_values() {
    struct Blowup;
    impl CustomOp for Blowup {
        fn name(&self) -> &str {
            "blowup"
        }
        fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumError> {
            let x = inputs[0];
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| 1.0 / (v - v)).collect())
        }
        fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &[f64]) -> Vec<Vec<f64>> {
            vec![vec![f64::NAN; inputs[0].len()]]
        }
    }
    let op: Rc<dyn CustomOp> = Rc::new(Blowup);
    let r = gradcheck(|g, v| g.custom(op.clone(), v), &[Tensor::ones(&[2])], &GradcheckOptions::default()).unwrap();
    assert!(r.non_finite && !r.passed);
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_tensor(&mut rng, &[9, 8]);
        let k = rand_tensor(&mut rng, &[9, 8]);
        let w = rand_tensor(&mut rng, &[8, 8]).with_grad();
        let mut g = Graph::new();
        let (vq, vk, vw) = (g.constant(q), g.constant(k), g.leaf(w));
        let p = g.matmul(vq, vw).unwrap();
        let a = g.attention(p, vk, vk, 2, None).unwrap();
        let l = g.mean(a);
        g.backward(l).unwrap();
        (g.value(a).data().to_vec(), g.grad(vw).unwrap().to_vec())
    };
    let (a1, g1) = run();
    let (a2, g2) = run();
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn matmul_is_linear_in_the_right_factor(
        a in proptest::collection::vec(-1.0f64..1.0, 6),
        b in proptest::collection::vec(-1.0f64..1.0, 6),
        c in proptest::collection::vec(-1.0f64..1.0, 6),
    ) {
        let at = Tensor::new(vec![2, 3], a).unwrap();
        let bt = Tensor::new(vec![3, 2], b).unwrap();
        let ct = Tensor::new(vec![3, 2], c).unwrap();
        let lhs = eval(|g, v| { let s = g.add(v[1], v[2])?; g.matmul(v[0], s) }, &[at.clone(), bt.clone(), ct.clone()]);
        let rhs = eval(|g, v| { let x = g.matmul(v[0], v[1])?; let y = g.matmul(v[0], v[2])?; g.add(x, y) }, &[at, bt, ct]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(x in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let out = eval(|g, v| Ok(g.softmax_lastdim(v[0])), &[Tensor::new(vec![3, 4], x).unwrap()]);
        for row in out.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
