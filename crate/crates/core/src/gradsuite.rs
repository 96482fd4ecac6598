//! Finite-difference checks of every differentiable piece, module by module.

use std::rc::Rc;

use numcore::{gradcheck, CustomOp, GradcheckOptions, Graph, NumError, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::{gated_inject, pack_context, AudioAttnVars};
use crate::codec::{Codec, Geometry};
use crate::condition::{assemble, loss_graph, ConditionSpec, TaskKind};
use crate::error::{Error, Result};
use crate::model::{forward, Model, ModelConfig, ParamVars};
use crate::synthdata::generate_one;

/// Relative error bound for primitive operations.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Relative error bound for the full model and the audio path.
pub const MODEL_TOL: f64 = 1e-3;
/// Random parameter coordinates probed in the full-model check.
pub const MODEL_COORDS: usize = 32;
/// Denominator floor. Some gradients are exactly zero (a key bias shifts every
/// logit of a row equally), and their difference quotients are pure roundoff.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleReport {
    pub module: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

fn num(e: Error) -> NumError {
    NumError::InvalidArgument {
        op: "gradsuite",
        msg: e.to_string(),
    }
}

fn check<F>(name: &str, f: F, inputs: &[Tensor], tol: f64, coords: Option<Vec<(usize, usize)>>) -> Result<ModuleReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    let opts = GradcheckOptions {
        coords,
        floor: FD_FLOOR,
        ..GradcheckOptions::new(1e-5, tol)
    };
    let r = gradcheck(f, inputs, &opts)?;
    Ok(ModuleReport {
        module: name.into(),
        max_rel_err: r.max_rel_err,
        checked: r.checked,
        tol,
        passed: r.passed,
    })
}

/// Elementwise square whose backward forgets the factor 2.
#[derive(Debug)]
struct BrokenSquare;

impl CustomOp for BrokenSquare {
    fn name(&self) -> &str {
        "broken_square"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumError> {
        let x = inputs[0];
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(grad).map(|(x, g)| x * g).collect()]
    }
}

/// Checks each primitive op on small random inputs.
pub fn primitive_reports(seed: u64) -> Result<Vec<ModuleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = PRIMITIVE_TOL;
    let mut out = Vec::new();
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let c = rand_tensor(&mut rng, &[3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    out.push(check("matmul", |g, v| g.matmul(v[0], v[1]), &[a.clone(), b.clone()], tol, None)?);
    out.push(check("transpose", |g, v| g.transpose(v[0]), &[a.clone()], tol, None)?);
    out.push(check(
        "add_sub_mul",
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            Ok(g.scale(m, 0.7))
        },
        &[a.clone(), c.clone()],
        tol,
        None,
    )?);
    out.push(check(
        "row_broadcast",
        |g, v| {
            let x = g.add_row(v[0], v[1])?;
            g.mul_row(x, v[1])
        },
        &[a.clone(), row.clone()],
        tol,
        None,
    )?);
    out.push(check("silu", |g, v| Ok(g.silu(v[0])), &[a.clone()], tol, None)?);
    out.push(check("softmax", |g, v| Ok(g.softmax_lastdim(v[0])), &[a.clone()], tol, None)?);
    let gain = rand_tensor(&mut rng, &[4]);
    out.push(check(
        "layernorm",
        |g, v| g.layernorm(v[0], v[1], v[2], 1e-5),
        &[a.clone(), gain, row.clone()],
        tol,
        None,
    )?);
    out.push(check(
        "layout",
        |g, v| {
            let r = g.concat_rows(&[v[0], v[1]])?;
            let r = g.slice_rows(r, 1, 5)?;
            let cc = g.concat_cols(&[r, r])?;
            let cc = g.slice_cols(cc, 2, 7)?;
            let gr = g.gather_rows(cc, &[3, 0, 3])?;
            g.reshape(gr, &[5, 3])
        },
        &[a.clone(), c.clone()],
        tol,
        None,
    )?);
    let x = rand_tensor(&mut rng, &[3, 8]);
    let ang: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 + 0.1).collect();
    let cos = Rc::new(ang.iter().map(|a| a.cos()).collect::<Vec<_>>());
    let sin = Rc::new(ang.iter().map(|a| a.sin()).collect::<Vec<_>>());
    out.push(check(
        "rope",
        move |g, v| g.rope(v[0], cos.clone(), sin.clone(), 2),
        &[x],
        tol,
        None,
    )?);
    let q = rand_tensor(&mut rng, &[3, 4]);
    let k = rand_tensor(&mut rng, &[5, 4]);
    let vv = rand_tensor(&mut rng, &[5, 4]);
    out.push(check(
        "attention",
        |g, v| g.attention(v[0], v[1], v[2], 2, None),
        &[q.clone(), k.clone(), vv.clone()],
        tol,
        None,
    )?);
    let mask: Vec<f64> = (0..15).map(|i| if i % 5 < 2 + i / 5 { 1.0 } else { 0.0 }).collect();
    out.push(check(
        "masked_attention",
        move |g, v| g.attention(v[0], v[1], v[2], 2, Some(&mask)),
        &[q, k, vv],
        tol,
        None,
    )?);
    out.push(check(
        "mse",
        |g, v| {
            let m = g.mse(v[0], v[1])?;
            let s = g.sum(v[0]);
            let s = g.mean(s);
            g.add(m, s)
        },
        &[a, c],
        tol,
        None,
    )?);
    Ok(out)
}

/// Audio cross-attention and gated injection with all weights as inputs.
pub fn audio_report(seed: u64) -> Result<ModuleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, f, per) = (8, 3, 2);
    let feats = rand_tensor(&mut rng, &[8, f]);
    let ctx = pack_context(&feats, 3, 4, 1, per)?;
    let rows = ctx.n_video_rows();
    let mut inputs = vec![rand_tensor(&mut rng, &[rows, h]), rand_tensor(&mut rng, &[ctx.n_audio_tokens(), h])];
    inputs.push(rand_tensor(&mut rng, &[h]));
    inputs.push(rand_tensor(&mut rng, &[h]));
    for _ in 0..4 {
        inputs.push(rand_tensor(&mut rng, &[h, h]));
        inputs.push(rand_tensor(&mut rng, &[h]));
    }
    inputs.push(rand_tensor(&mut rng, &[h]));
    check(
        "audio",
        move |g, v| {
            let p = AudioAttnVars {
                norm_gain: v[2],
                norm_bias: v[3],
                q_w: v[4],
                q_b: v[5],
                k_w: v[6],
                k_b: v[7],
                v_w: v[8],
                v_b: v[9],
                o_w: v[10],
                o_b: v[11],
                gate: v[12],
            };
            gated_inject(g, v[0], v[1], &ctx, &p, 2).map_err(num)
        },
        &inputs,
        MODEL_TOL,
        None,
    )
}

/// Full forward plus flow-matching loss, probed at random parameter coordinates.
///
/// Zero-initialized projections are replaced by random values first so every
/// path carries gradient.
pub fn model_report(cfg: &ModelConfig, geo: &Geometry, task: TaskKind, seed: u64, coords: usize) -> Result<ModuleReport> {
    let mut model = Model::new(cfg.clone(), task.uses_audio(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.params.tensors.values_mut() {
        for w in p.tensor.data_mut() {
            *w += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let sample = generate_one(seed, 0, task, geo)?;
    let codec = Codec::for_geometry(geo);
    let spec = ConditionSpec::from_sample(&sample, task, &codec, true)?;
    let x1 = codec.encode(&sample.clip)?;
    let rows = geo.video_tokens() + geo.pseudo_tokens(spec.n_pseudo_frames());
    let noise = rand_tensor(&mut rng, &[rows, geo.token_dim()]);
    let t = 0.37;
    let (seq, targets) = assemble(&x1, &spec, t, &noise, cfg.rope_strategy)?;
    let ctx = if task.uses_audio() {
        Some(model.audio_context(&sample.audio, geo, seq.n_pseudo_frames)?)
    } else {
        None
    };
    let names: Vec<String> = model.params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = model.params.tensors.values().map(|p| p.tensor.clone()).collect();
    let picks: Vec<(usize, usize)> = (0..coords)
        .map(|_| {
            let i = rng.random_range(0..inputs.len());
            (i, rng.random_range(0..inputs[i].len()))
        })
        .collect();
    let has_audio = model.params.has_audio();
    let text = sample.text_ids.clone();
    let cfg = cfg.clone();
    check(
        "model",
        move |g, v| {
            let pv = ParamVars::from_vars(&names, v, has_audio);
            let out = forward(g, &pv, &cfg, &seq, &text, ctx.as_ref(), t).map_err(num)?;
            let (total, _, _) = loss_graph(g, out, &targets).map_err(num)?;
            Ok(total)
        },
        &inputs,
        MODEL_TOL,
        Some(picks),
    )
}

/// Deliberately wrong backward, used to show that the checker catches errors.
pub fn fault_report(seed: u64) -> Result<ModuleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[2, 3]);
    check(
        "fault_fixture",
        |g, v| g.custom(Rc::new(BrokenSquare), &[v[0]]),
        &[x],
        PRIMITIVE_TOL,
        None,
    )
}

/// Primitives, audio path and full model; `with_fault` appends the broken fixture.
pub fn run_suite(cfg: &ModelConfig, geo: &Geometry, seed: u64, with_fault: bool) -> Result<Vec<ModuleReport>> {
    let mut out = primitive_reports(seed)?;
    out.push(audio_report(seed)?);
    let mut m = model_report(cfg, geo, TaskKind::RA2V, seed, MODEL_COORDS)?;
    m.module = "model_ra2v".into();
    out.push(m);
    if with_fault {
        out.push(fault_report(seed)?);
    }
    Ok(out)
}
