//! Central-difference verification of recorded backward rules.

use crate::error::NumError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the worst relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose true
    /// gradient is numerically zero are judged on absolute error.
    pub floor: f64,
    /// `(input index, flat coordinate)` pairs to probe; `None` probes everything.
    pub coords: Option<Vec<(usize, usize)>>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-6,
            floor: 1e-8,
            coords: None,
        }
    }
}

impl GradcheckOptions {
    pub fn new(h: f64, tol: f64) -> Self {
        Self {
            h,
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Coordinate where `max_rel_err` was attained.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub non_finite: bool,
    pub passed: bool,
}

/// Fixed projection weights used to turn a non-scalar output into a scalar.
fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + (i as f64 * 0.731 + 0.29).sin()).collect()
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor], with_grad: bool) -> Result<(f64, Graph, Vec<Var>), NumError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = with_grad;
            t.grad = None;
            g.leaf(t)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    let loss = if g.value(out).is_scalar() {
        out
    } else {
        let w = projection(g.value(out).len());
        let shape = g.shape(out).to_vec();
        let wv = g.constant(Tensor::new(shape, w)?);
        let p = g.mul(out, wv)?;
        g.sum(p)
    };
    let val = g.value(loss).item();
    if with_grad {
        g.backward(loss)?;
    }
    Ok((val, g, vars))
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Non-scalar outputs are reduced with a fixed weighted sum first. Non-finite
/// values anywhere fail the check and set `non_finite`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport, NumError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    if opts.h <= 0.0 {
        return Err(NumError::InvalidArgument {
            op: "gradcheck",
            msg: format!("step must be positive, got {}", opts.h),
        });
    }
    let (_, g, vars) = eval_scalar(&f, inputs, true)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let coords: Vec<(usize, usize)> = match &opts.coords {
        Some(c) => c.clone(),
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect(),
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        non_finite: false,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for &(i, j) in &coords {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + opts.h;
        let (fp, _, _) = eval_scalar(&f, &probe, false)?;
        probe[i].data_mut()[j] = orig - opts.h;
        let (fm, _, _) = eval_scalar(&f, &probe, false)?;
        probe[i].data_mut()[j] = orig;

        let numeric = (fp - fm) / (2.0 * opts.h);
        let a = analytic[i][j];
        report.checked += 1;
        if !numeric.is_finite() || !a.is_finite() {
            report.non_finite = true;
            report.max_rel_err = f64::INFINITY;
            report.worst = Some((i, j));
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel >= report.max_rel_err {
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = !report.non_finite && report.max_rel_err <= opts.tol;
    Ok(report)
}
