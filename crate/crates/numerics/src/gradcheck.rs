//! Finite-difference verification of reverse-mode gradients.
//!
//! Errors are normwise: the coordinate check divides the worst absolute
//! discrepancy by the largest gradient magnitude (analytic or numeric), so
//! coordinates whose true derivative is near zero do not blow up the ratio.
//! Directional probes divide by `‖∇f‖₂·‖v‖₂`, the largest value the
//! directional derivative along `v` can take.

use crate::error::{param_err, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Scale the relative error was measured against.
    pub grad_scale: f64,
    pub evaluations: usize,
}

/// How the numeric gradient is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// Every coordinate of every input.
    Coordinates,
    /// `count` random Gaussian directions over all inputs jointly.
    Directions { count: usize, seed: u64 },
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

fn value<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares the tape gradient of scalar `f` at `inputs` with central
/// differences of step `h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, probe: Probe) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(param_err("grad_check", format!("step {h} must be positive")));
    }
    let (_, analytic) = eval(&f, inputs)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut evaluations = 1;
    match probe {
        Probe::Coordinates => {
            let mut max_abs: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for t in 0..work.len() {
                for i in 0..work[t].numel() {
                    let orig = work[t].data()[i];
                    work[t].data_mut()[i] = orig + h;
                    let plus = value(&f, &work)?;
                    work[t].data_mut()[i] = orig - h;
                    let minus = value(&f, &work)?;
                    work[t].data_mut()[i] = orig;
                    evaluations += 2;
                    let numeric = (plus - minus) / (2.0 * h);
                    let a = analytic[t].data()[i];
                    max_abs = max_abs.max((a - numeric).abs());
                    scale = scale.max(a.abs()).max(numeric.abs());
                }
            }
            Ok(GradCheckReport {
                max_abs_error: max_abs,
                max_rel_error: if scale > 0.0 { max_abs / scale } else { max_abs },
                grad_scale: scale,
                evaluations,
            })
        }
        Probe::Directions { count, seed } => {
            let mut rng = RngState::new(seed);
            let grad_norm = analytic
                .iter()
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            let mut report = GradCheckReport {
                max_abs_error: 0.0,
                max_rel_error: 0.0,
                grad_scale: grad_norm,
                evaluations,
            };
            for _ in 0..count {
                let dirs: Vec<Tensor> = inputs
                    .iter()
                    .map(|t| Tensor::from_fn(t.shape(), |_| rng.normal()))
                    .collect();
                let dir_norm = dirs
                    .iter()
                    .map(|d| d.data().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                let shifted = |s: f64| -> Vec<Tensor> {
                    inputs
                        .iter()
                        .zip(&dirs)
                        .map(|(x, d)| x.zip_map(d, |a, b| a + s * b).expect("same shape"))
                        .collect()
                };
                let numeric = (value(&f, &shifted(h))? - value(&f, &shifted(-h))?) / (2.0 * h);
                let projected: f64 = analytic
                    .iter()
                    .zip(&dirs)
                    .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
                    .sum();
                let err = (projected - numeric).abs();
                let bound = grad_norm * dir_norm;
                report.max_abs_error = report.max_abs_error.max(err);
                report.max_rel_error = report.max_rel_error.max(if bound > 0.0 { err / bound } else { err });
                report.evaluations += 2;
            }
            Ok(report)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 1.7);
        let r = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum(s))
            },
            &[x],
            1e-5,
            Probe::Coordinates,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_fn(&[2, 6], |i| (i as f64 * 0.37).sin());
        let r = grad_check(
            |g, v| {
                let s = g.softmax(v[0])?;
                Ok(g.sum(s))
            },
            &[x],
            1e-5,
            Probe::Coordinates,
        )
        .unwrap();
        assert!(r.max_abs_error < 1e-8, "{r:?}");
    }

    #[test]
    fn directional_probes_agree() {
        let x = Tensor::from_fn(&[4, 3], |i| 0.1 * i as f64 - 0.4);
        let r = grad_check(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                let y = g.mul(y, v[0])?;
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
            Probe::Directions { count: 5, seed: 1 },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::zeros(&[1]);
        assert!(grad_check(|g, v| Ok(g.sum(v[0])), &[x], 0.0, Probe::Coordinates).is_err());
    }
}
