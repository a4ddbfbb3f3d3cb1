use super::{AdjointFault, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many evenly strided coordinates per parameter tensor.
    pub max_probes_per_param: Option<usize>,
    #[doc(hidden)]
    pub adjoint_fault: Option<AdjointFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_probes_per_param: None,
            adjoint_fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, flat coordinate)` of the worst probe.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
    pub passed: bool,
}

/// Compares autodiff gradients of a scalar function against central
/// differences.
///
/// The error per coordinate is `|autodiff - fd| / max(1, |fd|)`.
pub fn grad_check<F>(
    mut f: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_adjoint_fault(opts.adjoint_fault);
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p))
        .collect();

    let mut eval = |ps: &[Tensor], param: usize, coord: usize| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs).map_err(|e| match e {
            Error::NonFinite { .. }
            | Error::NonFiniteActivation { .. }
            | Error::LogDomain { .. } => Error::GradCheckNonFinite { param, coord },
            other => other,
        })?;
        let v = t.value(out).item();
        if !v.is_finite() {
            return Err(Error::GradCheckNonFinite { param, coord });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        probes: 0,
        passed: true,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let stride = match opts.max_probes_per_param {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        for ci in (0..n).step_by(stride) {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + opts.step;
            let up = eval(&work, pi, ci)?;
            work[pi].data_mut()[ci] = orig - opts.step;
            let down = eval(&work, pi, ci)?;
            work[pi].data_mut()[ci] = orig;

            let fd = (up - down) / (2.0 * opts.step);
            let err = (analytic[pi].data()[ci] - fd).abs() / fd.abs().max(1.0);
            report.probes += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((pi, ci));
            }
        }
    }
    report.passed = report.max_relative_error < opts.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OpKind;

    #[test]
    fn cube_matches_analytic() {
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let cu = t.mul(sq, v[0])?;
                t.sum(cu)
            },
            &[Tensor::scalar(2.0)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert!(r.passed);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(3.0))),
            &[Tensor::row_vector(&[1.0, 2.0]).unwrap()],
            &GradCheckOptions::default(),
        );
        // A loss that does not depend on the params is still a valid probe.
        let r = r.unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        let opts = GradCheckOptions {
            adjoint_fault: Some(AdjointFault {
                op: OpKind::Tanh,
                factor: 1.01,
            }),
            ..Default::default()
        };
        let r = grad_check(
            |t, v| {
                let h = t.tanh(v[0])?;
                t.sum(h)
            },
            &[Tensor::row_vector(&[0.3, -0.7]).unwrap()],
            &opts,
        )
        .unwrap();
        assert!(!r.passed, "{r:?}");
    }

    #[test]
    fn non_finite_probe_reports_coordinate() {
        let err = grad_check(
            |t, v| {
                let l = t.ln(v[0])?;
                t.sum(l)
            },
            &[Tensor::row_vector(&[1.0, 5e-6]).unwrap()],
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::GradCheckNonFinite { param: 0, coord: 1 }),
            "{err}"
        );
    }
}
