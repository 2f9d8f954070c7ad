use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` at which the worst error occurred.
    pub worst: (usize, usize),
    /// `(analytic, numeric)` at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Samples left unscored because both gradients were below the
    /// resolution floor.
    pub skipped: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks `f` (scalar-valued) against central differences at every element
/// of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let samples: Vec<(usize, usize)> = (0..x.numel()).map(|j| (0, j)).collect();
    grad_check_params(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, &samples, None)
}

/// Checks `f` with respect to several input tensors at the given
/// `(input, element)` sample positions. `fault` corrupts one backward rule
/// in the analytic pass (negative control).
pub fn grad_check_params<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    samples: &[(usize, usize)],
    fault: Option<super::OpKind>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Usage(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |vals: &[Tensor], grad: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        tape.inject_fault(if grad { fault } else { None });
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = grad;
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(TensorError::Usage("grad_check needs a scalar-valued function".into()));
        }
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(tape);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), worst_values: (0.0, 0.0), checked: 0, skipped: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(ti, j) in samples {
        let orig = work[ti].data()[j];
        work[ti].data_mut()[j] = orig + eps;
        let (t, _, o) = eval(&work, false)?;
        let plus = t.value(o).item();
        work[ti].data_mut()[j] = orig - eps;
        let (t, _, o) = eval(&work, false)?;
        let minus = t.value(o).item();
        work[ti].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(TensorError::Numeric(format!("non-finite finite difference at input {ti}[{j}]")));
        }
        let err = relative_error(analytic[ti][j], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (ti, j);
            report.worst_values = (analytic[ti][j], numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}
