use super::{AutodiffError, Tape, Tensor, Var};

/// Scale below which relative error degrades to absolute error.
const SCALE_FLOOR: f64 = 1e-4;

/// Per-coordinate comparison of analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Analytic gradients, all inputs flattened in order.
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|a - n| / max(|a|, |n|, 1e-4)` per coordinate.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F, E>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        step,
        tol,
    )
}

/// Checks the gradient of a scalar function with respect to every input.
///
/// `f` is evaluated once with gradients for the analytic pass and twice per
/// coordinate for the central differences `(f(x+h) - f(x-h)) / 2h`.
pub fn grad_check_many<F, E>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<f64>), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone(), with_grad))
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item()?;
        let mut grads = Vec::new();
        if with_grad {
            tape.backward(out)?;
            for &v in &vars {
                grads.extend_from_slice(tape.grad_tensor(v).data());
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }

    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(SCALE_FLOOR))
        .collect();
    let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tolerance: tol,
        passed: max_rel_error < tol,
    })
}
