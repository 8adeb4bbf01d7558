use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::DiffError;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compare tape gradients of a scalar graph against central differences.
///
/// `build` receives a fresh tape and one leaf per entry of `inputs`, and must
/// return a scalar. Relative error per input is
/// `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖, 1e-12)`.
pub fn gradient_check<F>(build: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if !(eps > 0.0) {
        return Err(DiffError::Config(format!("eps must be positive, got {eps}")));
    }
    let eval = |vals: &[Tensor]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = build(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(DiffError::NonFinite("loss".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let ad = grads.take_or_zeros(vars[k], input.rows(), input.cols());
        let mut diff_sq = 0.0;
        let mut fd_sq = 0.0;
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            diff_sq += (ad.data()[i] - fd).powi(2);
            fd_sq += fd * fd;
        }
        let denom = ad.norm_sq().sqrt().max(fd_sq.sqrt()).max(1e-12);
        per_input.push(diff_sq.sqrt() / denom);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        passed: max_rel_err < tol,
    })
}
