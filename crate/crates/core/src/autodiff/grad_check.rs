use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − central difference| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub input: usize,
    pub coordinate: usize,
}

/// Compares reverse-mode gradients of a scalar `f` at `x` with central
/// differences of step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant: every tensor in `xs` becomes a gradient leaf and
/// every coordinate of every input is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be positive, got {eps}")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = scalar_of(&g, out)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            input: 0,
            coordinate: 0,
            detail: format!("function value {base} at the unperturbed point"),
        });
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).expect("param leaves carry grads"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        coordinate: 0,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (input, x) in xs.iter().enumerate() {
        for coord in 0..x.numel() {
            let orig = x.data()[coord];
            work[input].data_mut()[coord] = orig + eps;
            let plus = eval(&work)?;
            work[input].data_mut()[coord] = orig - eps;
            let minus = eval(&work)?;
            work[input].data_mut()[coord] = orig;
            let a = analytic[input].data()[coord];
            if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite {
                    input,
                    coordinate: coord,
                    detail: format!("f(x+eps)={plus}, f(x-eps)={minus}, analytic={a}"),
                });
            }
            let fd = (plus - minus) / (2.0 * eps);
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    input,
                    coordinate: coord,
                };
            }
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
