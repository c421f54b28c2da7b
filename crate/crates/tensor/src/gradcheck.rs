use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences at every element of every input. Returns the largest relative
/// error.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[k].data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Outcome of [`finite_diff_check_smooth`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothCheck {
    pub max_error: f64,
    pub checked: usize,
    /// Elements whose stencil flips a relu and so has no valid central difference.
    pub skipped: usize,
}

/// [`finite_diff_check`] restricted to elements where the function is smooth
/// over the whole stencil: probes that change any relu activation are skipped.
pub fn finite_diff_check_smooth<F>(f: F, inputs: &[Tensor<f64>]) -> Result<SmoothCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item(), g.relu_pattern()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.relu_pattern();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let mut report = SmoothCheck {
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[k].data_mut()[j] = orig + FD_STEP;
            let (up, up_pat) = eval(&probe)?;
            probe[k].data_mut()[j] = orig - FD_STEP;
            let (down, down_pat) = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            if up_pat != base || down_pat != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.checked += 1;
            report.max_error = report.max_error.max(relative_error(analytic[k].data()[j], numeric));
        }
    }
    Ok(report)
}
